//! Anti-aliased rasterization of scenes.

use super::scene::{Primitive, SceneSpec, ShapeKind};
use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Subsamples per pixel axis used for coverage.
const SUPERSAMPLE: usize = 4;

/// A rendered scene with its ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub image: ImageTensor,
    /// Per primitive, fraction of each pixel the shape covers, row-major.
    pub coverage: Vec<Vec<f32>>,
    /// Visible primitive per pixel: 0 for background, `k + 1` for primitive
    /// `k` (the topmost primitive covering at least half the pixel).
    pub labels: Vec<u8>,
    pub resolution: usize,
}

impl RenderedScene {
    /// Mask of pixels where primitive `k` is the visible label.
    pub fn visible_mask(&self, k: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == k + 1).collect()
    }
}

fn inside(shape: ShapeKind, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        // Apex at the top, base along y = cy + r.
        ShapeKind::Triangle => dy <= r && 2.0 * dx.abs() <= dy + r,
    }
}

fn coverage(p: &Primitive, res: usize) -> Vec<f32> {
    let (cx, cy, r) = p.geometry(res);
    let mut out = vec![0f32; res * res];
    let lo = |c: f64| ((c - r - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + r + 1.0).ceil().max(0.0) as usize).min(res);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in lo(cy)..hi(cy) {
        for px in lo(cx)..hi(cx) {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += inside(p.shape, x, y, cx, cy, r) as u32;
                }
            }
            out[py * res + px] = hits as f32 / n;
        }
    }
    out
}

/// Draws primitives back to front with coverage blending.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Result<RenderedScene> {
    spec.validate()?;
    if resolution == 0 || resolution % 64 != 0 {
        return Err(Error::Invalid(format!("resolution {resolution} is not a positive multiple of 64")));
    }
    let plane = resolution * resolution;
    let bg = spec.background.rgb();
    let mut data = vec![0f32; 3 * plane];
    for c in 0..3 {
        data[c * plane..(c + 1) * plane].fill(bg[c]);
    }
    let mut labels = vec![0u8; plane];
    let mut covs = Vec::with_capacity(spec.primitives.len());
    for (k, p) in spec.primitives.iter().enumerate() {
        let cov = coverage(p, resolution);
        let col = p.color.rgb();
        for (i, &a) in cov.iter().enumerate() {
            if a > 0.0 {
                for c in 0..3 {
                    let v = &mut data[c * plane + i];
                    *v = *v * (1.0 - a) + col[c] * a;
                }
                if a >= 0.5 {
                    labels[i] = k as u8 + 1;
                }
            }
        }
        covs.push(cov);
    }
    let image = ImageTensor::new(Tensor::from_vec([1, 3, resolution, resolution], data)?)?;
    Ok(RenderedScene { image, coverage: covs, labels, resolution })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::scene::{Background, Cell, ObjectColor, SizeClass};

    #[test]
    fn empty_scene_is_background() {
        let s = SceneSpec::new(vec![], Background::Navy).unwrap();
        let r = render_scene(&s, 128).unwrap();
        let bg = Background::Navy.rgb();
        let plane = 128 * 128;
        for c in 0..3 {
            assert!(r.image.tensor().data()[c * plane..(c + 1) * plane].iter().all(|&v| v == bg[c]));
        }
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn red_circle_centroid() {
        let s = SceneSpec::new(
            vec![Primitive::new(ShapeKind::Circle, ObjectColor::Red, SizeClass::Large, Cell::Center)],
            Background::White,
        )
        .unwrap();
        let r = render_scene(&s, 128).unwrap();
        let plane = 128 * 128;
        let d = r.image.tensor().data();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..128 {
            for x in 0..128 {
                let i = y * 128 + x;
                // Red pixels: green channel well below the white background.
                if d[plane + i] < 0.5 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 1000.0);
        assert!((sx / n - 64.0).abs() <= 1.0 && (sy / n - 64.0).abs() <= 1.0);
    }

    #[test]
    fn deterministic() {
        let s = SceneSpec::new(
            vec![
                Primitive::new(ShapeKind::Triangle, ObjectColor::Blue, SizeClass::Medium, Cell::Top),
                Primitive::new(ShapeKind::Square, ObjectColor::Orange, SizeClass::Small, Cell::Left),
            ],
            Background::Mint,
        )
        .unwrap();
        assert_eq!(render_scene(&s, 128).unwrap(), render_scene(&s, 128).unwrap());
        assert!(render_scene(&s, 100).is_err());
    }
}
