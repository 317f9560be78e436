//! Condition-map extractors.

use super::render::RenderedScene;
use super::scene::SceneSpec;
use crate::adapter::{ConditionKind, ConditionMap};
use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized edge magnitude at or above this value becomes a sketch stroke.
pub const SKETCH_THRESHOLD: f32 = 0.5;

/// Palette block size in pixels.
pub const PALETTE_FACTOR: usize = 64;

/// Segmentation colors. Class 0 is background; primitive `k` of a scene with
/// shape index `s` gets class `1 + 3k + s`. Classes 10..15 are unused.
pub const SEG_COLORS: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

pub fn seg_class(slot: usize, shape_index: usize) -> usize {
    1 + 3 * slot + shape_index
}

/// Sobel gradient magnitude over the RGB channels with replicated borders,
/// divided by its maximum and thresholded.
pub fn make_sketch(image: &ImageTensor) -> ConditionMap {
    let [b, _, h, w] = image.tensor().shape();
    let plane = h * w;
    let mut out = vec![0f32; b * plane];
    let mut mag = vec![0f32; plane];
    for bi in 0..b {
        let img = &image.tensor().data()[bi * 3 * plane..(bi + 1) * 3 * plane];
        mag.fill(0.0);
        for c in 0..3 {
            let ch = &img[c * plane..(c + 1) * plane];
            let px = |y: isize, x: isize| {
                let y = y.clamp(0, h as isize - 1) as usize;
                let x = x.clamp(0, w as isize - 1) as usize;
                ch[y * w + x]
            };
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                        - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
                    let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                        - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
                    mag[y as usize * w + x as usize] += gx * gx + gy * gy;
                }
            }
        }
        let max = mag.iter().fold(0f32, |m, &v| m.max(v)).sqrt();
        if max > 0.0 {
            for (o, &m) in out[bi * plane..(bi + 1) * plane].iter_mut().zip(&mag) {
                *o = if m.sqrt() / max >= SKETCH_THRESHOLD { 1.0 } else { 0.0 };
            }
        }
    }
    ConditionMap::new(ConditionKind::Sketch, Tensor::from_vec([b, 1, h, w], out).unwrap()).unwrap()
}

/// Catmull-Rom cubic, `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized 1-D weights for output cell `o`. The kernel is stretched by
/// `factor / 4` so its four lobes span one block; taps past the image edge
/// are clamped to the border pixel.
fn palette_weights(o: usize, factor: usize, len: usize) -> Vec<(usize, f64)> {
    let stretch = factor as f64 / 4.0;
    let center = (o as f64 + 0.5) * factor as f64;
    let lo = (center - 2.0 * stretch).floor() as isize;
    let hi = (center + 2.0 * stretch).ceil() as isize;
    let mut taps: Vec<(usize, f64)> = (lo..hi)
        .map(|x| {
            let wgt = cubic_kernel((x as f64 + 0.5 - center) / stretch);
            (x.clamp(0, len as isize - 1) as usize, wgt)
        })
        .filter(|&(_, wgt)| wgt != 0.0)
        .collect();
    let sum: f64 = taps.iter().map(|t| t.1).sum();
    taps.iter_mut().for_each(|t| t.1 /= sum);
    taps
}

/// Bicubic downsample by 64 followed by nearest upsample back to full size.
/// The result is constant on every 64×64 block.
pub fn make_color_palette(image: &ImageTensor) -> Result<ConditionMap> {
    let [b, c, h, w] = image.tensor().shape();
    let f = PALETTE_FACTOR;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("palette needs sizes divisible by {f}, got {h}x{w}")));
    }
    let (bh, bw) = (h / f, w / f);
    let wy: Vec<_> = (0..bh).map(|o| palette_weights(o, f, h)).collect();
    let wx: Vec<_> = (0..bw).map(|o| palette_weights(o, f, w)).collect();
    let src = image.tensor().data();
    let mut out = vec![0f32; b * c * h * w];
    for plane_idx in 0..b * c {
        let p = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
        let o = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for by in 0..bh {
            for bx in 0..bw {
                let mut acc = 0f64;
                for &(y, wyv) in &wy[by] {
                    let mut row = 0f64;
                    for &(x, wxv) in &wx[bx] {
                        row += wxv * p[y * w + x] as f64;
                    }
                    acc += wyv * row;
                }
                let v = (acc as f32).clamp(0.0, 1.0);
                for y in by * f..(by + 1) * f {
                    o[y * w + bx * f..y * w + (bx + 1) * f].fill(v);
                }
            }
        }
    }
    ConditionMap::new(ConditionKind::Color, Tensor::from_vec([b, c, h, w], out)?)
}

/// Color-coded class map from the visible labels.
pub fn make_segmentation(spec: &SceneSpec, scene: &RenderedScene) -> Result<ConditionMap> {
    check_scene(spec, scene)?;
    let plane = scene.labels.len();
    let mut out = vec![0f32; 3 * plane];
    for (i, &l) in scene.labels.iter().enumerate() {
        let class = match l {
            0 => 0,
            k => seg_class(k as usize - 1, spec.primitives[k as usize - 1].shape.index()),
        };
        for c in 0..3 {
            out[c * plane + i] = SEG_COLORS[class][c] as f32 / 255.0;
        }
    }
    ConditionMap::new(ConditionKind::Segmentation, Tensor::from_vec([1, 3, scene.resolution, scene.resolution], out)?)
}

/// Depth proxy: primitive `k` of `n` (drawn `k`-th, so nearer when later)
/// gets `(k + 1) / n`; background is 0.
pub fn make_depth(spec: &SceneSpec, scene: &RenderedScene) -> Result<ConditionMap> {
    check_scene(spec, scene)?;
    let n = spec.primitives.len().max(1) as f32;
    let out = scene.labels.iter().map(|&l| l as f32 / n).collect();
    ConditionMap::new(ConditionKind::Depth, Tensor::from_vec([1, 1, scene.resolution, scene.resolution], out)?)
}

fn check_scene(spec: &SceneSpec, scene: &RenderedScene) -> Result<()> {
    if scene.coverage.len() != spec.primitives.len() {
        return Err(Error::Invalid(format!(
            "scene has {} masks for {} primitives",
            scene.coverage.len(),
            spec.primitives.len()
        )));
    }
    Ok(())
}
