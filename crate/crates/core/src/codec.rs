//! Image <-> latent mapping.
//!
//! The default codec is a fixed space-to-depth rearrangement with factor 8
//! followed by an affine normalization `z = (x - center) * scale`. The scale
//! is a power of two and the center lies on a `2^-12` grid, and latents are
//! held in double precision, so the round trip reproduces every pixel value
//! that is zero or at least `2^-30` bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch of RGB images, `[B, 3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
}

/// Batch of latents, `[B, C_lat, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    data: Tensor<f64>,
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let [_, c, h, w] = data.shape();
        if c != 3 {
            return Err(Error::Shape(format!("images need 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a multiple of 8")));
        }
        if !data.all_finite() {
            return Err(Error::Invalid("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Copy of item `i` as a `[1, 3, H, W]` batch.
    pub fn item(&self, i: usize) -> ImageTensor {
        ImageTensor { data: self.data.select_axis0(&[i]) }
    }

    pub fn stack(items: &[&ImageTensor]) -> Result<Self> {
        let parts: Vec<&Tensor<f32>> = items.iter().map(|i| &i.data).collect();
        Self::new(Tensor::concat0(&parts)?)
    }

    /// Values clamped to `[0, 1]` and quantized to 8 bits, row-major RGB.
    pub fn to_rgb8(&self, i: usize) -> Vec<u8> {
        let [_, _, h, w] = self.data.shape();
        let plane = h * w;
        let d = &self.data.data()[i * 3 * plane..(i + 1) * 3 * plane];
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(pixels: &[u8], h: usize, w: usize) -> Result<Self> {
        if pixels.len() != 3 * h * w {
            return Err(Error::Shape(format!("{} bytes for a {h}x{w} RGB image", pixels.len())));
        }
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = pixels[p * 3 + c] as f32 / 255.0;
            }
        }
        Self::new(Tensor::from_vec([1, 3, h, w], data)?)
    }
}

impl LatentTensor {
    pub fn new(data: Tensor<f64>) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::Invalid("latent contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Skips the finiteness scan; used on hot paths that produce latents from
    /// finite arithmetic.
    pub(crate) fn from_tensor(data: Tensor<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { data: Tensor::zeros(shape) }
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f64> {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        self.data.shape()
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    SpaceToDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub factor: usize,
    /// Multiplier applied after centering. A power of two.
    pub scale: f64,
    /// Latent value of a black pixel, `-center * scale`.
    pub offset: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl CodecConfig {
    /// No normalization: the latent is the raw rearrangement.
    pub fn identity() -> Self {
        Self { mode: CodecMode::SpaceToDepth, factor: 8, scale: 1.0, offset: 0.0 }
    }

    /// Fits the normalization to pixel statistics of a corpus of images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Self> {
        let (mut n, mut s, mut s2) = (0f64, 0f64, 0f64);
        for img in images {
            for &v in img.tensor().data() {
                let v = v as f64;
                n += 1.0;
                s += v;
                s2 += v * v;
            }
        }
        if n == 0.0 {
            return Err(Error::Invalid("cannot fit codec on an empty corpus".into()));
        }
        let mean = s / n;
        let std = (s2 / n - mean * mean).max(1e-12).sqrt();
        Ok(Self::from_stats(mean, std))
    }

    /// Rounds `mean`/`std` onto the exactly invertible grid.
    pub fn from_stats(mean: f64, std: f64) -> Self {
        let center = (mean * 4096.0).round() / 4096.0;
        let scale = 2f64.powi((1.0 / std).log2().round() as i32);
        Self { mode: CodecMode::SpaceToDepth, factor: 8, scale, offset: -center * scale }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn center(&self) -> f64 {
        -self.offset / self.scale
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Stateless codec; cheap to copy around.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    config: CodecConfig,
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        if config.factor == 0 || !(config.scale.is_finite() && config.scale > 0.0) || !config.offset.is_finite() {
            return Err(Error::Invalid(format!("bad codec config {config:?}")));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let [b, c, h, w] = image.tensor().shape();
        let r = self.config.factor;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a multiple of {r}")));
        }
        let (ho, wo) = (h / r, w / r);
        let cl = c * r * r;
        let center = self.config.center();
        let scale = self.config.scale;
        let src = image.tensor().data();
        let mut out = vec![0f64; b * cl * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oc = ci * r * r + i * r + j;
                        let dst = (bi * cl + oc) * ho * wo;
                        let s = (bi * c + ci) * h * w;
                        for y in 0..ho {
                            for x in 0..wo {
                                let v = src[s + (y * r + i) * w + x * r + j] as f64;
                                out[dst + y * wo + x] = (v - center) * scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(LatentTensor::from_tensor(Tensor::from_vec([b, cl, ho, wo], out)?))
    }

    /// Exact inverse of [`encode`](Self::encode). Values are not clamped.
    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        let [b, cl, ho, wo] = latent.shape();
        let r = self.config.factor;
        if cl != self.config.latent_channels() {
            return Err(Error::Shape(format!(
                "latent has {cl} channels, codec expects {}",
                self.config.latent_channels()
            )));
        }
        let (h, w) = (ho * r, wo * r);
        let center = self.config.center();
        let scale = self.config.scale;
        let src = latent.tensor().data();
        let mut out = vec![0f32; b * 3 * h * w];
        for bi in 0..b {
            for ci in 0..3 {
                for i in 0..r {
                    for j in 0..r {
                        let ic = ci * r * r + i * r + j;
                        let s = (bi * cl + ic) * ho * wo;
                        let dst = (bi * 3 + ci) * h * w;
                        for y in 0..ho {
                            for x in 0..wo {
                                out[dst + (y * r + i) * w + x * r + j] = (src[s + y * wo + x] / scale + center) as f32;
                            }
                        }
                    }
                }
            }
        }
        ImageTensor::new(Tensor::from_vec([b, 3, h, w], out)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> ImageTensor {
        let data = (0..b * 3 * h * w).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(Tensor::from_vec([b, 3, h, w], data).unwrap()).unwrap()
    }

    fn fitted() -> LatentCodec {
        LatentCodec::new(CodecConfig::from_stats(0.47, 0.31)).unwrap()
    }

    #[test]
    fn encode_shape() {
        let img = ImageTensor::new(Tensor::zeros([1, 3, 128, 128])).unwrap();
        let z = fitted().encode(&img).unwrap();
        assert_eq!(z.shape(), [1, 192, 16, 16]);
    }

    #[test]
    fn zero_image_maps_to_offset() {
        let codec = fitted();
        let img = ImageTensor::new(Tensor::zeros([1, 3, 16, 16])).unwrap();
        let z = codec.encode(&img).unwrap();
        assert!(z.tensor().data().iter().all(|&v| v == codec.config().offset));
        let back = codec.decode(&LatentTensor::zeros([1, 192, 2, 2])).unwrap();
        let want = (-codec.config().offset / codec.config().scale) as f32;
        assert!(back.tensor().data().iter().all(|&v| v == want));
    }

    #[test]
    fn rejects_bad_sizes() {
        let img = Tensor::<f32>::zeros([1, 3, 12, 16]);
        assert!(ImageTensor::new(img).is_err());
        let z = LatentTensor::zeros([1, 48, 2, 2]);
        assert!(fitted().decode(&z).is_err());
    }

    #[test]
    fn roundtrip_is_bitwise_against_loop_oracle() {
        let codec = fitted();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..256 {
            let img = random_image(&mut rng, 1, 16, 24);
            let z = codec.encode(&img).unwrap();
            // direct per-pixel oracle for the rearrangement
            let d = img.tensor().data();
            let zd = z.tensor().data();
            let center = -codec.config().offset / codec.config().scale;
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..24 {
                        let lc = c * 64 + (y % 8) * 8 + x % 8;
                        let want = (d[(c * 16 + y) * 24 + x] as f64 - center) * codec.config().scale;
                        assert_eq!(zd[(lc * 2 + y / 8) * 3 + x / 8], want);
                    }
                }
            }
            assert_eq!(codec.decode(&z).unwrap(), img);
        }
    }

    #[test]
    fn linear_without_normalization() {
        let codec = LatentCodec::new(CodecConfig::identity()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(&mut rng, 2, 8, 8);
        let y = random_image(&mut rng, 2, 8, 8);
        let (a, b) = (0.25f32, 0.5f32);
        let mix = ImageTensor::new(x.tensor().zip_map(y.tensor(), |p, q| a * p + b * q).unwrap()).unwrap();
        let zm = codec.encode(&mix).unwrap();
        let zx = codec.encode(&x).unwrap();
        let zy = codec.encode(&y).unwrap();
        let combo = zx.tensor().zip_map(zy.tensor(), |p, q| a as f64 * p + b as f64 * q).unwrap();
        assert!(zm.tensor().max_abs_diff(&combo) < 1e-6);
    }

    proptest! {
        #[test]
        fn decode_encode_identity(seed in any::<u64>(), mean in 0.2f64..0.8, std in 0.05f64..0.5) {
            let codec = LatentCodec::new(CodecConfig::from_stats(mean, std)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 1, 8, 16);
            prop_assert_eq!(codec.decode(&codec.encode(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn encode_decode_identity_on_latent_grid(seed in any::<u64>()) {
            let codec = fitted();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // latents that decode to 8-bit pixel values
            let img = ImageTensor::from_rgb8(&(0..3 * 64).map(|_| rng.random::<u8>()).collect::<Vec<_>>(), 8, 8).unwrap();
            let z = codec.encode(&img).unwrap();
            prop_assert_eq!(codec.encode(&codec.decode(&z).unwrap()).unwrap(), z);
        }
    }
}
