//! Second-order statistics of training latents, used by the denoiser's
//! linear skip path.
//!
//! For Gaussian data with mean `mu` and covariance `S`, the best noise
//! estimate from `z_t = a x_0 + s eps` is
//! `s (a^2 S + s^2 I)^-1 (z_t - a mu)`. The denoiser adds this term to
//! its learned output, so directions the UNet cannot see (the latent has
//! many more channels than the first feature map) are still handled
//! optimally for a Gaussian, and the network only models what is left.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::codec::LatentTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-position channel statistics: mean, eigenbasis (rows) and variance
/// along each basis vector. All values are f32-representable so a
/// checkpoint round trip is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPrior {
    mean: Vec<f64>,
    basis: Vec<f64>,
    variance: Vec<f64>,
}

pub const MEAN_ARRAY: &str = "prior.mean";
pub const BASIS_ARRAY: &str = "prior.basis";
pub const VARIANCE_ARRAY: &str = "prior.variance";

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

impl LatentPrior {
    /// Zero mean, unit variance in every direction. The skip term reduces
    /// to `s z_t`.
    pub fn standard(channels: usize) -> Self {
        let mut basis = vec![0.0; channels * channels];
        for i in 0..channels {
            basis[i * channels + i] = 1.0;
        }
        Self { mean: vec![0.0; channels], basis, variance: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Row `k` is the `k`-th basis vector.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Per-direction gains `s / (a^2 v_k + s^2)`.
    pub fn gains(&self, signal: f64, noise: f64) -> Vec<f64> {
        self.variance.iter().map(|v| noise / (signal * signal * v + noise * noise)).collect()
    }

    pub fn to_arrays(&self) -> [(&'static str, Tensor<f32>); 3] {
        let c = self.channels();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        [
            (MEAN_ARRAY, Tensor::from_vec([c, 1, 1, 1], f(&self.mean)).unwrap()),
            (BASIS_ARRAY, Tensor::from_vec([c, c, 1, 1], f(&self.basis)).unwrap()),
            (VARIANCE_ARRAY, Tensor::from_vec([c, 1, 1, 1], f(&self.variance)).unwrap()),
        ]
    }

    pub fn from_arrays(mean: &Tensor<f32>, basis: &Tensor<f32>, variance: &Tensor<f32>) -> Result<Self> {
        let c = mean.len();
        if basis.len() != c * c || variance.len() != c {
            return Err(Error::Checkpoint(format!(
                "prior arrays disagree: mean {c}, basis {}, variance {}",
                basis.len(),
                variance.len()
            )));
        }
        let f = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(Self { mean: f(mean), basis: f(basis), variance: f(variance) })
    }
}

/// Streaming accumulator of channel sums and cross products over every
/// spatial position of a set of latents.
#[derive(Clone, Debug)]
pub struct PriorAccumulator {
    channels: usize,
    count: usize,
    sum: Vec<f64>,
    cross: Vec<f64>,
}

impl PriorAccumulator {
    pub fn new(channels: usize) -> Self {
        Self { channels, count: 0, sum: vec![0.0; channels], cross: vec![0.0; channels * channels] }
    }

    pub fn add(&mut self, z: &LatentTensor) -> Result<()> {
        let [b, c, h, w] = z.shape();
        if c != self.channels {
            return Err(Error::Shape(format!("latent has {c} channels, prior has {}", self.channels)));
        }
        let hw = h * w;
        let data = z.tensor().data();
        for item in data.chunks(c * hw).take(b) {
            for (ci, plane) in item.chunks(hw).enumerate() {
                self.sum[ci] += plane.iter().sum::<f64>();
            }
            // item is [C, HW]; cross += item * item^T
            unsafe {
                matrixmultiply::dgemm(
                    c,
                    hw,
                    c,
                    1.0,
                    item.as_ptr(),
                    hw as isize,
                    1,
                    item.as_ptr(),
                    1,
                    hw as isize,
                    1.0,
                    self.cross.as_mut_ptr(),
                    c as isize,
                    1,
                );
            }
            self.count += hw;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<LatentPrior> {
        let c = self.channels;
        if self.count < 2 {
            return Err(Error::Invalid("prior needs at least two latent positions".into()));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let cov = DMatrix::from_fn(c, c, |i, j| self.cross[i * c + j] / n - mean[i] * mean[j]);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(c * c);
        let mut variance = Vec::with_capacity(c);
        for &k in &order {
            let v = eig.eigenvectors.column(k);
            // Fix the sign so the largest component is positive.
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if big < 0.0 { -1.0 } else { 1.0 };
            basis.extend(v.iter().map(|x| round32(sign * x)));
            variance.push(round32(eig.eigenvalues[k].max(0.0)));
        }
        Ok(LatentPrior { mean: mean.into_iter().map(round32).collect(), basis, variance })
    }
}
