//! Noise schedule, forward process, noise-prediction loss and the DDIM
//! sampler with per-step guidance gating.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{compose, Adapter, ConditionMap};
use crate::codec::LatentTensor;
use crate::denoiser::{Denoiser, GuidancePyramid, InjectionMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

/// Per-step `beta` and cumulative `alpha_bar`, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).unwrap()
    }
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_1` to `beta_T`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let beta = (0..steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Invalid(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]), "alpha_bar must decrease strictly");
        Ok(Self { beta, alpha_bar })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1` for the clean endpoint.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Hash of the beta sequence, stored in checkpoints.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.beta.iter().flat_map(|b| b.to_le_bytes()).collect();
        crate::checkpoint::sha256_hex(&bytes)
    }

    /// Evenly spaced descending subsequence of `n` steps ending at `T`:
    /// `T, T - T/n, ..., T/n`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps() {
            return Err(Error::Invalid(format!("ddim_steps {n} outside 1..={}", self.steps())));
        }
        Ok((1..=n).rev().map(|k| k * self.steps() / n).collect())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(schedule: &NoiseSchedule, z0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    LatentTensor::new(z0.tensor().zip_map(eps.tensor(), |z, e| a * z + s * e)?)
}

/// Per-item version of [`forward_diffuse`], one step per batch item.
pub fn forward_diffuse_batch(
    schedule: &NoiseSchedule,
    z0: &LatentTensor,
    steps: &[usize],
    eps: &LatentTensor,
) -> Result<LatentTensor> {
    z0.tensor().check_same(eps.tensor())?;
    let [b, c, h, w] = z0.shape();
    if steps.len() != b {
        return Err(Error::Shape(format!("{} steps for batch {b}", steps.len())));
    }
    let per = c * h * w;
    let mut out = z0.tensor().clone();
    for (i, &t) in steps.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let o = &mut out.data_mut()[i * per..(i + 1) * per];
        for (o, e) in o.iter_mut().zip(&eps.tensor().data()[i * per..(i + 1) * per]) {
            *o = a * *o + s * e;
        }
    }
    LatentTensor::new(out)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps_pred: &LatentTensor, eps: &LatentTensor) -> Result<f64> {
    eps_pred.tensor().check_same(eps.tensor())?;
    let n = eps.tensor().len() as f64;
    let sse: f64 = eps_pred.tensor().data().iter().zip(eps.tensor().data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / n)
}

/// Deterministic DDIM update from `t_from` to `t_to < t_from`; `t_to = 0`
/// lands on the clean estimate.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t_from: usize,
    t_to: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    ddim_step_eta(z_t, eps_pred, t_from, t_to, schedule, 0.0, None)
}

/// DDIM update with stochasticity `eta`. `noise` is required when `eta > 0`.
pub fn ddim_step_eta(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t_from: usize,
    t_to: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    schedule.check_t(t_from)?;
    if t_to >= t_from {
        return Err(Error::Invalid(format!("DDIM step must go down in t, got {t_from} -> {t_to}")));
    }
    z_t.tensor().check_same(eps_pred.tensor())?;
    let (ab_f, ab_t) = (schedule.alpha_bar(t_from), schedule.alpha_bar(t_to));
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_t) / (1.0 - ab_f)).sqrt() * (1.0 - ab_f / ab_t).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_t - sigma * sigma).max(0.0).sqrt();
    let (sf, nf, st) = (ab_f.sqrt(), (1.0 - ab_f).sqrt(), ab_t.sqrt());
    let mut out = z_t.tensor().zip_map(eps_pred.tensor(), |z, e| {
        let x0 = (z - nf * e) / sf;
        st * x0 + dir * e
    })?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Invalid("eta > 0 requires a noise sample".into()))?;
        out.axpy(sigma, noise.tensor());
    }
    LatentTensor::new(out)
}

/// Which DDIM steps receive guidance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GateSpec {
    All,
    None,
    Stage(Stage),
    Mask(Vec<bool>),
}

/// One third of the DDIM step sequence, by step index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Begin,
    Middle,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Begin, Stage::Middle, Stage::Late];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Begin => "begin",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

impl GateSpec {
    /// Expands to one flag per DDIM step. Step `i` of `n` belongs to third
    /// `floor(3i / n)`.
    pub fn mask(&self, n: usize) -> Result<Vec<bool>> {
        Ok(match self {
            GateSpec::All => vec![true; n],
            GateSpec::None => vec![false; n],
            GateSpec::Stage(s) => (0..n).map(|i| 3 * i / n == s.index()).collect(),
            GateSpec::Mask(m) => {
                if m.len() != n {
                    return Err(Error::Invalid(format!("gate mask has {} entries for {n} steps", m.len())));
                }
                m.clone()
            }
        })
    }
}

impl FromStr for GateSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => return Ok(GateSpec::All),
            "none" => return Ok(GateSpec::None),
            _ => {}
        }
        if let Some(stage) = s.strip_prefix("stage:") {
            let st = Stage::ALL
                .into_iter()
                .find(|st| st.name() == stage)
                .ok_or_else(|| Error::Invalid(format!("unknown stage {stage:?} (begin, middle, late)")))?;
            return Ok(GateSpec::Stage(st));
        }
        if !s.is_empty() && s.bytes().all(|c| c == b'0' || c == b'1') {
            return Ok(GateSpec::Mask(s.bytes().map(|c| c == b'1').collect()));
        }
        Err(Error::Invalid(format!(
            "bad gate {s:?}: expected all, none, stage:begin|middle|late or a 0/1 string"
        )))
    }
}

impl fmt::Display for GateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateSpec::All => f.write_str("all"),
            GateSpec::None => f.write_str("none"),
            GateSpec::Stage(s) => write!(f, "stage:{}", s.name()),
            GateSpec::Mask(m) => m.iter().try_for_each(|&b| f.write_str(if b { "1" } else { "0" })),
        }
    }
}

impl Serialize for GateSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GateSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub gate: GateSpec,
    /// Latent spatial size (image size / 8).
    pub latent_size: usize,
    pub injection: InjectionMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ddim_steps: 50, eta: 0.0, gate: GateSpec::All, latent_size: 16, injection: InjectionMode::default() }
    }
}

impl SamplerConfig {
    pub fn with_gate(mut self, gate: GateSpec) -> Self {
        self.gate = gate;
        self
    }
}

/// One adapter, its condition batch and its composition weight.
#[derive(Clone, Copy)]
pub struct AdapterInput<'a> {
    pub adapter: &'a Adapter<f32>,
    pub condition: &'a ConditionMap,
    pub weight: f32,
}

/// Guidance for [`sample`]: either a finished pyramid or adapters that are
/// evaluated lazily, at most once per call.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    Pyramid(&'a GuidancePyramid),
    Adapters(&'a [AdapterInput<'a>]),
}

impl Guidance<'_> {
    fn resolve(&self) -> Result<GuidancePyramid> {
        match self {
            Guidance::Pyramid(p) => Ok((*p).clone()),
            Guidance::Adapters(inputs) => {
                let pyramids = inputs
                    .iter()
                    .map(|a| a.adapter.guidance(a.condition))
                    .collect::<Result<Vec<_>>>()?;
                let weights: Vec<f32> = inputs.iter().map(|a| a.weight).collect();
                compose(&pyramids.iter().collect::<Vec<_>>(), &weights)
            }
        }
    }
}

/// Starting noise for `batch` items. Item `i` draws from stream `i` of a
/// generator seeded with `seed`, so it does not depend on the batch size.
pub fn initial_noise(seed: u64, batch: usize, channels: usize, size: usize) -> LatentTensor {
    initial_noise_from(seed, 0, batch, channels, size)
}

/// Noise for items `first..first + batch`.
pub fn initial_noise_from(seed: u64, first: usize, batch: usize, channels: usize, size: usize) -> LatentTensor {
    let per = channels * size * size;
    let mut data = Vec::with_capacity(batch * per);
    for i in first..first + batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        data.extend((0..per).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    LatentTensor::new(Tensor::from_vec([batch, channels, size, size], data).unwrap()).unwrap()
}

/// DDIM sampling from Gaussian noise. Steps whose gate is off call the
/// denoiser without guidance; the pyramid is built on the first gated step
/// and reused for the rest of the trajectory.
pub fn sample(
    denoiser: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    tokens: &[TokenSequence],
    guidance: Option<Guidance<'_>>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<LatentTensor> {
    sample_from(denoiser, schedule, tokens, guidance, cfg, seed, 0)
}

/// [`sample`] for items `first..first + tokens.len()` of a larger batch. With
/// `eta = 0` the result equals the matching rows of the full-batch call.
pub fn sample_from(
    denoiser: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    tokens: &[TokenSequence],
    guidance: Option<Guidance<'_>>,
    cfg: &SamplerConfig,
    seed: u64,
    first: usize,
) -> Result<LatentTensor> {
    let steps = schedule.ddim_timesteps(cfg.ddim_steps)?;
    let gate = cfg.gate.mask(cfg.ddim_steps)?;
    let b = tokens.len();
    let c = denoiser.config().latent_channels;
    let mut z = initial_noise_from(seed, first, b, c, cfg.latent_size);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pyramid: Option<GuidancePyramid> = None;
    for (i, &t) in steps.iter().enumerate() {
        let g = match (&guidance, gate[i]) {
            (Some(src), true) => {
                if pyramid.is_none() {
                    let p = src.resolve()?;
                    if p.batch() != b {
                        return Err(Error::Shape(format!("guidance batch {} for {b} samples", p.batch())));
                    }
                    pyramid = Some(p);
                }
                pyramid.as_ref()
            }
            _ => None,
        };
        let eps = denoiser.denoise_with_mode(schedule, &z, &vec![t; b], tokens, g, cfg.injection)?;
        let t_to = steps.get(i + 1).copied().unwrap_or(0);
        z = if cfg.eta > 0.0 {
            let shape = z.shape();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| -> f64 { StandardNormal.sample(&mut noise_rng) }).collect();
            let noise = LatentTensor::new(Tensor::from_vec(shape, data)?)?;
            ddim_step_eta(&z, &eps, t, t_to, schedule, cfg.eta, Some(&noise))?
        } else {
            ddim_step(&z, &eps, t, t_to, schedule)?
        };
    }
    Ok(z)
}
