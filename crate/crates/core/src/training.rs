//! Base-model and adapter training loops.
//!
//! The base denoiser minimizes the noise-prediction loss with uniformly
//! drawn steps. Adapter training keeps the base frozen: its parameters go on
//! the tape as constants, only adapter arrays reach the optimizer, and a
//! named-array diff against a snapshot taken before training must be empty.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterSpec};
use crate::checkpoint::{diff_arrays, write_atomic};
use crate::codec::LatentCodec;
use crate::conditions::Dataset;
use crate::prior::{LatentPrior, PriorAccumulator};
use crate::denoiser::{Denoiser, DenoiserConfig, Injection, InjectionMode, StepInput};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::text;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    Uniform,
    Cubic,
}

impl std::str::FromStr for TimestepSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "cubic" => Ok(Self::Cubic),
            _ => Err(Error::Invalid(format!("unknown sampling mode '{s}' (uniform, cubic)"))),
        }
    }
}

/// Per-item weight of the noise-prediction error during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain mean squared noise error.
    Noise,
    /// Noise error divided by `alpha_bar_t`. This is the squared error of the
    /// velocity `sqrt(alpha_bar) eps - sqrt(1 - alpha_bar) z_0` and keeps
    /// high-noise steps, where the layout is decided, from vanishing.
    Velocity,
}

impl LossWeighting {
    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Velocity => "velocity",
        }
    }
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "velocity" => Ok(Self::Velocity),
            _ => Err(Error::Invalid(format!("unknown loss weighting '{s}' (noise, velocity)"))),
        }
    }
}

/// `(1 - (u/T)^3) T`, rounded to the nearest step and clamped to `[1, T]`.
pub fn sample_timestep_cubic(u: f64, t_max: usize) -> usize {
    let t = t_max as f64;
    let s = u / t;
    ((1.0 - s * s * s) * t).round().clamp(1.0, t) as usize
}

/// Draws a training step in `1..=T`.
pub fn draw_timestep(rng: &mut impl Rng, mode: TimestepSampling, t_max: usize) -> usize {
    match mode {
        TimestepSampling::Uniform => rng.random_range(1..=t_max),
        TimestepSampling::Cubic => sample_timestep_cubic(rng.random_range(0.0..=t_max as f64), t_max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub sampling: TimestepSampling,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weighting: LossWeighting,
    /// Print the running loss every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps: None,
            batch_size: 8,
            learning_rate: 1e-5,
            sampling: TimestepSampling::Cubic,
            seed: 0,
            adam: AdamConfig::default(),
            weighting: LossWeighting::Noise,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for base-model training: uniform steps, velocity weighting,
    /// learning rate 3e-4.
    pub fn base() -> Self {
        Self {
            learning_rate: 3e-4,
            sampling: TimestepSampling::Uniform,
            weighting: LossWeighting::Velocity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Invalid("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.steps.unwrap_or(self.epochs * examples.div_ceil(self.batch_size))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    cfg: AdamConfig,
    step: i32,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f32, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th array of `params`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Loss per logged step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    fn push(&mut self, step: usize, loss: f64) {
        self.steps.push(step);
        self.losses.push(loss);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (st, l) in self.steps.iter().zip(&self.losses) {
            s.push_str(&format!("{st},{l}\n"));
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

/// One training batch in tape layout.
struct Batch {
    z0: Tensor<f32>,
    tokens: Vec<usize>,
}

fn load_batch(dataset: &Dataset, codec: &LatentCodec, idx: &[usize]) -> Result<Batch> {
    let latents = codec.encode(&dataset.images(idx)?)?;
    Ok(Batch { z0: latents.tensor().cast::<f32>().swap01(), tokens: text::flatten(&dataset.tokens(idx)?) })
}

/// Noised latents and the noise, `[C, B, h, w]`.
fn noised(z0: &Tensor<f32>, steps: &[usize], schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let [c, b, h, w] = z0.shape();
    let eps: Vec<f32> = (0..z0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec([c, b, h, w], eps).unwrap();
    let coef: Vec<(f32, f32)> = steps
        .iter()
        .map(|&t| {
            let ab = schedule.alpha_bar(t);
            (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
        })
        .collect();
    let mut zt = z0.clone();
    let hw = h * w;
    for (i, (z, e)) in zt.data_mut().iter_mut().zip(eps.data()).enumerate() {
        let (a, s) = coef[(i / hw) % b];
        *z = a * *z + s * e;
    }
    (zt, eps)
}

/// Epoch-shuffled batches of indices, reshuffled from `rng` each epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batches {
    fn new(n: usize, batch: usize) -> Self {
        Self { order: (0..n).collect(), pos: n, batch }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let mut new_epoch = false;
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            new_epoch = true;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        (idx, new_epoch)
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

fn log(cfg: &TrainConfig, what: &str, step: usize, total: usize, curve: &LossCurve) {
    if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == total) {
        eprintln!("[{what}] step {step}/{total} loss {:.5}", curve.tail_mean(cfg.log_every));
    }
}

#[derive(Clone, Debug)]
pub struct BaseOutcome {
    pub denoiser: Denoiser<f32>,
    pub curve: LossCurve,
    /// Held-out loss before and after training, at fixed steps and noise.
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Held-out noise-prediction loss at fixed steps and noise.
pub fn heldout_loss(
    denoiser: &Denoiser<f32>,
    dataset: &Dataset,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    idx: &[usize],
    seed: u64,
) -> Result<f64> {
    let batch = load_batch(dataset, codec, idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let (zt, eps) = noised(&batch.z0, &steps, schedule, &mut rng);
    let mut g = Graph::new();
    let p = denoiser.params().bind(&mut g, false);
    let z = g.leaf(zt, false);
    let out = denoiser.forward(&mut g, &p, z, &StepInput::new(&steps, schedule), &batch.tokens, None)?;
    let target = g.leaf(eps, false);
    let loss = g.mse(out.eps, target)?;
    Ok(g.value(loss).data()[0] as f64)
}

fn weighted_mse(g: &mut Graph<f32>, pred: Var, target: Var, time: &StepInput, weighting: LossWeighting) -> Result<Var> {
    match weighting {
        LossWeighting::Noise => g.mse(pred, target),
        LossWeighting::Velocity => {
            let w: Vec<f32> = time.signal.iter().map(|a| (1.0 / a) as f32).collect();
            let pred = g.scale_items(pred, w.clone())?;
            let target = g.scale_items(target, w)?;
            g.mse(pred, target)
        }
    }
}

/// Number of trailing scenes held out of base training.
pub fn heldout_indices(dataset: &Dataset, batch: usize) -> Vec<usize> {
    let n = dataset.len();
    (n.saturating_sub(batch)..n).collect()
}

/// Trains a base denoiser from scratch.
pub fn train_base(
    config: &DenoiserConfig,
    dataset: &Dataset,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<BaseOutcome> {
    cfg.validate()?;
    let mut init = Denoiser::new(config.clone(), cfg.seed)?;
    let held = if dataset.len() > 2 * cfg.batch_size { cfg.batch_size } else { 0 };
    let train: Vec<usize> = (0..dataset.len() - held).collect();
    init.set_prior(fit_prior(dataset, codec, &train)?)?;
    train_denoiser(init, dataset, codec, schedule, cfg)
}

/// Latent statistics of the scenes in `idx`, encoded in chunks.
pub fn fit_prior(dataset: &Dataset, codec: &LatentCodec, idx: &[usize]) -> Result<LatentPrior> {
    let mut acc = PriorAccumulator::new(codec.config().latent_channels());
    for chunk in idx.chunks(64) {
        acc.add(&codec.encode(&dataset.images(chunk)?)?)?;
    }
    acc.finish()
}

/// Continues training an existing denoiser (also used for fine-tuning).
/// The last `batch_size` scenes are held out when the dataset has more than
/// two batches.
pub fn train_denoiser(
    mut denoiser: Denoiser<f32>,
    dataset: &Dataset,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<BaseOutcome> {
    cfg.validate()?;
    let heldout = if dataset.len() > 2 * cfg.batch_size { heldout_indices(dataset, cfg.batch_size) } else { vec![] };
    let train_n = dataset.len() - heldout.len();
    let eval_idx = if heldout.is_empty() { (0..dataset.len().min(cfg.batch_size)).collect() } else { heldout.clone() };
    let heldout_before = heldout_loss(&denoiser, dataset, codec, schedule, &eval_idx, cfg.seed ^ 0x5eed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(denoiser.params(), cfg.learning_rate, cfg.adam.clone());
    let mut batches = Batches::new(train_n, cfg.batch_size);
    let mut curve = LossCurve::default();
    let total = cfg.total_steps(train_n);
    for step in 1..=total {
        let (idx, _) = batches.next(&mut rng);
        let batch = load_batch(dataset, codec, &idx)?;
        let steps: Vec<usize> = (0..idx.len()).map(|_| draw_timestep(&mut rng, cfg.sampling, schedule.steps())).collect();
        let (zt, eps) = noised(&batch.z0, &steps, schedule, &mut rng);

        let mut g = Graph::new();
        let p = denoiser.params().bind(&mut g, true);
        let z = g.leaf(zt, false);
        let time = StepInput::new(&steps, schedule);
        let out = denoiser.forward(&mut g, &p, z, &time, &batch.tokens, None)?;
        let target = g.leaf(eps, false);
        let loss_v = weighted_mse(&mut g, out.eps, target, &time, cfg.weighting)?;
        let loss = g.value(loss_v).data()[0] as f64;
        check_loss(step, loss)?;
        curve.push(step, loss);
        let mut grads = g.backward(loss_v)?;
        let gs: Vec<Option<Tensor<f32>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        drop(g);
        opt.step(denoiser.params_mut(), &gs);
        log(cfg, "base", step, total, &curve);
    }
    let heldout_after = heldout_loss(&denoiser, dataset, codec, schedule, &eval_idx, cfg.seed ^ 0x5eed)?;
    Ok(BaseOutcome { denoiser, curve, heldout_before, heldout_after })
}

#[derive(Clone, Debug)]
pub struct AdapterOutcome {
    pub adapter: Adapter<f32>,
    pub curve: LossCurve,
    /// Adapter arrays that received a nonzero gradient during the first epoch.
    pub reached: BTreeSet<String>,
    /// Base arrays that differ from the pre-training snapshot. Always empty on
    /// success; a non-empty diff is returned as an error instead.
    pub base_diff: Vec<String>,
    pub steps: usize,
}

/// Trains an adapter against a frozen base denoiser.
pub fn train_adapter(
    base: &Denoiser<f32>,
    spec: AdapterSpec,
    dataset: &Dataset,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mode: InjectionMode,
) -> Result<AdapterOutcome> {
    cfg.validate()?;
    let kind = spec.kind;
    let snapshot = base.params().to_map();
    let mut adapter = Adapter::new(spec, cfg.seed ^ 0xada)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(adapter.params(), cfg.learning_rate, cfg.adam.clone());
    let mut batches = Batches::new(dataset.len(), cfg.batch_size);
    let mut curve = LossCurve::default();
    let mut reached = BTreeSet::new();
    let mut epoch = 0;
    let total = cfg.total_steps(dataset.len());
    for step in 1..=total {
        let (idx, new_epoch) = batches.next(&mut rng);
        epoch += new_epoch as usize;
        let batch = load_batch(dataset, codec, &idx)?;
        let cond = dataset.conditions(kind, &idx)?;
        let steps: Vec<usize> = (0..idx.len()).map(|_| draw_timestep(&mut rng, cfg.sampling, schedule.steps())).collect();
        let (zt, eps) = noised(&batch.z0, &steps, schedule, &mut rng);

        let mut g = Graph::new();
        let pb = base.params().bind(&mut g, false);
        let pa = adapter.params().bind(&mut g, true);
        let c = g.leaf(cond.tensor().swap01(), false);
        let features: [Var; 4] = adapter.forward(&mut g, &pa, c)?;
        let injection = Injection { features, mode };
        let z = g.leaf(zt, false);
        let time = StepInput::new(&steps, schedule);
        let out = base.forward(&mut g, &pb, z, &time, &batch.tokens, Some(&injection))?;
        let target = g.leaf(eps, false);
        let loss_v = weighted_mse(&mut g, out.eps, target, &time, cfg.weighting)?;
        let loss = g.value(loss_v).data()[0] as f64;
        check_loss(step, loss)?;
        curve.push(step, loss);
        let mut grads = g.backward(loss_v)?;
        let gs: Vec<Option<Tensor<f32>>> = pa.vars().iter().map(|&v| grads.take(v)).collect();
        if pb.vars().iter().any(|&v| grads.get(v).is_some()) {
            return Err(Error::FrozenViolation("base parameters received gradients".into()));
        }
        drop(g);
        if epoch <= 1 {
            for (name, gr) in adapter.params().names().iter().zip(&gs) {
                if gr.as_ref().is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                    reached.insert(name.clone());
                }
            }
        }
        opt.step(adapter.params_mut(), &gs);
        log(cfg, kind.name(), step, total, &curve);
    }
    let base_diff = diff_arrays(&snapshot, &base.params().to_map());
    if !base_diff.is_empty() {
        return Err(Error::FrozenViolation(format!("base arrays changed: {}", base_diff.join(", "))));
    }
    adapter.reset_invocations();
    Ok(AdapterOutcome { adapter, curve, reached, base_diff, steps: total })
}

/// Kolmogorov-Smirnov distances of the cubic sampler against
/// `F(s) = 1 - (1 - s/T)^(1/3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubicKs {
    /// Distance of the unrounded draws `(1 - (u/T)^3) T`.
    pub continuous: f64,
    /// Distance of the rounded steps, with the rounding cell of step `t`
    /// taken as `(t - 1/2, t + 1/2]`.
    pub rounded: f64,
}

/// Unrounded cubic draw `(1 - (u/T)^3) T`.
pub fn cubic_draw(u: f64, t_max: usize) -> f64 {
    let s = u / t_max as f64;
    (1.0 - s * s * s) * t_max as f64
}

pub fn cubic_ks_distance(n: usize, t_max: usize, seed: u64) -> CubicKs {
    let t = t_max as f64;
    let cdf = |s: f64| 1.0 - (1.0 - s.clamp(0.0, t) / t).cbrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = Vec::with_capacity(n);
    let mut counts = vec![0usize; t_max + 1];
    for _ in 0..n {
        let u = rng.random_range(0.0..=t);
        draws.push(cubic_draw(u, t_max));
        counts[sample_timestep_cubic(u, t_max)] += 1;
    }
    draws.sort_by(f64::total_cmp);
    let nf = n as f64;
    let continuous = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / nf).abs().max((f - (i + 1) as f64 / nf).abs())
        })
        .fold(0.0, f64::max);
    let mut acc = 0usize;
    let mut rounded = 0f64;
    for (step, &c) in counts.iter().enumerate().skip(1) {
        acc += c;
        let upper = if step == t_max { 1.0 } else { cdf(step as f64 + 0.5) };
        rounded = rounded.max((acc as f64 / nf - upper).abs());
    }
    CubicKs { continuous, rounded }
}

/// Writes a loss curve next to a summary line, for the CLI.
pub fn write_summary(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        writeln!(buf, "{l}")?;
    }
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterVariant, ConditionKind};
    use crate::codec::CodecConfig;
    use crate::conditions::{DatasetConfig, Style};

    #[test]
    fn cubic_examples() {
        assert_eq!(sample_timestep_cubic(0.0, 1000), 1000);
        assert_eq!(sample_timestep_cubic(1000.0, 1000), 1);
        assert_eq!(sample_timestep_cubic(500.0, 1000), 875);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let hi = (0..n).filter(|_| draw_timestep(&mut rng, TimestepSampling::Cubic, 999) >= 666).count();
        assert!((hi as f64 / n as f64 - (1.0f64 / 3.0).cbrt()).abs() < 0.005);
        let ks = cubic_ks_distance(100_000, 1000, 2);
        assert!(ks.continuous < 0.01 && ks.rounded < 0.01, "{ks:?}");
    }

    #[test]
    fn adam_matches_closed_form_first_step() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::from_vec([2, 1, 1, 1], vec![1.0, -2.0]).unwrap());
        let mut opt = Adam::new(&ps, 0.1, AdamConfig::default());
        opt.step(&mut ps, &[Some(Tensor::from_vec([2, 1, 1, 1], vec![3.0, -0.5]).unwrap())]);
        // First bias-corrected step moves each weight by lr * sign(g).
        let w = ps.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    fn small_data() -> (Dataset, LatentCodec) {
        let ds = Dataset::generate(DatasetConfig { scenes: 12, resolution: 64, seed: 4, style: Style::Light }).unwrap();
        let images = ds.images(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
        let codec = LatentCodec::new(CodecConfig::fit([&images]).unwrap()).unwrap();
        (ds, codec)
    }

    #[test]
    fn base_training_reduces_heldout_loss() {
        let (ds, codec) = small_data();
        let s = NoiseSchedule::default();
        let cfg = TrainConfig { steps: Some(30), batch_size: 4, learning_rate: 2e-3, ..TrainConfig::base() };
        let out = train_base(&DenoiserConfig::tiny(192), &ds, &codec, &s, &cfg).unwrap();
        assert!(out.heldout_after < out.heldout_before, "{} -> {}", out.heldout_before, out.heldout_after);
        assert_eq!(out.curve.steps.len(), 30);
        let again = train_base(&DenoiserConfig::tiny(192), &ds, &codec, &s, &cfg).unwrap();
        assert_eq!(again.denoiser.params().to_map(), out.denoiser.params().to_map());
    }

    #[test]
    fn divergence_aborts() {
        let (ds, codec) = small_data();
        let s = NoiseSchedule::default();
        let mut den = Denoiser::new(DenoiserConfig::tiny(192), 0).unwrap();
        den.params_mut().for_each_mut(|_, t| t.data_mut().fill(f32::NAN));
        let cfg = TrainConfig { steps: Some(3), batch_size: 4, ..TrainConfig::base() };
        assert!(matches!(train_denoiser(den, &ds, &codec, &s, &cfg), Err(Error::Diverged { step: 1, .. })));
    }

    #[test]
    fn adapter_training_contract() {
        let (ds, codec) = small_data();
        let s = NoiseSchedule::default();
        let base = Denoiser::new(DenoiserConfig::tiny(192), 3).unwrap();
        let spec = AdapterSpec::for_denoiser(base.config(), ConditionKind::Sketch, AdapterVariant::Base);
        let cfg = TrainConfig { steps: Some(4), batch_size: 4, learning_rate: 1e-3, ..TrainConfig::default() };
        let before = base.params().to_map();
        let out = train_adapter(&base, spec.clone(), &ds, &codec, &s, &cfg, InjectionMode::default()).unwrap();
        assert!(out.base_diff.is_empty());
        assert_eq!(before, base.params().to_map());
        assert_eq!(out.reached.len(), out.adapter.params().len());
        let again = train_adapter(&base, spec.clone(), &ds, &codec, &s, &cfg, InjectionMode::default()).unwrap();
        assert_eq!(again.adapter.params().to_map(), out.adapter.params().to_map());

        let zero = TrainConfig { steps: Some(0), ..cfg };
        let init = train_adapter(&base, spec.clone(), &ds, &codec, &s, &zero, InjectionMode::default()).unwrap();
        assert_eq!(init.adapter.params().to_map(), Adapter::<f32>::new(spec, zero.seed ^ 0xada).unwrap().params().to_map());
    }
}
