//! Finite-difference checks of the tape gradients on small double-precision
//! models: the guided denoising loss with respect to every denoiser and
//! adapter array, and Jacobian-vector products of the adapter alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapter::{Adapter, AdapterSpec, AdapterVariant, ConditionKind};
use crate::codec::LatentTensor;
use crate::denoiser::{Denoiser, DenoiserConfig, Injection, InjectionMode, StepInput};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::graph::Graph;
use crate::nn::ParamStore;
use crate::prior::PriorAccumulator;
use crate::tensor::Tensor;
use crate::text::{self, TokenSequence};

/// Central-difference step. Differences use Richardson extrapolation over
/// `H` and `H / 2`, so truncation error is O(H^4) and round-off stays far
/// below the tolerance.
const H: f64 = 1e-3;

/// Derivatives smaller than this fraction of the largest gradient entry
/// are compared in absolute terms (exact zeros, e.g. biases that a
/// following normalization cancels).
const FLOOR: f64 = 1e-6;

/// `(4 D(H/2) - D(H)) / 3` with `D(h) = (f(h) - f(-h)) / 2h`.
fn richardson(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let d = |f: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let full = d(&mut f, H)?;
    let half = d(&mut f, H / 2.0)?;
    Ok((4.0 * half - full) / 3.0)
}

/// Largest relative disagreement over a set of directional derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checks: usize,
    pub max_rel_error: f64,
    /// Label of the direction with the largest error.
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self { checks: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, label: String, autodiff: f64, numeric: f64, scale: f64) {
        let denom = autodiff.abs().max(numeric.abs()).max(FLOOR * scale);
        let rel = (autodiff - numeric).abs() / denom;
        self.checks += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = rel;
            self.worst = label;
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn shifted(store: &ParamStore<f64>, name: &str, dir: &Tensor<f64>, h: f64) -> ParamStore<f64> {
    let mut s = store.clone();
    s.for_each_mut(|n, t| {
        if n == name {
            t.axpy(h, dir);
        }
    });
    s
}

struct LossInputs {
    zt: Tensor<f64>,
    eps: Tensor<f64>,
    cond: Tensor<f64>,
    time: StepInput,
    tokens: Vec<usize>,
}

/// Loss and the gradients of every denoiser and adapter array.
fn guided_loss(
    den: &Denoiser<f64>,
    ad: &Adapter<f64>,
    inp: &LossInputs,
) -> Result<(f64, Vec<Option<Tensor<f64>>>, Vec<Option<Tensor<f64>>>)> {
    let mut g = Graph::new();
    let pd = den.params().bind(&mut g, true);
    let pa = ad.params().bind(&mut g, true);
    let c = g.leaf(inp.cond.clone(), false);
    let features = ad.forward(&mut g, &pa, c)?;
    let injection = Injection { features, mode: InjectionMode::default() };
    let z = g.leaf(inp.zt.clone(), false);
    let out = den.forward(&mut g, &pd, z, &inp.time, &inp.tokens, Some(&injection))?;
    let target = g.leaf(inp.eps.clone(), false);
    let loss = g.mse(out.eps, target)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let gd = pd.vars().iter().map(|&v| grads.take(v)).collect();
    let ga = pa.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((value, gd, ga))
}

/// Tiny denoiser with a fitted (non-identity) latent prior, plus a tiny
/// sketch adapter, both in f64.
fn tiny_models(seed: u64) -> Result<(Denoiser<f64>, Adapter<f64>)> {
    let cfg = DenoiserConfig::tiny(12);
    let mut den = Denoiser::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let mut acc = PriorAccumulator::new(12);
    let mix = random_tensor(&mut rng, [12, 12, 1, 1], -1.0, 1.0);
    for _ in 0..4 {
        let raw = random_tensor(&mut rng, [1, 12, 8, 8], -1.0, 1.0);
        let mut z = vec![0.5; 12 * 64];
        for o in 0..12 {
            for i in 0..12 {
                for p in 0..64 {
                    z[o * 64 + p] += mix.data()[o * 12 + i] * raw.data()[i * 64 + p] * (i as f64 / 12.0);
                }
            }
        }
        acc.add(&LatentTensor::new(Tensor::from_vec([1, 12, 8, 8], z)?)?)?;
    }
    den.set_prior(acc.finish()?)?;
    let spec = AdapterSpec::for_denoiser(&cfg, ConditionKind::Sketch, AdapterVariant::Base);
    let ad = Adapter::<f64>::new(spec, seed + 1)?;
    Ok((den, ad))
}

/// Checks the directional derivative of the guided noise-prediction loss
/// along a random direction in every parameter array of both models.
pub fn guided_loss_check(seed: u64) -> Result<GradCheck> {
    let (den, ad) = tiny_models(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = NoiseSchedule::default();
    let tokens: Vec<TokenSequence> = ["large red circle center on white", "small blue square topleft on navy"]
        .iter()
        .map(|c| TokenSequence::from_caption(c))
        .collect::<Result<_>>()?;
    let eps: Vec<f64> = (0..12 * 2 * 64).map(|_| rng.sample(StandardNormal)).collect();
    let inp = LossInputs {
        zt: random_tensor(&mut rng, [12, 2, 8, 8], -1.5, 1.5),
        eps: Tensor::from_vec([12, 2, 8, 8], eps)?,
        cond: random_tensor(&mut rng, [1, 2, 64, 64], 0.0, 1.0),
        time: StepInput::new(&[37, 811], &schedule),
        tokens: text::flatten(&tokens),
    };
    let (_, gd, ga) = guided_loss(&den, &ad, &inp)?;
    let mut report = GradCheck::new();
    let scale = gd.iter().chain(&ga).flatten().map(|g| g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).fold(0.0, f64::max);

    let names: Vec<String> = den.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = den.params().iter().nth(i).unwrap().1.shape();
        let dir = random_tensor(&mut rng, shape, -1.0, 1.0);
        let ad_dd = gd[i].as_ref().map_or(0.0, |g| dot(g, &dir));
        let fd = richardson(|h| Ok(guided_loss(&den.with_params(shifted(den.params(), name, &dir, h)), &ad, &inp)?.0))?;
        report.record(format!("denoiser {name}"), ad_dd, fd, scale);
    }
    let names: Vec<String> = ad.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = ad.params().iter().nth(i).unwrap().1.shape();
        let dir = random_tensor(&mut rng, shape, -1.0, 1.0);
        let ad_dd = ga[i].as_ref().map_or(0.0, |g| dot(g, &dir));
        let fd = richardson(|h| {
            let mut moved = ad.clone();
            *moved.params_mut() = shifted(ad.params(), name, &dir, h);
            Ok(guided_loss(&den, &moved, &inp)?.0)
        })?;
        report.record(format!("adapter {name}"), ad_dd, fd, scale);
    }
    Ok(report)
}

/// `u . F(c)` for a fixed cotangent `u` over the concatenated pyramid, with
/// gradients for the condition and every adapter array.
fn projected_pyramid(
    ad: &Adapter<f64>,
    cond: &Tensor<f64>,
    u: &[Tensor<f64>],
) -> Result<(f64, Tensor<f64>, Vec<Option<Tensor<f64>>>)> {
    let mut g = Graph::new();
    let p = ad.params().bind(&mut g, true);
    let c = g.leaf(cond.clone(), true);
    let feats = ad.forward(&mut g, &p, c)?;
    let mut total = None;
    for (f, ui) in feats.iter().zip(u) {
        let s = g.weighted_sum(*f, ui.clone())?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.unwrap();
    let value = g.value(total).data()[0];
    let mut grads = g.backward(total)?;
    let gc = grads.take(c).unwrap_or_else(|| Tensor::zeros(cond.shape()));
    let gp = p.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((value, gc, gp))
}

/// Checks Jacobian-vector products of the adapter along random directions
/// in condition space and in parameter space, each projected onto several
/// random cotangents.
pub fn adapter_jvp_check(seed: u64, kind: ConditionKind) -> Result<GradCheck> {
    let cfg = DenoiserConfig::tiny(12);
    let spec = AdapterSpec::for_denoiser(&cfg, kind, AdapterVariant::Small);
    let ad = Adapter::<f64>::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a);
    let cond = random_tensor(&mut rng, [kind.channels(), 2, 64, 64], 0.0, 1.0);
    let shapes = cfg.encoder_shapes(2, 8, 8)?;
    let mut report = GradCheck::new();
    for k in 0..3 {
        let u: Vec<Tensor<f64>> = shapes.iter().map(|&s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
        let (_, gc, gp) = projected_pyramid(&ad, &cond, &u)?;
        let scale = gc.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));

        let v = random_tensor(&mut rng, cond.shape(), -1.0, 1.0);
        let fd = richardson(|h| {
            let mut c = cond.clone();
            c.axpy(h, &v);
            Ok(projected_pyramid(&ad, &c, &u)?.0)
        })?;
        report.record(format!("condition direction, cotangent {k}"), dot(&gc, &v), fd, scale);

        let names: Vec<String> = ad.params().names().to_vec();
        let dirs: Vec<Tensor<f64>> = ad.params().iter().map(|(_, t)| random_tensor(&mut rng, t.shape(), -1.0, 1.0)).collect();
        let analytic: f64 = gp.iter().zip(&dirs).map(|(g, d)| g.as_ref().map_or(0.0, |g| dot(g, d))).sum();
        let fd = richardson(|h| {
            let mut moved = ad.clone();
            for (name, d) in names.iter().zip(&dirs) {
                *moved.params_mut() = shifted(moved.params(), name, d, h);
            }
            Ok(projected_pyramid(&moved, &cond, &u)?.0)
        })?;
        report.record(format!("parameter direction, cotangent {k}"), analytic, fd, scale);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guided_loss_gradients_match_finite_differences() {
        let r = guided_loss_check(4).unwrap();
        assert!(r.checks > 50);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn adapter_jvps_match_finite_differences() {
        for kind in [ConditionKind::Sketch, ConditionKind::Color] {
            let r = adapter_jvp_check(9, kind).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{kind}: {r:?}");
        }
    }
}
