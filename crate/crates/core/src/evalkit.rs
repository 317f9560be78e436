//! Condition-fidelity metrics and the ablation harnesses.
//!
//! Edge fidelity is the F1 score between the sketch of a generated image and
//! the target sketch, counting a stroke pixel as matched when the other map
//! has a stroke within 2 px. Palette error is the RGB distance between each
//! 64×64 block mean of the generated image and the target palette value,
//! averaged over blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterSpec, ConditionKind, ConditionMap};
use crate::checkpoint::{sha256_hex, write_atomic};
use crate::codec::{ImageTensor, LatentCodec};
use crate::conditions::extract::PALETTE_FACTOR;
use crate::conditions::{make_color_palette, make_sketch, render_scene, Dataset, SceneSpec};
use crate::denoiser::{Denoiser, InjectionMode};
use crate::diffusion::{sample_from, AdapterInput, GateSpec, Guidance, NoiseSchedule, SamplerConfig, Stage};
use crate::error::{Error, Result};
use crate::imageio::{contact_sheet, save_rgb};
use crate::tensor::Tensor;
use crate::text::TokenSequence;
use crate::training::{train_adapter, train_denoiser, TrainConfig};

/// Match radius for edge F1, in pixels.
pub const EDGE_TOLERANCE: i32 = 2;

fn stroke_offsets() -> Vec<(i32, i32)> {
    let r = EDGE_TOLERANCE;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect()
}

fn dilate(map: &[bool], h: usize, w: usize, offsets: &[(i32, i32)]) -> Vec<bool> {
    let mut out = vec![false; map.len()];
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            if map[(y as usize) * w + x as usize] {
                for &(dy, dx) in offsets {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        out[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// F1 between two binary maps with tolerance matching. Two empty maps score 1,
/// one empty map scores 0.
pub fn edge_f1_maps(pred: &[bool], target: &[bool], h: usize, w: usize) -> f64 {
    let (np, nt) = (pred.iter().filter(|&&v| v).count(), target.iter().filter(|&&v| v).count());
    if np == 0 && nt == 0 {
        return 1.0;
    }
    if np == 0 || nt == 0 {
        return 0.0;
    }
    let offs = stroke_offsets();
    let (dp, dt) = (dilate(pred, h, w, &offs), dilate(target, h, w, &offs));
    let tp_p = pred.iter().zip(&dt).filter(|(&p, &t)| p && t).count() as f64;
    let tp_r = target.iter().zip(&dp).filter(|(&t, &p)| t && p).count() as f64;
    let (precision, recall) = (tp_p / np as f64, tp_r / nt as f64);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-item edge F1 between the sketches of `generated` and `target`.
pub fn edge_fidelity(generated: &ImageTensor, target: &ConditionMap) -> Result<Vec<f64>> {
    check_pair(generated, target, ConditionKind::Sketch)?;
    let sk = make_sketch(generated);
    let (h, w) = (target.height(), target.width());
    let plane = h * w;
    Ok((0..target.batch())
        .map(|i| {
            let p: Vec<bool> = sk.tensor().data()[i * plane..(i + 1) * plane].iter().map(|&v| v > 0.5).collect();
            let t: Vec<bool> = target.tensor().data()[i * plane..(i + 1) * plane].iter().map(|&v| v > 0.5).collect();
            edge_f1_maps(&p, &t, h, w)
        })
        .collect())
}

/// Per-item mean over 64×64 blocks of the RGB distance between the
/// generated block mean and the target block mean.
pub fn palette_fidelity(generated: &ImageTensor, target: &ConditionMap) -> Result<Vec<f64>> {
    check_pair(generated, target, ConditionKind::Color)?;
    let (h, w) = (target.height(), target.width());
    let f = PALETTE_FACTOR;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("palette fidelity needs sizes divisible by {f}")));
    }
    let block_mean = |t: &Tensor<f32>, i: usize, c: usize, by: usize, bx: usize| {
        let plane = &t.data()[(i * 3 + c) * h * w..(i * 3 + c + 1) * h * w];
        let mut s = 0f64;
        for y in by * f..(by + 1) * f {
            s += plane[y * w + bx * f..y * w + (bx + 1) * f].iter().map(|&v| v as f64).sum::<f64>();
        }
        s / (f * f) as f64
    };
    let nb = (h / f) * (w / f);
    Ok((0..target.batch())
        .map(|i| {
            let mut total = 0.0;
            for by in 0..h / f {
                for bx in 0..w / f {
                    let d2: f64 = (0..3)
                        .map(|c| {
                            let g = block_mean(generated.tensor(), i, c, by, bx).clamp(0.0, 1.0);
                            (g - block_mean(target.tensor(), i, c, by, bx)).powi(2)
                        })
                        .sum();
                    total += d2.sqrt();
                }
            }
            total / nb as f64
        })
        .collect())
}

/// Fraction of pixels whose nearest scene color (background or a
/// primitive's color) is the color of the ground-truth visible label.
pub fn seg_accuracy(generated: &ImageTensor, specs: &[SceneSpec]) -> Result<Vec<f64>> {
    if generated.batch() != specs.len() {
        return Err(Error::Shape(format!("{} images for {} scenes", generated.batch(), specs.len())));
    }
    let res = generated.height();
    let plane = res * res;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let r = render_scene(spec, res)?;
            let mut palette = vec![spec.background.rgb()];
            palette.extend(spec.primitives.iter().map(|p| p.color.rgb()));
            let img = &generated.tensor().data()[i * 3 * plane..(i + 1) * 3 * plane];
            let mut hits = 0usize;
            for (p, &label) in r.labels.iter().enumerate() {
                let px = [img[p], img[plane + p], img[2 * plane + p]];
                let dist = |c: &[f32; 3]| (0..3).map(|k| (px[k] - c[k]).powi(2)).sum::<f32>();
                let best = (0..palette.len()).min_by(|&a, &b| dist(&palette[a]).total_cmp(&dist(&palette[b]))).unwrap();
                hits += (palette[best] == palette[label as usize]) as usize;
            }
            Ok(hits as f64 / plane as f64)
        })
        .collect()
}

fn check_pair(generated: &ImageTensor, target: &ConditionMap, kind: ConditionKind) -> Result<()> {
    if target.kind() != kind {
        return Err(Error::Invalid(format!("expected a {kind} target, got {}", target.kind())));
    }
    if generated.batch() != target.batch() || generated.height() != target.height() || generated.width() != target.width() {
        return Err(Error::Shape("generated images and targets differ in batch or size".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub edge_f1: f64,
    pub palette_error: f64,
    pub seg_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub edge_f1: f64,
    pub palette_error: f64,
    pub seg_accuracy: f64,
    pub per_sample: Vec<SampleMetrics>,
    pub config_hash: String,
}

impl FidelityReport {
    pub fn new(per_sample: Vec<SampleMetrics>, config_hash: String) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            edge_f1: mean(|s| s.edge_f1),
            palette_error: mean(|s| s.palette_error),
            seg_accuracy: mean(|s| s.seg_accuracy),
            per_sample,
            config_hash,
        }
    }

    /// Larger is better: edge F1 for sketches, negated palette error for
    /// palettes, pixel accuracy for segmentation and depth.
    pub fn score(&self, kind: ConditionKind) -> f64 {
        match kind {
            ConditionKind::Sketch => self.edge_f1,
            ConditionKind::Color => -self.palette_error,
            ConditionKind::Segmentation | ConditionKind::Depth => self.seg_accuracy,
        }
    }
}

/// Fixed scenes with their targets.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub specs: Vec<SceneSpec>,
    pub images: ImageTensor,
    pub tokens: Vec<TokenSequence>,
    pub sketches: ConditionMap,
    pub palettes: ConditionMap,
    dataset: Dataset,
}

impl EvalSet {
    /// The first `n` scenes of `dataset`.
    pub fn from_dataset(dataset: &Dataset, n: usize) -> Result<Self> {
        if n == 0 || n > dataset.len() {
            return Err(Error::Invalid(format!("eval set of {n} from {} scenes", dataset.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let images = dataset.images(&idx)?;
        Ok(Self {
            specs: dataset.examples()[..n].iter().map(|e| e.spec.clone()).collect(),
            sketches: make_sketch(&images),
            palettes: make_color_palette(&images)?,
            tokens: dataset.tokens(&idx)?,
            images,
            dataset: dataset.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn condition(&self, kind: ConditionKind) -> Result<ConditionMap> {
        match kind {
            ConditionKind::Sketch => Ok(self.sketches.clone()),
            ConditionKind::Color => Ok(self.palettes.clone()),
            _ => self.dataset.conditions(kind, &(0..self.len()).collect::<Vec<_>>()),
        }
    }

    pub fn evaluate(&self, generated: &ImageTensor, config_hash: String) -> Result<FidelityReport> {
        let e = edge_fidelity(generated, &self.sketches)?;
        let p = palette_fidelity(generated, &self.palettes)?;
        let s = seg_accuracy(generated, &self.specs)?;
        let per = (0..self.len())
            .map(|i| SampleMetrics { edge_f1: e[i], palette_error: p[i], seg_accuracy: s[i] })
            .collect();
        Ok(FidelityReport::new(per, config_hash))
    }
}

/// Frozen base model with its codec and schedule.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub denoiser: &'a Denoiser<f32>,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
}

/// Items per sampling call when generating an eval set.
const CHUNK: usize = 32;

impl Pipeline<'_> {
    /// Samples one image per eval scene, clamped to `[0, 1]`. Item `i` uses
    /// noise stream `i` of `seed`, independent of chunking.
    pub fn generate(
        &self,
        eval: &EvalSet,
        adapters: &[(&Adapter<f32>, f32)],
        cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<ImageTensor> {
        let conds: Vec<ConditionMap> = adapters.iter().map(|(a, _)| eval.condition(a.spec().kind)).collect::<Result<_>>()?;
        let mut parts = Vec::new();
        for start in (0..eval.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(eval.len())).collect();
            let chunk_conds: Vec<ConditionMap> =
                conds.iter().map(|c| ConditionMap::new(c.kind(), c.tensor().select_axis0(&idx))).collect::<Result<_>>()?;
            let inputs: Vec<AdapterInput> = adapters
                .iter()
                .zip(&chunk_conds)
                .map(|(&(adapter, weight), condition)| AdapterInput { adapter, condition, weight })
                .collect();
            let guidance = (!inputs.is_empty()).then_some(Guidance::Adapters(&inputs));
            let tokens: Vec<TokenSequence> = idx.iter().map(|&i| eval.tokens[i].clone()).collect();
            let z = sample_from(self.denoiser, self.schedule, &tokens, guidance, cfg, seed, start)?;
            let img = self.codec.decode(&z)?;
            parts.push(ImageTensor::new(img.tensor().map(|v| v.clamp(0.0, 1.0)))?);
        }
        ImageTensor::stack(&parts.iter().collect::<Vec<_>>())
    }
}

/// Hash of any serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).unwrap_or_default())[..16].to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gate: String,
    pub report: FidelityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub kind: ConditionKind,
    pub seed: u64,
    pub results: Vec<GateResult>,
    /// Mean fidelity score (larger is better) for each gate, same order.
    pub scores: Vec<f64>,
    pub begin_minus_late: f64,
    pub begin_ge_middle_ge_late: bool,
}

impl StageReport {
    pub fn result(&self, gate: &str) -> Option<&FidelityReport> {
        self.results.iter().find(|r| r.gate == gate).map(|r| &r.report)
    }
}

/// Samples the eval set with guidance gated to all steps, each third, and no
/// steps.
pub fn run_stage_ablation(
    pipe: Pipeline<'_>,
    adapter: &Adapter<f32>,
    eval: &EvalSet,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<StageReport> {
    let kind = adapter.spec().kind;
    let mut gates = vec![GateSpec::All];
    gates.extend(Stage::ALL.map(GateSpec::Stage));
    gates.push(GateSpec::None);
    let mut results = Vec::new();
    for gate in gates {
        let c = cfg.clone().with_gate(gate.clone());
        let imgs = pipe.generate(eval, &[(adapter, 1.0)], &c, seed)?;
        let hash = config_hash(&(&c, seed, kind));
        results.push(GateResult { gate: gate.to_string(), report: eval.evaluate(&imgs, hash)? });
    }
    let scores: Vec<f64> = results.iter().map(|r| r.report.score(kind)).collect();
    let (b, m, l) = (scores[1], scores[2], scores[3]);
    Ok(StageReport { kind, seed, results, begin_minus_late: b - l, begin_ge_middle_ge_late: b >= m && m >= l, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: InjectionMode,
    pub final_loss: f64,
    pub report: FidelityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub kind: ConditionKind,
    pub results: Vec<ModeResult>,
    pub unguided: FidelityReport,
    /// Whether encoder injection at all four scales has the best score.
    pub encoder_all_best: bool,
}

/// Trains a fresh adapter under each injection mode and evaluates it with
/// guidance at every step.
#[allow(clippy::too_many_arguments)]
pub fn run_injection_ablation(
    pipe: Pipeline<'_>,
    spec: &AdapterSpec,
    train: &Dataset,
    eval: &EvalSet,
    modes: &[InjectionMode],
    train_cfg: &TrainConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<InjectionReport> {
    let kind = spec.kind;
    let unguided_imgs = pipe.generate(eval, &[], sampler, seed)?;
    let unguided = eval.evaluate(&unguided_imgs, config_hash(&(sampler, seed)))?;
    let mut results = Vec::new();
    for &mode in modes {
        let out = train_adapter(pipe.denoiser, spec.clone(), train, pipe.codec, pipe.schedule, train_cfg, mode)?;
        let c = SamplerConfig { injection: mode, ..sampler.clone() };
        let imgs = pipe.generate(eval, &[(&out.adapter, 1.0)], &c, seed)?;
        let report = eval.evaluate(&imgs, config_hash(&(&c, train_cfg, seed)))?;
        results.push(ModeResult { mode, final_loss: out.curve.tail_mean(100), report });
    }
    let best = results.iter().map(|r| r.report.score(kind)).fold(f64::NEG_INFINITY, f64::max);
    let encoder_all_best = results
        .iter()
        .any(|r| r.mode == InjectionMode::default() && r.report.score(kind) >= best);
    Ok(InjectionReport { kind, results, unguided, encoder_all_best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub kind: ConditionKind,
    pub finetune_steps: usize,
    pub finetuned_hash: String,
    pub guided: FidelityReport,
    pub unguided: FidelityReport,
    pub margin: f64,
}

/// Fine-tunes `base` on `shifted` without any adapter, then compares the
/// adapter-guided and unguided fidelity of the fine-tuned model on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn run_generalization_check(
    pipe: Pipeline<'_>,
    adapter: &Adapter<f32>,
    shifted: &Dataset,
    eval: &EvalSet,
    finetune: &TrainConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(GeneralizationReport, Denoiser<f32>)> {
    let tuned = train_denoiser(pipe.denoiser.clone(), shifted, pipe.codec, pipe.schedule, finetune)?.denoiser;
    let p2 = Pipeline { denoiser: &tuned, ..pipe };
    let report = generalization_report(p2, adapter, eval, sampler, seed, finetune.total_steps(shifted.len()))?;
    Ok((report, tuned))
}

/// Guided vs unguided fidelity of an already fine-tuned model.
pub fn generalization_report(
    tuned: Pipeline<'_>,
    adapter: &Adapter<f32>,
    eval: &EvalSet,
    sampler: &SamplerConfig,
    seed: u64,
    finetune_steps: usize,
) -> Result<GeneralizationReport> {
    let kind = adapter.spec().kind;
    let hash = config_hash(&(sampler, seed));
    let guided = eval.evaluate(&tuned.generate(eval, &[(adapter, 1.0)], sampler, seed)?, hash.clone())?;
    let unguided = eval.evaluate(&tuned.generate(eval, &[], sampler, seed)?, hash)?;
    Ok(GeneralizationReport {
        kind,
        finetune_steps,
        finetuned_hash: crate::checkpoint::hash_arrays(&tuned.denoiser.params().to_map()),
        margin: guided.score(kind) - unguided.score(kind),
        guided,
        unguided,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub weights: Vec<f32>,
    pub sketch_only: FidelityReport,
    pub color_only: FidelityReport,
    pub composed: FidelityReport,
    pub unguided: FidelityReport,
    pub edge_gap: f64,
    pub palette_ratio: f64,
}

/// Sketch-only, color-only and composed sampling on the same seeds.
pub fn run_composition(
    pipe: Pipeline<'_>,
    sketch: &Adapter<f32>,
    color: &Adapter<f32>,
    weights: [f32; 2],
    eval: &EvalSet,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<CompositionReport> {
    let hash = config_hash(&(sampler, seed, weights));
    let run = |ads: &[(&Adapter<f32>, f32)]| -> Result<FidelityReport> {
        eval.evaluate(&pipe.generate(eval, ads, sampler, seed)?, hash.clone())
    };
    let sketch_only = run(&[(sketch, 1.0)])?;
    let color_only = run(&[(color, 1.0)])?;
    let composed = run(&[(sketch, weights[0]), (color, weights[1])])?;
    let unguided = run(&[])?;
    Ok(CompositionReport {
        weights: weights.to_vec(),
        edge_gap: (composed.edge_f1 - sketch_only.edge_f1).abs(),
        palette_ratio: composed.palette_error / color_only.palette_error.max(1e-12),
        sketch_only,
        color_only,
        composed,
        unguided,
    })
}

/// Writes `report.json` and a per-sample CSV for a list of named reports.
pub fn save_reports<T: Serialize>(dir: &Path, name: &str, report: &T, rows: &[(&str, &FidelityReport)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(format!("{name}.json")), &serde_json::to_vec_pretty(report)?)?;
    let mut csv = String::from("config,sample,edge_f1,palette_error,seg_accuracy\n");
    for (label, r) in rows {
        for (i, s) in r.per_sample.iter().enumerate() {
            csv.push_str(&format!("{label},{i},{},{},{}\n", s.edge_f1, s.palette_error, s.seg_accuracy));
        }
    }
    write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes())
}

/// Writes a contact sheet with one row per image batch, first `n` items each.
pub fn save_sheet(path: &Path, rows: &[&ImageTensor], n: usize) -> Result<()> {
    let grid: Vec<Vec<ImageTensor>> = rows.iter().map(|b| (0..n.min(b.batch())).map(|i| b.item(i)).collect()).collect();
    let (rgb, w, h) = contact_sheet(&grid)?;
    save_rgb(path, &rgb, w, h)
}

/// Converts a 1- or 3-channel condition map to displayable images.
pub fn condition_images(c: &ConditionMap) -> Result<ImageTensor> {
    let t = c.tensor();
    if t.shape()[1] == 3 {
        return ImageTensor::new(t.clone());
    }
    let [b, _, h, w] = t.shape();
    let mut d = Vec::with_capacity(b * 3 * h * w);
    for i in 0..b {
        let plane = &t.data()[i * h * w..(i + 1) * h * w];
        for _ in 0..3 {
            d.extend_from_slice(plane);
        }
    }
    ImageTensor::new(Tensor::from_vec([b, 3, h, w], d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{DatasetConfig, Style};

    fn eval_set(n: usize) -> EvalSet {
        let ds = Dataset::generate(DatasetConfig { scenes: n, resolution: 128, seed: 21, style: Style::Light }).unwrap();
        EvalSet::from_dataset(&ds, n).unwrap()
    }

    #[test]
    fn metrics_on_source_images() {
        let ev = eval_set(4);
        let r = ev.evaluate(&ev.images, String::new()).unwrap();
        assert_eq!(r.edge_f1, 1.0);
        assert!(r.seg_accuracy > 0.97);
        // Block means versus the center-weighted palette value.
        assert!(r.palette_error < 0.15, "{}", r.palette_error);
        let pal_imgs = ImageTensor::new(ev.palettes.tensor().clone()).unwrap();
        assert!(palette_fidelity(&pal_imgs, &ev.palettes).unwrap().iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn metric_extremes() {
        let ev = eval_set(4);
        let flat = ImageTensor::new(Tensor::full([4, 3, 128, 128], 0.5)).unwrap();
        assert!(edge_fidelity(&flat, &ev.sketches).unwrap().iter().all(|&f| f == 0.0));
        let inverted = ImageTensor::new(ev.palettes.tensor().map(|v| 1.0 - v)).unwrap();
        let inv = palette_fidelity(&inverted, &ev.palettes).unwrap();
        let own = palette_fidelity(&ev.images, &ev.palettes).unwrap();
        let other = palette_fidelity(&ev.images.item(1), &ev.palettes.item(0)).unwrap();
        assert!(inv[0] > own[0] && inv[0] > other[0]);
    }

    #[test]
    fn f1_tolerance() {
        let (h, w) = (16, 16);
        let mut a = vec![false; h * w];
        let mut b = vec![false; h * w];
        for x in 2..14 {
            a[5 * w + x] = true;
            b[7 * w + x] = true;
        }
        assert_eq!(edge_f1_maps(&a, &b, h, w), 1.0);
        let mut c = vec![false; h * w];
        for x in 2..14 {
            c[8 * w + x] = true;
        }
        assert_eq!(edge_f1_maps(&a, &c, h, w), 0.0);
        assert_eq!(edge_f1_maps(&vec![false; h * w], &vec![false; h * w], h, w), 1.0);
    }
}
