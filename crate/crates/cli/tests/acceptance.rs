//! Acceptance suite: one pass/fail line per criterion.
//!
//! The heavy criteria (2 and 7-11) share one training run on 2k scenes:
//! a 20k-step base, 5k-step sketch and color adapters (the color adapter
//! once with cubic and once with uniform timesteps) and a 2k-step
//! adapter-free fine-tune on the dark style. Trained checkpoints are cached
//! under the cargo tmp dir keyed by the recipe and a hash of the core crate
//! sources; set `LADAPT_ACCEPT_FRESH=1` to retrain. `LADAPT_ACCEPT_ONLY=1,3,4`
//! runs a subset (the rest are reported as skipped and the run fails).

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use latent_adapter::adapter::{compose, Adapter, AdapterSpec, AdapterVariant, ConditionKind, ConditionMap};
use latent_adapter::checkpoint::{diff_arrays, hash_arrays, Checkpoint};
use latent_adapter::codec::{CodecConfig, LatentCodec};
use latent_adapter::conditions::{Dataset, DatasetConfig, Style};
use latent_adapter::denoiser::{Denoiser, DenoiserConfig, GuidancePyramid, InjectionMode};
use latent_adapter::diffusion::{initial_noise, sample, AdapterInput, GateSpec, Guidance, NoiseSchedule, SamplerConfig, Stage};
use latent_adapter::evalkit::{generalization_report, run_composition, run_stage_ablation, EvalSet, FidelityReport, Pipeline};
use latent_adapter::gradcheck::{adapter_jvp_check, guided_loss_check};
use latent_adapter::tensor::Tensor;
use latent_adapter::training::{
    cubic_ks_distance, train_adapter, train_base, train_denoiser, TimestepSampling, TrainConfig,
};

const BASE_STEPS: usize = 20_000;
const ADAPTER_STEPS: usize = 5_000;
const ADAPTER_LR: f32 = 3e-4;
const FINETUNE_STEPS: usize = 2_000;
const FINETUNE_LR: f32 = 1e-4;
const EVAL_SCENES: usize = 64;
const EVAL_SEED: u64 = 777;
const SAMPLE_SEED: u64 = 5;
const TIME_BUDGET_S: f64 = 3.0 * 3600.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("LADAPT_ACCEPT_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let heavy: OnceCell<Result<Heavy>> = OnceCell::new();
    let heavy_for = |n: usize| -> Result<&Heavy> {
        let h = heavy.get_or_init(|| {
            eprintln!("[acceptance] preparing trained models for criterion {n}");
            Heavy::load_or_train()
        });
        h.as_ref().map_err(|e| anyhow::anyhow!("training pipeline failed: {e:#}"))
    };

    let mut lines = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Result<Verdict>| {
        if !wanted(n) {
            lines.push(format!("criterion {n:2} SKIP {name}"));
            println!("{}", lines.last().unwrap());
            return;
        }
        let t0 = Instant::now();
        let v = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict { pass: false, detail: format!("error: {e:#}") },
            Err(_) => Verdict { pass: false, detail: "panicked".into() },
        };
        let line = format!(
            "criterion {n:2} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push(line);
    };

    run(1, "cubic timestep law", &mut c1_cubic_law);
    run(2, "frozen base", &mut || c2_frozen_base(heavy_for(2)?));
    run(3, "zero and identity guidance", &mut c3_zero_identity);
    run(4, "pyramid shapes and gradients", &mut c4_shapes_gradients);
    run(5, "parameter calibration", &mut c5_param_counts);
    run(6, "one adapter call per sample", &mut c6_one_shot);
    run(7, "guidance efficacy", &mut || c7_efficacy(heavy_for(7)?));
    run(8, "early guidance beats late guidance", &mut || c8_stages(heavy_for(8)?));
    run(9, "cubic vs uniform timesteps", &mut || c9_cubic_vs_uniform(heavy_for(9)?));
    run(10, "composition", &mut || c10_composition(heavy_for(10)?));
    run(11, "generalization to a fine-tuned base", &mut || c11_generalization(heavy_for(11)?));
    run(12, "bitwise CLI replay", &mut c12_replay);

    let failed = lines.iter().filter(|l| !l.contains(" PASS ")).count();
    println!("\nacceptance: {} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_cubic_law() -> Result<Verdict> {
    let t0 = Instant::now();
    let ks = cubic_ks_distance(1_000_000, 1000, 2024);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        ks.continuous < 0.01 && secs < 10.0,
        format!("KS {:.5} over 1e6 draws (rounded steps {:.5}), {secs:.2}s", ks.continuous, ks.rounded),
    )
}

fn c2_frozen_base(h: &Heavy) -> Result<Verdict> {
    let mut diffs = Vec::new();
    for (name, f) in &h.meta.frozen {
        if !f.diff.is_empty() || f.before != f.after {
            diffs.push(format!("{name}: {:?}", f.diff));
        }
    }
    // The checkpoint on disk still matches the hash taken before any adapter trained.
    let now = hash_arrays(&h.base.params().to_map());
    let reloaded = Denoiser::from_checkpoint(&Checkpoint::load(&h.dir.join("base.ckpt"))?)?;
    let on_disk = hash_arrays(&reloaded.params().to_map());
    let unchanged = now == h.meta.base_hash && on_disk == h.meta.base_hash;
    let runs: Vec<String> = h.meta.frozen.iter().map(|(k, f)| format!("{k} ({} steps)", f.steps)).collect();
    verdict(
        diffs.is_empty() && unchanged && h.meta.frozen.len() == 3 && h.meta.frozen.values().all(|f| f.steps >= ADAPTER_STEPS),
        format!(
            "named-array diffs after {}: {}; base hash {} (in memory {}, on disk {})",
            runs.join(", "),
            if diffs.is_empty() { "all empty".to_string() } else { diffs.join("; ") },
            &h.meta.base_hash[..12],
            if now == h.meta.base_hash { "same" } else { "CHANGED" },
            if on_disk == h.meta.base_hash { "same" } else { "CHANGED" },
        ),
    )
}

fn desk_models(seed: u64) -> Result<(Denoiser<f32>, Adapter<f32>, Adapter<f32>)> {
    let cfg = DenoiserConfig::default();
    let den = Denoiser::new(cfg.clone(), seed)?;
    let sk = Adapter::new(AdapterSpec::for_denoiser(&cfg, ConditionKind::Sketch, AdapterVariant::Base), seed + 1)?;
    let co = Adapter::new(AdapterSpec::for_denoiser(&cfg, ConditionKind::Color, AdapterVariant::Small), seed + 2)?;
    Ok((den, sk, co))
}

fn small_eval(n: usize, seed: u64) -> Result<EvalSet> {
    Ok(EvalSet::from_dataset(&Dataset::generate(DatasetConfig { scenes: n, seed, ..DatasetConfig::default() })?, n)?)
}

fn c3_zero_identity() -> Result<Verdict> {
    let (den, sk, co) = desk_models(31)?;
    let sched = NoiseSchedule::default();
    let eval = small_eval(3, 41)?;
    let cfg = den.config();
    let z = initial_noise(7, 3, cfg.latent_channels, 16);

    let zeros = GuidancePyramid::zeros(cfg.encoder_shapes(3, 16, 16)?);
    let plain = den.denoise(&sched, &z, 600, &eval.tokens, None)?;
    let zeroed = den.denoise(&sched, &z, 600, &eval.tokens, Some(&zeros))?;
    let zero_ok = plain.tensor().data() == zeroed.tensor().data();
    // The check is not vacuous: a real pyramid does change the output.
    let pyr = sk.guidance(&eval.condition(ConditionKind::Sketch)?)?;
    let guided = den.denoise(&sched, &z, 600, &eval.tokens, Some(&pyr))?;
    let sensitive = guided.tensor().data() != plain.tensor().data();

    let one = compose(&[&pyr], &[1.0])?;
    let identity_ok = one.features().iter().zip(pyr.features()).all(|(a, b)| a.data() == b.data());

    let sc = SamplerConfig { ddim_steps: 10, ..SamplerConfig::default() };
    let cs = eval.condition(ConditionKind::Sketch)?;
    let cc = eval.condition(ConditionKind::Color)?;
    let unguided = sample(&den, &sched, &eval.tokens, None, &sc, 3)?;
    let inputs = [
        AdapterInput { adapter: &sk, condition: &cs, weight: 0.0 },
        AdapterInput { adapter: &co, condition: &cc, weight: 0.0 },
    ];
    let weightless = sample(&den, &sched, &eval.tokens, Some(Guidance::Adapters(&inputs[..1])), &sc, 3)?;
    let both = sample(&den, &sched, &eval.tokens, Some(Guidance::Adapters(&inputs)), &sc, 3)?;
    let omega_ok = weightless.tensor().data() == unguided.tensor().data() && both.tensor().data() == unguided.tensor().data();

    verdict(
        zero_ok && sensitive && identity_ok && omega_ok,
        format!(
            "zero pyramid identical {zero_ok} (real pyramid changes output {sensitive}); \
             compose K=1 w=1 identity {identity_ok}; w=0 sample equals unguided {omega_ok}"
        ),
    )
}

fn c4_shapes_gradients() -> Result<Verdict> {
    let mut configs = vec![
        ("desk", DenoiserConfig::default()),
        ("desk-16", DenoiserConfig { base_channels: 16, ..DenoiserConfig::default() }),
        ("desk-64", DenoiserConfig { base_channels: 64, blocks_per_scale: 1, ..DenoiserConfig::default() }),
        ("tiny-192", DenoiserConfig::tiny(192)),
        ("tiny-12", DenoiserConfig::tiny(12)),
    ];
    configs.push(("wide-mult", DenoiserConfig { channel_mult: [1, 2, 3, 4], base_channels: 8, ..DenoiserConfig::default() }));
    let mut checked = 0;
    let mut skipped = 0;
    let mut bad = Vec::new();
    for (name, cfg) in &configs {
        for kind in ConditionKind::ALL {
            for variant in [AdapterVariant::Base, AdapterVariant::Small, AdapterVariant::Tiny] {
                let spec = AdapterSpec::for_denoiser(cfg, kind, variant);
                if spec.validate().is_err() {
                    skipped += 1;
                    continue;
                }
                let ad = Adapter::<f32>::new(spec, 3)?;
                for (res, batch) in [(64, 1), (128, 2), (256, 1)] {
                    let cond = ConditionMap::new(kind, Tensor::zeros([batch, kind.channels(), res, res]))?;
                    let got = ad.guidance(&cond)?.shapes();
                    let want = cfg.encoder_shapes(batch, res / 8, res / 8)?;
                    checked += 1;
                    if got != want {
                        bad.push(format!("{name}/{kind}/{}/{res}: {got:?} vs {want:?}", variant.name()));
                    }
                }
            }
        }
    }
    // Full-scale preset against the encoder widths it is calibrated to.
    let full = Adapter::<f32>::new(AdapterSpec::full_scale(ConditionKind::Sketch, AdapterVariant::Base), 3)?;
    let cond = ConditionMap::new(ConditionKind::Sketch, Tensor::zeros([1, 1, 256, 256]))?;
    let got = full.guidance(&cond)?.shapes();
    let want: [[usize; 4]; 4] = std::array::from_fn(|i| [full.spec().scale_channels[i], 1, 32 >> i, 32 >> i]);
    checked += 1;
    if got != want {
        bad.push(format!("full-scale: {got:?} vs {want:?}"));
    }
    drop(full);

    let mut grads = vec![("denoiser+adapter loss", guided_loss_check(11)?)];
    for kind in ConditionKind::ALL {
        grads.push((kind.name(), adapter_jvp_check(12, kind)?));
    }
    let worst = grads.iter().map(|(_, g)| g.max_rel_error).fold(0.0, f64::max);
    let grads_ok = grads.iter().all(|(_, g)| g.checks > 0 && g.max_rel_error <= 1e-4);
    let summary: Vec<String> =
        grads.iter().map(|(n, g)| format!("{n} {} checks max rel {:.1e}", g.checks, g.max_rel_error)).collect();
    verdict(
        bad.is_empty() && grads_ok,
        format!(
            "{checked} pyramid shapes match ({skipped} invalid combos skipped){}; gradients: {} (worst {worst:.1e})",
            if bad.is_empty() { String::new() } else { format!(", mismatches {bad:?}") },
            summary.join(", ")
        ),
    )
}

fn c5_param_counts() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut full_base = 0;
    for kind in ConditionKind::ALL {
        let mut prev = usize::MAX;
        for variant in [AdapterVariant::Base, AdapterVariant::Small, AdapterVariant::Tiny] {
            let spec = AdapterSpec::full_scale(kind, variant);
            let analytic = spec.param_count();
            let enumerated = Adapter::<f32>::new(spec, 0)?.params().numel();
            if analytic != enumerated {
                ok = false;
                notes.push(format!("{kind}/{}: analytic {analytic} vs enumerated {enumerated}", variant.name()));
            }
            if analytic >= prev {
                ok = false;
                notes.push(format!("{kind}/{} does not shrink", variant.name()));
            }
            prev = analytic;
            if kind == ConditionKind::Sketch {
                notes.push(format!("{}={analytic}", variant.name()));
                if variant == AdapterVariant::Base {
                    full_base = analytic;
                }
            }
        }
    }
    let in_band = (65_000_000..=90_000_000).contains(&full_base);
    verdict(ok && in_band, format!("full-scale sketch adapter {} (all kinds: enumeration equals analytic, strictly decreasing)", notes.join(" ")))
}

fn c6_one_shot() -> Result<Verdict> {
    let (den, sk, co) = desk_models(61)?;
    let sched = NoiseSchedule::default();
    let eval = small_eval(2, 62)?;
    let cs = eval.condition(ConditionKind::Sketch)?;
    let cc = eval.condition(ConditionKind::Color)?;
    let inputs = [
        AdapterInput { adapter: &sk, condition: &cs, weight: 1.0 },
        AdapterInput { adapter: &co, condition: &cc, weight: 0.5 },
    ];
    let mut rows = Vec::new();
    let mut ok = true;
    for (steps, gate) in [
        (20, GateSpec::All),
        (20, GateSpec::Stage(Stage::Late)),
        (9, GateSpec::Stage(Stage::Begin)),
        (12, GateSpec::None),
    ] {
        let sc = SamplerConfig { ddim_steps: steps, gate: gate.clone(), ..SamplerConfig::default() };
        for k in [1, 2] {
            den.reset_invocations();
            sk.reset_invocations();
            co.reset_invocations();
            sample(&den, &sched, &eval.tokens, Some(Guidance::Adapters(&inputs[..k])), &sc, 1)?;
            let d = den.invocations();
            let a = [sk.invocations(), co.invocations()];
            ok &= d == steps && a.iter().all(|&n| n <= 1);
            rows.push(format!("{steps} steps/{gate}/{k} adapters: denoiser {d}, adapters {:?}", &a[..k]));
        }
    }
    verdict(ok, rows.join("; "))
}

fn c7_efficacy(h: &Heavy) -> Result<Verdict> {
    let sc = SamplerConfig::default();
    let unguided = h.report(&[], &sc)?;
    let sketch = h.report(&[(&h.sketch, 1.0)], &sc)?;
    let color = h.report(&[(&h.color, 1.0)], &sc)?;
    let gain = sketch.edge_f1 - unguided.edge_f1;
    let ratio = color.palette_error / unguided.palette_error;
    let secs = h.meta.seconds.base + h.meta.seconds.sketch + h.meta.seconds.color_cubic;
    verdict(
        gain >= 0.15 && ratio <= 0.7 && secs <= TIME_BUDGET_S,
        format!(
            "edge-F1 sketch-guided {:.4} vs unguided {:.4} (gain {gain:.4}, need 0.15); palette color-guided {:.4} vs unguided {:.4} \
             (ratio {ratio:.3}, need 0.7); training {:.2} h",
            sketch.edge_f1,
            unguided.edge_f1,
            color.palette_error,
            unguided.palette_error,
            secs / 3600.0
        ),
    )
}

fn c8_stages(h: &Heavy) -> Result<Verdict> {
    let rep = run_stage_ablation(h.pipeline(), &h.sketch, &h.eval, &SamplerConfig::default(), SAMPLE_SEED)?;
    let cells: Vec<String> = rep.results.iter().zip(&rep.scores).map(|(r, s)| format!("{} {s:.4}", r.gate)).collect();
    verdict(rep.begin_minus_late > 0.0, format!("edge-F1 by gate: {}; begin - late {:.4}", cells.join(", "), rep.begin_minus_late))
}

fn c9_cubic_vs_uniform(h: &Heavy) -> Result<Verdict> {
    let sc = SamplerConfig::default();
    let cubic = h.report(&[(&h.color, 1.0)], &sc)?;
    let uniform = h.report(&[(&h.color_uniform, 1.0)], &sc)?;
    verdict(
        cubic.palette_error <= uniform.palette_error,
        format!(
            "palette error cubic {:.4} vs uniform {:.4} after {ADAPTER_STEPS} steps each",
            cubic.palette_error, uniform.palette_error
        ),
    )
}

fn c10_composition(h: &Heavy) -> Result<Verdict> {
    let rep = run_composition(h.pipeline(), &h.sketch, &h.color, [1.0, 1.0], &h.eval, &SamplerConfig::default(), SAMPLE_SEED)?;
    verdict(
        rep.edge_gap <= 0.1 && rep.palette_ratio <= 1.3,
        format!(
            "edge-F1 composed {:.4} vs sketch-only {:.4} (gap {:.4}, max 0.1); palette composed {:.4} vs color-only {:.4} (ratio {:.3}, max 1.3)",
            rep.composed.edge_f1,
            rep.sketch_only.edge_f1,
            rep.edge_gap,
            rep.composed.palette_error,
            rep.color_only.palette_error,
            rep.palette_ratio
        ),
    )
}

fn c11_generalization(h: &Heavy) -> Result<Verdict> {
    let dark = Dataset::generate(DatasetConfig { scenes: EVAL_SCENES, seed: EVAL_SEED + 1, style: Style::Dark, ..DatasetConfig::default() })?;
    let eval = EvalSet::from_dataset(&dark, EVAL_SCENES)?;
    let pipe = Pipeline { denoiser: &h.finetuned, ..h.pipeline() };
    let rep = generalization_report(pipe, &h.sketch, &eval, &SamplerConfig::default(), SAMPLE_SEED, FINETUNE_STEPS)?;
    let base_diff = diff_arrays(&h.base.params().to_map(), &h.finetuned.params().to_map()).len();
    verdict(
        rep.margin > 0.0 && base_diff > 0,
        format!(
            "on the dark-style fine-tune ({base_diff} arrays changed): edge-F1 guided {:.4} vs unguided {:.4} (margin {:.4})",
            rep.guided.edge_f1, rep.unguided.edge_f1, rep.margin
        ),
    )
}

fn ladapt(root: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ladapt")).args(args).env("LADAPT_ROOT", root).output()?;
    if !out.status.success() {
        bail!("ladapt {args:?} failed: {}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn c12_replay() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let train = ["--steps", "3", "--batch-size", "2", "--log-every", "0"];
    let sampler = ["--ddim-steps", "4"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("data", vec!["dataset", "gen", "--scenes", "6", "--seed", "3"]),
        ("dark", vec!["dataset", "gen", "--scenes", "4", "--style", "dark", "--seed", "4"]),
        ("base", [&["train", "base", "--dataset", "data", "--base-channels", "8"][..], &train].concat()),
        ("sketch", [&["train", "adapter", "--base", "base/base.ckpt", "--dataset", "data", "--kind", "sketch"][..], &train].concat()),
        (
            "color",
            [&["train", "adapter", "--base", "base/base.ckpt", "--dataset", "data", "--kind", "color", "--sampling", "uniform"][..], &train]
                .concat(),
        ),
        (
            "sample",
            [
                &["sample", "--base", "base/base.ckpt", "--dataset", "data", "--count", "3", "--adapter", "sketch/adapter.ckpt"][..],
                &["--adapter", "color/adapter.ckpt", "--weights", "0.8,1.2", "--gate", "stage:begin"],
                &sampler,
            ]
            .concat(),
        ),
        ("sample-eta", [&["sample", "--base", "base/base.ckpt", "--dataset", "data", "--count", "2", "--eta", "1"][..], &sampler].concat()),
        ("metrics", vec!["metrics", "--generated", "sample", "--dataset", "data"]),
        ("count", vec!["count-params", "--preset", "full-scale"]),
        (
            "stages",
            [&["ablate", "stages", "--base", "base/base.ckpt", "--adapter", "sketch/adapter.ckpt", "--eval-scenes", "2"][..], &sampler].concat(),
        ),
        (
            "injection",
            [
                &["ablate", "injection", "--base", "base/base.ckpt", "--dataset", "data", "--kind", "sketch"][..],
                &["--modes", "encoder:4,decoder:2", "--eval-scenes", "2"],
                &train,
                &sampler,
            ]
            .concat(),
        ),
        (
            "generalization",
            [
                &["ablate", "generalization", "--base", "base/base.ckpt", "--adapter", "sketch/adapter.ckpt"][..],
                &["--shifted", "dark", "--eval-scenes", "2"],
                &train,
                &sampler,
            ]
            .concat(),
        ),
    ];
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (out, args) in &runs {
        let mut a = args.clone();
        a.extend(["--out", out]);
        ladapt(root, &a)?;
        let msg = ladapt(root, &["replay", out]).unwrap_or_else(|e| format!("{e:#}"));
        if msg.contains("replay ok") {
            ok.push(*out);
        } else {
            bad.push(format!("{out}: {}", msg.trim()));
        }
    }
    verdict(bad.is_empty(), format!("{} runs replayed bitwise ({}){}", ok.len(), ok.join(", "), if bad.is_empty() { String::new() } else { format!("; failures {bad:?}") }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Seconds {
    base: f64,
    sketch: f64,
    color_cubic: f64,
    color_uniform: f64,
    finetune: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Frozen {
    steps: usize,
    before: String,
    after: String,
    diff: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Meta {
    base_hash: String,
    seconds: Seconds,
    frozen: BTreeMap<String, Frozen>,
    heldout: (f64, f64),
}

/// Models trained on the 2k-scene dataset, plus the fixed eval set.
struct Heavy {
    dir: PathBuf,
    meta: Meta,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    base: Denoiser<f32>,
    sketch: Adapter<f32>,
    color: Adapter<f32>,
    color_uniform: Adapter<f32>,
    finetuned: Denoiser<f32>,
    eval: EvalSet,
}

fn recipe() -> String {
    format!(
        "base {BASE_STEPS} {:?}; adapters {ADAPTER_STEPS} lr {ADAPTER_LR}; finetune {FINETUNE_STEPS} lr {FINETUNE_LR}; data {:?}",
        TrainConfig::base(),
        DatasetConfig::default()
    )
}

/// Hash of the recipe and every file under the core crate's src/ and presets/.
fn cache_key() -> Result<String> {
    let core = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core");
    let mut files = Vec::new();
    let mut stack = vec![core.join("src"), core.join("presets")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    h.update(recipe());
    for f in files {
        h.update(f.strip_prefix(&core).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(std::fs::read(&f)?);
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

impl Heavy {
    fn load_or_train() -> Result<Self> {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(cache_key()?);
        if std::env::var("LADAPT_ACCEPT_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        eprintln!("[acceptance] artifacts in {}", dir.display());
        let meta_path = dir.join("meta.json");
        let mut meta: Meta =
            if meta_path.is_file() { serde_json::from_slice(&std::fs::read(&meta_path)?)? } else { Meta::default() };

        let data = Dataset::generate(DatasetConfig::default())?;
        let all: Vec<usize> = (0..data.len()).collect();
        let codec = LatentCodec::new(CodecConfig::fit([&data.images(&all)?])?)?;
        let schedule = NoiseSchedule::default();

        let base_path = dir.join("base.ckpt");
        let base = if base_path.is_file() {
            Denoiser::from_checkpoint(&Checkpoint::load(&base_path)?)?
        } else {
            let cfg = TrainConfig { steps: Some(BASE_STEPS), log_every: 1000, ..TrainConfig::base() };
            let t0 = Instant::now();
            let out = train_base(&DenoiserConfig::default(), &data, &codec, &schedule, &cfg)?;
            meta.seconds.base = t0.elapsed().as_secs_f64();
            meta.heldout = (out.heldout_before, out.heldout_after);
            out.denoiser.to_checkpoint(serde_json::json!({}))?.save(&base_path)?;
            meta.base_hash = hash_arrays(&out.denoiser.params().to_map());
            meta.frozen.clear();
            save_json(&meta_path, &meta)?;
            out.denoiser
        };

        let adapter = |name: &str, kind: ConditionKind, sampling: TimestepSampling, meta: &mut Meta| -> Result<(Adapter<f32>, f64)> {
            let path = dir.join(format!("{name}.ckpt"));
            if path.is_file() {
                return Ok((Adapter::from_checkpoint(&Checkpoint::load(&path)?)?, 0.0));
            }
            let spec = AdapterSpec::for_denoiser(base.config(), kind, kind.default_variant());
            let cfg = TrainConfig {
                steps: Some(ADAPTER_STEPS),
                learning_rate: ADAPTER_LR,
                sampling,
                log_every: 1000,
                ..TrainConfig::default()
            };
            let before = hash_arrays(&base.params().to_map());
            let snapshot = base.params().to_map();
            let t0 = Instant::now();
            let out = train_adapter(&base, spec, &data, &codec, &schedule, &cfg, InjectionMode::default())?;
            let secs = t0.elapsed().as_secs_f64();
            let after_map = base.params().to_map();
            let mut diff = diff_arrays(&snapshot, &after_map);
            diff.extend(out.base_diff.iter().cloned());
            meta.frozen.insert(name.to_string(), Frozen { steps: out.steps, before, after: hash_arrays(&after_map), diff });
            out.adapter.to_checkpoint(serde_json::json!({}))?.save(&path)?;
            Ok((out.adapter, secs))
        };
        let (sketch, s) = adapter("sketch", ConditionKind::Sketch, TimestepSampling::Cubic, &mut meta)?;
        if s > 0.0 {
            meta.seconds.sketch = s;
            save_json(&meta_path, &meta)?;
        }
        let (color, s) = adapter("color_cubic", ConditionKind::Color, TimestepSampling::Cubic, &mut meta)?;
        if s > 0.0 {
            meta.seconds.color_cubic = s;
            save_json(&meta_path, &meta)?;
        }
        let (color_uniform, s) = adapter("color_uniform", ConditionKind::Color, TimestepSampling::Uniform, &mut meta)?;
        if s > 0.0 {
            meta.seconds.color_uniform = s;
            save_json(&meta_path, &meta)?;
        }

        let ft_path = dir.join("finetuned.ckpt");
        let finetuned = if ft_path.is_file() {
            Denoiser::from_checkpoint(&Checkpoint::load(&ft_path)?)?
        } else {
            let shifted = Dataset::generate(DatasetConfig { seed: 1, style: Style::Dark, ..DatasetConfig::default() })?;
            let cfg = TrainConfig {
                steps: Some(FINETUNE_STEPS),
                learning_rate: FINETUNE_LR,
                seed: 1,
                log_every: 1000,
                ..TrainConfig::base()
            };
            let t0 = Instant::now();
            let out = train_denoiser(base.clone(), &shifted, &codec, &schedule, &cfg)?;
            meta.seconds.finetune = t0.elapsed().as_secs_f64();
            out.denoiser.to_checkpoint(serde_json::json!({}))?.save(&ft_path)?;
            save_json(&meta_path, &meta)?;
            out.denoiser
        };
        eprintln!("[acceptance] training times {:?}, held-out base loss {:?}", meta.seconds, meta.heldout);

        let eval = EvalSet::from_dataset(
            &Dataset::generate(DatasetConfig { scenes: EVAL_SCENES, seed: EVAL_SEED, ..DatasetConfig::default() })?,
            EVAL_SCENES,
        )?;
        Ok(Self { dir, meta, codec, schedule, base, sketch, color, color_uniform, finetuned, eval })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline { denoiser: &self.base, codec: &self.codec, schedule: &self.schedule }
    }

    fn report(&self, adapters: &[(&Adapter<f32>, f32)], sc: &SamplerConfig) -> Result<FidelityReport> {
        let imgs = self.pipeline().generate(&self.eval, adapters, sc, SAMPLE_SEED)?;
        Ok(self.eval.evaluate(&imgs, String::new())?)
    }
}
