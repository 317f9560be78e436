use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use latent_adapter::adapter::{Adapter, AdapterSpec, AdapterVariant, ConditionKind, ConditionMap};
use latent_adapter::checkpoint::{write_atomic, Checkpoint};
use latent_adapter::codec::{CodecConfig, ImageTensor, LatentCodec};
use latent_adapter::conditions::{Dataset, DatasetConfig, Style};
use latent_adapter::denoiser::{Denoiser, DenoiserConfig, InjectionMode};
use latent_adapter::diffusion::{sample, AdapterInput, Guidance, NoiseSchedule, SamplerConfig};
use latent_adapter::evalkit::{
    config_hash, run_generalization_check, run_injection_ablation, run_stage_ablation, save_reports, save_sheet, EvalSet,
    FidelityReport, Pipeline,
};
use latent_adapter::imageio::{load_rgb, save_rgb};
use latent_adapter::tensor::Tensor;
use latent_adapter::text::TokenSequence;
use latent_adapter::training::{train_adapter, train_denoiser, TimestepSampling, TrainConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::{derive_seed, Run};

pub fn dispatch(run: &mut Run, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Dataset(DatasetCmd::Gen(a)) => dataset_gen(run, a),
        Command::Train(TrainCmd::Base(a)) => train_base(run, a),
        Command::Train(TrainCmd::Adapter(a)) => train_adapter_cmd(run, a),
        Command::Sample(a) => sample_cmd(run, a),
        Command::Ablate(AblateCmd::Stages(a)) => ablate_stages(run, a),
        Command::Ablate(AblateCmd::Injection(a)) => ablate_injection(run, a),
        Command::Ablate(AblateCmd::Generalization(a)) => ablate_generalization(run, a),
        Command::Metrics(a) => metrics(run, a),
        Command::CountParams(a) => count_params(run, a),
        Command::Replay(_) => bail!("replay is handled before dispatch"),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| anyhow!("{e}"))
}

fn write_json<T: Serialize>(run: &mut Run, rel: &str, value: &T) -> Result<()> {
    let path = run.output(rel);
    write_atomic(&path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Metadata keys of base checkpoints besides the architecture.
const CODEC_KEY: &str = "codec";
const BETAS_KEY: &str = "schedule_betas";

/// Loads a base checkpoint with the codec and schedule it was trained with.
pub fn load_base(path: &Path) -> Result<(Denoiser<f32>, LatentCodec, NoiseSchedule)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let codec: CodecConfig = serde_json::from_value(
        ckpt.metadata.get(CODEC_KEY).cloned().ok_or_else(|| anyhow!("{} has no codec metadata", path.display()))?,
    )?;
    let betas: Vec<f64> = serde_json::from_value(
        ckpt.metadata.get(BETAS_KEY).cloned().ok_or_else(|| anyhow!("{} has no schedule metadata", path.display()))?,
    )?;
    Ok((Denoiser::from_checkpoint(&ckpt)?, LatentCodec::new(codec)?, NoiseSchedule::from_betas(betas)?))
}

fn base_checkpoint(d: &Denoiser<f32>, codec: &LatentCodec, schedule: &NoiseSchedule, extra: Value) -> Result<Checkpoint> {
    let mut meta = json!({ CODEC_KEY: codec.config(), BETAS_KEY: schedule.betas() });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    Ok(d.to_checkpoint(meta)?)
}

/// Loads an adapter checkpoint and the injection mode it was trained with.
pub fn load_adapter(path: &Path) -> Result<(Adapter<f32>, InjectionMode)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mode = match ckpt.metadata.get("injection").and_then(Value::as_str) {
        Some(s) => parse(s)?,
        None => InjectionMode::default(),
    };
    Ok((Adapter::from_checkpoint(&ckpt)?, mode))
}

fn train_config(run: &Run, o: &TrainOpts, defaults: TrainConfig, label: &str) -> Result<TrainConfig> {
    let cfg = &run.cfg;
    let sampling: String = cfg.pick(o.sampling.clone(), "sampling", sampling_name(defaults.sampling).to_string())?;
    let weighting: String = cfg.pick(o.weighting.clone(), "weighting", defaults.weighting.name().to_string())?;
    let tc = TrainConfig {
        steps: cfg.opt(o.steps, "steps")?.or(defaults.steps),
        epochs: cfg.pick(o.epochs, "epochs", defaults.epochs)?,
        batch_size: cfg.pick(o.batch_size, "batch-size", defaults.batch_size)?,
        learning_rate: cfg.pick(o.lr, "lr", defaults.learning_rate)?,
        sampling: parse(&sampling)?,
        log_every: cfg.pick(o.log_every, "log-every", 500)?,
        seed: derive_seed(run.seed, label),
        adam: defaults.adam,
        weighting: parse(&weighting)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn sampling_name(s: TimestepSampling) -> &'static str {
    match s {
        TimestepSampling::Uniform => "uniform",
        TimestepSampling::Cubic => "cubic",
    }
}

/// Adapter training defaults.
pub fn adapter_train_defaults() -> TrainConfig {
    TrainConfig { learning_rate: 3e-4, ..TrainConfig::default() }
}

fn sampler_config(run: &Run, o: &SamplerOpts) -> Result<SamplerConfig> {
    let d = SamplerConfig::default();
    let gate: String = run.cfg.pick(o.gate.clone(), "gate", d.gate.to_string())?;
    Ok(SamplerConfig {
        ddim_steps: run.cfg.pick(o.ddim_steps, "ddim-steps", d.ddim_steps)?,
        eta: run.cfg.pick(o.eta, "eta", d.eta)?,
        gate: parse(&gate)?,
        ..d
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn kind_and_variant(run: &Run, kind: &Option<String>, variant: &Option<String>) -> Result<(ConditionKind, AdapterVariant)> {
    let kind: Option<String> = run.cfg.opt(kind.clone(), "kind")?;
    let kind: ConditionKind = parse(&kind.context("--kind is required")?)?;
    let variant: Option<String> = run.cfg.opt(variant.clone(), "variant")?;
    let variant = match variant {
        Some(v) => parse(&v)?,
        None => kind.default_variant(),
    };
    Ok((kind, variant))
}

fn dataset_gen(run: &mut Run, a: &DatasetGenArgs) -> Result<()> {
    let d = DatasetConfig::default();
    let style: String = run.cfg.pick(a.style.clone(), "style", "light".into())?;
    let cfg = DatasetConfig {
        scenes: run.cfg.pick(a.scenes, "scenes", d.scenes)?,
        resolution: run.cfg.pick(a.resolution, "resolution", d.resolution)?,
        seed: derive_seed(run.seed, "dataset"),
        style: parse::<Style>(&style)?,
    };
    let ds = Dataset::generate(cfg)?;
    ds.save(&run.out)?;
    for rel in ["manifest.json", "scenes.jsonl", "images", "conditions"] {
        run.output(rel);
    }
    println!("wrote {} scenes to {}", ds.len(), run.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    final_loss: f64,
    heldout_before: Option<f64>,
    heldout_after: Option<f64>,
    config: &'a TrainConfig,
}

fn train_base(run: &mut Run, a: &TrainBaseArgs) -> Result<()> {
    let ds_path = run.required_input(a.dataset.clone(), "dataset")?;
    let ds = load_dataset(&ds_path)?;
    let tc = train_config(run, &a.train, TrainConfig { steps: Some(20_000), ..TrainConfig::base() }, "train-base")?;
    let init: Option<PathBuf> = run.cfg.opt(a.init.clone(), "init")?;
    let (denoiser, codec, schedule) = match init {
        Some(p) => {
            let p = run.input(&p)?;
            load_base(&p)?
        }
        None => {
            let all: Vec<usize> = (0..ds.len()).collect();
            let codec = LatentCodec::new(CodecConfig::fit([&ds.images(&all)?])?)?;
            let width = run.cfg.pick(a.base_channels, "base-channels", DenoiserConfig::default().base_channels)?;
            let dc = DenoiserConfig { base_channels: width, ..DenoiserConfig::default() };
            (Denoiser::new(dc, derive_seed(run.seed, "init-base"))?, codec, NoiseSchedule::default())
        }
    };
    let outcome = train_denoiser(denoiser, &ds, &codec, &schedule, &tc)?;
    let ckpt = base_checkpoint(&outcome.denoiser, &codec, &schedule, json!({ "train": tc }))?;
    ckpt.save(&run.output("base.ckpt"))?;
    outcome.curve.save_csv(&run.output("loss.csv"))?;
    let summary = TrainSummary {
        steps: outcome.curve.steps.len(),
        final_loss: outcome.curve.tail_mean(100),
        heldout_before: Some(outcome.heldout_before),
        heldout_after: Some(outcome.heldout_after),
        config: &tc,
    };
    write_json(run, "summary.json", &summary)?;
    println!(
        "base trained for {} steps; held-out loss {:.4} -> {:.4}",
        summary.steps, outcome.heldout_before, outcome.heldout_after
    );
    Ok(())
}

fn train_adapter_cmd(run: &mut Run, a: &TrainAdapterArgs) -> Result<()> {
    let base_path = run.required_input(a.base.clone(), "base")?;
    let (base, codec, schedule) = load_base(&base_path)?;
    let ds = load_dataset(&run.required_input(a.dataset.clone(), "dataset")?)?;
    let (kind, variant) = kind_and_variant(run, &a.kind, &a.variant)?;
    let mode: String = run.cfg.pick(a.injection.clone(), "injection", InjectionMode::default().to_string())?;
    let mode: InjectionMode = parse(&mode)?;
    let tc = train_config(run, &a.train, adapter_train_defaults(), "train-adapter")?;
    let spec = AdapterSpec::for_denoiser(base.config(), kind, variant);
    let outcome = train_adapter(&base, spec, &ds, &codec, &schedule, &tc, mode)?;
    let meta = json!({
        "kind": kind.name(),
        "variant": variant.name(),
        "injection": mode.to_string(),
        "base_hash": Checkpoint::load(&base_path)?.content_hash(),
        "train": tc,
    });
    outcome.adapter.to_checkpoint(meta)?.save(&run.output("adapter.ckpt"))?;
    outcome.curve.save_csv(&run.output("loss.csv"))?;
    let summary = TrainSummary {
        steps: outcome.steps,
        final_loss: outcome.curve.tail_mean(100),
        heldout_before: None,
        heldout_after: None,
        config: &tc,
    };
    write_json(run, "summary.json", &summary)?;
    println!("{kind} adapter ({}) trained for {} steps; base unchanged", variant.name(), outcome.steps);
    Ok(())
}

fn save_images(run: &mut Run, imgs: &ImageTensor) -> Result<()> {
    let [b, _, h, w] = imgs.tensor().shape();
    let dir = run.output("images");
    for i in 0..b {
        save_rgb(&dir.join(format!("{i:05}.png")), &imgs.to_rgb8(i), w, h)?;
    }
    Ok(())
}

/// Reads a condition image as a `kind` map, averaging RGB for one-channel kinds.
fn load_condition(path: &Path, kind: ConditionKind) -> Result<ConditionMap> {
    let (rgb, w, h) = load_rgb(path)?;
    let plane = w * h;
    let data: Vec<f32> = if kind.channels() == 3 {
        (0..3).flat_map(|c| (0..plane).map(move |p| (c, p))).map(|(c, p)| rgb[p * 3 + c] as f32 / 255.0).collect()
    } else {
        (0..plane).map(|p| (rgb[3 * p] as f32 + rgb[3 * p + 1] as f32 + rgb[3 * p + 2] as f32) / (3.0 * 255.0)).collect()
    };
    Ok(ConditionMap::new(kind, Tensor::from_vec([1, kind.channels(), h, w], data)?)?)
}

fn sample_cmd(run: &mut Run, a: &SampleArgs) -> Result<()> {
    let (base, codec, schedule) = load_base(&run.required_input(a.base.clone(), "base")?)?;
    let paths: Vec<PathBuf> = run.cfg.list(a.adapter.clone(), "adapter")?;
    let mut adapters = Vec::new();
    let mut modes = Vec::new();
    for p in &paths {
        let (ad, mode) = load_adapter(&run.input(p)?)?;
        adapters.push(ad);
        modes.push(mode);
    }
    let mut weights: Vec<f32> = run.cfg.list(a.weights.clone(), "weights")?;
    if weights.is_empty() {
        weights = vec![1.0; adapters.len()];
    }
    ensure!(
        weights.len() == adapters.len(),
        "{} weights for {} adapters (pass one weight per --adapter)",
        weights.len(),
        adapters.len()
    );
    ensure!(modes.windows(2).all(|w| w[0] == w[1]), "adapters were trained with different injection modes");
    let mut sc = sampler_config(run, &a.sampler)?;
    sc.injection = modes.first().copied().unwrap_or_default();
    let seed = derive_seed(run.seed, "sample");
    let guided: Vec<(&Adapter<f32>, f32)> = adapters.iter().zip(&weights).map(|(a, &w)| (a, w)).collect();

    let prompts: Vec<String> = run.cfg.list(a.prompt.clone(), "prompt")?;
    let dataset: Option<PathBuf> = run.cfg.opt(a.dataset.clone(), "dataset")?;
    let imgs = if !prompts.is_empty() {
        let cond_paths: Vec<PathBuf> = run.cfg.list(a.condition.clone(), "condition")?;
        ensure!(
            cond_paths.len() == adapters.len(),
            "prompt mode needs one --condition image per --adapter ({} given for {})",
            cond_paths.len(),
            adapters.len()
        );
        let n = prompts.len();
        let mut conds = Vec::new();
        for (p, ad) in cond_paths.iter().zip(&adapters) {
            let c = load_condition(&run.input(p)?, ad.spec().kind)?;
            conds.push(ConditionMap::stack(&vec![&c; n])?);
        }
        let tokens: Vec<TokenSequence> = prompts.iter().map(|p| TokenSequence::from_caption(p)).collect::<Result<_, _>>()?;
        let inputs: Vec<AdapterInput> = guided
            .iter()
            .zip(&conds)
            .map(|(&(adapter, weight), condition)| AdapterInput { adapter, condition, weight })
            .collect();
        let guidance = (!inputs.is_empty()).then_some(Guidance::Adapters(&inputs));
        let z = sample(&base, &schedule, &tokens, guidance, &sc, seed)?;
        let img = codec.decode(&z)?;
        ImageTensor::new(img.tensor().map(|v| v.clamp(0.0, 1.0)))?
    } else if let Some(d) = dataset {
        let ds = load_dataset(&run.input(&d)?)?;
        let n = run.cfg.pick(a.count, "count", 8usize)?.min(ds.len());
        let eval = EvalSet::from_dataset(&ds, n)?;
        let pipe = Pipeline { denoiser: &base, codec: &codec, schedule: &schedule };
        let imgs = pipe.generate(&eval, &guided, &sc, seed)?;
        let report = eval.evaluate(&imgs, config_hash(&(&sc, seed, &weights)))?;
        write_json(run, "metrics.json", &report)?;
        println!(
            "edge F1 {:.4}  palette error {:.4}  seg accuracy {:.4}",
            report.edge_f1, report.palette_error, report.seg_accuracy
        );
        imgs
    } else {
        bail!("give either --prompt or --dataset");
    };
    save_images(run, &imgs)?;
    save_sheet(&run.output("sheet.png"), &[&imgs], imgs.batch())?;
    println!("wrote {} samples to {}", imgs.batch(), run.out.display());
    Ok(())
}

/// Evaluation scenes: a given dataset, or `n` fresh scenes of `style`.
fn eval_set(run: &mut Run, o: &EvalOpts, style: Style, label: &str) -> Result<EvalSet> {
    let n = run.cfg.pick(o.eval_scenes, "eval-scenes", 64usize)?;
    let given: Option<PathBuf> = run.cfg.opt(o.eval_dataset.clone(), "eval-dataset")?;
    let ds = match given {
        Some(p) => load_dataset(&run.input(&p)?)?,
        None => Dataset::generate(DatasetConfig { scenes: n, seed: derive_seed(run.seed, label), style, ..DatasetConfig::default() })?,
    };
    Ok(EvalSet::from_dataset(&ds, n.min(ds.len()))?)
}

fn print_report(label: &str, r: &FidelityReport) {
    println!("{label:14} edge F1 {:.4}  palette error {:.4}  seg accuracy {:.4}", r.edge_f1, r.palette_error, r.seg_accuracy);
}

fn ablate_stages(run: &mut Run, a: &StagesArgs) -> Result<()> {
    let (base, codec, schedule) = load_base(&run.required_input(a.base.clone(), "base")?)?;
    let (adapter, mode) = load_adapter(&run.required_input(a.adapter.clone(), "adapter")?)?;
    let eval = eval_set(run, &a.eval, Style::Light, "eval")?;
    let sc = SamplerConfig { injection: mode, ..sampler_config(run, &a.sampler)? };
    let pipe = Pipeline { denoiser: &base, codec: &codec, schedule: &schedule };
    let report = run_stage_ablation(pipe, &adapter, &eval, &sc, derive_seed(run.seed, "sample"))?;
    let rows: Vec<(&str, &FidelityReport)> = report.results.iter().map(|r| (r.gate.as_str(), &r.report)).collect();
    for (label, r) in &rows {
        print_report(label, r);
    }
    println!("begin - late score margin {:.4}", report.begin_minus_late);
    save_reports(&run.out, "stages", &report, &rows)?;
    run.output("stages.json");
    run.output("stages.csv");
    Ok(())
}

fn ablate_injection(run: &mut Run, a: &InjectionArgs) -> Result<()> {
    let (base, codec, schedule) = load_base(&run.required_input(a.base.clone(), "base")?)?;
    let ds = load_dataset(&run.required_input(a.dataset.clone(), "dataset")?)?;
    let (kind, variant) = kind_and_variant(run, &a.kind, &a.variant)?;
    let modes: Vec<String> = run.cfg.list(a.modes.clone(), "modes")?;
    let modes: Vec<InjectionMode> =
        if modes.is_empty() { InjectionMode::all() } else { modes.iter().map(|m| parse(m)).collect::<Result<_>>()? };
    let tc = train_config(run, &a.train, adapter_train_defaults(), "train-adapter")?;
    let eval = eval_set(run, &a.eval, Style::Light, "eval")?;
    let sc = sampler_config(run, &a.sampler)?;
    let spec = AdapterSpec::for_denoiser(base.config(), kind, variant);
    let pipe = Pipeline { denoiser: &base, codec: &codec, schedule: &schedule };
    let report = run_injection_ablation(pipe, &spec, &ds, &eval, &modes, &tc, &sc, derive_seed(run.seed, "sample"))?;
    let labels: Vec<String> = report.results.iter().map(|r| r.mode.to_string()).collect();
    let mut rows: Vec<(&str, &FidelityReport)> = vec![("unguided", &report.unguided)];
    rows.extend(labels.iter().map(String::as_str).zip(report.results.iter().map(|r| &r.report)));
    for (label, r) in &rows {
        print_report(label, r);
    }
    save_reports(&run.out, "injection", &report, &rows)?;
    run.output("injection.json");
    run.output("injection.csv");
    Ok(())
}

fn ablate_generalization(run: &mut Run, a: &GeneralizationArgs) -> Result<()> {
    let (base, codec, schedule) = load_base(&run.required_input(a.base.clone(), "base")?)?;
    let (adapter, mode) = load_adapter(&run.required_input(a.adapter.clone(), "adapter")?)?;
    let given: Option<PathBuf> = run.cfg.opt(a.shifted.clone(), "shifted")?;
    let shifted = match given {
        Some(p) => load_dataset(&run.input(&p)?)?,
        None => Dataset::generate(DatasetConfig {
            scenes: run.cfg.pick(a.shifted_scenes, "shifted-scenes", 2000usize)?,
            seed: derive_seed(run.seed, "shifted"),
            style: Style::Dark,
            ..DatasetConfig::default()
        })?,
    };
    let style = shifted.config().style;
    let tc = train_config(run, &a.train, TrainConfig { steps: Some(2000), learning_rate: 1e-4, ..TrainConfig::base() }, "finetune")?;
    let eval = eval_set(run, &a.eval, style, "eval-shifted")?;
    let sc = SamplerConfig { injection: mode, ..sampler_config(run, &a.sampler)? };
    let pipe = Pipeline { denoiser: &base, codec: &codec, schedule: &schedule };
    let (report, tuned) = run_generalization_check(pipe, &adapter, &shifted, &eval, &tc, &sc, derive_seed(run.seed, "sample"))?;
    base_checkpoint(&tuned, &codec, &schedule, json!({ "finetune": tc }))?.save(&run.output("finetuned.ckpt"))?;
    print_report("guided", &report.guided);
    print_report("unguided", &report.unguided);
    println!("guided - unguided score margin {:.4}", report.margin);
    save_reports(&run.out, "generalization", &report, &[("guided", &report.guided), ("unguided", &report.unguided)])?;
    run.output("generalization.json");
    run.output("generalization.csv");
    Ok(())
}

fn metrics(run: &mut Run, a: &MetricsArgs) -> Result<()> {
    let gen = run.required_input(a.generated.clone(), "generated")?;
    let ds = load_dataset(&run.required_input(a.dataset.clone(), "dataset")?)?;
    let dir = if gen.join("images").is_dir() { gen.join("images") } else { gen };
    let available = (0..).take_while(|i| dir.join(format!("{i:05}.png")).is_file()).count();
    ensure!(available > 0, "no generated images named 00000.png, ... in {}", dir.display());
    let n = run.cfg.pick(a.count, "count", available)?;
    ensure!(n <= available, "{n} images requested, {available} found");
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let (rgb, w, h) = load_rgb(&dir.join(format!("{i:05}.png")))?;
        items.push(ImageTensor::from_rgb8(&rgb, h, w)?);
    }
    let imgs = ImageTensor::stack(&items.iter().collect::<Vec<_>>())?;
    let eval = EvalSet::from_dataset(&ds, n)?;
    let report = eval.evaluate(&imgs, String::new())?;
    print_report("generated", &report);
    save_reports(&run.out, "metrics", &report, &[("generated", &report)])?;
    run.output("metrics.json");
    run.output("metrics.csv");
    Ok(())
}

fn count_params(run: &mut Run, a: &CountArgs) -> Result<()> {
    let preset: String = run.cfg.pick(a.preset.clone(), "preset", "desk".into())?;
    let component: String = run.cfg.pick(a.component.clone(), "component", "adapter".into())?;
    let kind: ConditionKind = parse(&run.cfg.pick(a.kind.clone(), "kind", "sketch".into())?)?;
    let variant: AdapterVariant = parse(&run.cfg.pick(a.variant.clone(), "variant", "base".into())?)?;
    let count = match (component.as_str(), preset.as_str()) {
        ("adapter", "full-scale") => AdapterSpec::full_scale(kind, variant).param_count(),
        ("adapter", "desk") => AdapterSpec::for_denoiser(&DenoiserConfig::default(), kind, variant).param_count(),
        ("denoiser", "desk") => DenoiserConfig::default().param_count(),
        ("denoiser", "full-scale") => bail!("there is no full-scale denoiser preset"),
        ("adapter" | "denoiser", p) => bail!("unknown preset '{p}' (full-scale, desk)"),
        (c, _) => bail!("unknown component '{c}' (adapter, denoiser)"),
    };
    println!("{count}");
    write_json(
        run,
        "count.json",
        &json!({ "preset": preset, "component": component, "kind": kind.name(), "variant": variant.name(), "parameters": count }),
    )
}
