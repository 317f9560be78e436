//! Python bindings for the latent adapter library.
//!
//! Images cross the boundary as interleaved 8-bit RGB `bytes` plus a
//! resolution; models are opaque handles that can be saved and loaded in
//! the same checkpoint format the `ladapt` tool uses.

use std::path::PathBuf;

use latent_adapter::adapter::{Adapter as CoreAdapter, AdapterSpec, AdapterVariant, ConditionKind};
use latent_adapter::checkpoint::Checkpoint;
use latent_adapter::codec::{CodecConfig, LatentCodec};
use latent_adapter::conditions::{Dataset as CoreDataset, DatasetConfig, Style};
use latent_adapter::denoiser::{Denoiser as CoreDenoiser, DenoiserConfig, InjectionMode};
use latent_adapter::diffusion::{sample as core_sample, GateSpec, NoiseSchedule, SamplerConfig};
use latent_adapter::evalkit::{EvalSet, Pipeline};
use latent_adapter::text::TokenSequence;
use latent_adapter::training::{self, TimestepSampling, TrainConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: latent_adapter::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = latent_adapter::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(module = "latent_adapter_py", frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Generates `scenes` procedural scenes.
    #[new]
    #[pyo3(signature = (scenes = 16, seed = 0, style = "light", resolution = 128))]
    fn new(scenes: usize, seed: u64, style: &str, resolution: usize) -> PyResult<Self> {
        let style: Style = parse(style)?;
        let inner = CoreDataset::generate(DatasetConfig { scenes, resolution, seed, style }).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)?;
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn caption(&self, i: usize) -> PyResult<String> {
        let ex = self.inner.examples().get(i).ok_or_else(|| PyValueError::new_err(format!("no scene {i}")))?;
        Ok(ex.spec.caption())
    }

    /// Interleaved RGB bytes of scene `i`.
    fn image<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyBytes>> {
        let ex = self.inner.examples().get(i).ok_or_else(|| PyValueError::new_err(format!("no scene {i}")))?;
        Ok(PyBytes::new(py, &ex.rgb))
    }

    /// Condition map of `kind` for scene `i`, channel-major floats in [0, 1].
    fn condition(&self, kind: &str, i: usize) -> PyResult<Vec<f32>> {
        let kind: ConditionKind = parse(kind)?;
        Ok(self.inner.conditions(kind, &[i]).map_err(err)?.tensor().data().to_vec())
    }
}

#[pyclass(module = "latent_adapter_py", frozen)]
struct Codec {
    inner: LatentCodec,
}

#[pymethods]
impl Codec {
    /// Space-to-depth codec with an explicit affine normalization.
    #[new]
    fn new(scale: f64, offset: f64) -> PyResult<Self> {
        let cfg = CodecConfig { scale, offset, ..CodecConfig::identity() };
        Ok(Self { inner: LatentCodec::new(cfg).map_err(err)? })
    }

    /// Fits the normalization to every image of `dataset`.
    #[staticmethod]
    fn fit(dataset: &Dataset) -> PyResult<Self> {
        let idx: Vec<usize> = (0..dataset.inner.len()).collect();
        let images = dataset.inner.images(&idx).map_err(err)?;
        let cfg = CodecConfig::fit([&images]).map_err(err)?;
        Ok(Self { inner: LatentCodec::new(cfg).map_err(err)? })
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.config().scale
    }

    #[getter]
    fn offset(&self) -> f64 {
        self.inner.config().offset
    }

    /// Encodes and decodes scene `i`; true when every value comes back
    /// bit for bit.
    fn roundtrip_exact(&self, dataset: &Dataset, i: usize) -> PyResult<bool> {
        let img = dataset.inner.images(&[i]).map_err(err)?;
        let back = self.inner.decode(&self.inner.encode(&img).map_err(err)?).map_err(err)?;
        Ok(img == back)
    }
}

#[pyclass(module = "latent_adapter_py", frozen)]
struct Denoiser {
    inner: CoreDenoiser<f32>,
    codec: Option<CodecConfig>,
}

fn denoiser_config(preset: &str, base_channels: Option<usize>) -> PyResult<DenoiserConfig> {
    let mut cfg = match preset {
        "desk" => DenoiserConfig::default(),
        "tiny" => DenoiserConfig::tiny(192),
        p => return Err(PyValueError::new_err(format!("unknown denoiser preset '{p}' (desk, tiny)"))),
    };
    if let Some(c) = base_channels {
        cfg.base_channels = c;
    }
    Ok(cfg)
}

#[pymethods]
impl Denoiser {
    /// Randomly initialized denoiser.
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0, base_channels = None))]
    fn new(preset: &str, seed: u64, base_channels: Option<usize>) -> PyResult<Self> {
        let inner = CoreDenoiser::new(denoiser_config(preset, base_channels)?, seed).map_err(err)?;
        Ok(Self { inner, codec: None })
    }

    /// Loads a base checkpoint written by `ladapt train base` or [`save`].
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let codec = ckpt.metadata.get("codec").and_then(|c| serde_json::from_value(c.clone()).ok());
        Ok(Self { inner: CoreDenoiser::from_checkpoint(&ckpt).map_err(err)?, codec })
    }

    /// Saves with the codec (if known) and the default schedule, so the
    /// checkpoint is usable by `ladapt`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut meta = serde_json::Map::new();
        if let Some(c) = &self.codec {
            meta.insert("codec".into(), serde_json::to_value(c).map_err(|e| PyValueError::new_err(e.to_string()))?);
        }
        meta.insert("schedule_betas".into(), serde_json::to_value(NoiseSchedule::default().betas()).unwrap());
        let ckpt = self.inner.to_checkpoint(serde_json::Value::Object(meta)).map_err(err)?;
        ckpt.save(&path).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.params().numel()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).unwrap()
    }
}

#[pyclass(module = "latent_adapter_py", frozen)]
struct Adapter {
    inner: CoreAdapter<f32>,
    mode: InjectionMode,
}

#[pymethods]
impl Adapter {
    /// Randomly initialized adapter matching `denoiser`'s encoder.
    #[new]
    #[pyo3(signature = (denoiser, kind, variant = None, seed = 0))]
    fn new(denoiser: &Denoiser, kind: &str, variant: Option<&str>, seed: u64) -> PyResult<Self> {
        let kind: ConditionKind = parse(kind)?;
        let variant = variant.map(parse).transpose()?.unwrap_or(kind.default_variant());
        let spec = AdapterSpec::for_denoiser(denoiser.inner.config(), kind, variant);
        Ok(Self { inner: CoreAdapter::new(spec, seed).map_err(err)?, mode: InjectionMode::default() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let mode = match ckpt.metadata.get("injection").and_then(|v| v.as_str()) {
            Some(s) => parse(s)?,
            None => InjectionMode::default(),
        };
        Ok(Self { inner: CoreAdapter::from_checkpoint(&ckpt).map_err(err)?, mode })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = serde_json::json!({ "injection": self.mode.to_string() });
        self.inner.to_checkpoint(meta).map_err(err)?.save(&path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.spec().kind.name()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.spec().variant.name()
    }

    fn param_count(&self) -> usize {
        self.inner.params().numel()
    }
}

/// Analytic parameter count of an adapter preset (`desk` or `full-scale`)
/// or of the desk denoiser.
#[pyfunction]
#[pyo3(signature = (preset = "full-scale", component = "adapter", kind = "sketch", variant = "base"))]
fn count_params(preset: &str, component: &str, kind: &str, variant: &str) -> PyResult<usize> {
    let kind: ConditionKind = parse(kind)?;
    let variant: AdapterVariant = parse(variant)?;
    match (component, preset) {
        ("adapter", "full-scale") => Ok(AdapterSpec::full_scale(kind, variant).param_count()),
        ("adapter", "desk") => Ok(AdapterSpec::for_denoiser(&DenoiserConfig::default(), kind, variant).param_count()),
        ("denoiser", "desk") => Ok(DenoiserConfig::default().param_count()),
        (c, p) => Err(PyValueError::new_err(format!("no {p} preset for {c}"))),
    }
}

/// KS distances of the cubic timestep draw: `(continuous, rounded)`.
#[pyfunction]
#[pyo3(signature = (draws = 1_000_000, t_max = 1000, seed = 0))]
fn cubic_ks(draws: usize, t_max: usize, seed: u64) -> (f64, f64) {
    let ks = training::cubic_ks_distance(draws, t_max, seed);
    (ks.continuous, ks.rounded)
}

fn train_config(steps: usize, lr: f32, batch_size: usize, seed: u64, base: bool) -> TrainConfig {
    let defaults = if base { TrainConfig::base() } else { TrainConfig::default() };
    TrainConfig { steps: Some(steps), learning_rate: lr, batch_size, seed, ..defaults }
}

/// Trains a base denoiser; returns it with the held-out loss before and
/// after training.
#[pyfunction]
#[pyo3(signature = (dataset, codec, steps, lr = 3e-4, batch_size = 8, seed = 0, preset = "desk", base_channels = None))]
#[allow(clippy::too_many_arguments)]
fn train_base(
    py: Python<'_>,
    dataset: &Dataset,
    codec: &Codec,
    steps: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
    preset: &str,
    base_channels: Option<usize>,
) -> PyResult<(Denoiser, f64, f64)> {
    let config = denoiser_config(preset, base_channels)?;
    let cfg = train_config(steps, lr, batch_size, seed, true);
    let out = py
        .detach(|| training::train_base(&config, &dataset.inner, &codec.inner, &NoiseSchedule::default(), &cfg))
        .map_err(err)?;
    let d = Denoiser { inner: out.denoiser, codec: Some(codec.inner.config().clone()) };
    Ok((d, out.heldout_before, out.heldout_after))
}

/// Trains an adapter against a frozen denoiser.
#[pyfunction]
#[pyo3(signature = (denoiser, dataset, codec, kind, steps, lr = 3e-4, variant = None, sampling = "cubic", batch_size = 8, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_adapter(
    py: Python<'_>,
    denoiser: &Denoiser,
    dataset: &Dataset,
    codec: &Codec,
    kind: &str,
    steps: usize,
    lr: f32,
    variant: Option<&str>,
    sampling: &str,
    batch_size: usize,
    seed: u64,
) -> PyResult<Adapter> {
    let kind: ConditionKind = parse(kind)?;
    let variant = variant.map(parse).transpose()?.unwrap_or(kind.default_variant());
    let sampling: TimestepSampling = parse(sampling)?;
    let spec = AdapterSpec::for_denoiser(denoiser.inner.config(), kind, variant);
    let cfg = TrainConfig { sampling, ..train_config(steps, lr, batch_size, seed, false) };
    let mode = InjectionMode::default();
    let out = py
        .detach(|| {
            training::train_adapter(&denoiser.inner, spec, &dataset.inner, &codec.inner, &NoiseSchedule::default(), &cfg, mode)
        })
        .map_err(err)?;
    Ok(Adapter { inner: out.adapter, mode })
}

fn sampler_config(ddim_steps: usize, gate: &str) -> PyResult<SamplerConfig> {
    let gate: GateSpec = parse(gate)?;
    Ok(SamplerConfig { ddim_steps, gate, ..SamplerConfig::default() })
}

/// Unguided samples for free-form captions, as RGB bytes.
#[pyfunction]
#[pyo3(signature = (denoiser, codec, captions, ddim_steps = 50, seed = 0))]
fn sample<'py>(
    py: Python<'py>,
    denoiser: &Denoiser,
    codec: &Codec,
    captions: Vec<String>,
    ddim_steps: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let tokens: Vec<TokenSequence> =
        captions.iter().map(|c| TokenSequence::from_caption(c)).collect::<latent_adapter::Result<_>>().map_err(err)?;
    let cfg = sampler_config(ddim_steps, "all")?;
    let img = py
        .detach(|| {
            let z = core_sample(&denoiser.inner, &NoiseSchedule::default(), &tokens, None, &cfg, seed)?;
            codec.inner.decode(&z)
        })
        .map_err(err)?;
    Ok((0..tokens.len()).map(|i| PyBytes::new(py, &img.to_rgb8(i))).collect())
}

/// Samples the first `count` scenes of `dataset`, guided by `adapters`
/// with their conditions taken from the dataset, and scores the result.
/// Returns the images and a dict of mean edge F1, palette error and
/// segmentation accuracy.
#[pyfunction]
#[pyo3(signature = (denoiser, codec, dataset, count, adapters = vec![], weights = None, ddim_steps = 50, gate = "all", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    denoiser: &Denoiser,
    codec: &Codec,
    dataset: &Dataset,
    count: usize,
    adapters: Vec<PyRef<'py, Adapter>>,
    weights: Option<Vec<f32>>,
    ddim_steps: usize,
    gate: &str,
    seed: u64,
) -> PyResult<(Vec<Bound<'py, PyBytes>>, std::collections::BTreeMap<&'static str, f64>)> {
    let weights = weights.unwrap_or_else(|| vec![1.0; adapters.len()]);
    if weights.len() != adapters.len() {
        return Err(PyValueError::new_err(format!("{} weights for {} adapters", weights.len(), adapters.len())));
    }
    let cfg = sampler_config(ddim_steps, gate)?;
    let pairs: Vec<(&CoreAdapter<f32>, f32)> = adapters.iter().map(|a| &a.inner).zip(weights).collect();
    let schedule = NoiseSchedule::default();
    let (img, report) = py
        .detach(|| {
            let eval = EvalSet::from_dataset(&dataset.inner, count)?;
            let pipe = Pipeline { denoiser: &denoiser.inner, codec: &codec.inner, schedule: &schedule };
            let img = pipe.generate(&eval, &pairs, &cfg, seed)?;
            let report = eval.evaluate(&img, String::new())?;
            Ok::<_, latent_adapter::Error>((img, report))
        })
        .map_err(err)?;
    let images = (0..count).map(|i| PyBytes::new(py, &img.to_rgb8(i))).collect();
    let metrics = [
        ("edge_f1", report.edge_f1),
        ("palette_error", report.palette_error),
        ("seg_accuracy", report.seg_accuracy),
    ]
    .into_iter()
    .collect();
    Ok((images, metrics))
}

#[pymodule]
fn latent_adapter_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Codec>()?;
    m.add_class::<Denoiser>()?;
    m.add_class::<Adapter>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(cubic_ks, m)?)?;
    m.add_function(wrap_pyfunction!(train_base, m)?)?;
    m.add_function(wrap_pyfunction!(train_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
