//! Condition adapter: condition map -> multi-scale guidance pyramid, and the
//! weighted composition of several pyramids.
//!
//! Pipeline: pixel unshuffle (factor 8), then four scales. Each scale is one
//! 3×3 convolution (which also changes the channel count) followed by two
//! residual blocks; scales are joined by stride-2 3×3 convolutions. The
//! feature after each scale's blocks is emitted as that scale's guidance.
//!
//! Residual blocks are bottlenecked: `x + conv3x3(width -> C)(silu(conv3x3(C -> width)(x)))`.
//! The variants differ only in `width`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{DenoiserConfig, GuidancePyramid, NUM_SCALES};
use crate::error::{Error, Result};
use crate::graph::{pixel_unshuffle_cnhw, Graph, Var};
use crate::nn::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Sketch,
    Color,
    Segmentation,
    Depth,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [Self::Sketch, Self::Color, Self::Segmentation, Self::Depth];

    pub fn channels(self) -> usize {
        match self {
            Self::Sketch | Self::Depth => 1,
            Self::Color | Self::Segmentation => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sketch => "sketch",
            Self::Color => "color",
            Self::Segmentation => "segmentation",
            Self::Depth => "depth",
        }
    }

    /// The color palette defaults to the small variant; everything else to base.
    pub fn default_variant(self) -> AdapterVariant {
        match self {
            Self::Color => AdapterVariant::Small,
            _ => AdapterVariant::Base,
        }
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown condition kind '{s}'")))
    }
}

impl std::fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Condition input at image resolution, `[B, ch, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    kind: ConditionKind,
    data: Tensor<f32>,
}

impl ConditionMap {
    pub fn new(kind: ConditionKind, data: Tensor<f32>) -> Result<Self> {
        let ch = data.shape()[1];
        if ch != kind.channels() {
            return Err(Error::Shape(format!("{kind} condition needs {} channels, got {ch}", kind.channels())));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("{kind} condition values must lie in [0, 1]")));
        }
        if kind == ConditionKind::Sketch && data.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("sketch values must be 0 or 1".into()));
        }
        Ok(Self { kind, data })
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
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

    pub fn item(&self, i: usize) -> Self {
        Self { kind: self.kind, data: self.data.select_axis0(&[i]) }
    }

    pub fn stack(items: &[&ConditionMap]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Invalid("no conditions to stack".into()))?;
        if items.iter().any(|c| c.kind != first.kind) {
            return Err(Error::Invalid("cannot stack conditions of different kinds".into()));
        }
        let parts: Vec<&Tensor<f32>> = items.iter().map(|c| &c.data).collect();
        Ok(Self { kind: first.kind, data: Tensor::concat0(&parts)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Base,
    Small,
    Tiny,
}

impl AdapterVariant {
    /// Width compression relative to the base variant.
    pub fn divisor(self) -> usize {
        match self {
            Self::Base => 1,
            Self::Small => 4,
            Self::Tiny => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Small => "small",
            Self::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "small" => Ok(Self::Small),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Invalid(format!("unknown adapter variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: ConditionKind,
    pub variant: AdapterVariant,
    /// Output channels per scale; equal to the denoiser's scale channels.
    pub scale_channels: [usize; NUM_SCALES],
    /// Residual-block widths of the base variant.
    pub base_widths: [usize; NUM_SCALES],
    pub unshuffle: usize,
}

/// Channel preset read from a JSON preset file.
#[derive(Clone, Debug, Deserialize)]
struct Preset {
    scale_channels: [usize; NUM_SCALES],
    width_ratio: usize,
    unshuffle: usize,
}

const FULL_SCALE_PRESET: &str = include_str!("../presets/full_scale.json");

impl AdapterSpec {
    /// Adapter matching a denoiser; base widths equal the scale channels.
    pub fn for_denoiser(cfg: &DenoiserConfig, kind: ConditionKind, variant: AdapterVariant) -> Self {
        let ch = cfg.scale_channels();
        Self { kind, variant, scale_channels: ch, base_widths: ch, unshuffle: 8 }
    }

    /// Channel preset matching a Stable-Diffusion-sized UNet encoder.
    pub fn full_scale(kind: ConditionKind, variant: AdapterVariant) -> Self {
        let p: Preset = serde_json::from_str(FULL_SCALE_PRESET).expect("bundled preset parses");
        Self {
            kind,
            variant,
            scale_channels: p.scale_channels,
            base_widths: p.scale_channels.map(|c| c / p.width_ratio),
            unshuffle: p.unshuffle,
        }
    }

    pub fn widths(&self) -> [usize; NUM_SCALES] {
        self.base_widths.map(|w| w / self.variant.divisor())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.variant.divisor();
        if self.base_widths.iter().any(|&w| w == 0 || w % d != 0) {
            return Err(Error::Invalid(format!(
                "base widths {:?} do not divide into positive {} widths",
                self.base_widths,
                self.variant.name()
            )));
        }
        if self.scale_channels.contains(&0) || self.unshuffle == 0 {
            return Err(Error::Invalid("adapter channels and unshuffle factor must be positive".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.kind.channels() * self.unshuffle * self.unshuffle
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let ch = self.scale_channels;
        let wd = self.widths();
        let mut n = 0;
        let mut prev = self.input_channels();
        for i in 0..NUM_SCALES {
            if i > 0 {
                n += Conv::count(prev, prev, 3);
            }
            n += Conv::count(prev, ch[i], 3);
            n += 2 * (Conv::count(ch[i], wd[i], 3) + Conv::count(wd[i], ch[i], 3));
            prev = ch[i];
        }
        n
    }
}

#[derive(Clone, Debug)]
struct AdapterBlock {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct AdapterScale {
    down: Option<Conv>,
    conv: Conv,
    blocks: [AdapterBlock; 2],
}

#[derive(Debug)]
pub struct Adapter<T: Real> {
    spec: AdapterSpec,
    params: ParamStore<T>,
    scales: Vec<AdapterScale>,
    invocations: AtomicUsize,
}

impl<T: Real> Clone for Adapter<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            scales: self.scales.clone(),
            invocations: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> Adapter<T> {
    pub fn new(spec: AdapterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut scales = Vec::new();
        {
            let mut init = Init::new(&mut params, &mut rng);
            let mut prev = spec.input_channels();
            let wd = spec.widths();
            for i in 0..NUM_SCALES {
                let s = i + 1;
                let down = (i > 0).then(|| Conv::new(&mut init, &format!("adapter.down{i}"), prev, prev, 3, 2));
                let c = spec.scale_channels[i];
                let conv = Conv::new(&mut init, &format!("adapter.scale{s}.conv"), prev, c, 3, 1);
                let blocks = [1, 2].map(|j| AdapterBlock {
                    conv1: Conv::new(&mut init, &format!("adapter.scale{s}.block{j}.conv1"), c, wd[i], 3, 1),
                    conv2: Conv::new(&mut init, &format!("adapter.scale{s}.block{j}.conv2"), wd[i], c, 3, 1),
                });
                scales.push(AdapterScale { down, conv, blocks });
                prev = c;
            }
        }
        Ok(Self { spec, params, scales, invocations: AtomicUsize::new(0) })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> Adapter<U> {
        Adapter {
            spec: self.spec.clone(),
            params: self.params.cast(),
            scales: self.scales.clone(),
            invocations: AtomicUsize::new(0),
        }
    }

    /// Tape-level forward. `cond: [ch, B, H, W]` (channel-major).
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, cond: Var) -> Result<[Var; NUM_SCALES]> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let [ch, _, h, w] = g.shape(cond);
        if ch != self.spec.kind.channels() {
            return Err(Error::Shape(format!(
                "{} adapter expects {} condition channels, got {ch}",
                self.spec.kind,
                self.spec.kind.channels()
            )));
        }
        let need = self.spec.unshuffle << (NUM_SCALES - 1);
        if h % need != 0 || w % need != 0 {
            return Err(Error::Shape(format!("condition size {h}x{w} is not divisible by {need}")));
        }
        let mut x = g.pixel_unshuffle(cond, self.spec.unshuffle)?;
        let mut out = Vec::with_capacity(NUM_SCALES);
        for scale in &self.scales {
            if let Some(down) = &scale.down {
                x = down.forward(g, p, x)?;
            }
            x = scale.conv.forward(g, p, x)?;
            for blk in &scale.blocks {
                let r = blk.conv1.forward(g, p, x)?;
                let r = g.silu(r);
                let r = blk.conv2.forward(g, p, r)?;
                x = g.add(x, r)?;
            }
            out.push(x);
        }
        Ok(out.try_into().unwrap())
    }
}

impl Adapter<f32> {
    /// Computes the guidance pyramid for a batch of conditions.
    pub fn guidance(&self, cond: &ConditionMap) -> Result<GuidancePyramid> {
        if cond.kind() != self.spec.kind {
            return Err(Error::Invalid(format!(
                "{} adapter cannot take a {} condition",
                self.spec.kind,
                cond.kind()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.leaf(cond.tensor().swap01(), false);
        let feats = self.forward(&mut g, &p, c)?;
        GuidancePyramid::new(feats.map(|v| g.value(v).clone()))
    }
}

/// Weighted sum of pyramids, `sum_k w_k * P_k` per scale.
pub fn compose(pyramids: &[&GuidancePyramid], weights: &[f32]) -> Result<GuidancePyramid> {
    let first = pyramids.first().ok_or_else(|| Error::Invalid("compose needs at least one pyramid".into()))?;
    if weights.len() != pyramids.len() {
        return Err(Error::Invalid(format!("{} weights for {} pyramids", weights.len(), pyramids.len())));
    }
    let shapes = first.shapes();
    if let Some((k, p)) = pyramids.iter().enumerate().find(|(_, p)| p.shapes() != shapes) {
        return Err(Error::Shape(format!("pyramid {k} has shapes {:?}, expected {shapes:?}", p.shapes())));
    }
    let features = std::array::from_fn(|i| {
        let mut acc = Tensor::zeros(shapes[i]);
        for (p, &w) in pyramids.iter().zip(weights) {
            acc.axpy(w, &p.features()[i]);
        }
        acc
    });
    GuidancePyramid::new(features)
}

/// Space-to-depth on a batch-major array: `[B, C, H, W] -> [B, C*r*r, H/r, W/r]`.
pub fn pixel_unshuffle(x: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    Ok(pixel_unshuffle_cnhw(&x.swap01(), r)?.swap01())
}

/// Depth-to-space on a batch-major array, inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    Ok(crate::graph::pixel_shuffle_cnhw(&x.swap01(), r)?.swap01())
}

/// Metadata key holding the architecture in adapter checkpoints.
pub const SPEC_KEY: &str = "adapter_spec";

impl Adapter<f32> {
    /// Named arrays plus `metadata` with the spec stored under [`SPEC_KEY`].
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = match metadata {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            _ => return Err(Error::Checkpoint("metadata must be a JSON object".into())),
        };
        meta.insert(SPEC_KEY.into(), serde_json::to_value(&self.spec)?);
        Ok(Checkpoint::new(serde_json::Value::Object(meta), self.params.to_map()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = ckpt
            .metadata
            .get(SPEC_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {SPEC_KEY}")))?;
        let spec: AdapterSpec = serde_json::from_value(spec.clone())?;
        let mut a = Self::new(spec, 0)?;
        a.params.load_map(&ckpt.arrays)?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn rand_tensor(seed: u64, shape: [usize; 4]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn pyramid(seed: u64) -> GuidancePyramid {
        let shapes = DenoiserConfig::tiny(12).encoder_shapes(2, 8, 8).unwrap();
        GuidancePyramid::new(std::array::from_fn(|i| rand_tensor(seed + i as u64, shapes[i]))).unwrap()
    }

    #[test]
    fn unshuffle_examples() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let big = Tensor::<f32>::zeros([1, 3, 512, 512]);
        assert_eq!(pixel_unshuffle(&big, 8).unwrap().shape(), [1, 192, 64, 64]);
        let r = rand_tensor(1, [2, 3, 4, 4]);
        assert_eq!(pixel_unshuffle(&r, 1).unwrap(), r);
        assert!(pixel_unshuffle(&r, 3).is_err());
    }

    #[test]
    fn full_scale_count_in_band() {
        for kind in ConditionKind::ALL {
            let n = AdapterSpec::full_scale(kind, AdapterVariant::Base).param_count();
            assert!((65_000_000..=90_000_000).contains(&n), "{kind}: {n}");
        }
    }

    #[test]
    fn variants_shrink() {
        for spec_fn in [
            |v| AdapterSpec::full_scale(ConditionKind::Color, v),
            |v| AdapterSpec::for_denoiser(&DenoiserConfig::default(), ConditionKind::Color, v),
        ] {
            let base = spec_fn(AdapterVariant::Base).param_count();
            let small = spec_fn(AdapterVariant::Small).param_count();
            let tiny = spec_fn(AdapterVariant::Tiny).param_count();
            assert!(base > small && small > tiny, "{base} {small} {tiny}");
        }
    }

    #[test]
    fn count_matches_enumeration() {
        let cfg = DenoiserConfig::default();
        for kind in ConditionKind::ALL {
            for variant in [AdapterVariant::Base, AdapterVariant::Small, AdapterVariant::Tiny] {
                let spec = AdapterSpec::for_denoiser(&cfg, kind, variant);
                let a = Adapter::<f32>::new(spec.clone(), 0).unwrap();
                assert_eq!(a.params().numel(), spec.param_count());
            }
        }
    }

    #[test]
    fn desk_output_shapes() {
        let cfg = DenoiserConfig::default();
        let a = Adapter::<f32>::new(AdapterSpec::for_denoiser(&cfg, ConditionKind::Sketch, AdapterVariant::Tiny), 0).unwrap();
        let c = ConditionMap::new(ConditionKind::Sketch, Tensor::zeros([2, 1, 128, 128])).unwrap();
        let p = a.guidance(&c).unwrap();
        assert_eq!(p.shapes(), cfg.encoder_shapes(2, 16, 16).unwrap());
        assert_eq!(p.shapes().map(|s| s[0]), [32, 64, 128, 128]);
    }

    #[test]
    fn zero_condition_zero_bias_gives_zero_pyramid() {
        let cfg = DenoiserConfig::tiny(12);
        let mut a = Adapter::<f32>::new(AdapterSpec::for_denoiser(&cfg, ConditionKind::Depth, AdapterVariant::Base), 4).unwrap();
        a.params_mut().for_each_mut(|name, t| {
            if name.ends_with(".bias") {
                t.data_mut().fill(0.0);
            }
        });
        let c = ConditionMap::new(ConditionKind::Depth, Tensor::zeros([1, 1, 64, 64])).unwrap();
        let p = a.guidance(&c).unwrap();
        assert!(p.features().iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn kind_and_size_errors() {
        let cfg = DenoiserConfig::tiny(12);
        let a = Adapter::<f32>::new(AdapterSpec::for_denoiser(&cfg, ConditionKind::Sketch, AdapterVariant::Base), 0).unwrap();
        let color = ConditionMap::new(ConditionKind::Color, Tensor::zeros([1, 3, 64, 64])).unwrap();
        assert!(a.guidance(&color).is_err());
        let odd = ConditionMap::new(ConditionKind::Sketch, Tensor::zeros([1, 1, 72, 64])).unwrap();
        assert!(a.guidance(&odd).is_err());
        assert!(ConditionMap::new(ConditionKind::Sketch, Tensor::full([1, 1, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn compose_identities() {
        let p = pyramid(1);
        assert_eq!(compose(&[&p], &[1.0]).unwrap(), p);
        let q = pyramid(10);
        let z = compose(&[&p, &q], &[0.0, 0.0]).unwrap();
        assert!(z.features().iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
        assert!(compose(&[], &[]).is_err());
        assert!(compose(&[&p], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn compose_mean_matches_loop() {
        let p = pyramid(1);
        let q = pyramid(20);
        let m = compose(&[&p, &q], &[0.5, 0.5]).unwrap();
        for i in 0..NUM_SCALES {
            let (a, b, c) = (p.features()[i].data(), q.features()[i].data(), m.features()[i].data());
            for j in 0..a.len() {
                let want = (a[j] as f64 + b[j] as f64) / 2.0;
                assert!(((c[j] as f64) - want).abs() <= 1e-10 + 1e-7 * want.abs());
            }
        }
    }

    proptest! {
        #[test]
        fn compose_is_linear(a in -2.0f32..2.0, b in -2.0f32..2.0, s in 0u64..1000) {
            let p = pyramid(s);
            let q = pyramid(s + 100);
            let both = compose(&[&p, &q], &[a, b]).unwrap();
            let pa = compose(&[&p], &[a]).unwrap();
            let qb = compose(&[&q], &[b]).unwrap();
            for i in 0..NUM_SCALES {
                let mut sum = pa.features()[i].clone();
                sum.add_assign(&qb.features()[i]);
                prop_assert!(sum.max_abs_diff(&both.features()[i]) <= 1e-6);
            }
        }

        #[test]
        fn shuffle_inverts_unshuffle(s in 0u64..1000, r in 1usize..5) {
            let x = rand_tensor(s, [2, 3, 4 * r, 2 * r]);
            prop_assert_eq!(pixel_shuffle(&pixel_unshuffle(&x, r).unwrap(), r).unwrap(), x.clone());
            let y = rand_tensor(s, [1, 3 * r * r, 3, 2]);
            prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&y, r).unwrap(), r).unwrap(), y);
        }
    }
}
