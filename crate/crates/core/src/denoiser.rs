//! Four-scale UNet noise predictor with sinusoidal time embedding and
//! cross-attention over caption tokens.
//!
//! Encoder scale `i` runs `blocks_per_scale` residual blocks (plus
//! cross-attention on the attention scales). Its output is the encoder
//! feature `F_enc^i`; guidance is added there, and the sum is both recorded
//! as the skip connection and downsampled into scale `i + 1`. The decoder
//! mirrors the encoder with one residual block per scale fed by the
//! concatenated skip.
//!
//! The latent has far more channels than the first scale, so noise cannot
//! pass through `conv_in`. With `a = sqrt(alpha_bar)` and
//! `s = sqrt(1 - alpha_bar)` the prediction is `eps = L_t z_t + a * U`, where
//! `L_t` is the Gaussian-optimal linear estimate from a [`LatentPrior`]
//! fitted to the training latents and `U` is the UNet output. With the
//! standard prior `L_t z_t = s * z_t`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::LatentTensor;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv, GroupNorm, Init, ParamId, ParamStore};
use crate::prior::{LatentPrior, BASIS_ARRAY, MEAN_ARRAY, VARIANCE_ARRAY};
use crate::tensor::{Real, Tensor};
use crate::text::{self, TokenSequence, MAX_TOKENS, VOCAB};

pub const NUM_SCALES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mult: [usize; NUM_SCALES],
    pub blocks_per_scale: usize,
    /// 1-based scale indices that get cross-attention.
    pub attention_scales: Vec<usize>,
    pub token_dim: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 192,
            base_channels: 32,
            channel_mult: [1, 2, 4, 4],
            blocks_per_scale: 2,
            attention_scales: vec![2, 3, 4],
            token_dim: 64,
            time_dim: 64,
            vocab_size: VOCAB.len(),
            max_tokens: MAX_TOKENS,
        }
    }
}

impl DenoiserConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            base_channels: 4,
            channel_mult: [1, 2, 2, 2],
            blocks_per_scale: 1,
            attention_scales: vec![2, 3, 4],
            token_dim: 6,
            time_dim: 8,
            vocab_size: VOCAB.len(),
            max_tokens: MAX_TOKENS,
        }
    }

    pub fn scale_channels(&self) -> [usize; NUM_SCALES] {
        self.channel_mult.map(|m| m * self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mult.contains(&0) || self.blocks_per_scale == 0 {
            return Err(Error::Invalid("channel counts and block counts must be positive".into()));
        }
        if self.attention_scales.iter().any(|&s| s == 0 || s > NUM_SCALES) {
            return Err(Error::Invalid(format!("attention scales {:?} out of 1..=4", self.attention_scales)));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Invalid("time_dim must be even and positive".into()));
        }
        Ok(())
    }

    fn has_attention(&self, scale: usize) -> bool {
        self.attention_scales.contains(&scale)
    }

    /// Shapes `[C_i, B, h_i, w_i]` of the encoder features for a latent of
    /// spatial size `h×w`.
    pub fn encoder_shapes(&self, batch: usize, h: usize, w: usize) -> Result<[[usize; 4]; NUM_SCALES]> {
        let div = 1 << (NUM_SCALES - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!("latent size {h}x{w} must be divisible by {div}")));
        }
        let ch = self.scale_channels();
        Ok(std::array::from_fn(|i| [ch[i], batch, h >> i, w >> i]))
    }

    /// Closed-form trainable-parameter count.
    pub fn param_count(&self) -> usize {
        let ch = self.scale_channels();
        let td = self.time_dim;
        let d = self.token_dim;
        let res = |cin: usize, cout: usize| {
            2 * cin
                + Conv::count(cin, cout, 3)
                + Conv::count(td, cout, 1)
                + 2 * cout
                + Conv::count(cout, cout, 3)
                + if cin != cout { Conv::count(cin, cout, 1) } else { 0 }
        };
        let attn = |c: usize| 2 * c + 2 * Conv::count(c, c, 1) + 2 * Conv::count(d, c, 1);
        let mut n = self.vocab_size * d + self.max_tokens * d;
        n += 2 * Conv::count(td, td, 1);
        n += Conv::count(self.latent_channels, ch[0], 3);
        let mut prev = ch[0];
        for i in 0..NUM_SCALES {
            for _ in 0..self.blocks_per_scale {
                n += res(prev, ch[i]);
                prev = ch[i];
            }
            if self.has_attention(i + 1) {
                n += attn(ch[i]);
            }
            if i + 1 < NUM_SCALES {
                n += Conv::count(ch[i], ch[i], 3);
            }
        }
        n += res(ch[3], ch[3]) + attn(ch[3]);
        for i in (0..NUM_SCALES).rev() {
            n += res(2 * ch[i], ch[i]);
            if self.has_attention(i + 1) {
                n += attn(ch[i]);
            }
            if i > 0 {
                n += Conv::count(ch[i], ch[i - 1], 3);
            }
        }
        n += 2 * ch[0] + Conv::count(ch[0], self.latent_channels, 3);
        n
    }
}

/// Where guidance features are added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTarget {
    Encoder,
    Decoder,
    Both,
}

/// Injection site and number of guided scales. Scales are dropped smallest
/// first, so `scale_count = k` guides scales `1..=k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectionMode {
    pub target: InjectionTarget,
    pub scale_count: usize,
}

impl Default for InjectionMode {
    fn default() -> Self {
        Self { target: InjectionTarget::Encoder, scale_count: NUM_SCALES }
    }
}

impl InjectionMode {
    pub fn new(target: InjectionTarget, scale_count: usize) -> Result<Self> {
        if !(1..=NUM_SCALES).contains(&scale_count) {
            return Err(Error::Invalid(format!("scale_count {scale_count} outside 1..=4")));
        }
        Ok(Self { target, scale_count })
    }

    fn guides(&self, scale: usize) -> bool {
        scale < self.scale_count
    }

    pub fn encoder(&self) -> bool {
        matches!(self.target, InjectionTarget::Encoder | InjectionTarget::Both)
    }

    pub fn decoder(&self) -> bool {
        matches!(self.target, InjectionTarget::Decoder | InjectionTarget::Both)
    }
}

/// Parses `target:count`, e.g. `encoder:4`; a bare target guides all scales.
impl std::str::FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (t, n) = s.split_once(':').unwrap_or((s, "4"));
        let target = match t {
            "encoder" => InjectionTarget::Encoder,
            "decoder" => InjectionTarget::Decoder,
            "both" => InjectionTarget::Both,
            _ => return Err(Error::Invalid(format!("unknown injection target '{t}' (encoder, decoder, both)"))),
        };
        let n = n.parse().map_err(|_| Error::Invalid(format!("bad scale count in '{s}'")))?;
        Self::new(target, n)
    }
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = match self.target {
            InjectionTarget::Encoder => "encoder",
            InjectionTarget::Decoder => "decoder",
            InjectionTarget::Both => "both",
        };
        write!(f, "{t}:{}", self.scale_count)
    }
}

impl InjectionMode {
    /// Every target with every scale count.
    pub fn all() -> Vec<Self> {
        [InjectionTarget::Encoder, InjectionTarget::Decoder, InjectionTarget::Both]
            .into_iter()
            .flat_map(|t| (1..=NUM_SCALES).rev().map(move |n| Self { target: t, scale_count: n }))
            .collect()
    }
}

/// Guidance features on the tape, one per scale.
pub struct Injection {
    pub features: [Var; NUM_SCALES],
    pub mode: InjectionMode,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time_proj: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, time_dim: usize) -> Self {
        Self {
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), cin),
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, 1),
            time_proj: Conv::new(init, &format!("{name}.time_proj"), time_dim, cout, 1, 1),
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), cout),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(init, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let t = self.time_proj.forward(g, p, temb_act)?;
        let h = g.add_broadcast(h, t)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    to_q: Conv,
    to_k: Conv,
    to_v: Conv,
    to_out: Conv,
}

impl CrossAttention {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize, token_dim: usize) -> Self {
        Self {
            norm: GroupNorm::new(init, &format!("{name}.norm"), c),
            to_q: Conv::new(init, &format!("{name}.to_q"), c, c, 1, 1),
            to_k: Conv::new(init, &format!("{name}.to_k"), token_dim, c, 1, 1),
            to_v: Conv::new(init, &format!("{name}.to_v"), token_dim, c, 1, 1),
            to_out: Conv::new(init, &format!("{name}.to_out"), c, c, 1, 1),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, text: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let q = self.to_q.forward(g, p, h)?;
        let k = self.to_k.forward(g, p, text)?;
        let v = self.to_v.forward(g, p, text)?;
        let a = g.attention(q, k, v)?;
        let o = self.to_out.forward(g, p, a)?;
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct EncoderScale {
    blocks: Vec<ResBlock>,
    attn: Option<CrossAttention>,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct DecoderScale {
    block: ResBlock,
    attn: Option<CrossAttention>,
    up: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Layers {
    token_embedding: ParamId,
    position_embedding: ParamId,
    time_mlp1: Conv,
    time_mlp2: Conv,
    conv_in: Conv,
    enc: Vec<EncoderScale>,
    mid_block: ResBlock,
    mid_attn: CrossAttention,
    dec: Vec<DecoderScale>,
    out_norm: GroupNorm,
    conv_out: Conv,
}

/// Per-item timestep conditioning: step ids and the mixing coefficients
/// `sqrt(alpha_bar_t)` and `sqrt(1 - alpha_bar_t)` from the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub steps: Vec<usize>,
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

impl StepInput {
    pub fn new(steps: &[usize], schedule: &NoiseSchedule) -> Self {
        let ab: Vec<f64> = steps.iter().map(|&t| schedule.alpha_bar(t)).collect();
        Self {
            steps: steps.to_vec(),
            signal: ab.iter().map(|a| a.sqrt()).collect(),
            noise: ab.iter().map(|a| (1.0 - a).sqrt()).collect(),
        }
    }
}

/// Sinusoidal embedding of integer steps, `[dim, B, 1, 1]`.
pub fn timestep_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let b = steps.len();
    let mut out = vec![T::zero(); dim * b];
    for (bi, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i * b + bi] = T::from_f64_lossy(arg.sin());
            out[(half + i) * b + bi] = T::from_f64_lossy(arg.cos());
        }
    }
    Tensor::from_vec([dim, b, 1, 1], out).unwrap()
}

/// Output of a tape-level forward pass.
pub struct DenoiserOutput {
    pub eps: Var,
    /// Encoder features after guidance has been added.
    pub encoder_features: [Var; NUM_SCALES],
}

#[derive(Debug)]
pub struct Denoiser<T: Real> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layers: Layers,
    prior: LatentPrior,
    invocations: AtomicUsize,
}

impl<T: Real> Clone for Denoiser<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
            prior: self.prior.clone(),
            invocations: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = {
            let mut init = Init::new(&mut params, &mut rng);
            build_layers(&mut init, &config)
        };
        let prior = LatentPrior::standard(config.latent_channels);
        Ok(Self { config, params, layers, prior, invocations: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn prior(&self) -> &LatentPrior {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: LatentPrior) -> Result<()> {
        if prior.channels() != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "prior has {} channels, denoiser expects {}",
                prior.channels(),
                self.config.latent_channels
            )));
        }
        self.prior = prior;
        Ok(())
    }

    /// Number of forward passes run since construction or the last reset.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// Re-creates the layer map around an existing parameter store (e.g.
    /// after a precision cast).
    pub fn with_params<U: Real>(&self, params: ParamStore<U>) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            params,
            layers: self.layers.clone(),
            prior: self.prior.clone(),
            invocations: AtomicUsize::new(0),
        }
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        self.with_params(self.params.cast())
    }

    /// Forward pass on the tape. `z: [C_lat, B, h, w]`; `tokens` holds
    /// `B * max_tokens` ids.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        time: &StepInput,
        tokens: &[usize],
        injection: Option<&Injection>,
    ) -> Result<DenoiserOutput> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let l = &self.layers;
        let [cl, b, h, w] = g.shape(z);
        if cl != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {cl} channels, denoiser expects {}",
                self.config.latent_channels
            )));
        }
        if time.steps.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", time.steps.len())));
        }
        if tokens.len() != b * self.config.max_tokens {
            return Err(Error::Shape(format!(
                "{} token ids for batch {b} (need {} per item)",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        let shapes = self.config.encoder_shapes(b, h, w)?;
        if let Some(inj) = injection {
            for (i, (&f, want)) in inj.features.iter().zip(shapes).enumerate() {
                let got = g.shape(f);
                if inj.mode.guides(i) && got != want {
                    return Err(Error::GuidanceShape { scale: i + 1, expected: want, got });
                }
            }
        }

        let text = g.embedding(p.var(l.token_embedding), tokens.to_vec(), b)?;
        let text = g.add_broadcast(text, p.var(l.position_embedding))?;

        let temb = g.leaf(timestep_embedding(&time.steps, self.config.time_dim), false);
        let temb = l.time_mlp1.forward(g, p, temb)?;
        let temb = g.silu(temb);
        let temb = l.time_mlp2.forward(g, p, temb)?;
        let temb_act = g.silu(temb);

        let mut hcur = l.conv_in.forward(g, p, z)?;
        let mut skips = Vec::with_capacity(NUM_SCALES);
        for (i, scale) in l.enc.iter().enumerate() {
            for blk in &scale.blocks {
                hcur = blk.forward(g, p, hcur, temb_act)?;
            }
            if let Some(attn) = &scale.attn {
                hcur = attn.forward(g, p, hcur, text)?;
            }
            if let Some(inj) = injection.filter(|inj| inj.mode.encoder() && inj.mode.guides(i)) {
                hcur = g.add(hcur, inj.features[i])?;
            }
            skips.push(hcur);
            if let Some(down) = &scale.down {
                hcur = down.forward(g, p, hcur)?;
            }
        }
        let encoder_features: [Var; NUM_SCALES] = skips.clone().try_into().unwrap();

        hcur = l.mid_block.forward(g, p, hcur, temb_act)?;
        hcur = l.mid_attn.forward(g, p, hcur, text)?;

        for (j, scale) in l.dec.iter().enumerate() {
            let i = NUM_SCALES - 1 - j;
            if let Some(inj) = injection.filter(|inj| inj.mode.decoder() && inj.mode.guides(i)) {
                hcur = g.add(hcur, inj.features[i])?;
            }
            let cat = g.concat0(hcur, skips[i])?;
            hcur = scale.block.forward(g, p, cat, temb_act)?;
            if let Some(attn) = &scale.attn {
                hcur = attn.forward(g, p, hcur, text)?;
            }
            if let Some(up) = &scale.up {
                hcur = g.upsample2x(hcur);
                hcur = up.forward(g, p, hcur)?;
            }
        }
        let hcur = l.out_norm.forward(g, p, hcur)?;
        let hcur = g.silu(hcur);
        let v = l.conv_out.forward(g, p, hcur)?;
        let v = g.scale_items(v, time.signal.iter().map(|&c| T::from_f64_lossy(c)).collect())?;
        let lin = self.linear_estimate(g, z, time)?;
        let eps = g.add(lin, v)?;
        Ok(DenoiserOutput { eps, encoder_features })
    }

    /// `s (a^2 S + s^2 I)^-1 (z - a mu)`, applied in the prior's eigenbasis.
    fn linear_estimate(&self, g: &mut Graph<T>, z: Var, time: &StepInput) -> Result<Var> {
        let c = self.config.latent_channels;
        let b = time.steps.len();
        let prior = &self.prior;
        let t = |v: f64| T::from_f64_lossy(v);
        let mut shift = vec![T::zero(); c * b];
        let mut gains = vec![T::zero(); c * b];
        for bi in 0..b {
            let (sa, sn) = (time.signal[bi], time.noise[bi]);
            for (k, gk) in prior.gains(sa, sn).into_iter().enumerate() {
                shift[k * b + bi] = t(-sa * prior.mean()[k]);
                gains[k * b + bi] = t(gk);
            }
        }
        let shift = g.leaf(Tensor::from_vec([c, b, 1, 1], shift)?, false);
        let zc = g.add_broadcast(z, shift)?;
        let basis = prior.basis();
        let fwd = g.leaf(Tensor::from_vec([c, c, 1, 1], basis.iter().map(|&x| t(x)).collect())?, false);
        let back: Vec<T> = (0..c * c).map(|i| t(basis[(i % c) * c + i / c])).collect();
        let back = g.leaf(Tensor::from_vec([c, c, 1, 1], back)?, false);
        let y = g.conv2d(zc, fwd, None, 1, 0)?;
        let y = g.scale_items(y, gains)?;
        g.conv2d(y, back, None, 1, 0)
    }
}

fn build_layers<T: Real>(init: &mut Init<'_, T>, cfg: &DenoiserConfig) -> Layers {
    let ch = cfg.scale_channels();
    let td = cfg.time_dim;
    let token_embedding = init.normal("text.token_embedding".into(), [cfg.vocab_size, cfg.token_dim, 1, 1], 1.0);
    let position_embedding = init.normal("text.position_embedding".into(), [cfg.token_dim, 1, cfg.max_tokens, 1], 0.1);
    let time_mlp1 = Conv::new(init, "time.mlp1", td, td, 1, 1);
    let time_mlp2 = Conv::new(init, "time.mlp2", td, td, 1, 1);
    let conv_in = Conv::new(init, "conv_in", cfg.latent_channels, ch[0], 3, 1);
    let mut enc = Vec::new();
    let mut prev = ch[0];
    for i in 0..NUM_SCALES {
        let s = i + 1;
        let mut blocks = Vec::new();
        for j in 0..cfg.blocks_per_scale {
            blocks.push(ResBlock::new(init, &format!("enc.scale{s}.block{}", j + 1), prev, ch[i], td));
            prev = ch[i];
        }
        let attn = cfg
            .has_attention(s)
            .then(|| CrossAttention::new(init, &format!("enc.scale{s}.attn"), ch[i], cfg.token_dim));
        let down = (s < NUM_SCALES).then(|| Conv::new(init, &format!("enc.scale{s}.down"), ch[i], ch[i], 3, 2));
        enc.push(EncoderScale { blocks, attn, down });
    }
    let mid_block = ResBlock::new(init, "mid.block", ch[3], ch[3], td);
    let mid_attn = CrossAttention::new(init, "mid.attn", ch[3], cfg.token_dim);
    let mut dec = Vec::new();
    for i in (0..NUM_SCALES).rev() {
        let s = i + 1;
        let block = ResBlock::new(init, &format!("dec.scale{s}.block"), 2 * ch[i], ch[i], td);
        let attn = cfg
            .has_attention(s)
            .then(|| CrossAttention::new(init, &format!("dec.scale{s}.attn"), ch[i], cfg.token_dim));
        let up = (i > 0).then(|| Conv::new(init, &format!("dec.scale{s}.up"), ch[i], ch[i - 1], 3, 1));
        dec.push(DecoderScale { block, attn, up });
    }
    let out_norm = GroupNorm::new(init, "out.norm", ch[0]);
    let conv_out = Conv::new(init, "conv_out", ch[0], cfg.latent_channels, 3, 1);
    Layers {
        token_embedding,
        position_embedding,
        time_mlp1,
        time_mlp2,
        conv_in,
        enc,
        mid_block,
        mid_attn,
        dec,
        out_norm,
        conv_out,
    }
}

/// Guidance pyramid in channel-major layout, one `[C_i, B, h_i, w_i]` array
/// per encoder scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePyramid {
    features: [Tensor<f32>; NUM_SCALES],
}

impl GuidancePyramid {
    pub fn new(features: [Tensor<f32>; NUM_SCALES]) -> Result<Self> {
        let b = features[0].shape()[1];
        for (i, f) in features.iter().enumerate() {
            if f.shape()[1] != b {
                return Err(Error::Shape(format!("scale {} has batch {} instead of {b}", i + 1, f.shape()[1])));
            }
            if !f.all_finite() {
                return Err(Error::Invalid(format!("scale {} contains non-finite values", i + 1)));
            }
        }
        Ok(Self { features })
    }

    pub fn zeros(shapes: [[usize; 4]; NUM_SCALES]) -> Self {
        Self { features: shapes.map(Tensor::zeros) }
    }

    pub fn features(&self) -> &[Tensor<f32>; NUM_SCALES] {
        &self.features
    }

    pub fn shapes(&self) -> [[usize; 4]; NUM_SCALES] {
        std::array::from_fn(|i| self.features[i].shape())
    }

    pub fn batch(&self) -> usize {
        self.features[0].shape()[1]
    }

    /// Repeats each batch item `n` times (item-major), so a pyramid for `B`
    /// conditions can drive `B*n` samples.
    pub fn repeat_items(&self, n: usize) -> Self {
        let b = self.batch();
        let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        Self { features: std::array::from_fn(|i| self.features[i].select_axis1(&idx)) }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { features: std::array::from_fn(|i| self.features[i].select_axis1(idx)) }
    }
}

impl Denoiser<f32> {
    /// Predicts the noise in `z_t` at step `t` for every item in the batch.
    pub fn denoise(
        &self,
        schedule: &NoiseSchedule,
        z_t: &LatentTensor,
        t: usize,
        tokens: &[TokenSequence],
        guidance: Option<&GuidancePyramid>,
    ) -> Result<LatentTensor> {
        self.denoise_with_mode(schedule, z_t, &vec![t; z_t.batch()], tokens, guidance, InjectionMode::default())
    }

    pub fn denoise_with_mode(
        &self,
        schedule: &NoiseSchedule,
        z_t: &LatentTensor,
        steps: &[usize],
        tokens: &[TokenSequence],
        guidance: Option<&GuidancePyramid>,
        mode: InjectionMode,
    ) -> Result<LatentTensor> {
        let b = z_t.batch();
        if tokens.len() != b || steps.len() != b {
            return Err(Error::Shape(format!(
                "batch {b} with {} token sequences and {} steps",
                tokens.len(),
                steps.len()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.leaf(z_t.tensor().cast::<f32>().swap01(), false);
        let time = StepInput::new(steps, schedule);
        let injection = guidance.map(|pyr| Injection {
            features: std::array::from_fn(|i| g.leaf(pyr.features[i].clone(), false)),
            mode,
        });
        let out = self.forward(&mut g, &p, z, &time, &text::flatten(tokens), injection.as_ref())?;
        Ok(LatentTensor::from_tensor(g.value(out.eps).swap01().cast()))
    }
}

/// Metadata key holding the architecture in denoiser checkpoints.
pub const CONFIG_KEY: &str = "denoiser_config";

impl Denoiser<f32> {
    /// Named arrays plus `metadata` with the config stored under [`CONFIG_KEY`].
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = match metadata {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            _ => return Err(Error::Checkpoint("metadata must be a JSON object".into())),
        };
        meta.insert(CONFIG_KEY.into(), serde_json::to_value(&self.config)?);
        let mut arrays = self.params.to_map();
        for (name, t) in self.prior.to_arrays() {
            arrays.insert(name.to_string(), t);
        }
        Ok(Checkpoint::new(serde_json::Value::Object(meta), arrays))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {CONFIG_KEY}")))?;
        let config: DenoiserConfig = serde_json::from_value(cfg.clone())?;
        let mut d = Self::new(config, 0)?;
        let mut arrays = ckpt.arrays.clone();
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing array {name}")));
        let prior = LatentPrior::from_arrays(&take(MEAN_ARRAY)?, &take(BASIS_ARRAY)?, &take(VARIANCE_ARRAY)?)?;
        d.set_prior(prior)?;
        d.params.load_map(&arrays)?;
        Ok(d)
    }
}
