//! The embedding network shared by the anchor, positive and negative
//! branches.
//!
//! Pipeline for one branch:
//!
//! ```text
//! first conv (k×k, stride 1, padding k/2)
//!   → per stage: 3×3 conv → ReLU → hybrid attention → 2×2 max pool
//!   → global average pool → linear head → optional L2 normalisation
//! ```
//!
//! With an even first kernel the first conv shrinks H and W by one
//! (`S + 2·⌊k/2⌋ − k + 1`).
//!
//! Parameter order, used by checkpoints and the optimiser:
//!
//! 1. `first_conv.weight [C0, C_in, k, k]`, `first_conv.bias [C0]`
//! 2. for each stage `i` (1-based): `stage{i}.conv.weight`, `stage{i}.conv.bias`,
//!    `stage{i}.ca.w1 [C/r, C]`, `stage{i}.ca.b1`, `stage{i}.ca.w2 [C, C/r]`,
//!    `stage{i}.ca.b2`, `stage{i}.sa.weight [1, 2, k_sa, k_sa]`, `stage{i}.sa.bias [1]`
//! 3. `head.weight [E, C_last]`, `head.bias [E]`
//!
//! Attention parameters exist for every stage regardless of the stage's
//! mode, so the parameter count depends only on channel widths, kernel
//! sizes and the reduction ratio.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{apply_hybrid, AttentionMode, ChannelAttention, SpatialAttention};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

const PARAMS_PER_STAGE: usize = 8;
const INFERENCE_CHUNK: usize = 32;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LogoNetConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub first_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    /// One mode per stage.
    pub attention: Vec<AttentionMode>,
    pub normalize_embedding: bool,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for LogoNetConfig {
    fn default() -> Self {
        let stage_channels = vec![32, 64, 128];
        LogoNetConfig {
            input_channels: 1,
            input_size: 64,
            first_kernel: 6,
            attention: default_attention(stage_channels.len()),
            stage_channels,
            embed_dim: 128,
            normalize_embedding: true,
            reduction_ratio: 8,
            spatial_kernel: 7,
        }
    }
}

/// Spatial attention on the first (largest H×W) stage, channel attention
/// on the last (largest C) stage, both in between. A single stage gets both.
pub fn default_attention(stages: usize) -> Vec<AttentionMode> {
    (0..stages)
        .map(|i| match (i == 0, i + 1 == stages) {
            (true, true) => AttentionMode::Both,
            (true, false) => AttentionMode::SpatialOnly,
            (false, true) => AttentionMode::ChannelOnly,
            (false, false) => AttentionMode::Both,
        })
        .collect()
}

const CONFIG_KEYS: [&str; 9] = [
    "input_channels",
    "input_size",
    "first_kernel",
    "stage_channels",
    "embed_dim",
    "attention",
    "normalize_embedding",
    "reduction_ratio",
    "spatial_kernel",
];

impl LogoNetConfig {
    /// Replaces the stage widths and resets attention to the default
    /// placement for the new stage count.
    pub fn with_stages(mut self, channels: Vec<usize>) -> Self {
        self.attention = default_attention(channels.len());
        self.stage_channels = channels;
        self
    }

    /// Keeps the channel (resp. spatial) component of the default placement
    /// only when `channel` (resp. `spatial`) is set.
    pub fn with_attention_toggles(mut self, channel: bool, spatial: bool) -> Self {
        self.attention = default_attention(self.stage_channels.len())
            .into_iter()
            .map(|d| {
                AttentionMode::from_flags(channel && d.uses_channel(), spatial && d.uses_spatial())
            })
            .collect();
        self
    }

    /// Side length after the first convolution.
    pub fn first_conv_size(&self) -> usize {
        let k = self.first_kernel;
        (self.input_size + 2 * (k / 2)).saturating_sub(k) + 1
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.input_channels == 0 {
            errs.push("input_channels must be >= 1".to_string());
        }
        if !(1..=9).contains(&self.first_kernel) {
            errs.push(format!(
                "first_kernel must be in 1..=9, got {}",
                self.first_kernel
            ));
        }
        if self.stage_channels.is_empty() {
            errs.push("stage_channels must not be empty".to_string());
        }
        if self.stage_channels.contains(&0) {
            errs.push("stage_channels entries must be >= 1".to_string());
        }
        if self.embed_dim < 2 {
            errs.push(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.attention.len() != self.stage_channels.len() {
            errs.push(format!(
                "attention lists {} modes for {} stages",
                self.attention.len(),
                self.stage_channels.len()
            ));
        }
        if self.reduction_ratio == 0 {
            errs.push("reduction_ratio must be >= 1".to_string());
        } else {
            for &c in &self.stage_channels {
                if c % self.reduction_ratio != 0 {
                    errs.push(format!(
                        "reduction_ratio {} does not divide stage width {c}",
                        self.reduction_ratio
                    ));
                }
            }
        }
        if self.spatial_kernel % 2 == 0 {
            errs.push(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            ));
        }
        let min_size = 1usize << self.stage_channels.len().min(30);
        if self.input_size < min_size || self.first_conv_size() < min_size {
            errs.push(format!(
                "input_size {} too small for {} pooling stages (need >= {min_size} after the first conv)",
                self.input_size,
                self.stage_channels.len()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Canonical `key=value` text, one key per line in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut out = String::new();
        let _ = writeln!(out, "input_channels={}", self.input_channels);
        let _ = writeln!(out, "input_size={}", self.input_size);
        let _ = writeln!(out, "first_kernel={}", self.first_kernel);
        let _ = writeln!(
            out,
            "stage_channels={}",
            join(
                &self
                    .stage_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
            )
        );
        let _ = writeln!(out, "embed_dim={}", self.embed_dim);
        let _ = writeln!(
            out,
            "attention={}",
            join(
                &self
                    .attention
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
            )
        );
        let _ = writeln!(out, "normalize_embedding={}", self.normalize_embedding);
        let _ = writeln!(out, "reduction_ratio={}", self.reduction_ratio);
        let _ = writeln!(out, "spatial_kernel={}", self.spatial_kernel);
        out
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let (cfg, rest) = Self::from_pairs(&pairs)?;
        if let Some((k, _)) = rest.first() {
            return Err(Error::InvalidConfig(vec![format!("unknown key {k:?}")]));
        }
        Ok(cfg)
    }

    /// Applies the model keys found in `pairs` on top of the defaults and
    /// returns the pairs it did not recognise.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = LogoNetConfig::default();
        let mut attention = None;
        let mut rest = Vec::new();
        let bad = |k: &str, v: &str| Error::InvalidConfig(vec![format!("bad value {v:?} for {k}")]);
        for (k, v) in pairs {
            let num = || v.trim().parse::<usize>().map_err(|_| bad(k, v));
            match k.as_str() {
                "input_channels" => cfg.input_channels = num()?,
                "input_size" => cfg.input_size = num()?,
                "first_kernel" => cfg.first_kernel = num()?,
                "embed_dim" => cfg.embed_dim = num()?,
                "reduction_ratio" => cfg.reduction_ratio = num()?,
                "spatial_kernel" => cfg.spatial_kernel = num()?,
                "normalize_embedding" => {
                    cfg.normalize_embedding = v.trim().parse().map_err(|_| bad(k, v))?
                }
                "stage_channels" => {
                    let chans = v
                        .split(',')
                        .map(|c| c.trim().parse::<usize>().map_err(|_| bad(k, v)))
                        .collect::<Result<Vec<_>>>()?;
                    cfg = cfg.with_stages(chans);
                }
                "attention" => {
                    attention = Some(
                        v.split(',')
                            .map(str::parse::<AttentionMode>)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => rest.push((k.clone(), v.clone())),
            }
        }
        if let Some(a) = attention {
            cfg.attention = a;
        }
        Ok((cfg, rest))
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }

    /// Names and shapes of every parameter in the documented order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.first_kernel;
        let ks = self.spatial_kernel;
        let c0 = self.stage_channels[0];
        let mut shapes = vec![
            (
                "first_conv.weight".to_string(),
                vec![c0, self.input_channels, k, k],
            ),
            ("first_conv.bias".to_string(), vec![c0]),
        ];
        let mut prev = c0;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            let hidden = c / self.reduction_ratio.max(1);
            let s = i + 1;
            shapes.extend([
                (format!("stage{s}.conv.weight"), vec![c, prev, 3, 3]),
                (format!("stage{s}.conv.bias"), vec![c]),
                (format!("stage{s}.ca.w1"), vec![hidden.max(1), c]),
                (format!("stage{s}.ca.b1"), vec![hidden.max(1)]),
                (format!("stage{s}.ca.w2"), vec![c, hidden.max(1)]),
                (format!("stage{s}.ca.b2"), vec![c]),
                (format!("stage{s}.sa.weight"), vec![1, 2, ks, ks]),
                (format!("stage{s}.sa.bias"), vec![1]),
            ]);
            prev = c;
        }
        shapes.push(("head.weight".to_string(), vec![self.embed_dim, prev]));
        shapes.push(("head.bias".to_string(), vec![self.embed_dim]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(vec![format!("line {}: expected key=value", lineno + 1)])
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Parameters bound to one tape, in the documented order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter; parameters the loss did not reach get
    /// zeros.
    pub fn gradients<T: Real>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tape.value(v).numel()],
            })
            .collect()
    }

    fn stage(&self, i: usize) -> StageVars {
        let b = 2 + i * PARAMS_PER_STAGE;
        let v = &self.vars;
        StageVars {
            conv_w: v[b],
            conv_b: v[b + 1],
            ca: ChannelAttention {
                w1: v[b + 2],
                b1: v[b + 3],
                w2: v[b + 4],
                b2: v[b + 5],
            },
            sa: SpatialAttention {
                weight: v[b + 6],
                bias: v[b + 7],
            },
        }
    }
}

struct StageVars {
    conv_w: Var,
    conv_b: Var,
    ca: ChannelAttention<Var>,
    sa: SpatialAttention<Var>,
}

/// The embedding function: one parameter set used by every branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogoNetModel<T: Real = f32> {
    config: LogoNetConfig,
    params: Vec<Param<T>>,
}

impl<T: Real> LogoNetModel<T> {
    /// Fan-in scaled uniform weights (`±sqrt(6 / fan_in)`), zero biases.
    /// Deterministic given `seed`.
    pub fn init(config: LogoNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![T::zero(); numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
                        .collect()
                };
                Ok(Param {
                    name,
                    tensor: Tensor::new(shape, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LogoNetModel { config, params })
    }

    /// Assembles a model from explicit parameters, checking names and shapes
    /// against the config's layout.
    pub fn from_params(config: LogoNetConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::invalid(
                "model",
                format!(
                    "config needs {} parameters, got {}",
                    expected.len(),
                    params.len()
                ),
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::invalid(
                    "model",
                    format!(
                        "expected parameter {name} {shape:?}, found {} {:?}",
                        p.name,
                        p.tensor.shape()
                    ),
                ));
            }
        }
        Ok(LogoNetModel { config, params })
    }

    pub fn config(&self) -> &LogoNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> LogoNetModel<U> {
        LogoNetModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Short hex digest of the config and every parameter value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_canonical_text().as_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.param(p.tensor.clone()))
                .collect(),
        }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [_, ch, h, w]
                if *ch == c.input_channels && *h == c.input_size && *w == c.input_size =>
            {
                Ok(())
            }
            _ => Err(Error::shape(
                "embed",
                shape,
                &[0, c.input_channels, c.input_size, c.input_size],
            )),
        }
    }

    /// One branch of the network on a batch `[N, C, S, S]`, giving `[N, E]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundParams, images: Var) -> Result<Var> {
        self.check_images(tape.shape(images))?;
        let cfg = &self.config;
        let v = bound.vars();
        let mut x = tape.conv2d(images, v[0], v[1], 1, cfg.first_kernel / 2)?;
        for (i, &mode) in cfg.attention.iter().enumerate() {
            let s = bound.stage(i);
            x = tape.conv2d(x, s.conv_w, s.conv_b, 1, 1)?;
            x = tape.relu(x);
            x = apply_hybrid(tape, x, &s.ca, &s.sa, mode)?;
            x = tape.maxpool2d(x, 2, 2)?;
        }
        let [n, c, _, _] = tape.value(x).dims4()?;
        let pooled = tape.global_avgpool(x)?;
        let pooled = tape.reshape(pooled, &[n, c])?;
        let head = v.len() - 2;
        let emb = tape.linear(pooled, v[head], v[head + 1])?;
        if cfg.normalize_embedding {
            tape.l2_normalize(emb)
        } else {
            Ok(emb)
        }
    }

    /// Runs the anchor, positive and negative batches through the same
    /// bound parameters on one tape.
    pub fn embed_triplet(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        anchor: Var,
        positive: Var,
        negative: Var,
    ) -> Result<(Var, Var, Var)> {
        let s = tape.shape(anchor).to_vec();
        for other in [positive, negative] {
            if tape.shape(other) != s.as_slice() {
                return Err(Error::shape("embed_triplet", &s, tape.shape(other)));
            }
        }
        Ok((
            self.forward(tape, bound, anchor)?,
            self.forward(tape, bound, positive)?,
            self.forward(tape, bound, negative)?,
        ))
    }

    /// Inference: embeds `[N, C, S, S]` images into `[N, E]`, in chunks.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images.shape())?;
        let n = images.shape()[0];
        let per = images.numel() / n;
        let mut out = Vec::with_capacity(n * self.config.embed_dim);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = BoundParams {
                vars: self
                    .params
                    .iter()
                    .map(|p| tape.constant(p.tensor.clone()))
                    .collect(),
            };
            let x = tape.constant(chunk);
            let e = self.forward(&mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(e).data());
        }
        Tensor::new(vec![n, self.config.embed_dim], out)
    }
}
