//! Seeded 3D vision-transformer feature extractor.
//!
//! The encoder maps `[N,1,S,S,S]` volumes to `[N,d,8,8,8]` feature maps:
//! non-overlapping `p³` patch embedding, learned positional embedding,
//! `depth` pre-norm transformer blocks and a final layer norm. Weights are
//! random but fully determined by the configured seed.
//!
//! Parameter names: `patch_embed.weight` `[d,1,p,p,p]`, `patch_embed.bias`,
//! `pos_embed` `[T,d]`, `block{i}.norm1.{weight,bias}`,
//! `block{i}.{query,key,value,output}.{weight,bias}` (weights stored `[in,out]`),
//! `block{i}.norm2.{weight,bias}`, `block{i}.mlp.fc1.*`, `block{i}.mlp.fc2.*`,
//! `norm.{weight,bias}`. LoRA factors, when present, live next to the
//! projection they adapt (see [`crate::lora`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded_init, InitScheme};
use crate::tensor::{DType, Tensor};

/// Side length of the token grid; heads are built for `8³` feature maps.
pub const GRID: usize = 8;
pub const LN_EPS: f64 = 1e-6;
pub const PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// 32³ inputs with 4³ patches: same token grid and width as the default.
    pub fn test_preset() -> Self {
        Self {
            input_size: 32,
            patch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.input_size / self.patch_size != GRID {
            return Err(Error::config(format!(
                "token grid must be {GRID}^3, got {}^3",
                self.input_size / self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        GRID * GRID * GRID
    }

    pub fn hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Parameters of one transformer block.
    pub fn block_param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.hidden();
        4 * (d * d + d) + (d * h + h) + (h * d + d) + 4 * d
    }

    /// Closed-form parameter count of the whole encoder (adapters excluded).
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let p3 = self.patch_size.pow(3);
        (p3 * d + d) + self.tokens() * d + self.depth * self.block_param_count() + 2 * d
    }

    /// Analytic multiply-add FLOPs for one sample (2 per MAC; norms and
    /// element-wise ops ignored).
    pub fn flops_per_sample(&self) -> u64 {
        let (d, t) = (self.embed_dim as u64, self.tokens() as u64);
        let p3 = self.patch_size.pow(3) as u64;
        let h = self.hidden() as u64;
        let block = 2 * t * 4 * d * d + 2 * 2 * t * d * h + 4 * t * t * d;
        2 * p3 * d * t + self.depth as u64 * block
    }
}

#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn init_seed(cfg: &EncoderConfig, name: &str) -> u64 {
    derive_seed(cfg.seed, &format!("encoder/{name}"), 0, 0)
}

/// Builds the encoder with every tensor frozen.
pub fn build_encoder(config: &EncoderConfig, dtype: DType) -> Result<FrozenEncoder> {
    config.validate()?;
    let d = config.embed_dim;
    let p = config.patch_size;
    let h = config.hidden();
    let mut params = ParamSet::new();
    let add = |params: &mut ParamSet, name: String, shape: &[usize], scheme: InitScheme| {
        let t = seeded_init(shape, scheme, init_seed(config, &name), dtype);
        params.insert(name, t, false)
    };
    let normal = InitScheme::Gaussian { std: 0.02 };
    add(&mut params, "patch_embed.weight".into(), &[d, 1, p, p, p], InitScheme::UniformKaiming { fan_in: p * p * p })?;
    add(&mut params, "patch_embed.bias".into(), &[d], InitScheme::Zeros)?;
    add(&mut params, "pos_embed".into(), &[config.tokens(), d], normal)?;
    for i in 0..config.depth {
        add(&mut params, format!("block{i}.norm1.weight"), &[d], InitScheme::Ones)?;
        add(&mut params, format!("block{i}.norm1.bias"), &[d], InitScheme::Zeros)?;
        for proj in PROJECTIONS {
            add(&mut params, format!("block{i}.{proj}.weight"), &[d, d], normal)?;
            add(&mut params, format!("block{i}.{proj}.bias"), &[d], InitScheme::Zeros)?;
        }
        add(&mut params, format!("block{i}.norm2.weight"), &[d], InitScheme::Ones)?;
        add(&mut params, format!("block{i}.norm2.bias"), &[d], InitScheme::Zeros)?;
        add(&mut params, format!("block{i}.mlp.fc1.weight"), &[d, h], normal)?;
        add(&mut params, format!("block{i}.mlp.fc1.bias"), &[h], InitScheme::Zeros)?;
        add(&mut params, format!("block{i}.mlp.fc2.weight"), &[h, d], normal)?;
        add(&mut params, format!("block{i}.mlp.fc2.bias"), &[d], InitScheme::Zeros)?;
    }
    add(&mut params, "norm.weight".into(), &[d], InitScheme::Ones)?;
    add(&mut params, "norm.bias".into(), &[d], InitScheme::Zeros)?;
    Ok(FrozenEncoder {
        config: config.clone(),
        params,
    })
}

/// True for tensors owned by the encoder (including LoRA factors).
pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("head.")
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_A") || name.ends_with(".lora_B")
}

impl FrozenEncoder {
    /// Toggles every backbone tensor; LoRA factors keep their own flag.
    pub fn set_trainable(&mut self, flag: bool) {
        set_backbone_trainable(&mut self.params, flag);
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| !is_lora_param(n)).map(|(_, p)| p.tensor.len()).sum()
    }

    pub fn flops_per_sample(&self) -> u64 {
        self.config.flops_per_sample()
    }

    /// Inference-only forward pass.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let y = forward(&mut tape, &self.params, &self.config, x)?;
        Ok(tape.value(y).clone())
    }
}

pub fn set_backbone_trainable(params: &mut ParamSet, flag: bool) {
    for (name, p) in params.iter_mut() {
        if is_encoder_param(name) && !is_lora_param(name) {
            p.trainable = flag;
        }
    }
}

fn param_var(tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Var> {
    let p = params
        .get(name)
        .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
    Ok(tape.param(name, p))
}

/// Projection `x·W + b`, plus `(x·A)·B` when an adapter is attached.
fn projection(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = param_var(tape, params, &format!("{prefix}.weight"))?;
    let b = param_var(tape, params, &format!("{prefix}.bias"))?;
    let base = tape.linear(x, w, Some(b))?;
    let a_name = format!("{prefix}.lora_A");
    if !params.contains(&a_name) {
        return Ok(base);
    }
    let a = param_var(tape, params, &a_name)?;
    let bf = param_var(tape, params, &format!("{prefix}.lora_B"))?;
    let xa = tape.linear(x, a, None)?;
    let delta = tape.linear(xa, bf, None)?;
    tape.add(base, delta)
}

fn layer_norm(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let g = param_var(tape, params, &format!("{prefix}.weight"))?;
    let b = param_var(tape, params, &format!("{prefix}.bias"))?;
    tape.layernorm(x, g, b, LN_EPS)
}

/// Multi-head self-attention on `[N,T,d]` tokens, output projection included.
fn attention(tape: &mut Tape, params: &ParamSet, cfg: &EncoderConfig, i: usize, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let heads = cfg.heads;
    let dh = d / heads;
    let split = |tape: &mut Tape, proj: &str| -> Result<Var> {
        let y = projection(tape, params, &format!("block{i}.{proj}"), x)?;
        let y = tape.reshape(y, &[n, t, heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[n * heads, t, dh])
    };
    let q = split(tape, "query")?;
    let k = split(tape, "key")?;
    let v = split(tape, "value")?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores)?;
    let ctx = tape.bmm(attn, v, false)?;
    let ctx = tape.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    projection(tape, params, &format!("block{i}.output"), ctx)
}

/// One pre-norm transformer block on `[N,T,d]` tokens.
pub fn attention_block(tape: &mut Tape, params: &ParamSet, cfg: &EncoderConfig, i: usize, x: Var) -> Result<Var> {
    if cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
        return Err(Error::config(format!(
            "embed_dim {} is not divisible by heads {}",
            cfg.embed_dim, cfg.heads
        )));
    }
    let h = layer_norm(tape, params, &format!("block{i}.norm1"), x)?;
    let a = attention(tape, params, cfg, i, h)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, params, &format!("block{i}.norm2"), x)?;
    let w1 = param_var(tape, params, &format!("block{i}.mlp.fc1.weight"))?;
    let b1 = param_var(tape, params, &format!("block{i}.mlp.fc1.bias"))?;
    let h = tape.linear(h, w1, Some(b1))?;
    let h = tape.gelu(h);
    let w2 = param_var(tape, params, &format!("block{i}.mlp.fc2.weight"))?;
    let b2 = param_var(tape, params, &format!("block{i}.mlp.fc2.bias"))?;
    let h = tape.linear(h, w2, Some(b2))?;
    tape.add(x, h)
}

/// Full encoder forward: `[N,1,S,S,S]` volumes to `[N,d,8,8,8]` features.
pub fn forward(tape: &mut Tape, params: &ParamSet, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let s = cfg.input_size;
    if shape.len() != 5 || shape[1] != 1 || shape[2..] != [s, s, s] {
        return Err(Error::shape("encode", format!("expected [N,1,{s},{s},{s}], got {shape:?}")));
    }
    let n = shape[0];
    let (p, g, d) = (cfg.patch_size, GRID, cfg.embed_dim);
    let t = cfg.tokens();

    let patches = tape.reshape(x, &[n, g, p, g, p, g, p])?;
    let patches = tape.permute(patches, &[0, 1, 3, 5, 2, 4, 6])?;
    let patches = tape.reshape(patches, &[n, t, p * p * p])?;
    let w = param_var(tape, params, "patch_embed.weight")?;
    let w = tape.reshape(w, &[d, p * p * p])?;
    let w = tape.permute(w, &[1, 0])?;
    let b = param_var(tape, params, "patch_embed.bias")?;
    let mut h = tape.linear(patches, w, Some(b))?;
    let pos = param_var(tape, params, "pos_embed")?;
    h = tape.add_broadcast(h, pos)?;

    for i in 0..cfg.depth {
        h = attention_block(tape, params, cfg, i, h)?;
    }
    h = layer_norm(tape, params, "norm", h)?;
    let h = tape.reshape(h, &[n, g, g, g, d])?;
    tape.permute(h, &[0, 4, 1, 2, 3])
}
