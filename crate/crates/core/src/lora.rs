//! Low-rank adapters on the attention projections.
//!
//! An adapted projection computes `x·W + (x·A)·B + b` with `A` `[d,r]` and
//! `B` `[r,d]`; there is no `α/r` scaling. `A` starts Gaussian with standard
//! deviation `1/√r` and `B` starts at zero, so injection leaves the model's
//! outputs unchanged. Factors are stored as `block{i}.{proj}.lora_A` and
//! `block{i}.{proj}.lora_B` next to the base weight.

use std::collections::BTreeSet;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::backbone::{is_lora_param, EncoderConfig, PROJECTIONS};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded_init, InitScheme};
use crate::tensor::{gemm, with_dtype, Tensor};

pub const DEFAULT_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockSelector {
    All,
    First6,
    Last6,
    Explicit(BTreeSet<usize>),
}

impl BlockSelector {
    /// Selected block indices for an encoder of the given depth.
    pub fn blocks(&self, depth: usize) -> Result<Vec<usize>> {
        let out: Vec<usize> = match self {
            BlockSelector::All => (0..depth).collect(),
            BlockSelector::First6 => (0..6).collect(),
            BlockSelector::Last6 => (depth.saturating_sub(6)..depth).collect(),
            BlockSelector::Explicit(set) => set.iter().copied().collect(),
        };
        if let Some(&bad) = out.iter().find(|&&i| i >= depth) {
            return Err(Error::config(format!("block {bad} out of range for depth {depth}")));
        }
        if matches!(self, BlockSelector::Last6) && depth < 6 {
            return Err(Error::config(format!("last6 needs depth >= 6, got {depth}")));
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        match self {
            BlockSelector::All => "all".into(),
            BlockSelector::First6 => "first6".into(),
            BlockSelector::Last6 => "last6".into(),
            BlockSelector::Explicit(s) => {
                let v: Vec<String> = s.iter().map(usize::to_string).collect();
                format!("blocks[{}]", v.join(","))
            }
        }
    }
}

/// Trainable factor count: `|blocks|·4·r·(d + k)` with `d = k = embed_dim`.
pub fn lora_param_count(num_blocks: usize, rank: usize, embed_dim: usize) -> usize {
    num_blocks * PROJECTIONS.len() * rank * (embed_dim + embed_dim)
}

pub fn validate_rank(rank: usize, embed_dim: usize) -> Result<()> {
    if rank == 0 || rank * 4 > embed_dim {
        return Err(Error::config(format!(
            "LoRA rank {rank} must satisfy 1 <= r <= embed_dim/4 = {}",
            embed_dim / 4
        )));
    }
    Ok(())
}

/// Attaches trainable adapters to the four projections of every selected block.
pub fn inject_lora(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    selector: &BlockSelector,
    rank: usize,
    seed: u64,
) -> Result<()> {
    if params.names().any(is_lora_param) {
        return Err(Error::config("encoder already carries LoRA adapters"));
    }
    validate_rank(rank, cfg.embed_dim)?;
    let blocks = selector.blocks(cfg.depth)?;
    let d = cfg.embed_dim;
    for i in blocks {
        for proj in PROJECTIONS {
            let prefix = format!("block{i}.{proj}");
            let w = params.tensor(&format!("{prefix}.weight"))?;
            let dtype = w.dtype();
            let a_name = format!("{prefix}.lora_A");
            let a_seed = derive_seed(seed, &format!("lora/{a_name}"), 0, 0);
            let a = seeded_init(&[d, rank], InitScheme::Gaussian { std: 1.0 / (rank as f64).sqrt() }, a_seed, dtype);
            let b = Tensor::zeros(&[rank, d], dtype);
            params.insert(a_name, a, true)?;
            params.insert(format!("{prefix}.lora_B"), b, true)?;
        }
    }
    Ok(())
}

/// `A·B` as a `[d,k]` tensor.
pub fn delta_weight(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("lora delta", format!("{sa:?} x {sb:?}")));
    }
    let (d, r, k) = (sa[0], sa[1], sb[1]);
    with_dtype!(a.dtype(), T => {
        let mut out = vec![T::zero(); d * k];
        gemm(d, r, k, a.as_slice::<T>()?, false, b.as_slice::<T>()?, false, &mut out, false);
        Tensor::from_vec(&[d, k], out)
    })
}

/// Folds every adapter into its base weight (`W ← W + A·B`) and removes it.
pub fn merge(params: &mut ParamSet) -> Result<()> {
    let prefixes: Vec<String> = params
        .names()
        .filter_map(|n| n.strip_suffix(".lora_A").map(str::to_string))
        .collect();
    if prefixes.is_empty() {
        return Err(Error::config("merge requires LoRA adapters"));
    }
    for prefix in prefixes {
        let a = params.tensor(&format!("{prefix}.lora_A"))?.clone();
        let b = params.tensor(&format!("{prefix}.lora_B"))?.clone();
        let delta = delta_weight(&a, &b)?;
        let w_name = format!("{prefix}.weight");
        let merged = params.tensor(&w_name)?.add(&delta)?;
        params
            .get_mut(&w_name)
            .ok_or_else(|| Error::config(format!("missing parameter {w_name}")))?
            .tensor = merged;
        params.remove(&format!("{prefix}.lora_A"));
        params.remove(&format!("{prefix}.lora_B"));
    }
    Ok(())
}
