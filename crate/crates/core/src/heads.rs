//! Classification heads mapping `[N,C,8,8,8]` features to class logits.
//!
//! `Linear` pools globally and applies one linear layer. `ConvS` and `ConvL`
//! stack four `3×3×3` same-padded convolutions with ReLU (channel ladders
//! 128-64-64-32 and 256-128-128-64), then pool and apply a linear layer.
//! Parameters are named `head.conv{i}.{weight,bias}` and `head.fc.{weight,bias}`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::GRID;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded_init, InitScheme};
use crate::tensor::DType;

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    ConvS,
    ConvL,
}

impl HeadKind {
    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::ConvS => "convs",
            HeadKind::ConvL => "convl",
        }
    }

    pub fn ladder(self) -> &'static [usize] {
        match self {
            HeadKind::Linear => &[],
            HeadKind::ConvS => &[128, 64, 64, 32],
            HeadKind::ConvL => &[256, 128, 128, 64],
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "convs" => Ok(HeadKind::ConvS),
            "convl" => Ok(HeadKind::ConvL),
            other => Err(Error::config(format!("unknown head kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Divides every conv width; 1 gives the full-size heads.
    pub width_divisor: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::ConvS,
            in_channels: 384,
            num_classes: 2,
            width_divisor: 1,
        }
    }
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.width_divisor == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        if self.kind.ladder().iter().any(|&c| c % self.width_divisor != 0) {
            return Err(Error::config(format!(
                "width_divisor {} does not divide the {} ladder",
                self.width_divisor,
                self.kind.label()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.kind.ladder().iter().map(|c| c / self.width_divisor).collect()
    }

    fn fc_in(&self) -> usize {
        self.channels().last().copied().unwrap_or(self.in_channels)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let k3 = KERNEL.pow(3);
        let mut cin = self.in_channels;
        let mut total = 0;
        for cout in self.channels() {
            total += k3 * cin * cout + cout;
            cin = cout;
        }
        total + cin * self.num_classes + self.num_classes
    }

    /// Analytic FLOPs per sample on an `8³` grid.
    pub fn flops_per_sample(&self) -> u64 {
        let spatial = (GRID * GRID * GRID) as u64;
        let k3 = KERNEL.pow(3) as u64;
        let mut cin = self.in_channels as u64;
        let mut total = 0;
        for cout in self.channels() {
            total += 2 * k3 * cin * cout as u64 * spatial;
            cin = cout as u64;
        }
        total + 2 * cin * self.num_classes as u64
    }
}

/// Trainable head parameters, seeded from `seed`.
pub fn build_head(cfg: &HeadConfig, seed: u64, dtype: DType) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut cin = cfg.in_channels;
    let k = KERNEL;
    for (i, cout) in cfg.channels().into_iter().enumerate() {
        let name = format!("head.conv{i}.weight");
        let s = derive_seed(seed, &format!("head/{name}"), 0, 0);
        let w = seeded_init(&[cout, cin, k, k, k], InitScheme::UniformKaiming { fan_in: cin * k * k * k }, s, dtype);
        params.insert(name, w, true)?;
        params.insert(format!("head.conv{i}.bias"), seeded_init(&[cout], InitScheme::Zeros, 0, dtype), true)?;
        cin = cout;
    }
    let f = cfg.fc_in();
    let s = derive_seed(seed, "head/head.fc.weight", 0, 0);
    let w = seeded_init(&[f, cfg.num_classes], InitScheme::UniformKaiming { fan_in: f }, s, dtype);
    params.insert("head.fc.weight", w, true)?;
    params.insert("head.fc.bias", seeded_init(&[cfg.num_classes], InitScheme::Zeros, 0, dtype), true)?;
    Ok(params)
}

/// Logits `[N,num_classes]` for features `[N,in_channels,8,8,8]`.
pub fn head_forward(tape: &mut Tape, params: &ParamSet, cfg: &HeadConfig, z: Var) -> Result<Var> {
    let s = tape.value(z).shape();
    if s.len() != 5 || s[1] != cfg.in_channels || s[2..] != [GRID, GRID, GRID] {
        return Err(Error::shape(
            "head",
            format!("expected [N,{},{GRID},{GRID},{GRID}], got {s:?}", cfg.in_channels),
        ));
    }
    let get = |name: String| -> Result<_> {
        params
            .get(&name)
            .cloned()
            .map(|p| (name.clone(), p))
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    };
    let mut h = z;
    for i in 0..cfg.channels().len() {
        let (wn, w) = get(format!("head.conv{i}.weight"))?;
        let (bn, b) = get(format!("head.conv{i}.bias"))?;
        let w = tape.param(&wn, &w);
        let b = tape.param(&bn, &b);
        h = tape.conv3d(h, w, Some(b), Padding::Same)?;
        h = tape.relu(h);
    }
    let pooled = tape.global_avgpool3d(h)?;
    let (wn, w) = get("head.fc.weight".into())?;
    let (bn, b) = get("head.fc.bias".into())?;
    let w = tape.param(&wn, &w);
    let b = tape.param(&bn, &b);
    tape.linear(pooled, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        assert_eq!(HeadConfig::new(HeadKind::Linear).param_count(), 770);
        assert_eq!(HeadConfig::new(HeadKind::ConvS).param_count(), 1_714_530);
        assert_eq!(HeadConfig::new(HeadKind::ConvL).param_count(), 4_203_202);
    }

    #[test]
    fn built_counts_match_closed_form() {
        for kind in [HeadKind::Linear, HeadKind::ConvS, HeadKind::ConvL] {
            let cfg = HeadConfig::new(kind);
            let p = build_head(&cfg, 1, DType::F32).unwrap();
            assert_eq!(p.numel(), cfg.param_count(), "{kind:?}");
            assert_eq!(p.trainable_numel(), p.numel());
        }
    }

    #[test]
    fn rejects_bad_divisor() {
        let cfg = HeadConfig { width_divisor: 3, ..HeadConfig::default() };
        assert!(build_head(&cfg, 0, DType::F32).is_err());
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!("ConvS".parse::<HeadKind>().unwrap(), HeadKind::ConvS);
        assert!("mlp".parse::<HeadKind>().is_err());
    }
}
