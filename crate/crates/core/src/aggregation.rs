//! Aggregation weights and weighted parameter averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{with_dtype, Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    SimpleAvg,
    FedAvg,
    FedCe,
    RateMyLora,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 4] = [
        AggregationMethod::SimpleAvg,
        AggregationMethod::FedAvg,
        AggregationMethod::FedCe,
        AggregationMethod::RateMyLora,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AggregationMethod::SimpleAvg => "simpleavg",
            AggregationMethod::FedAvg => "fedavg",
            AggregationMethod::FedCe => "fedce",
            AggregationMethod::RateMyLora => "ratemylora",
        }
    }
}

/// Tolerance on `Σω = 1`.
pub const SUM_TOL: f64 = 1e-12;

/// Checks `ω_i ≥ 0`, finiteness and `Σω = 1 ± 1e-12`.
pub fn validate_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(format!("weights must be finite and nonnegative: {w:?}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Divides by the sum; errors when the sum is not positive.
pub fn normalize(w: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("cannot normalise weights with sum {s}")));
    }
    Ok(w.iter().map(|x| x / s).collect())
}

pub fn simple_avg_weights(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("no clients"));
    }
    Ok(vec![1.0 / n as f64; n])
}

/// `ω_i = |D_i| / Σ|D_j|`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("FedAvg needs a positive total sample count"));
    }
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Intermediate quantities of one FedCE step.
#[derive(Clone, Debug, PartialEq)]
pub struct FedCeWeights {
    pub grad: Vec<f64>,
    pub data: Vec<f64>,
    /// Normalised `grad·data`, or `None` when every product was zero.
    pub raw: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// FedCE: `ω_grad_i = max(0, cos(u_i, Σ_{j≠i} u_j))`, `ω_data_i` = leave-one-out
/// validation error, `raw ∝ ω_grad·ω_data`, result `½·prev + ½·raw`. Falls back
/// to `prev` when every raw weight is zero.
pub fn fedce_weights(updates: &[Vec<f64>], loo_val_errors: &[f64], prev: &[f64]) -> Result<FedCeWeights> {
    let n = updates.len();
    if n < 2 {
        return Err(Error::invalid("FedCE needs at least two clients"));
    }
    if loo_val_errors.len() != n || prev.len() != n {
        return Err(Error::invalid("FedCE inputs have mismatched lengths"));
    }
    let dim = updates[0].len();
    if updates.iter().any(|u| u.len() != dim) {
        return Err(Error::invalid("FedCE updates differ in length"));
    }
    if loo_val_errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::invalid(format!("LOO errors must be finite and >= 0: {loo_val_errors:?}")));
    }
    validate_weights(prev)?;
    let mut total = vec![0.0; dim];
    for u in updates {
        total.iter_mut().zip(u).for_each(|(t, x)| *t += x);
    }
    let grad: Vec<f64> = updates
        .iter()
        .map(|u| {
            let others: Vec<f64> = total.iter().zip(u).map(|(t, x)| t - x).collect();
            cosine(u, &others).max(0.0)
        })
        .collect();
    let prod: Vec<f64> = grad.iter().zip(loo_val_errors).map(|(g, e)| g * e).collect();
    let (raw, weights) = if prod.iter().sum::<f64>() > 0.0 {
        let raw = normalize(&prod)?;
        let mixed: Vec<f64> = prev.iter().zip(&raw).map(|(p, r)| 0.5 * p + 0.5 * r).collect();
        (Some(raw), normalize(&mixed)?)
    } else {
        (None, prev.to_vec())
    };
    Ok(FedCeWeights {
        grad,
        data: loo_val_errors.to_vec(),
        raw,
        weights,
    })
}

/// Rate-My-LoRA: `ω_i ∝ max(0, m_i^(r−1) − m_i^(r)) + 1/(10N)`.
pub fn rate_my_lora_weights(prev_metric: &[f64], cur_metric: &[f64]) -> Result<Vec<f64>> {
    let n = cur_metric.len();
    if n == 0 || prev_metric.len() != n {
        return Err(Error::invalid("Rate-My-LoRA needs metric history for every client"));
    }
    if prev_metric.iter().chain(cur_metric).any(|m| !m.is_finite()) {
        return Err(Error::invalid("Rate-My-LoRA metrics must be finite"));
    }
    let floor = 1.0 / (10.0 * n as f64);
    let raw: Vec<f64> = prev_metric
        .iter()
        .zip(cur_metric)
        .map(|(p, c)| (p - c).max(0.0) + floor)
        .collect();
    normalize(&raw)
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub method: AggregationMethod,
    /// Weights used in the previous round (uniform before the first).
    pub weights: Vec<f64>,
    /// Validation accuracy per round and client.
    pub history: Vec<Vec<f64>>,
    pub round: usize,
}

impl AggregationState {
    pub fn new(method: AggregationMethod, n: usize) -> Result<Self> {
        Ok(Self {
            method,
            weights: simple_avg_weights(n)?,
            history: Vec::new(),
            round: 0,
        })
    }
}

/// Joint permutation-invariant weighted sum of one element across clients.
///
/// Products are formed in f64, sorted, and added with Neumaier compensation,
/// so the result does not depend on client order. When every client holds the
/// same value that value is returned unchanged.
fn weighted_element(values: &mut [f64], w: &[f64], scratch: &mut Vec<f64>) -> f64 {
    let first = values[0];
    if values.iter().all(|v| v.to_bits() == first.to_bits()) {
        return first;
    }
    scratch.clear();
    scratch.extend(values.iter().zip(w).map(|(v, w)| v * w));
    scratch.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in scratch.iter() {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `θ = Σ ω_i θ_i` element-wise over structurally identical parameter sets.
pub fn aggregate(updates: &[&ParamSet], w: &[f64]) -> Result<ParamSet> {
    if updates.is_empty() || updates.len() != w.len() {
        return Err(Error::invalid(format!(
            "{} updates but {} weights",
            updates.len(),
            w.len()
        )));
    }
    validate_weights(w)?;
    let base = updates[0];
    if let Some(bad) = updates.iter().position(|u| !u.same_structure(base)) {
        return Err(Error::invalid(format!("update {bad} differs in structure from update 0")));
    }
    let mut out = ParamSet::new();
    for (name, p) in base.iter() {
        let tensors: Vec<&Tensor> = updates.iter().map(|u| &u.get(name).expect("same structure").tensor).collect();
        let t = with_dtype!(p.tensor.dtype(), T => {
            let slices: Vec<&[T]> = tensors.iter().map(|t| t.as_slice::<T>()).collect::<Result<_>>()?;
            let mut vals = vec![0.0f64; slices.len()];
            let mut scratch = Vec::with_capacity(slices.len());
            let mut res = Vec::with_capacity(p.tensor.len());
            for i in 0..p.tensor.len() {
                for (v, s) in vals.iter_mut().zip(&slices) {
                    *v = s[i].f64();
                }
                res.push(T::of(weighted_element(&mut vals, w, &mut scratch)));
            }
            Tensor::from_vec(p.tensor.shape(), res)?
        });
        out.insert(name, t, p.trainable)?;
    }
    Ok(out)
}

/// For each client `i`, the aggregate of the others with `ω` renormalised over them.
pub fn leave_one_out_models(updates: &[&ParamSet], w: &[f64]) -> Result<Vec<ParamSet>> {
    let n = updates.len();
    if n < 2 {
        return Err(Error::invalid("leave-one-out needs at least two clients"));
    }
    if w.len() != n {
        return Err(Error::invalid("weight vector length differs from update count"));
    }
    (0..n)
        .map(|i| {
            let rest: Vec<&ParamSet> = (0..n).filter(|&j| j != i).map(|j| updates[j]).collect();
            let rw: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| w[j]).collect();
            let rw = if rw.iter().sum::<f64>() > 0.0 {
                normalize(&rw)?
            } else {
                simple_avg_weights(n - 1)?
            };
            aggregate(&rest, &rw)
        })
        .collect()
}
