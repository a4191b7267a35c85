//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::permutation;
use crate::tensor::{DType, Tensor};

/// Gradient norms below this are compared absolutely: some parameters, such as
/// a key bias under softmax attention, have an identically zero gradient.
pub const NORM_FLOOR: f64 = 1e-8;

/// Outcome of a check on one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, NORM_FLOOR)` over the checked coordinates.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares tape gradients of `f` against central differences with step `eps`.
///
/// Every input is registered as a differentiable leaf. When an input has more
/// than `max_coords` entries a seeded subset is probed. Inputs must be 64-bit.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, max_coords: usize, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(Error::invalid("gradient checks require 64-bit inputs"));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).get_f64(0))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let store = tape.backward(out)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = store
            .get(vars[idx])
            .map(Tensor::to_f64_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            permutation(input.len(), 0x5eed ^ idx as u64)[..max_coords].to_vec()
        };
        let base = input.to_f64_vec();
        let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &c in &coords {
            let mut probe = inputs.to_vec();
            let mut v = base.clone();
            v[c] = base[c] + eps;
            probe[idx] = Tensor::from_vec(input.shape(), v.clone())?;
            let plus = eval(&probe)?;
            v[c] = base[c] - eps;
            probe[idx] = Tensor::from_vec(input.shape(), v)?;
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let d = analytic[c] - numeric;
            diff_sq += d * d;
            a_sq += analytic[c] * analytic[c];
            n_sq += numeric * numeric;
            max_abs = max_abs.max(d.abs());
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt()).max(NORM_FLOOR);
        let rel_err = diff_sq.sqrt() / scale;
        report.push(GradCheck {
            checked: coords.len(),
            rel_err,
            max_abs_err: max_abs,
        });
    }
    Ok(report)
}

/// Largest relative error over a report.
pub fn worst(report: &[GradCheck]) -> f64 {
    report.iter().map(|g| g.rel_err).fold(0.0, f64::max)
}
