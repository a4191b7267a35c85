//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] replays the record in reverse and produces
//! vector-Jacobian products for every node that requires a gradient. Leaves
//! registered through [`Tape::param`] carry the parameter's trainable flag;
//! frozen parameters never receive gradients.

use indexmap::IndexMap;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::params::{Gradients, Param};
use crate::tensor::{with_dtype, DType, Elem, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool3d(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dtype_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType> {
    if a.dtype() != b.dtype() {
        return Err(Error::DType {
            op,
            expected: a.dtype(),
            found: b.dtype(),
        });
    }
    Ok(a.dtype())
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    with_dtype!(x.dtype(), T => {
        let v: Vec<T> = x.as_slice::<T>().unwrap().iter().map(|&a| T::of(f(a.f64()))).collect();
        Tensor::from_vec(x.shape(), v).unwrap()
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a named parameter once; later calls return the same handle.
    pub fn param(&mut self, name: &str, param: &Param) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(param.tensor.clone(), param.trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes later `param(name, ..)` lookups resolve to `v`.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_layout(tb, "add")?;
        let out = ta.add(tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        dtype_check("add_broadcast", ta, tb)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "add_broadcast",
                format!("{sb:?} is not a suffix of {sa:?}"),
            ));
        }
        let block = tb.len();
        let out = with_dtype!(ta.dtype(), T => {
            let bv = tb.as_slice::<T>()?;
            let mut v = ta.as_slice::<T>()?.to_vec();
            for chunk in v.chunks_mut(block.max(1)) {
                chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x += y);
            }
            Tensor::from_vec(sa, v)?
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_layout(tb, "mul")?;
        let out = with_dtype!(ta.dtype(), T => {
            let v: Vec<T> = ta.as_slice::<T>()?.iter().zip(tb.as_slice::<T>()?).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(ta.shape(), v)?
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map_unary(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = with_dtype!(x.dtype(), T => {
            let v: Vec<T> = x.as_slice::<T>().unwrap().iter().map(|&v| kernels::gelu(v)).collect();
            Tensor::from_vec(x.shape(), v).unwrap()
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("softmax", "empty class dimension"));
        }
        let out = with_dtype!(x.dtype(), T => Tensor::from_vec(x.shape(), kernels::softmax_rows(x.as_slice::<T>()?, cols))?);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Layer normalisation over the last axis followed by `* gamma + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [cols] || tb.shape() != [cols] || cols == 0 {
            return Err(Error::shape(
                "layernorm",
                format!("input {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        dtype_check("layernorm", tx, tg)?;
        dtype_check("layernorm", tx, tb)?;
        let out = with_dtype!(tx.dtype(), T => Tensor::from_vec(
            tx.shape(),
            kernels::layernorm_forward(tx.as_slice::<T>()?, tg.as_slice::<T>()?, tb.as_slice::<T>()?, eps),
        )?);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// `x[..., F] * w[F, O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        dtype_check("linear", tx, tw)?;
        let xs = tx.shape();
        let ws = tw.shape();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (f, o) = (ws[0], ws[1]);
        let m = tx.len() / f.max(1);
        if let Some(b) = b {
            let tb = self.value(b);
            dtype_check("linear", tx, tb)?;
            if tb.shape() != [o] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{o}]", tb.shape())));
            }
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = o;
        let out = with_dtype!(tx.dtype(), T => {
            let bias = match b { Some(b) => Some(self.value(b).as_slice::<T>()?), None => None };
            Tensor::from_vec(&out_shape, kernels::linear_forward(tx.as_slice::<T>()?, tw.as_slice::<T>()?, bias, m, f, o))?
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Plain matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::shape("matmul", format!("lhs {:?}", self.value(a).shape())));
        }
        self.linear(a, b, None)
    }

    /// Batched product of `[B,M,K]` with `[B,K,N]` (or `[B,N,K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        dtype_check("bmm", ta, tb)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let out = with_dtype!(ta.dtype(), T => Tensor::from_vec(
            &[bt, m, n],
            kernels::bmm(ta.as_slice::<T>()?, tb.as_slice::<T>()?, bt, m, k, n, false, trans_b),
        )?);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let nd = x.shape().len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {nd}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let out = with_dtype!(x.dtype(), T => Tensor::from_vec(
            &out_shape,
            kernels::permute(x.as_slice::<T>()?, x.shape(), perm),
        )?);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Stride-1 3D cross-correlation of `[N,Cin,D,H,W]` with `[Cout,Cin,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        dtype_check("conv3d", tx, tw)?;
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[0], xs[1], ws[0], ws[2], [xs[2], xs[3], xs[4]], padding)
            .ok_or_else(|| Error::shape("conv3d", format!("kernel {} invalid for input {xs:?}", ws[2])))?;
        if let Some(b) = b {
            let tb = self.value(b);
            dtype_check("conv3d", tx, tb)?;
            if tb.shape() != [ws[0]] {
                return Err(Error::shape("conv3d", format!("bias {:?}", tb.shape())));
            }
        }
        let [od, oh, ow] = geom.out_dims;
        let out = with_dtype!(tx.dtype(), T => {
            let bias = match b { Some(b) => Some(self.value(b).as_slice::<T>()?), None => None };
            Tensor::from_vec(
                &[xs[0], ws[0], od, oh, ow],
                kernels::conv3d_forward(tx.as_slice::<T>()?, tw.as_slice::<T>()?, bias, &geom),
            )?
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Mean over the three spatial axes: `[N,C,D,H,W] -> [N,C]`.
    pub fn global_avgpool3d(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::shape("global_avgpool3d", format!("{s:?}")));
        }
        let spatial = s[2] * s[3] * s[4];
        let out = with_dtype!(x.dtype(), T => {
            let inv = T::of(1.0 / spatial as f64);
            let v: Vec<T> = x.as_slice::<T>()?.chunks(spatial.max(1)).map(|c| c.iter().copied().sum::<T>() * inv).collect();
            Tensor::from_vec(&[s[0], s[1]], v)?
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::AvgPool3d(a), rg))
    }

    /// Mean cross-entropy of `[N,C]` logits against labels in `0..C`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let c = s[1];
        if c == 0 {
            return Err(Error::shape("cross_entropy", "empty class dimension"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let (loss, probs) = with_dtype!(x.dtype(), T => {
            let (l, p) = kernels::cross_entropy(x.as_slice::<T>()?, labels, c);
            (Tensor::from_vec::<T>(&[], vec![l])?, Tensor::from_vec(s, p)?)
        });
        loss.check_finite("cross-entropy loss")?;
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = with_dtype!(x.dtype(), T => Tensor::from_vec::<T>(&[], vec![x.as_slice::<T>().unwrap().iter().copied().sum()]).unwrap());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0, lv.dtype()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let contributions = self.vjp(&node.op, &node.value, &gy)?;
            grads[id] = Some(gy);
            for (v, g) in contributions {
                accumulate(&mut grads[v.0], g)?;
            }
        }
        Ok(GradStore { grads })
    }

    /// Gradients of the named trainable parameters, in registration order.
    pub fn param_grads(&self, store: &GradStore) -> Result<Gradients> {
        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            if !self.rg(v) {
                continue;
            }
            let g = match store.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(v).shape(), self.value(v).dtype()),
            };
            g.check_finite(&format!("gradient of {name}"))?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// `backward` followed by [`Tape::param_grads`].
    pub fn backward_params(&self, loss: Var) -> Result<Gradients> {
        let store = self.backward(loss)?;
        self.param_grads(&store)
    }

    fn vjp(&self, op: &Op, out: &Tensor, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        res.push((v, gy.clone()));
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*a) {
                    res.push((*a, gy.clone()));
                }
                if self.rg(*b) {
                    let tb = self.value(*b);
                    let g = with_dtype!(gy.dtype(), T => Tensor::from_vec(tb.shape(), kernels::column_sums(gy.as_slice::<T>()?, tb.len()))?);
                    res.push((*b, g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                with_dtype!(gy.dtype(), T => {
                    let g = gy.as_slice::<T>()?;
                    if self.rg(*a) {
                        let v: Vec<T> = g.iter().zip(tb.as_slice::<T>()?).map(|(&x, &y)| x * y).collect();
                        res.push((*a, Tensor::from_vec(ta.shape(), v)?));
                    }
                    if self.rg(*b) {
                        let v: Vec<T> = g.iter().zip(ta.as_slice::<T>()?).map(|(&x, &y)| x * y).collect();
                        res.push((*b, Tensor::from_vec(tb.shape(), v)?));
                    }
                });
            }
            Op::Scale(a, f) => res.push((*a, gy.scale(*f))),
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = with_dtype!(gy.dtype(), T => {
                    let v: Vec<T> = gy.as_slice::<T>()?.iter().zip(x.as_slice::<T>()?)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                    Tensor::from_vec(x.shape(), v)?
                });
                res.push((*a, g));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let g = with_dtype!(gy.dtype(), T => {
                    let v: Vec<T> = gy.as_slice::<T>()?.iter().zip(x.as_slice::<T>()?)
                        .map(|(&g, &x)| g * kernels::gelu_grad(x)).collect();
                    Tensor::from_vec(x.shape(), v)?
                });
                res.push((*a, g));
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap();
                let g = with_dtype!(gy.dtype(), T => Tensor::from_vec(
                    out.shape(),
                    kernels::softmax_rows_backward(out.as_slice::<T>()?, gy.as_slice::<T>()?, cols),
                )?);
                res.push((*a, g));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                with_dtype!(gy.dtype(), T => {
                    let lg = kernels::layernorm_backward(tx.as_slice::<T>()?, tg.as_slice::<T>()?, gy.as_slice::<T>()?, *eps);
                    if self.rg(*x) {
                        res.push((*x, Tensor::from_vec(tx.shape(), lg.dx)?));
                    }
                    if self.rg(*gamma) {
                        res.push((*gamma, Tensor::from_vec(tg.shape(), lg.dgamma)?));
                    }
                    if self.rg(*beta) {
                        res.push((*beta, Tensor::from_vec(tg.shape(), lg.dbeta)?));
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (f, o) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.len() / f.max(1);
                with_dtype!(gy.dtype(), T => {
                    let g = gy.as_slice::<T>()?;
                    if self.rg(*x) {
                        let mut dx = vec![T::zero(); m * f];
                        crate::tensor::gemm(m, o, f, g, false, tw.as_slice::<T>()?, true, &mut dx, false);
                        res.push((*x, Tensor::from_vec(tx.shape(), dx)?));
                    }
                    if self.rg(*w) {
                        let mut dw = vec![T::zero(); f * o];
                        crate::tensor::gemm(f, m, o, tx.as_slice::<T>()?, true, g, false, &mut dw, false);
                        res.push((*w, Tensor::from_vec(tw.shape(), dw)?));
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            res.push((*b, Tensor::from_vec(&[o], kernels::column_sums(g, o))?));
                        }
                    }
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                with_dtype!(gy.dtype(), T => {
                    let g = gy.as_slice::<T>()?;
                    let av = ta.as_slice::<T>()?;
                    let bv = tb.as_slice::<T>()?;
                    if self.rg(*a) {
                        // dA = dC * op(B)^T
                        let da = kernels::bmm(g, bv, bt, m, n, k, false, !*trans_b);
                        res.push((*a, Tensor::from_vec(ta.shape(), da)?));
                    }
                    if self.rg(*b) {
                        let db = if *trans_b {
                            // B stored [n,k]: dB = dC^T * A
                            kernels::bmm(g, av, bt, n, m, k, true, false)
                        } else {
                            // dB = A^T * dC
                            kernels::bmm(av, g, bt, k, m, n, true, false)
                        };
                        res.push((*b, Tensor::from_vec(tb.shape(), db)?));
                    }
                });
            }
            Op::Reshape(a) => res.push((*a, gy.reshape(self.value(*a).shape())?)),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let g = with_dtype!(gy.dtype(), T => Tensor::from_vec(
                    self.value(*a).shape(),
                    kernels::permute(gy.as_slice::<T>()?, gy.shape(), &inv),
                )?);
                res.push((*a, g));
            }
            Op::Conv3d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (tx, tw) = (self.value(*x), self.value(*w));
                with_dtype!(gy.dtype(), T => {
                    let cg = kernels::conv3d_backward(tx.as_slice::<T>()?, tw.as_slice::<T>()?, gy.as_slice::<T>()?, geom, need);
                    if let Some(dx) = cg.dx {
                        res.push((*x, Tensor::from_vec(tx.shape(), dx)?));
                    }
                    if let Some(dw) = cg.dw {
                        res.push((*w, Tensor::from_vec(tw.shape(), dw)?));
                    }
                    if let (Some(db), Some(b)) = (cg.db, b) {
                        res.push((*b, Tensor::from_vec(&[geom.cout], db)?));
                    }
                });
            }
            Op::AvgPool3d(a) => {
                let s = self.value(*a).shape().to_vec();
                let spatial = s[2] * s[3] * s[4];
                let g = with_dtype!(gy.dtype(), T => {
                    let inv = T::of(1.0 / spatial as f64);
                    let mut v = Vec::with_capacity(spatial * gy.len());
                    for &gv in gy.as_slice::<T>()? {
                        v.extend(std::iter::repeat_n(gv * inv, spatial));
                    }
                    Tensor::from_vec(&s, v)?
                });
                res.push((*a, g));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.shape()[1];
                let n = labels.len();
                let g = with_dtype!(gy.dtype(), T => {
                    let scale = gy.as_slice::<T>()?[0] / T::of(n as f64);
                    let mut v = probs.as_slice::<T>()?.to_vec();
                    for (i, &y) in labels.iter().enumerate() {
                        v[i * c + y] = v[i * c + y] - T::one();
                    }
                    v.iter_mut().for_each(|x| *x = *x * scale);
                    Tensor::from_vec(probs.shape(), v)?
                });
                res.push((*logits, g));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                res.push((*a, Tensor::full(x.shape(), gy.get_f64(0), gy.dtype())));
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}
