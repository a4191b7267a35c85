//! Slice-level forward and backward kernels used by the tape.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Elem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a stride-1 3D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        k: usize,
        in_dims: [usize; 3],
        padding: Padding,
    ) -> Option<ConvGeom> {
        if k == 0 || k % 2 == 0 {
            return None;
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        let mut out_dims = [0; 3];
        for (o, &i) in out_dims.iter_mut().zip(&in_dims) {
            let span = i + 2 * pad;
            if span < k {
                return None;
            }
            *o = span - k + 1;
        }
        Some(ConvGeom {
            batch,
            cin,
            cout,
            k,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the unfolded patch matrix: `cin * k^3`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Unfolds one sample `[cin, D, H, W]` into `[cin*k^3, D'*H'*W']`.
fn im2col<T: Elem>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.k;
    let p = g.out_spatial();
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = oz as isize + kz as isize - pad;
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            let base = (oz * oh + oy) * ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                dst[base..base + ow].iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src_row = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize + kx as isize - pad;
                                dst[base + ox] = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    xc[src_row + ix as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[cin*k^3, P]` back into `[cin, D, H, W]`.
fn col2im<T: Elem>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.k;
    let p = g.out_spatial();
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = oz as isize + kz as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (oz * oh + oy) * ow;
                            let dst_row = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dxc[dst_row + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y[n, co] = sum_ci w[co, ci] * x[n, ci] + b[co]`, correlated over space.
pub fn conv3d_forward<T: Elem>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_len = g.cin * g.in_spatial();
    let out_len = g.cout * g.out_spatial();
    let p = g.out_spatial();
    let kk = g.patch_len();
    let mut y = vec![T::zero(); g.batch * out_len];
    y.par_chunks_mut(out_len.max(1))
        .zip(x.par_chunks(in_len.max(1)))
        .for_each(|(yn, xn)| {
            let mut cols = vec![T::zero(); kk * p];
            im2col(xn, g, &mut cols);
            gemm(g.cout, kk, p, w, false, &cols, false, yn, false);
            if let Some(b) = b {
                for (co, row) in yn.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Samples processed together when reducing per-sample weight gradients.
const CONV_REDUCE_GROUP: usize = 8;

pub fn conv3d_backward<T: Elem>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let in_len = g.cin * g.in_spatial();
    let out_len = g.cout * g.out_spatial();
    let p = g.out_spatial();
    let kk = g.patch_len();

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.batch * in_len];
        dx.par_chunks_mut(in_len.max(1))
            .zip(dy.par_chunks(out_len.max(1)))
            .for_each(|(dxn, dyn_)| {
                let mut dcols = vec![T::zero(); kk * p];
                gemm(kk, g.cout, p, w, true, dyn_, false, &mut dcols, false);
                col2im(&dcols, g, dxn);
            });
        dx
    });

    // Per-sample partials are summed in sample order so the result does not
    // depend on the thread count.
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.cout * kk];
        let samples: Vec<usize> = (0..g.batch).collect();
        for group in samples.chunks(CONV_REDUCE_GROUP) {
            let partials: Vec<Vec<T>> = group
                .par_iter()
                .map(|&n| {
                    let mut cols = vec![T::zero(); kk * p];
                    im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
                    let mut part = vec![T::zero(); g.cout * kk];
                    gemm(
                        g.cout,
                        p,
                        kk,
                        &dy[n * out_len..(n + 1) * out_len],
                        false,
                        &cols,
                        true,
                        &mut part,
                        false,
                    );
                    part
                })
                .collect();
            for part in partials {
                dw.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
            }
        }
        dw
    });

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dy[n * out_len + co * p..n * out_len + (co + 1) * p];
                *acc += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads { dx, dw, db }
}

/// `y[M,O] = x[M,F] * w[F,O] (+ b[O])`.
pub fn linear_forward<T: Elem>(x: &[T], w: &[T], b: Option<&[T]>, m: usize, f: usize, o: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * o];
    gemm(m, f, o, x, false, w, false, &mut y, false);
    if let Some(b) = b {
        for row in y.chunks_mut(o.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
        }
    }
    y
}

/// Column sums of a row-major `[rows, cols]` matrix, accumulated row by row.
pub fn column_sums<T: Elem>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks(cols.max(1)) {
        out.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    out
}

/// Batched `C[b] = A[b] * B[b]` (or `A[b] * B[b]^T` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Elem>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    if m * n == 0 {
        return c;
    }
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        gemm(m, k, n, ai, trans_a, bi, trans_b, ci, false);
    });
    c
}

pub fn softmax_rows<T: Elem>(x: &[T], cols: usize) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    y
}

pub fn softmax_rows_backward<T: Elem>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((dxr, yr), dyr) in dx
        .chunks_mut(cols.max(1))
        .zip(y.chunks(cols.max(1)))
        .zip(dy.chunks(cols.max(1)))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Normalises each row to zero mean and unit (biased) variance.
/// Returns `(xhat, rstd)`.
pub fn layernorm_stats<T: Elem>(x: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols.max(1);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let nf = T::of(cols as f64);
    for (r, (xr, hr)) in x.chunks(cols).zip(xhat.chunks_mut(cols)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * rs;
        }
        rstd[r] = rs;
    }
    (xhat, rstd)
}

pub fn layernorm_forward<T: Elem>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let cols = gamma.len();
    let (mut y, _) = layernorm_stats(x, cols, eps);
    for row in y.chunks_mut(cols) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    y
}

pub struct LayerNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn layernorm_backward<T: Elem>(x: &[T], gamma: &[T], dy: &[T], eps: f64) -> LayerNormGrads<T> {
    let cols = gamma.len();
    let (xhat, rstd) = layernorm_stats(x, cols, eps);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let nf = T::of(cols as f64);
    let mut dxhat = vec![T::zero(); cols];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks(cols)
        .zip(xhat.chunks(cols))
        .zip(dx.chunks_mut(cols))
        .enumerate()
    {
        for j in 0..cols {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
        let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for j in 0..cols {
            dxr[j] = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Elem>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Elem>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// General axis permutation of a row-major tensor.
pub fn permute<T: Elem>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if nd == 0 {
        out.push(x[0]);
        return out;
    }
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        for j in 0..inner {
            out.push(x[offset + j * inner_stride]);
        }
        // advance odometer over all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mean cross-entropy of `[n, c]` logits against class indices.
/// Returns `(loss, softmax probabilities)`.
pub fn cross_entropy<T: Elem>(logits: &[T], labels: &[usize], c: usize) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, c);
    let n = labels.len();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[y];
    }
    (total / T::of(n as f64), probs)
}
