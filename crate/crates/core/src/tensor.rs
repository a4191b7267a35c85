//! Dense row-major tensors with a runtime dtype.
//!
//! Storage is reference counted so clones are cheap and shared tensors stay
//! immutable; mutation goes through copy-on-write (`make_mut`).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Code used in the wire and feature-file formats.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Runs `$body` with `$T` bound to the Rust scalar type of `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                #[allow(dead_code)]
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                #[allow(dead_code)]
                type $T = f64;
                $body
            }
        }
    };
}
pub(crate) use with_dtype;

/// Scalar element types a tensor can hold.
pub trait Elem:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Send + Sync + Debug + Default + 'static
{
    const DTYPE: DType;

    fn wrap(v: Vec<Self>) -> Storage;
    fn view(s: &Storage) -> Option<&[Self]>;
    fn view_mut(s: &mut Storage) -> Option<&mut Vec<Self>>;
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn to_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly `size_of::<Self>()` little-endian bytes.
    fn from_le(bytes: &[u8]) -> Self;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;

    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F32(Arc::new(v))
    }
    fn view(s: &Storage) -> Option<&[Self]> {
        match s {
            Storage::F32(v) => Some(v.as_slice()),
            Storage::F64(_) => None,
        }
    }
    fn view_mut(s: &mut Storage) -> Option<&mut Vec<Self>> {
        match s {
            Storage::F32(v) => Some(Arc::make_mut(v)),
            Storage::F64(_) => None,
        }
    }
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;

    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F64(Arc::new(v))
    }
    fn view(s: &Storage) -> Option<&[Self]> {
        match s {
            Storage::F64(v) => Some(v.as_slice()),
            Storage::F32(_) => None,
        }
    }
    fn view_mut(s: &mut Storage) -> Option<&mut Vec<Self>> {
        match s {
            Storage::F64(v) => Some(Arc::make_mut(v)),
            Storage::F32(_) => None,
        }
    }
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, Debug)]
pub enum Storage {
    F32(Arc<Vec<f32>>),
    F64(Arc<Vec<f64>>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense n-dimensional array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn from_vec<T: Elem>(shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: T::wrap(data),
        })
    }

    /// Builds a tensor of the requested dtype from f64 values.
    pub fn from_f64(shape: &[usize], values: &[f64], dtype: DType) -> Result<Tensor> {
        with_dtype!(dtype, T => Tensor::from_vec::<T>(shape, values.iter().map(|&v| T::of(v)).collect()))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 0.0, dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let n = shape.iter().product();
        let data = with_dtype!(dtype, T => T::wrap(vec![T::of(value); n]));
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[], value, dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    pub fn as_slice<T: Elem>(&self) -> Result<&[T]> {
        T::view(&self.data).ok_or(Error::DType {
            op: "as_slice",
            expected: T::DTYPE,
            found: self.dtype(),
        })
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn make_mut<T: Elem>(&mut self) -> Result<&mut [T]> {
        let found = self.dtype();
        T::view_mut(&mut self.data)
            .map(|v| v.as_mut_slice())
            .ok_or(Error::DType {
                op: "make_mut",
                expected: T::DTYPE,
                found,
            })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.as_ref().clone(),
        }
    }

    pub fn get_f64(&self, index: usize) -> f64 {
        match &self.data {
            Storage::F32(v) => v[index] as f64,
            Storage::F64(v) => v[index],
        }
    }

    /// Same data, new shape. Shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Tensor::from_f64(&self.shape, &self.to_f64_vec(), dtype).expect("same shape")
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Errors with `NonFinite(context)` if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F64(a), Storage::F64(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Largest absolute element-wise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum_f64(&self) -> f64 {
        self.to_f64_vec().iter().sum()
    }

    pub fn norm_sq_f64(&self) -> f64 {
        self.to_f64_vec().iter().map(|x| x * x).sum()
    }

    /// Element-wise `self + other` for equal shapes and dtypes.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        with_dtype!(self.dtype(), T => {
            let f = T::of(factor);
            let v: Vec<T> = self.as_slice::<T>().unwrap().iter().map(|&x| x * f).collect();
            Tensor { shape: self.shape.clone(), data: T::wrap(v) }
        })
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_layout(other, op)?;
        // Routing through f64 is exact for add/sub of f32 followed by rounding back.
        with_dtype!(self.dtype(), T => {
            let a = self.as_slice::<T>()?;
            let b = other.as_slice::<T>()?;
            let v: Vec<T> = a.iter().zip(b).map(|(&x, &y)| T::of(f(x.f64(), y.f64()))).collect();
            Tensor::from_vec(&self.shape, v)
        })
    }

    pub(crate) fn same_layout(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        if self.dtype() != other.dtype() {
            return Err(Error::DType {
                op,
                expected: self.dtype(),
                found: other.dtype(),
            });
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        with_dtype!(first.dtype(), T => {
            let mut out: Vec<T> = Vec::with_capacity(first.len() * items.len());
            for t in items {
                first.same_layout(t, "stack")?;
                out.extend_from_slice(t.as_slice::<T>()?);
            }
            Tensor::from_vec(&shape, out)
        })
    }

    /// Splits the leading axis into per-row tensors (copies).
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("unstack", "scalar tensor"))?;
        let row: usize = rest.iter().product();
        with_dtype!(self.dtype(), T => {
            let data = self.as_slice::<T>()?;
            (0..n)
                .map(|i| Tensor::from_vec(rest, data[i * row..(i + 1) * row].to_vec()))
                .collect()
        })
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (Storage::F32(a), Storage::F32(b)) => a == b,
                (Storage::F64(a), Storage::F64(b)) => a == b,
                _ => false,
            }
    }
}

/// Row-major GEMM: `C[m,n] (+)= op(A)[m,k] * op(B)[k,n]`.
///
/// `A` is stored `[m,k]`, or `[k,m]` when `trans_a`; likewise `B` is `[k,n]` or
/// `[n,k]`. Large products are split over rows of `C`; each output element is
/// still produced by a single kernel call, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };

    const PAR_THRESHOLD: usize = 1 << 22;
    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 * threads && m * k * n >= PAR_THRESHOLD {
        let rows = m.div_ceil(threads);
        let a_addr = a.as_ptr() as usize;
        let b_addr = b.as_ptr() as usize;
        c.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(chunk, c_rows)| {
                let i0 = chunk * rows;
                let mr = c_rows.len() / n;
                // SAFETY: row block [i0, i0 + mr) lies inside A; B is read-only and
                // shared; each task writes a disjoint block of C.
                unsafe {
                    let a_ptr = (a_addr as *const T).offset(i0 as isize * rsa);
                    T::gemm_raw(
                        mr,
                        k,
                        n,
                        T::one(),
                        a_ptr,
                        rsa,
                        csa,
                        b_addr as *const T,
                        rsb,
                        csb,
                        beta,
                        c_rows.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        // SAFETY: lengths were checked above against the strides used.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_triple_loop_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = [10.0f64];
        gemm(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::from_vec(&[2, 3], vec![0f32; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], vec![0f32; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.as_slice::<f64>().is_err());
    }

    #[test]
    fn make_mut_copies_shared_buffers() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let mut b = a.clone();
        b.make_mut::<f64>().unwrap()[0] = 5.0;
        assert_eq!(a.as_slice::<f64>().unwrap(), &[1.0, 2.0]);
        assert_eq!(b.as_slice::<f64>().unwrap(), &[5.0, 2.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite(_))));
    }
}
