//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! graph and the no-grad teacher path.
//!
//! Everything is CPU-side and sequential. Kernels accumulate each output
//! element in a fixed order, so results are bit-reproducible for a given
//! build regardless of how callers schedule work.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Element precision tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Dtype> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of all tensors. `f64` is the default precision; `f32` is a
/// runtime opt-in for faster training runs.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_val(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const BYTES: usize = $bytes;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn max_val(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, vals: &[f64]) -> Self {
        Tensor::new(shape, vals.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Same data, new shape (element counts must match).
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape to {:?}", shape);
        self.shape = shape;
        self
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ  (b stored row-major [n,k])
///
/// Transposes `b` into scratch first; the streaming nn loop is ~5x faster
/// than per-output dot products on this workload.
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![E::zero(); k * n];
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        for (p, &v) in brow.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul_nn(a, &bt, m, k, n, out);
}

/// out[k,n] += a[m,k]ᵀ · c[m,n]
pub fn matmul_at<E: Scalar>(a: &[E], c: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow.iter()) {
                *o += av * cv;
            }
        }
    }
}

/// tanh via exp, `1 - 2/(e^{2x} + 1)`. Equivalent up to rounding, roughly
/// 4x faster than libm tanh on this target, and saturates cleanly at both
/// ends (exp overflow gives 1, underflow gives -1).
#[inline]
pub fn fast_tanh<E: Scalar>(x: E) -> E {
    let two = E::from_f64(2.0);
    E::one() - two / ((two * x).exp() + E::one())
}

/// tanh-form GELU used throughout the model.
pub fn gelu<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044_715);
    let half = E::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::one() + fast_tanh(inner))
}

/// d/dx of the tanh-form GELU.
pub fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044_715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = fast_tanh(inner);
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

/// Softmax over the trailing axis, in place over each row.
pub fn softmax_rows<E: Scalar>(x: &mut [E], row: usize) {
    debug_assert!(row > 0);
    for r in x.chunks_exact_mut(row) {
        let mut mx = r[0];
        for &v in r.iter() {
            mx = mx.max_val(v);
        }
        let mut sum = E::zero();
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = E::one() / sum;
        for v in r.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Mean and reciprocal standard deviation of one row.
pub fn row_stats<E: Scalar>(row: &[E], eps: E) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let rstd = E::one() / (var + eps).sqrt();
    (mean, rstd)
}
