//! Dense row-major tensors and the handful of kernels the engine needs.
//!
//! There are no strides or views: one tensor is one contiguous buffer, which
//! keeps the memory-transaction accounting in [`crate::trace`] unambiguous.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("finite scalar")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform samples in `[lo, hi)` from a ChaCha8 stream seeded with `seed`.
    SeededUniform { lo: f64, hi: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("a tensor needs at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Constant(c) => vec![T::from_f64(c); len],
            Init::SeededUniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!("uniform range [{lo}, {hi}) is empty")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| T::from_f64(lo + (hi - lo) * rng.random::<f64>()))
                    .collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sum_of_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.as_matrix("transpose")?;
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Tensor { shape: vec![cols, rows], data: out })
    }

    fn as_matrix(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("{op} needs a rank-2 tensor, got {:?}", self.shape))),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
///
/// Each output element is accumulated over `k` in ascending order regardless
/// of how rows are distributed, so the parallel and serial paths agree bitwise.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    #[cfg(feature = "parallel")]
    {
        let (m, k) = a.as_matrix("matmul")?;
        let n = b.shape().last().copied().unwrap_or(0);
        if m * k * n >= PAR_MATMUL_MIN_WORK && m > 1 {
            return matmul_parallel(a, b);
        }
    }
    matmul_serial(a, b)
}

#[cfg(feature = "parallel")]
const PAR_MATMUL_MIN_WORK: usize = 1 << 16;

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner extents differ ({:?} x {:?})",
            a.shape, b.shape
        )));
    }
    Ok((m, k, n))
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], n: usize, out_row: &mut [T]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

pub fn matmul_serial<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a.data[i * k..(i + 1) * k], &b.data, n, out_row);
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

#[cfg(feature = "parallel")]
pub fn matmul_parallel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    use rayon::prelude::*;

    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(&a.data[i * k..(i + 1) * k], &b.data, n, out_row);
    });
    Ok(Tensor { shape: vec![m, n], data: out })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

pub fn elementwise<T: Scalar>(kind: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let data = if kind.is_binary() {
        let b = b.ok_or_else(|| Error::shape(format!("{kind:?} needs two operands")))?;
        a.same_shape(b, &format!("{kind:?}"))?;
        let f: fn(T, T) -> T = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        match kind {
            Elementwise::Scale(c) => {
                let c = T::from_f64(c);
                a.data.iter().map(|&x| x * c).collect()
            }
            _ => a.data.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        }
    };
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// `target <- target + alpha * x`, in place.
pub fn axpy_inplace<T: Scalar>(target: &mut Tensor<T>, alpha: T, x: &Tensor<T>) -> Result<()> {
    target.same_shape(x, "axpy")?;
    if alpha == T::zero() {
        return Ok(());
    }
    for (t, &v) in target.data.iter_mut().zip(&x.data) {
        *t = *t + alpha * v;
    }
    Ok(())
}
