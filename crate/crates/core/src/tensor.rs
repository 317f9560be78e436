//! Dense 4-axis arrays and the scalar trait the numeric kernels are generic over.
//!
//! Feature maps inside the networks are stored channel-major, `[C, B, H, W]`,
//! so that a convolution over a whole batch is one matrix product. Public
//! image-like types (`ImageTensor`, `LatentTensor`, `ConditionMap`) are
//! batch-major `[B, C, H, W]` and convert at the boundary.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training, sampling)
/// and `f64` (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static + std::iter::Sum
{
    /// `c = alpha * a @ b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view used by [`matmul`]. `trans` swaps the roles of rows
/// and columns without copying.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a @ b + beta * out`, `out` row-major `m×n`.
pub fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], beta: T) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes checked above; slices outlive the call.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("shapes differ: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Swaps the first two axes: `[A, B, H, W] -> [B, A, H, W]`.
    pub fn swap01(&self) -> Self {
        let [a, b, h, w] = self.shape;
        let plane = h * w;
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * plane;
                let dst = (j * a + i) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Self { shape: [b, a, h, w], data: out }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Selects index `i` along axis 1 of a `[C, B, H, W]` array.
    pub fn select_axis1(&self, idx: &[usize]) -> Self {
        let [a, b, h, w] = self.shape;
        let plane = h * w;
        let mut out = Vec::with_capacity(a * idx.len() * plane);
        for i in 0..a {
            for &j in idx {
                debug_assert!(j < b);
                let src = (i * b + j) * plane;
                out.extend_from_slice(&self.data[src..src + plane]);
            }
        }
        Self { shape: [a, idx.len(), h, w], data: out }
    }

    /// Selects entries along axis 0.
    pub fn select_axis0(&self, idx: &[usize]) -> Self {
        let [_, b, h, w] = self.shape;
        let inner = b * h * w;
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        Self { shape: [idx.len(), b, h, w], data: out }
    }

    /// Concatenates along axis 0.
    pub fn concat0(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let [_, b, h, w] = first.shape;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [b, h, w] {
                return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", first.shape, p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: [rows, b, h, w], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_loop() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut out = vec![0.0; 8];
        matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut out, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // a^T (3x2) @ a (2x3)
        let mut out = vec![0.0; 9];
        matmul(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), &mut out, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert_eq!(out[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn swap01_is_involution() {
        let t = Tensor::<f32>::from_vec([2, 3, 2, 1], (0..12).map(|v| v as f32).collect()).unwrap();
        let s = t.swap01();
        assert_eq!(s.shape(), [3, 2, 2, 1]);
        assert_eq!(s.data()[2..4], [6.0, 7.0]);
        assert_eq!(s.swap01(), t);
    }
}
