//! Dense row-major `f64` tensors.
//!
//! Training runs entirely in 64-bit floats so finite-difference gradient
//! checks are meaningful; file formats downcast where their schema says so.
//! Reductions accumulate in a fixed serial order, so results are identical
//! regardless of how many worker threads the surrounding code uses.

use crate::error::{EagError, Result};
use crate::numerics::rng::RandomStream;

/// Reductions in this crate always use a fixed association order.
pub const DETERMINISTIC_REDUCTIONS: bool = true;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(EagError::shape(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Gaussian init with the given std.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RandomStream) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(&mut t.data, std);
        t
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RandomStream) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in t.data.iter_mut() {
            *x = rng.uniform_range(lo, hi);
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor (a 1-D tensor is one row).
    #[inline]
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a 2-D tensor (a 1-D tensor is all columns).
    #[inline]
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(EagError::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fixed-order chunked sum: serial within 4096-element chunks, serial over
    /// chunk partials. Association never depends on thread count.
    pub fn sum(&self) -> f64 {
        let mut total = 0.0;
        for chunk in self.data.chunks(4096) {
            let mut part = 0.0;
            for &x in chunk {
                part += x;
            }
            total += part;
        }
        total
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 requires 2-D");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// C = A @ B for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, ka) = (self.rows(), self.cols());
        let (kb, n) = (other.rows(), other.cols());
        assert_eq!(ka, kb, "matmul inner dims: {:?} x {:?}", self.shape, other.shape);
        let mut out = Tensor::zeros(&[m, n]);
        dgemm(
            m,
            ka,
            n,
            1.0,
            self.data.as_ptr(),
            ka as isize,
            1,
            other.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
        out
    }

    pub fn add_inplace(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_inplace shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn axpy_inplace(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }
}

/// Thin wrapper over the SIMD dgemm kernel; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
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
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at2(i, kk) * b.at2(kk, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = RandomStream::seeded(5);
        let a = Tensor::randn(&[7, 13], 1.0, &mut rng);
        let b = Tensor::randn(&[13, 9], 1.0, &mut rng);
        let fast = a.matmul(&b);
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_is_reproducible() {
        let mut rng = RandomStream::seeded(8);
        let t = Tensor::randn(&[63, 129], 1.0, &mut rng);
        let s1 = t.sum();
        let s2 = t.sum();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert!(DETERMINISTIC_REDUCTIONS);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = RandomStream::seeded(9);
        let t = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let back = t.transpose2().transpose2();
        assert_eq!(t, back);
    }
}
