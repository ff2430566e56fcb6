//! Dense n-dimensional tensors over f32/f64 and the raw compute kernels.
//!
//! Training runs in 32-bit; gradient checking runs the same code paths in
//! 64-bit via the [`Element`] abstraction.

use crate::error::{Error, Result};

/// Floating-point element type the engine is generic over.
///
/// The matmul kernels live on the trait so each width gets native arithmetic
/// (the f32 path must not round-trip through f64).
pub trait Element:
    Copy + PartialEq + PartialOrd + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c[m,n] += a[m,k] * b[k,n]`.
    fn matmul_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize);
    /// `c[m,n] += a[k,m]^T * b[k,n]` (transpose not materialized).
    fn matmul_tn_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize);
    /// `c[m,n] += a[m,k] * b[n,k]^T` (transpose not materialized).
    fn matmul_nt_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize);
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn matmul_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // ikj order: inner loop runs over contiguous rows of b and c
                // and vectorizes.
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (p, &aip) in arow.iter().enumerate() {
                        let brow = &b[p * n..(p + 1) * n];
                        for j in 0..n {
                            crow[j] += aip * brow[j];
                        }
                    }
                }
            }

            fn matmul_tn_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
                debug_assert_eq!(a.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                for p in 0..k {
                    let arow = &a[p * m..(p + 1) * m];
                    let brow = &b[p * n..(p + 1) * n];
                    for i in 0..m {
                        let aip = arow[i];
                        let crow = &mut c[i * n..(i + 1) * n];
                        for j in 0..n {
                            crow[j] += aip * brow[j];
                        }
                    }
                }
            }

            fn matmul_nt_acc(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        let brow = &b[j * k..(j + 1) * k];
                        let mut acc: $t = 0.0;
                        for p in 0..k {
                            acc += arow[p] * brow[p];
                        }
                        crow[j] += acc;
                    }
                }
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Dense tensor: a shape and a flat row-major value buffer.
///
/// Invariant: `shape.iter().product() == data.len()` (checked at
/// construction).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::ZERO; numel] }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Convert elementwise to another element type.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(t.clone().reshaped(vec![3, 2]).is_ok());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn matmul_identity() {
        // [[1,2],[3,4]] * I = [[1,2],[3,4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::matmul_acc(&mut c, &a, &eye, 2, 2, 2);
        assert_eq!(c, a);
    }

    #[test]
    fn transposed_kernels_agree_with_plain() {
        let a = [1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0f64, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2
        let mut c = [0.0f64; 4];
        f64::matmul_acc(&mut c, &a, &b, 2, 3, 2);

        // a^T laid out as (3,2) -> tn kernel
        let at = [1.0f64, 3.0, -2.0, 4.0, 0.5, -1.0];
        let mut c2 = [0.0f64; 4];
        f64::matmul_tn_acc(&mut c2, &at, &b, 2, 3, 2);
        for (x, y) in c.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b^T laid out as (2,3) -> nt kernel
        let bt = [2.0f64, 0.0, 1.5, 1.0, -1.0, 2.5];
        let mut c3 = [0.0f64; 4];
        f64::matmul_nt_acc(&mut c3, &a, &bt, 2, 3, 2);
        for (x, y) in c.iter().zip(c3.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
