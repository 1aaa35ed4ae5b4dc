//! Dense 64-bit float tensors, rank 1 or 2, row-major.
//!
//! Data lives behind an `Arc` so that interning a parameter into a tape is a
//! pointer copy. Tensors that participate in a graph are never mutated;
//! `data_mut` is for construction and optimizer updates between steps.

use alloc::sync::Arc;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "shape {:?} expects {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        assert!(shape.len() == 1 || shape.len() == 2, "rank must be 1 or 2");
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(alloc::vec![1], alloc::vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(alloc::vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(alloc::vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), alloc::vec![0.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), alloc::vec![v; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count: a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: a vector's length.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("empty shape")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.len(), "reshape numel mismatch");
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "sub shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// a + c*b, same shape.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + c * b).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn l1_distance(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "l1_distance shape mismatch");
        let s: f64 = self.data.iter().zip(other.data.iter()).map(|(a, b)| crate::math::abs(a - b)).sum();
        s / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_numel() {
        let t = Tensor::matrix(2, 3, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "expects")]
    fn wrong_numel_panics() {
        let _ = Tensor::matrix(2, 2, alloc::vec![1.0]);
    }

    #[test]
    fn clone_shares_until_mutated() {
        let a = Tensor::vector(alloc::vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn axpy_combines() {
        let a = Tensor::vector(alloc::vec![1.0, 2.0]);
        let b = Tensor::vector(alloc::vec![10.0, 20.0]);
        assert_eq!(a.axpy(0.5, &b).data(), &[6.0, 12.0]);
    }
}
