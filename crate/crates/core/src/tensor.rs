//! Plain dense tensor: a shape and a row-major `Vec<f64>`.
//!
//! Gradient bookkeeping lives on the tape (`tape::Tape`); `Tensor` itself is
//! just the value type that flows through forward passes, checkpoints, and
//! datasets.

use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, data has {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.normal()).collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Max-norm distance to another tensor of the same shape.
    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn new_rejects_wrong_length() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn gaussian_is_seed_deterministic() {
        let a = Tensor::gaussian(vec![4, 4], 0.5, &mut SeededRng::new(8));
        let b = Tensor::gaussian(vec![4, 4], 0.5, &mut SeededRng::new(8));
        assert_eq!(a, b);
    }

    #[test]
    fn linf_distance_is_max_abs_difference() {
        let a = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]);
        let b = Tensor::new(vec![3], vec![0.5, 1.0, 1.0]);
        assert_eq!(a.linf_distance(&b), 3.0);
    }
}
