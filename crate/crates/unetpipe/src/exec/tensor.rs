//! Dense row-major tensors with a leading batch dimension.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn elems(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape without the batch dimension.
    pub fn item_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn item_elems(&self) -> usize {
        self.item_shape().iter().product()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch rows `start .. start + len` into a new tensor.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor {
        let row = self.item_elems();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let data = self.data[start * row..(start + len) * row].to_vec();
        Tensor { shape, data }
    }

    /// Concatenates along the batch dimension, in argument order.
    pub fn concat_batch(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.batch()).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            assert_eq!(p.item_shape(), &parts[0].shape[1..], "ragged concat");
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tensor{:?}", self.shape)
    }
}
