//! Dense row-major tensors of 64-bit floats, at most four axes.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the extents multiply out to the data
    /// length and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Config(format!(
                "tensor rank {} unsupported (1..=4)",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                expected: shape,
                got: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Construction without the finiteness scan, for internal hot paths that
    /// already guarantee their inputs.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                expected: shape,
                got: self.shape.clone(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_extents() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
