use crate::error::{Result, TensorError};
use crate::real::Real;

/// Dense n-dimensional array, row-major, with an optional gradient slot.
#[derive(Clone, Debug)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension {
                op: "tensor",
                msg: "all dims must be positive".into(),
                shape,
            });
        }
        let n = numel(&shape);
        if data.len() != n {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                numel: n,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Self::from_vec(shape, vec![F::ZERO; n])
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires: bool) -> Self {
        self.requires_grad = requires;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
