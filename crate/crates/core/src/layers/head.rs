use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{backward, Matrix};

/// `y = x W + b`, applied to every node independently.
#[derive(Clone, Debug)]
pub struct Linear {
    pub(crate) weight: Parameter,
    pub(crate) bias: Option<Parameter>,
}

impl Linear {
    pub fn new(weight: Parameter, bias: Option<Parameter>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.value.shape() != (1, weight.value.cols()) {
                return Err(Error::shape(format!("{} bias", weight.name), (1, weight.value.cols()), b.value.shape()));
            }
        }
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!("{} input", self.weight.name), (x.rows(), self.in_dim()), x.shape()));
        }
        let mut y = x.matmul(&self.weight.value)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(&b.value)?;
        }
        Ok(y)
    }

    /// Accumulates `dW = xᵀ dy`, `db = Σ dy` and returns `dx = dy Wᵀ`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let (dx, dw) = backward::matmul(x, &self.weight.value, dy)?;
        self.weight.grad.add_assign(&dw)?;
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&backward::add_row_broadcast(dy))?;
        }
        Ok(dx)
    }

    pub(crate) fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.weight];
        out.extend(&self.bias);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight];
        out.extend(&mut self.bias);
        out
    }
}

#[derive(Clone, Debug)]
pub enum HeadLayer {
    Linear(Linear),
    Relu,
}
