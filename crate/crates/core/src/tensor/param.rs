use super::{Gradients, Graph, Tensor, Var};
use crate::error::Result;

/// A trainable tensor with an accumulating gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// Records the current value on `graph`, tracked when `trainable`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Var {
        if trainable {
            graph.leaf(self.value.clone())
        } else {
            graph.constant(self.value.clone())
        }
    }

    /// Adds the gradient that `grads` holds for `var`, if any.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) -> Result<()> {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
