//! Differentiable primitives: tensors, forward kernels, and a reverse-mode tape.

pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{
    gelu, gelu_scalar, layer_norm, matmul, matmul_bt, normal_cdf, relu_squared, relu_squared_scalar, softmax,
};
pub use tensor::{Precision, Tensor};

/// A value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub value: Tensor,
    pub gradient: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Self { value, gradient }
    }

    /// Reads `v` and its gradient out of a finished backward sweep.
    pub fn from_graph(graph: &Graph, grads: &Gradients, v: Var) -> Self {
        Self {
            value: graph.value(v).clone(),
            gradient: grads.get_or_zeros(graph, v),
        }
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        self.gradient.add_assign(g);
    }
}
