//! Minimal n-dimensional arrays with tape-based reverse-mode differentiation.

mod graph;
mod kernels;
mod tensor;

pub use graph::{bce_with_logits, sigmoid, Graph, TensorId};
pub use tensor::Tensor;

impl Graph {
    /// `x · w + b` for a `[T, in]` input, `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> crate::Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    /// `a + broadcast(b)`.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> crate::Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    /// `a * broadcast(b)`.
    pub fn mul_broadcast(&mut self, a: TensorId, b: TensorId) -> crate::Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.mul(a, bb)
    }
}
