//! Computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! information to replay its adjoint. [`Graph::backward`] walks the tape in
//! reverse application order and accumulates gradients into leaf nodes.

use rand::Rng;

use super::kernels::{for_each_broadcast, gemm, MatRef};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    BroadcastTo(TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        input: TensorId,
        axis: usize,
        start: usize,
    },
    Relu(TensorId),
    Gelu(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LogSoftmax {
        input: TensorId,
        axis: usize,
    },
    LayerNorm {
        input: TensorId,
        axis: usize,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: TensorId,
        scale: Vec<f64>,
    },
    CausalConv1d {
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
    },
    MaskedFill {
        input: TensorId,
        mask: Vec<bool>,
    },
    Sum(TensorId),
    SumAxis {
        input: TensorId,
        axis: usize,
    },
    BceWithLogits {
        logits: TensorId,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single-writer tape. Build one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: TensorId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[TensorId]) -> TensorId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!(
                "{what}: expected a matrix, got {s:?}"
            ))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dims {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rm(self.value(a).data(), k),
            MatRef::rm(self.value(b).data(), n),
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Numpy-style broadcast of `a` to `shape` (trailing alignment).
    pub fn broadcast_to(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let src_shape = self.shape(a).to_vec();
        if src_shape.len() > shape.len()
            || src_shape
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .any(|(&s, &d)| s != 1 && s != d)
        {
            return Err(Error::shape(format!(
                "cannot broadcast {src_shape:?} to {shape:?}"
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(&src_shape, shape, |d, s| out[d] = src[s]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BroadcastTo(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let src_shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&src_shape, axis)?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice {start}..{} out of range for axis {axis} of {src_shape:?}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape(), data).expect("same length");
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).numel() == 0 {
            return Err(Error::shape("log of an empty tensor"));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: TensorId, mask: &[bool], value: f64) -> Result<TensorId> {
        let v = self.value(a);
        if mask.len() != v.numel() {
            return Err(Error::shape(format!(
                "masked_fill: mask of {} for tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let data = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let value = Tensor::new(v.shape(), data)?;
        Ok(self.push(
            value,
            Op::MaskedFill {
                input: a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    /// Inverted dropout. Identity when `rng` is `None` (inference) or `p == 0`.
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        p: f64,
        rng: Option<&mut R>,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(a),
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let value = Tensor::new(v.shape(), data)?;
        Ok(self.push(value, Op::Dropout { input: a, scale }, &[a]))
    }

    // ---- reductions and normalisation -----------------------------------

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(&new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { input: a, axis }, &[a]))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let value = self.softmax_value(a, axis, false)?;
        Ok(self.push(value, Op::Softmax { input: a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let value = self.softmax_value(a, axis, true)?;
        Ok(self.push(value, Op::LogSoftmax { input: a, axis }, &[a]))
    }

    fn softmax_value(&self, a: TensorId, axis: usize, log: bool) -> Result<Tensor> {
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if n == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln();
                    for k in 0..n {
                        out[at(k)] = src[at(k)] - max - lz;
                    }
                } else {
                    for k in 0..n {
                        out[at(k)] /= z;
                    }
                }
            }
        }
        Tensor::new(v.shape(), out)
    }

    /// Normalises to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!(
                "layer_norm eps {eps} must be positive"
            )));
        }
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if n == 0 {
            return Err(Error::shape("layer_norm over an empty axis"));
        }
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| src[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (src[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for k in 0..n {
                    out[at(k)] = (src[at(k)] - mean) * r;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                axis,
                inv_std,
            },
            &[a],
        ))
    }

    // ---- sequence ops ---------------------------------------------------

    /// Causal dilated convolution: `input` is `T × C_in`, `kernel` is
    /// `K × C_in × C_out`. The input is left-padded with `(K − 1)·dilation`
    /// zeros so the output keeps length `T`; tap `K − 1` sees the current step.
    pub fn causal_conv1d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
    ) -> Result<TensorId> {
        let (t_len, c_in) = self.matrix_dims(input, "causal_conv1d input")?;
        let (k_len, c_out) = match *self.shape(kernel) {
            [k, ci, co] if ci == c_in => (k, co),
            ref s => {
                return Err(Error::shape(format!(
                    "causal_conv1d: kernel {s:?} incompatible with input channels {c_in}"
                )))
            }
        };
        if dilation == 0 || k_len == 0 {
            return Err(Error::invalid(
                "causal_conv1d needs kernel size and dilation ≥ 1",
            ));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; t_len * c_out];
        for k in 0..k_len {
            let shift = (k_len - 1 - k) * dilation;
            if shift >= t_len {
                continue;
            }
            let rows = t_len - shift;
            let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
            gemm(
                rows,
                c_in,
                c_out,
                MatRef::rm(&x[..rows * c_in], c_in),
                MatRef::rm(wk, c_out),
                &mut out[shift * c_out..],
                true,
            );
        }
        let value = Tensor::new(&[t_len, c_out], out)?;
        Ok(self.push(
            value,
            Op::CausalConv1d {
                input,
                kernel,
                dilation,
            },
            &[input, kernel],
        ))
    }

    // ---- fused losses ---------------------------------------------------

    /// `Σ wᵢ·(max(xᵢ,0) − xᵢ·yᵢ + ln(1 + e^{−|xᵢ|}))`, the logit-space binary
    /// cross-entropy, weighted per element.
    pub fn bce_with_logits_sum(
        &mut self,
        logits: TensorId,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<TensorId> {
        let v = self.value(logits);
        if targets.len() != v.numel() || weights.len() != v.numel() {
            return Err(Error::shape(format!(
                "bce_with_logits: {} logits, {} targets, {} weights",
                v.numel(),
                targets.len(),
                weights.len()
            )));
        }
        let total = v
            .data()
            .iter()
            .zip(targets.iter().zip(weights))
            .filter(|(_, (_, &w))| w != 0.0)
            .map(|(&x, (&y, &w))| w * bce_with_logits(x, y))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj = Adjoints {
            nodes: &self.nodes,
            buf: vec![None; loss.0 + 1],
        };
        if let Some(s) = adj.slot(loss) {
            s[0] += 1.0;
        }
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj.buf[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            backprop(&mut adj, &node.op, &node.value, &g);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }
}

struct Adjoints<'a> {
    nodes: &'a [Node],
    buf: Vec<Option<Vec<f64>>>,
}

impl Adjoints<'_> {
    fn slot(&mut self, id: TensorId) -> Option<&mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.buf[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn add_scaled(&mut self, id: TensorId, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(s) = self.slot(id) {
            for (i, (acc, &gi)) in s.iter_mut().zip(g).enumerate() {
                *acc += f(i, gi);
            }
        }
    }
}

fn backprop(adj: &mut Adjoints<'_>, op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (adj.value(*a).shape()[0], adj.value(*a).shape()[1]);
            let n = adj.value(*b).shape()[1];
            let nodes = adj.nodes;
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(s) = adj.slot(*a) {
                gemm(m, n, k, MatRef::rm(g, n), MatRef::rm_t(bv, n), s, true);
            }
            if let Some(s) = adj.slot(*b) {
                gemm(k, m, n, MatRef::rm_t(av, k), MatRef::rm(g, n), s, true);
            }
        }
        Op::Add(a, b) => {
            adj.add_scaled(*a, g, |_, gi| gi);
            adj.add_scaled(*b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            adj.add_scaled(*a, g, |_, gi| gi);
            adj.add_scaled(*b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let nodes = adj.nodes;
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            adj.add_scaled(*a, g, |i, gi| gi * bv[i]);
            adj.add_scaled(*b, g, |i, gi| gi * av[i]);
        }
        Op::Div(a, b) => {
            let nodes = adj.nodes;
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            adj.add_scaled(*a, g, |i, gi| gi / bv[i]);
            adj.add_scaled(*b, g, |i, gi| -gi * av[i] / (bv[i] * bv[i]));
        }
        Op::Scale(a, c) => adj.add_scaled(*a, g, |_, gi| gi * c),
        Op::AddScalar(a) | Op::Reshape(a) => adj.add_scaled(*a, g, |_, gi| gi),
        Op::BroadcastTo(a) => {
            let src_shape = adj.value(*a).shape().to_vec();
            if let Some(s) = adj.slot(*a) {
                for_each_broadcast(&src_shape, out.shape(), |d, si| s[si] += g[d]);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(s) = adj.slot(*a) {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis).expect("validated");
            let mut offset = 0;
            let total = out.shape()[*axis];
            for &id in inputs {
                let len = adj.value(id).shape()[*axis];
                if let Some(s) = adj.slot(id) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let src_shape = adj.value(*input).shape().to_vec();
            let (outer, n, inner) = split_axis(&src_shape, *axis).expect("validated");
            let len = out.shape()[*axis];
            if let Some(s) = adj.slot(*input) {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let dst = &mut s[base..base + len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Relu(a) => {
            let x = adj.nodes[a.0].value.data();
            adj.add_scaled(*a, g, |i, gi| if x[i] > 0.0 { gi } else { 0.0 });
        }
        Op::Gelu(a) => {
            let x = adj.nodes[a.0].value.data();
            adj.add_scaled(*a, g, |i, gi| gi * gelu_grad(x[i]));
        }
        Op::Tanh(a) => {
            let y = out.data();
            adj.add_scaled(*a, g, |i, gi| gi * (1.0 - y[i] * y[i]));
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            adj.add_scaled(*a, g, |i, gi| gi * y[i] * (1.0 - y[i]));
        }
        Op::Exp(a) => {
            let y = out.data();
            adj.add_scaled(*a, g, |i, gi| gi * y[i]);
        }
        Op::Log(a) => {
            let x = adj.nodes[a.0].value.data();
            adj.add_scaled(*a, g, |i, gi| gi / x[i]);
        }
        Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
            let log = matches!(op, Op::LogSoftmax { .. });
            let (outer, n, inner) = split_axis(out.shape(), *axis).expect("validated");
            let y = out.data();
            if let Some(s) = adj.slot(*input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        if log {
                            let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += g[at(k)] - y[at(k)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            axis,
            inv_std,
        } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis).expect("validated");
            let y = out.data();
            let nf = n as f64;
            if let Some(s) = adj.slot(*input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mg = (0..n).map(|k| g[at(k)]).sum::<f64>() / nf;
                        let mgy = (0..n).map(|k| g[at(k)] * y[at(k)]).sum::<f64>() / nf;
                        let r = inv_std[o * inner + i];
                        for k in 0..n {
                            s[at(k)] += r * (g[at(k)] - mg - y[at(k)] * mgy);
                        }
                    }
                }
            }
        }
        Op::Dropout { input, scale } => adj.add_scaled(*input, g, |i, gi| gi * scale[i]),
        Op::MaskedFill { input, mask } => {
            adj.add_scaled(*input, g, |i, gi| if mask[i] { 0.0 } else { gi })
        }
        Op::Sum(a) => adj.add_scaled(*a, &vec![g[0]; adj.value(*a).numel()], |_, gi| gi),
        Op::SumAxis { input, axis } => {
            let src_shape = adj.value(*input).shape().to_vec();
            let (outer, n, inner) = split_axis(&src_shape, *axis).expect("validated");
            if let Some(s) = adj.slot(*input) {
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut s[(o * n + k) * inner..(o * n + k + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
        Op::CausalConv1d {
            input,
            kernel,
            dilation,
        } => {
            let nodes = adj.nodes;
            let x = nodes[input.0].value.data();
            let w = nodes[kernel.0].value.data();
            let (t_len, c_in) = (
                nodes[input.0].value.shape()[0],
                nodes[input.0].value.shape()[1],
            );
            let (k_len, c_out) = (
                nodes[kernel.0].value.shape()[0],
                nodes[kernel.0].value.shape()[2],
            );
            let taps = (0..k_len).filter_map(|k| {
                let shift = (k_len - 1 - k) * dilation;
                (shift < t_len).then_some((k, shift, t_len - shift))
            });
            if let Some(s) = adj.slot(*input) {
                for (k, shift, rows) in taps.clone() {
                    let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
                    gemm(
                        rows,
                        c_out,
                        c_in,
                        MatRef::rm(&g[shift * c_out..], c_out),
                        MatRef::rm_t(wk, c_out),
                        &mut s[..rows * c_in],
                        true,
                    );
                }
            }
            if let Some(s) = adj.slot(*kernel) {
                for (k, shift, rows) in taps {
                    gemm(
                        c_in,
                        rows,
                        c_out,
                        MatRef::rm_t(&x[..rows * c_in], c_in),
                        MatRef::rm(&g[shift * c_out..], c_out),
                        &mut s[k * c_in * c_out..(k + 1) * c_in * c_out],
                        true,
                    );
                }
            }
        }
        Op::BceWithLogits {
            logits,
            targets,
            weights,
        } => {
            let x = adj.nodes[logits.0].value.data();
            let g0 = g[0];
            adj.add_scaled(*logits, x, |i, xi| {
                g0 * weights[i] * (sigmoid(xi) - targets[i])
            });
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable elementwise logit-space binary cross-entropy.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
