//! Dense `f32` tensors and the reverse-mode tape that differentiates them.
//!
//! Storage is row-major `f32`. Reductions (pooling, dot products, loss sums)
//! accumulate in `f64`. The only broadcast supported is bias addition.

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::gradient_check;
pub(crate) use params::bound;
pub use params::{Bindings, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Guard used by every norm in the crate.
pub const NORM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized axes, length mismatches and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {numel} values but {} were given",
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: valid shape and finite value")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).expect("scalar must be finite")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Unchecked constructor for kernel outputs whose shape is correct by
    /// construction; finiteness is verified by the tape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_columns(&self, start: usize, len: usize) -> Result<Tensor> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::shape(
                "slice_columns",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        };
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_columns",
                format!("columns {start}..{} out of range for width {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Ok(Tensor::from_parts(vec![rows, len], data))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("item {i} has shape {:?}, expected {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Item `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || index >= self.shape[0] {
            return Err(Error::shape(
                "index_outer",
                format!("index {index} invalid for shape {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }

    /// Exact bit pattern of the data, for determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Numerically stable softmax along axis 1 of `[N, K, ...]`.
pub fn softmax_axis1(logits: &Tensor) -> Result<Tensor> {
    if logits.shape.len() < 2 {
        return Err(Error::shape(
            "softmax",
            format!("expected rank >= 2, got {:?}", logits.shape),
        ));
    }
    let (n, k) = (logits.shape[0], logits.shape[1]);
    let inner: usize = logits.shape[2..].iter().product();
    let mut out = vec![0.0f32; logits.numel()];
    let x = &logits.data;
    for b in 0..n {
        let base = b * k * inner;
        for p in 0..inner {
            let max = (0..k)
                .map(|c| x[base + c * inner + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = (0..k)
                .map(|c| (x[base + c * inner + p] as f64 - max).exp())
                .sum();
            for c in 0..k {
                out[base + c * inner + p] = ((x[base + c * inner + p] as f64 - max).exp() / denom) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(logits.shape.clone(), out))
}

/// Cosine similarity of two vectors with both norms floored at `eps`.
pub fn cosine_similarity(a: &[f32], b: &[f32], eps: f32) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = kernels::norm(a).max(eps as f64);
    let nb = kernels::norm(b).max(eps as f64);
    Ok(dot / (na * nb))
}
