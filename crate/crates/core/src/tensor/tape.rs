use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Gap {
        input: Var,
        hw: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        dims: (usize, usize, usize),
    },
    Concat {
        parts: Vec<Var>,
    },
    ScaleColumns {
        input: Var,
        gate: Var,
    },
    Upsample2x {
        input: Var,
        dims: (usize, usize, usize),
    },
    Sum(Var),
    /// Scalar-valued function whose local gradient w.r.t. each input was
    /// computed during the forward pass (losses, cosine similarity).
    Scalar {
        inputs: Vec<(Var, Vec<f32>)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value for scalar reductions.
    exact: Option<f64>,
}

/// Ordered record of every operation in one forward pass.
///
/// Records are appended in execution order, so the record list is already a
/// topological order; [`Tape::backward`] replays it in reverse. A tape is
/// meant to live for a single optimization step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf, honouring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// First element of `var`, at full precision when the op kept one.
    pub fn scalar(&self, var: Var) -> f64 {
        let node = &self.nodes[var.0];
        node.exact.unwrap_or(node.value.data()[0] as f64)
    }

    /// Gradient accumulated by the last [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.nodes[var.0].value.grad()
    }

    fn data(&self, var: Var) -> &[f32] {
        self.nodes[var.0].value.data()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Result<Var> {
        self.push_exact(op_name, shape, data, op, None)
    }

    fn push_exact(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        op: Op,
        exact: Option<f64>,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) || exact.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { input, kernel, bias, .. } => {
                self.needs(*input) || self.needs(*kernel) || self.needs(*bias)
            }
            Op::Gap { input, .. } | Op::Upsample2x { input, .. } => self.needs(*input),
            Op::Relu(v) | Op::Sigmoid(v) | Op::Sum(v) => self.needs(*v),
            Op::Add(a, b) => self.needs(*a) || self.needs(*b),
            Op::Linear { input, weight, bias, .. } => {
                self.needs(*input) || self.needs(*weight) || self.needs(*bias)
            }
            Op::Concat { parts } => parts.iter().any(|&p| self.needs(p)),
            Op::ScaleColumns { input, gate } => self.needs(*input) || self.needs(*gate),
            Op::Scalar { inputs } => inputs.iter().any(|(v, _)| self.needs(*v)),
        };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
            exact,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D cross-correlation over `[N, C, H, W]` with a `[K, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let [n, c, h, w] = xs[..] else {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {xs:?}")));
        };
        let [k, kc, kh, kw] = ks[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be [K,C,kh,kw], got {ks:?}")));
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("channel axis: input has C={c}, kernel expects C={kc}"),
            ));
        }
        if bs != [k] {
            return Err(Error::shape("conv2d", format!("bias axis: expected [{k}], got {bs:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("height axis: kernel {kh} exceeds padded height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("width axis: kernel {kw} exceeds padded width {}", w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        self.push(
            "conv2d",
            vec![n, k, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(input)[..] else {
            return Err(Error::shape(
                "global_average_pool",
                format!("expected [N,C,H,W], got {:?}", self.shape(input)),
            ));
        };
        let out = kernels::gap_forward(self.data(input), n * c, h * w);
        self.push("global_average_pool", vec![n, c], out, Op::Gap { input, hw: h * w })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.data(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push("relu", shape, out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self
            .data(input)
            .iter()
            .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
            .collect();
        let shape = self.shape(input).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(input))
    }

    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b))
    }

    /// `input · weight + bias` for `[N, D] × [D, E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[n, d], &[wd, e]) = (xs, ws) else {
            return Err(Error::shape(
                "linear",
                format!("expected [N,D] x [D,E], got {xs:?} x {ws:?}"),
            ));
        };
        if d != wd {
            return Err(Error::shape(
                "linear",
                format!("inner axis: input width {d} vs weight rows {wd}"),
            ));
        }
        if bs != [e] {
            return Err(Error::shape("linear", format!("bias axis: expected [{e}], got {bs:?}")));
        }
        let out = kernels::linear_forward(self.data(input), self.data(weight), self.data(bias), n, d, e);
        self.push(
            "linear",
            vec![n, e],
            out,
            Op::Linear {
                input,
                weight,
                bias,
                dims: (n, d, e),
            },
        )
    }

    /// Concatenation along axis 1 (feature columns or channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts given"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat", format!("parts need rank >= 2, got {base:?}")));
        }
        let mut width = 0;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat",
                    format!("part {i} has shape {s:?}, incompatible with {base:?}"),
                ));
            }
            width += s[1];
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(n * width * inner);
        for b in 0..n {
            for &p in parts {
                let block = self.shape(p)[1] * inner;
                out.extend_from_slice(&self.data(p)[b * block..(b + 1) * block]);
            }
        }
        let mut shape = base;
        shape[1] = width;
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec() })
    }

    /// Multiplies `[N, C]` columns by a gate of shape `[1]` (broadcast) or `[C]`.
    pub fn scale_columns(&mut self, input: Var, gate: Var) -> Result<Var> {
        let [n, c] = self.shape(input)[..] else {
            return Err(Error::shape(
                "scale_columns",
                format!("input must be [N,C], got {:?}", self.shape(input)),
            ));
        };
        let gs = self.shape(gate);
        if gs != [1] && gs != [c] {
            return Err(Error::shape(
                "scale_columns",
                format!("gate must be [1] or [{c}], got {gs:?}"),
            ));
        }
        let g = self.data(gate);
        let x = self.data(input);
        let out = (0..n * c)
            .map(|i| x[i] * if g.len() == 1 { g[0] } else { g[i % c] })
            .collect();
        self.push("scale_columns", vec![n, c], out, Op::ScaleColumns { input, gate })
    }

    /// Nearest-neighbour 2× spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(input)[..] else {
            return Err(Error::shape(
                "upsample2x",
                format!("expected [N,C,H,W], got {:?}", self.shape(input)),
            ));
        };
        let out = kernels::upsample2x_forward(self.data(input), n * c, h, w);
        self.push(
            "upsample2x",
            vec![n, c, 2 * h, 2 * w],
            out,
            Op::Upsample2x {
                input,
                dims: (n * c, h, w),
            },
        )
    }

    /// Sum of every element, as a `[1]` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.data(input).iter().map(|&v| v as f64).sum();
        self.push_exact("sum", vec![1], vec![total as f32], Op::Sum(input), Some(total))
    }

    /// Cosine similarity of two `[D]` vectors, norms floored at `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        let (av, bv) = (self.data(a), self.data(b));
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "cosine_similarity",
                format!("expected two [D] vectors, got {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let na = kernels::norm(av).max(eps as f64);
        let nb = kernels::norm(bv).max(eps as f64);
        let dot: f64 = av.iter().zip(bv).map(|(&x, &y)| x as f64 * y as f64).sum();
        let sim = dot / (na * nb);
        let local = |this: &[f32], other: &[f32], n_this: f64, n_other: f64| -> Vec<f32> {
            // Norm floors are constants, so the projection term only applies
            // above the floor.
            let radial = kernels::norm(this) > eps as f64;
            this.iter()
                .zip(other)
                .map(|(&t, &o)| {
                    let mut g = o as f64 / (n_this * n_other);
                    if radial {
                        g -= sim * t as f64 / (n_this * n_this);
                    }
                    g as f32
                })
                .collect()
        };
        let ga = local(av, bv, na, nb);
        let gb = local(bv, av, nb, na);
        self.push_exact(
            "cosine_similarity",
            vec![1],
            vec![sim as f32],
            Op::Scalar {
                inputs: vec![(a, ga), (b, gb)],
            },
            Some(sim),
        )
    }

    /// Records a scalar function of `input` whose value and gradient were
    /// computed by the caller.
    pub(crate) fn scalar_fn(&mut self, op_name: &'static str, input: Var, value: f64, local_grad: Vec<f32>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(Error::shape(op_name, "local gradient length mismatch"));
        }
        self.push_exact(
            op_name,
            vec![1],
            vec![value as f32],
            Op::Scalar {
                inputs: vec![(input, local_grad)],
            },
            Some(value),
        )
    }

    /// Reverse-mode sweep from `output`, seeding its gradient with ones.
    ///
    /// Each record reachable from `output` is visited exactly once, in
    /// reverse recording order. Leaf gradients are readable via
    /// [`Tape::grad`] afterwards.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0; self.value(output).numel()]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], var: Var, g: Vec<f32>) {
        if !self.wants(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        let node = &self.nodes[var.0];
        match node.op {
            Op::Leaf => node.value.requires_grad(),
            _ => node.requires_grad,
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need_input = self.wants(*input);
                let cg = kernels::conv2d_backward(geom, self.data(*input), self.data(*kernel), g, need_input);
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *input, gx);
                }
                self.accumulate(grads, *kernel, cg.kernel);
                self.accumulate(grads, *bias, cg.bias);
            }
            Op::Gap { input, hw } => {
                self.accumulate(grads, *input, kernels::gap_backward(g, *hw));
            }
            Op::Relu(input) => {
                let gx = self
                    .data(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, gx);
            }
            Op::Sigmoid(input) => {
                let gx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *input, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Linear {
                input,
                weight,
                bias,
                dims: (n, d, e),
            } => {
                let (gx, gw, gb) = kernels::linear_backward(self.data(*input), self.data(*weight), g, *n, *d, *e);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::Concat { parts } => {
                let n = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let row = out.shape()[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[1] * inner;
                    let mut gp = Vec::with_capacity(n * block);
                    for b in 0..n {
                        gp.extend_from_slice(&g[b * row + offset..b * row + offset + block]);
                    }
                    offset += block;
                    self.accumulate(grads, p, gp);
                }
            }
            Op::ScaleColumns { input, gate } => {
                let x = self.data(*input);
                let gate_v = self.data(*gate);
                let c = self.shape(*input)[1];
                let scalar = gate_v.len() == 1;
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * if scalar { gate_v[0] } else { gate_v[i % c] })
                    .collect();
                let mut gg = vec![0.0f64; gate_v.len()];
                for (i, (&gv, &xv)) in g.iter().zip(x).enumerate() {
                    gg[if scalar { 0 } else { i % c }] += gv as f64 * xv as f64;
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *gate, gg.into_iter().map(|v| v as f32).collect());
            }
            Op::Upsample2x {
                input,
                dims: (nc, h, w),
            } => {
                self.accumulate(grads, *input, kernels::upsample2x_backward(g, *nc, *h, *w));
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Scalar { inputs } => {
                for (v, local) in inputs {
                    self.accumulate(grads, *v, local.iter().map(|&l| l * g[0]).collect());
                }
            }
        }
    }
}
