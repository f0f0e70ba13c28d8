//! Gated feature fusion, the projection head and the NT-Xent objective.
//!
//! For every tapped stage `i` the pooled feature vector `F_i` is squashed and
//! scaled by a learnable gate, `G_i = sigmoid(F_i) · P_i`. The gated vectors
//! are concatenated in stage order, projected by a two-layer MLP, and the
//! resulting embeddings are scored with the normalized-temperature
//! cross-entropy over all `2N` views of a batch.

use serde::{Deserialize, Serialize};

use crate::augment::ViewPair;
use crate::encoder::{encode, kaiming_init, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{bound, Bindings, ParamStore, Tape, Tensor, Var, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// One scalar gate per stage, broadcast over channels.
    #[default]
    Scalar,
    /// One gate per channel.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Encoder stages feeding the fusion; empty means every stage.
    pub taps: Vec<usize>,
    pub gate_variant: GateVariant,
    pub gate_init: f32,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            taps: Vec::new(),
            gate_variant: GateVariant::Scalar,
            gate_init: 1.0,
            hidden: 256,
            embed_dim: 128,
        }
    }
}

impl FusionConfig {
    pub fn resolved_taps(&self, encoder: &EncoderConfig) -> Result<Vec<usize>> {
        if self.taps.is_empty() {
            return Ok((0..encoder.stage_count).collect());
        }
        if let Some(&bad) = self.taps.iter().find(|&&t| t >= encoder.stage_count) {
            return Err(Error::Config(format!(
                "fusion.taps contains stage {bad}, encoder has {}",
                encoder.stage_count
            )));
        }
        let mut sorted = self.taps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.taps {
            return Err(Error::Config("fusion.taps must be strictly increasing".into()));
        }
        Ok(sorted)
    }

    /// Width of the fused vector, `Σ C_i` over the taps.
    pub fn fused_width(&self, encoder: &EncoderConfig) -> Result<usize> {
        Ok(self.resolved_taps(encoder)?.iter().map(|&s| encoder.channels(s)).sum())
    }

    pub fn layout(&self, encoder: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("fusion.hidden and fusion.embed_dim must be positive".into()));
        }
        let mut out = Vec::new();
        for (g, &s) in self.resolved_taps(encoder)?.iter().enumerate() {
            let len = match self.gate_variant {
                GateVariant::Scalar => 1,
                GateVariant::Channel => encoder.channels(s),
            };
            out.push((format!("head.gate{g}"), vec![len]));
        }
        let width = self.fused_width(encoder)?;
        out.push(("head.proj1.weight".into(), vec![width, self.hidden]));
        out.push(("head.proj1.bias".into(), vec![self.hidden]));
        out.push(("head.proj2.weight".into(), vec![self.hidden, self.embed_dim]));
        out.push(("head.proj2.bias".into(), vec![self.embed_dim]));
        Ok(out)
    }
}

/// Gates at `gate_init`, Kaiming-uniform projection weights, zero biases.
pub fn init_head(fusion: &FusionConfig, encoder: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    let layout = fusion.layout(encoder)?;
    let mut store = kaiming_init(&layout, &mut rng::derive(seed, Stream::Init, 1, 0));
    for (name, shape) in &layout {
        if name.starts_with("head.gate") {
            store.insert(name.clone(), Tensor::full(shape, fusion.gate_init));
        }
    }
    Ok(store)
}

/// Gate handles of a bound head, in tap order.
pub fn gate_vars(params: &Bindings) -> Vec<Var> {
    (0..)
        .map_while(|g| params.get(&format!("head.gate{g}")).copied())
        .collect()
}

/// `concat_i(sigmoid(F_i) · P_i)` over pooled `[N, C_i]` stage vectors.
pub fn gated_fuse(tape: &mut Tape, pooled: &[Var], gates: &[Var]) -> Result<Var> {
    if pooled.len() != gates.len() || pooled.is_empty() {
        return Err(Error::shape(
            "gated_fuse",
            format!("{} stage features but {} gates", pooled.len(), gates.len()),
        ));
    }
    let gated = pooled
        .iter()
        .zip(gates)
        .map(|(&f, &p)| {
            let s = tape.sigmoid(f)?;
            tape.scale_columns(s, p)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&gated)
}

/// `linear → relu → linear`; embeddings are left unnormalized.
pub fn project(tape: &mut Tape, fused: Var, params: &Bindings) -> Result<Var> {
    let h = tape.linear(
        fused,
        bound(params, "head.proj1.weight")?,
        bound(params, "head.proj1.bias")?,
    )?;
    let h = tape.relu(h)?;
    tape.linear(h, bound(params, "head.proj2.weight")?, bound(params, "head.proj2.bias")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub eps: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            eps: NORM_EPS,
        }
    }
}

/// `2N` embeddings where rows `k` and `k + N` are positives.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Tensor,
}

impl EmbeddingBatch {
    pub fn new(z: Tensor) -> Result<Self> {
        let [rows, _] = z.shape()[..] else {
            return Err(Error::shape("embedding batch", format!("expected [2N, D], got {:?}", z.shape())));
        };
        if rows % 2 != 0 {
            return Err(Error::shape("embedding batch", format!("row count {rows} is odd")));
        }
        Ok(Self { z })
    }

    pub fn rows(&self) -> usize {
        self.z.shape()[0]
    }

    /// Index of the positive partner of row `i`.
    pub fn positive(&self, i: usize) -> usize {
        let n = self.rows() / 2;
        (i + n) % (2 * n)
    }
}

/// NT-Xent loss over `[2N, D]` embeddings and its gradient.
///
/// Every row is an anchor; its denominator runs over all `2N − 1` other rows
/// and the loss is the mean over anchors. Log-sum-exp with max subtraction
/// keeps small temperatures finite.
pub fn ntxent_with_grad(z: &Tensor, cfg: &ContrastiveConfig) -> Result<(f64, Vec<f32>)> {
    let batch = EmbeddingBatch::new(z.clone())?;
    let (rows, dim) = (batch.rows(), z.shape()[1]);
    if rows < 4 {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs at least 4 rows (2 pairs) for negatives, got {rows}"
        )));
    }
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {} must be > 0", cfg.temperature)));
    }
    let tau = cfg.temperature;
    let eps = cfg.eps as f64;
    let data = z.data();
    let raw_norms: Vec<f64> = (0..rows)
        .map(|i| data[i * dim..(i + 1) * dim].iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    let norms: Vec<f64> = raw_norms.iter().map(|&n| n.max(eps)).collect();
    let unit: Vec<f64> = (0..rows * dim).map(|j| data[j] as f64 / norms[j / dim]).collect();
    let row = |i: usize| &unit[i * dim..(i + 1) * dim];
    let mut sim = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for k in i..rows {
            let s: f64 = row(i).iter().zip(row(k)).map(|(a, b)| a * b).sum();
            sim[i * rows + k] = s;
            sim[k * rows + i] = s;
        }
    }

    // coef[i][k] = ∂loss/∂sim(i, k) from anchor i's term alone
    let scale = 1.0 / rows as f64;
    let mut coef = vec![0.0f64; rows * rows];
    let mut total = 0.0f64;
    for i in 0..rows {
        let p = batch.positive(i);
        let logits = |k: usize| sim[i * rows + k] / tau;
        let max = (0..rows).filter(|&k| k != i).map(logits).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..rows).filter(|&k| k != i).map(|k| (logits(k) - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits(p);
        for k in (0..rows).filter(|&k| k != i) {
            let softmax = (logits(k) - lse).exp();
            let target = if k == p { 1.0 } else { 0.0 };
            coef[i * rows + k] = scale * (softmax - target) / tau;
        }
    }
    let loss = total * scale;

    let mut grad = vec![0.0f32; rows * dim];
    for i in 0..rows {
        let mut gu = vec![0.0f64; dim];
        for k in 0..rows {
            let c = coef[i * rows + k] + coef[k * rows + i];
            if c != 0.0 {
                for (g, &u) in gu.iter_mut().zip(row(k)) {
                    *g += c * u;
                }
            }
        }
        let ui = row(i);
        let radial: f64 = if raw_norms[i] > eps {
            gu.iter().zip(ui).map(|(g, u)| g * u).sum()
        } else {
            0.0
        };
        for d in 0..dim {
            grad[i * dim + d] = ((gu[d] - radial * ui[d]) / norms[i]) as f32;
        }
    }
    Ok((loss, grad))
}

/// NT-Xent loss value.
pub fn ntxent_loss(batch: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    ntxent_with_grad(&batch.z, cfg).map(|(l, _)| l)
}

/// NT-Xent recorded on the tape.
pub fn ntxent_on_tape(tape: &mut Tape, z: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    let (loss, grad) = ntxent_with_grad(tape.value(z), cfg)?;
    tape.scalar_fn("ntxent_loss", z, loss, grad)
}

/// Stacks `view_a` of every pair, then every `view_b`, so rows `k` and
/// `k + N` are the two views of pair `k`.
pub fn stack_views(pairs: &[ViewPair]) -> Result<Tensor> {
    let views: Vec<Tensor> = pairs
        .iter()
        .map(|p| p.view_a.clone())
        .chain(pairs.iter().map(|p| p.view_b.clone()))
        .collect();
    Tensor::stack(&views)
}

/// Embeddings `z` for a stacked `[2N, 3, P, P]` batch.
pub fn embed(tape: &mut Tape, input: Var, params: &Bindings, encoder: &EncoderConfig, fusion: &FusionConfig) -> Result<Var> {
    let features = encode(tape, input, params, encoder)?;
    let taps = fusion.resolved_taps(encoder)?;
    let pooled: Vec<Var> = taps.iter().map(|&s| features.gap_vectors[s]).collect();
    let fused = gated_fuse(tape, &pooled, &gate_vars(params))?;
    project(tape, fused, params)
}

/// Contrastive loss of a batch of view pairs; `params` binds both encoder
/// and head parameters.
pub fn ssl_forward(
    tape: &mut Tape,
    pairs: &[ViewPair],
    params: &Bindings,
    encoder: &EncoderConfig,
    fusion: &FusionConfig,
    contrastive: &ContrastiveConfig,
) -> Result<Var> {
    let input = tape.constant(stack_views(pairs)?);
    let z = embed(tape, input, params, encoder, fusion)?;
    ntxent_on_tape(tape, z, contrastive)
}
