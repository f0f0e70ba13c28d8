//! U-Net style decoder, soft Dice loss and IoU metrics.

use serde::{Deserialize, Serialize};

use crate::encoder::{conv_layout, encode, kaiming_init, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{bound, softmax_axis1, Bindings, ParamStore, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_classes: usize,
    /// Adds one nested node at the finest encoder level: the stage-0 skip is
    /// augmented with a convolution over `[stage 0, up(stage 1)]`.
    pub nested_skip: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            nested_skip: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "decoder.num_classes = {} must be >= 2",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `(upsampled channels, skip channels, output channels)` of each decoder
    /// level, from the deepest up. The last level has no skip.
    fn levels(&self, enc: &EncoderConfig) -> Vec<(usize, usize, usize)> {
        let s = enc.stage_count;
        let mut current = enc.channels(s - 1);
        (0..s)
            .map(|k| {
                let (skip, out) = if k + 1 < s {
                    let stage = s - 2 - k;
                    let skip = if stage == 0 && self.nested_skip {
                        2 * enc.channels(0)
                    } else {
                        enc.channels(stage)
                    };
                    (skip, enc.channels(stage))
                } else {
                    (0, enc.base_channels)
                };
                let level = (current, skip, out);
                current = out;
                level
            })
            .collect()
    }

    pub fn layout(&self, enc: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if self.nested_skip {
            let c0 = enc.channels(0);
            conv_layout(&mut out, "decoder.nested", c0, c0 + enc.channels(1), 3);
        }
        for (k, (up, skip, ch)) in self.levels(enc).into_iter().enumerate() {
            conv_layout(&mut out, &format!("decoder.level{k}.conv1"), ch, up + skip, 3);
            conv_layout(&mut out, &format!("decoder.level{k}.conv2"), ch, ch, 3);
        }
        conv_layout(&mut out, "decoder.head", self.num_classes, enc.base_channels, 1);
        out
    }
}

/// Randomly initialized decoder and classification head.
pub fn init_decoder(dec: &DecoderConfig, enc: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    dec.validate()?;
    Ok(kaiming_init(&dec.layout(enc), &mut rng::derive(seed, Stream::Init, 2, 0)))
}

fn conv_relu(tape: &mut Tape, params: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = bound(params, &format!("{prefix}.weight"))?;
    let b = bound(params, &format!("{prefix}.bias"))?;
    let y = tape.conv2d(x, w, b, 1, 1)?;
    tape.relu(y)
}

/// Class logits `[N, K, H, W]` at input resolution.
pub fn segment_forward(
    tape: &mut Tape,
    input: Var,
    params: &Bindings,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
) -> Result<Var> {
    let features = encode(tape, input, params, enc)?;
    let s = enc.stage_count;
    let mut skips: Vec<Var> = (0..s.saturating_sub(1)).rev().map(|st| features.maps[st]).collect();
    if dec.nested_skip {
        let up = tape.upsample2x(features.maps[1])?;
        let cat = tape.concat(&[features.maps[0], up])?;
        let nested = conv_relu(tape, params, "decoder.nested", cat)?;
        let last = skips.len() - 1;
        skips[last] = tape.concat(&[features.maps[0], nested])?;
    }
    let mut x = features.maps[s - 1];
    for k in 0..s {
        let up = tape.upsample2x(x)?;
        let cat = match skips.get(k) {
            Some(&skip) => tape.concat(&[up, skip])?,
            None => up,
        };
        let h = conv_relu(tape, params, &format!("decoder.level{k}.conv1"), cat)?;
        x = conv_relu(tape, params, &format!("decoder.level{k}.conv2"), h)?;
    }
    let w = bound(params, "decoder.head.weight")?;
    let b = bound(params, "decoder.head.bias")?;
    tape.conv2d(x, w, b, 1, 0)
}

/// Integer class labels `[N, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBatch {
    pub labels: Vec<u8>,
    pub shape: [usize; 3],
    pub num_classes: usize,
}

impl MaskBatch {
    pub fn new(labels: Vec<u8>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("mask batch", format!("{} labels for shape {shape:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            labels,
            shape,
            num_classes,
        })
    }
}

/// Logits and their class-axis softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PredBatch {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl PredBatch {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 4 {
            return Err(Error::shape("pred batch", format!("expected [N,K,H,W], got {:?}", logits.shape())));
        }
        let probabilities = softmax_axis1(&logits)?;
        Ok(Self { logits, probabilities })
    }

    /// Builds a prediction directly from probabilities (used for hard masks).
    pub fn from_probabilities(probabilities: Tensor) -> Result<Self> {
        if probabilities.shape().len() != 4 {
            return Err(Error::shape(
                "pred batch",
                format!("expected [N,K,H,W], got {:?}", probabilities.shape()),
            ));
        }
        Ok(Self {
            logits: probabilities.clone(),
            probabilities,
        })
    }

    /// Arg-max class per pixel, `[N, H, W]` flattened. Ties go to the lower
    /// class index.
    pub fn argmax(&self) -> Vec<u8> {
        let s = self.probabilities.shape();
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let p = self.logits.data();
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for i in 0..hw {
                let mut best = 0;
                for c in 1..k {
                    if p[(b * k + c) * hw + i] > p[(b * k + best) * hw + i] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}

/// Soft Dice loss and its gradient w.r.t. the probabilities.
///
/// Per class `c`: `dice_c = 2 Σ y·ŷ / (Σ y + Σ ŷ + eps)` over every pixel of
/// the batch; the loss is `1 − mean(dice_c)` over classes present in the
/// ground truth.
fn dice_with_grad(probs: &Tensor, truth: &MaskBatch) -> Result<(f64, Vec<f32>)> {
    let s = probs.shape();
    let [n, k, h, w] = s[..] else {
        return Err(Error::shape("dice_loss", format!("expected [N,K,H,W], got {s:?}")));
    };
    if k != truth.num_classes {
        return Err(Error::shape(
            "dice_loss",
            format!("class axis: prediction has {k} classes, truth has {}", truth.num_classes),
        ));
    }
    if truth.shape != [n, h, w] {
        return Err(Error::shape(
            "dice_loss",
            format!("spatial axes: prediction {:?} vs truth {:?}", [n, h, w], truth.shape),
        ));
    }
    let hw = h * w;
    let p = probs.data();
    let mut inter = vec![0.0f64; k];
    let mut y_sum = vec![0.0f64; k];
    let mut p_sum = vec![0.0f64; k];
    for b in 0..n {
        for i in 0..hw {
            let label = truth.labels[b * hw + i] as usize;
            y_sum[label] += 1.0;
            inter[label] += p[(b * k + label) * hw + i] as f64;
            for c in 0..k {
                p_sum[c] += p[(b * k + c) * hw + i] as f64;
            }
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| y_sum[c] > 0.0).collect();
    let m = present.len() as f64;
    let mut mean_dice = 0.0;
    // ∂loss/∂ŷ_c = −(1/m)(2y/D − 2I/D²)
    let mut d_pos = vec![0.0f64; k];
    let mut d_all = vec![0.0f64; k];
    for &c in &present {
        let denom = y_sum[c] + p_sum[c] + DICE_EPS;
        mean_dice += 2.0 * inter[c] / denom / m;
        d_pos[c] = -2.0 / denom / m;
        d_all[c] = 2.0 * inter[c] / (denom * denom) / m;
    }
    let mut grad = vec![0.0f32; p.len()];
    for b in 0..n {
        for i in 0..hw {
            let label = truth.labels[b * hw + i] as usize;
            for c in 0..k {
                let mut g = d_all[c];
                if c == label {
                    g += d_pos[c];
                }
                grad[(b * k + c) * hw + i] = g as f32;
            }
        }
    }
    Ok((1.0 - mean_dice, grad))
}

/// Dice loss of a prediction's probabilities.
pub fn dice_loss(pred: &PredBatch, truth: &MaskBatch) -> Result<f64> {
    dice_with_grad(&pred.probabilities, truth).map(|(l, _)| l)
}

/// Dice loss of softmax(`logits`) recorded on the tape.
pub fn dice_on_tape(tape: &mut Tape, logits: Var, truth: &MaskBatch) -> Result<Var> {
    let probs = softmax_axis1(tape.value(logits))?;
    let (loss, gp) = dice_with_grad(&probs, truth)?;
    // softmax backward: g_logit = p ⊙ (g_p − Σ_c g_p,c p_c)
    let s = probs.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let p = probs.data();
    let mut gl = vec![0.0f32; p.len()];
    for b in 0..n {
        for i in 0..hw {
            let idx = |c: usize| (b * k + c) * hw + i;
            let dot: f64 = (0..k).map(|c| gp[idx(c)] as f64 * p[idx(c)] as f64).sum();
            for c in 0..k {
                gl[idx(c)] = (p[idx(c)] as f64 * (gp[idx(c)] as f64 - dot)) as f32;
            }
        }
    }
    tape.scalar_fn("dice_loss", logits, loss, gl)
}

/// Mean cross-entropy of `[N, K]` logits against class labels.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [n, k] = tape.shape(logits)[..] else {
        return Err(Error::shape("cross_entropy", format!("expected [N,K], got {:?}", tape.shape(logits))));
    };
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(Error::shape("cross_entropy", "labels do not match logits"));
    }
    let x = tape.value(logits).data();
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * k];
    for (r, &label) in labels.iter().enumerate() {
        let row = &x[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += (lse - row[label] as f64) / n as f64;
        for c in 0..k {
            let p = (row[c] as f64 - lse).exp();
            grad[r * k + c] = ((p - if c == label { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    tape.scalar_fn("cross_entropy", logits, loss, grad)
}

/// How classes absent from both prediction and truth enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassRule {
    #[default]
    Exclude,
    ScoreOne,
    ScoreZero,
}

/// Whether test-set mIoU pools one confusion matrix or averages per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiouAggregation {
    #[default]
    Pooled,
    PerImage,
}

/// `counts[truth * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("miou", format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::InvalidArgument(format!("class index {} >= {k}", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Fraction of pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> f64 {
        let k = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        let hits: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// IoU of class `c`, `None` when the class is absent from both.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.counts[c * k + c];
        let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
        let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
        let union = truth + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn report(&self, rule: AbsentClassRule) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.num_classes).map(|c| self.iou(c)).collect();
        let scored: Vec<f64> = per_class
            .iter()
            .filter_map(|v| match (v, rule) {
                (Some(x), _) => Some(*x),
                (None, AbsentClassRule::Exclude) => None,
                (None, AbsentClassRule::ScoreOne) => Some(1.0),
                (None, AbsentClassRule::ScoreZero) => Some(0.0),
            })
            .collect();
        let mean = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class IoU and their mean for one prediction/truth pair.
pub fn miou(pred: &[u8], truth: &[u8], num_classes: usize, rule: AbsentClassRule) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth)?;
    Ok(cm.report(rule))
}
