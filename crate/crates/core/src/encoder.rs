//! Staged residual convolutional encoder with a feature tap per stage.
//!
//! Stage `i` is a stride-2 3×3 convolution (+ReLU) followed by
//! `blocks_per_stage` residual blocks `relu(x + conv(relu(conv(x))))`. Stage
//! `i` has `base_channels · 2^i` channels and `1 / 2^(i+1)` of the input
//! resolution. There is no batch-dependent normalization, so every item of a
//! batch is encoded independently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{bound, Bindings, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_count: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_count: 4,
            base_channels: 16,
            blocks_per_stage: 2,
            input_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_count < 2 {
            return Err(Error::Config(format!(
                "encoder.stage_count = {} must be >= 2",
                self.stage_count
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("encoder.base_channels must be positive".into()));
        }
        if self.input_channels != 3 {
            return Err(Error::Config(format!(
                "encoder.input_channels = {} must be 3",
                self.input_channels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Channel counts of all stages.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stage_count).map(|i| self.channels(i)).collect()
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stage_count
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = self.input_channels;
        for s in 0..self.stage_count {
            let c = self.channels(s);
            conv_layout(&mut out, &format!("encoder.stage{s}.down"), c, in_ch, 3);
            for b in 0..self.blocks_per_stage {
                conv_layout(&mut out, &format!("encoder.stage{s}.block{b}.conv1"), c, c, 3);
                conv_layout(&mut out, &format!("encoder.stage{s}.block{b}.conv2"), c, c, 3);
            }
            in_ch = c;
        }
        out
    }
}

pub(crate) fn conv_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, k: usize, c: usize, size: usize) {
    out.push((format!("{prefix}.weight"), vec![k, c, size, size]));
    out.push((format!("{prefix}.bias"), vec![k]));
}

/// Kaiming-uniform (fan-in) weights and zero biases for a layout. Fan-in is
/// the product of all but the output axis for 4-D weights and the row count
/// for 2-D `[D, E]` weights.
pub(crate) fn kaiming_init(layout: &[(String, Vec<usize>)], rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        let t = if name.ends_with(".weight") {
            let fan_in: usize = match shape.len() {
                4 => shape[1..].iter().product(),
                _ => shape[0],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32).expect("finite init")
        } else {
            Tensor::zeros(shape)
        };
        store.insert(name.clone(), t);
    }
    store
}

pub(crate) fn layout_store(layout: &[(String, Vec<usize>)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        store.insert(name.clone(), Tensor::zeros(shape));
    }
    store
}

/// Where encoder weights come from.
#[derive(Debug, Clone)]
pub enum EncoderInit<'a> {
    Random,
    Checkpoint(&'a Checkpoint),
}

/// Encoder parameters, either freshly initialized from `seed` or copied out
/// of a checkpoint whose encoder layout must match `config` exactly.
pub fn init_params(config: &EncoderConfig, seed: u64, source: EncoderInit<'_>) -> Result<ParamStore> {
    config.validate()?;
    let layout = config.layout();
    match source {
        EncoderInit::Random => Ok(kaiming_init(&layout, &mut rng::derive(seed, Stream::Init, 0, 0))),
        EncoderInit::Checkpoint(ckpt) => {
            let stored = ckpt.params.with_prefix("encoder.");
            stored.check_layout(&layout_store(&layout))?;
            Ok(stored)
        }
    }
}

/// Per-stage feature maps and their pooled vectors, as tape values.
#[derive(Debug, Clone)]
pub struct StageFeatureSet {
    /// `[N, C_i, H_i, W_i]` per stage.
    pub maps: Vec<Var>,
    /// `[N, C_i]`, the global average pool of each map.
    pub gap_vectors: Vec<Var>,
}

fn conv(tape: &mut Tape, params: &Bindings, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = bound(params, &format!("{prefix}.weight"))?;
    let b = bound(params, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, b, stride, 1)
}

/// `relu(x + conv2(relu(conv1(x))))`.
pub fn residual_block(tape: &mut Tape, params: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(tape, params, &format!("{prefix}.conv1"), x, 1)?;
    let h = tape.relu(h)?;
    let h = conv(tape, params, &format!("{prefix}.conv2"), h, 1)?;
    let sum = tape.add(x, h)?;
    tape.relu(sum)
}

/// Runs the encoder on a `[N, 3, P, P]` batch.
pub fn encode(tape: &mut Tape, input: Var, params: &Bindings, config: &EncoderConfig) -> Result<StageFeatureSet> {
    let shape = tape.shape(input).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::shape("encode", format!("expected [N,3,H,W], got {shape:?}")));
    };
    if c != config.input_channels {
        return Err(Error::shape(
            "encode",
            format!("channel axis: expected {}, got {c}", config.input_channels),
        ));
    }
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "encode",
            format!("spatial size {h}x{w} is not divisible by 2^{} = {m}", config.stage_count),
        ));
    }
    let mut maps = Vec::with_capacity(config.stage_count);
    let mut gap_vectors = Vec::with_capacity(config.stage_count);
    let mut x = input;
    for s in 0..config.stage_count {
        x = conv(tape, params, &format!("encoder.stage{s}.down"), x, 2)?;
        x = tape.relu(x)?;
        for b in 0..config.blocks_per_stage {
            x = residual_block(tape, params, &format!("encoder.stage{s}.block{b}"), x)?;
        }
        maps.push(x);
        gap_vectors.push(tape.global_average_pool(x)?);
    }
    Ok(StageFeatureSet { maps, gap_vectors })
}
