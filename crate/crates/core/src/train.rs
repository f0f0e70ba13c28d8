//! The three training loops, evaluation, and the per-epoch metrics log.
//!
//! Every random draw is keyed by `(seed, purpose, epoch, batch)` so a run is a
//! pure function of its seed, configuration and data.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{finetune_augment, make_view_pair, normalize, AugmentConfig};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::ImageRecord;
use crate::encoder::{encode, init_params, kaiming_init, EncoderConfig, EncoderInit};
use crate::error::{Error, Result};
use crate::optim::{Granularity, Optimizer, OptimizerConfig, ScheduleConfig};
use crate::parallel::map_items;
use crate::rng::{self, Stream};
use crate::segment::{
    cross_entropy_on_tape, dice_on_tape, init_decoder, segment_forward, AbsentClassRule, ConfusionMatrix,
    DecoderConfig, MaskBatch, MiouAggregation, MiouReport, PredBatch,
};
use crate::ssl::{init_head, ssl_forward, ContrastiveConfig, FusionConfig};
use crate::tensor::{ParamStore, Tape, Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourcePretrain,
    Ssl,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SourcePretrain => "source_pretrain",
            Phase::Ssl => "ssl",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub granularity: Granularity,
    pub temperature: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Fine-tuning only: keep encoder weights fixed.
    pub freeze_encoder: bool,
    /// Fine-tuning and source pretraining: random joint flips.
    pub flips: bool,
}

impl TrainConfig {
    pub fn defaults_for(phase: Phase) -> Self {
        let (epochs, batch_size, optimizer, schedule) = match phase {
            Phase::Ssl => (
                50,
                128,
                OptimizerConfig::ssl_default(),
                ScheduleConfig::Cosine { lr_min: 1e-4 },
            ),
            Phase::Finetune => (200, 128, OptimizerConfig::finetune_default(), ScheduleConfig::Constant),
            Phase::SourcePretrain => (
                20,
                32,
                OptimizerConfig::Adam {
                    lr: 1e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: 0.0,
                },
                ScheduleConfig::Constant,
            ),
        };
        Self {
            phase,
            epochs,
            batch_size,
            optimizer,
            schedule,
            granularity: Granularity::Epoch,
            temperature: 0.07,
            seed: 0,
            eval_every: 1,
            freeze_encoder: false,
            flips: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        let min_batch = if self.phase == Phase::Ssl { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "train.batch_size = {} must be >= {min_batch} for phase {}",
                self.batch_size,
                self.phase.as_str()
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("train.temperature must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if let ScheduleConfig::Cosine { lr_min } = self.schedule {
            if !(lr_min >= 0.0 && lr_min <= self.optimizer.lr()) {
                return Err(Error::Config(format!(
                    "schedule lr_min = {lr_min} must lie in [0, lr]"
                )));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize, batch: usize, batches_per_epoch: usize) -> f64 {
        let (t, total) = match self.granularity {
            Granularity::Epoch => (epoch as f64, self.epochs as f64),
            Granularity::Step => (
                (epoch * batches_per_epoch + batch) as f64,
                (self.epochs * batches_per_epoch) as f64,
            ),
        };
        self.schedule.lr(t, total, self.optimizer.lr())
    }

    fn snapshot(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// One row of the metrics CSV. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub miou: Option<f64>,
    pub gates: Vec<f64>,
}

/// Per-epoch metrics with a fixed number of gate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub gate_columns: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(gate_columns: usize) -> Self {
        Self {
            gate_columns,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("epoch,phase,loss,lr,miou");
        for g in 0..self.gate_columns {
            write!(h, ",gate_{g}").expect("string write");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{},{},", r.epoch, r.phase.as_str(), r.loss, r.lr).expect("string write");
            if let Some(m) = r.miou {
                write!(out, "{m}").expect("string write");
            }
            for g in 0..self.gate_columns {
                out.push(',');
                if let Some(v) = r.gates.get(g) {
                    write!(out, "{v}").expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Keeps the payload of the first epoch with the highest score.
#[derive(Debug, Clone)]
pub struct BestTracker<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestTracker<T> {
    fn default() -> Self {
        Self { best: None }
    }
}

impl<T> BestTracker<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `score` for `epoch`; `payload` is only called on improvement.
    pub fn observe(&mut self, epoch: usize, score: f64, payload: impl FnOnce() -> T) -> bool {
        let better = match &self.best {
            None => true,
            Some((_, s, _)) => score > *s,
        };
        if better {
            self.best = Some((epoch, score, payload()));
        }
        better
    }

    pub fn epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_payload(self) -> Option<T> {
        self.best.map(|b| b.2)
    }
}

fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, Stream::Shuffle, epoch as u64, 0));
    order
}

fn checked_loss(tape: &Tape, loss: Result<crate::tensor::Var>, epoch: usize, batch: usize) -> Result<crate::tensor::Var> {
    let var = loss.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            epoch: epoch + 1,
            batch,
            loss: f64::NAN,
        },
        other => other,
    })?;
    let value = tape.scalar(var);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: epoch + 1,
            batch,
            loss: value,
        });
    }
    Ok(var)
}

fn finish_checkpoint(params: ParamStore, cfg: &TrainConfig, epochs_done: usize) -> Checkpoint {
    Checkpoint {
        params,
        config: cfg.snapshot(),
        rng: RngState::capture(&rng::derive(cfg.seed, Stream::Shuffle, epochs_done as u64, 0)),
        epoch: epochs_done as u32,
    }
}

/// Normalized `[3, H, W]` input of an image.
pub fn image_input(image: &ImageRecord, aug: &AugmentConfig) -> Result<Tensor> {
    normalize(&image.to_chw(), aug.normalize_mean, aug.normalize_std)
}

// ---------------------------------------------------------------------------
// SSL

#[derive(Debug, Clone)]
pub struct SslOutcome {
    /// Encoder parameters only.
    pub encoder: Checkpoint,
    /// Fusion gates and projection head.
    pub head: ParamStore,
    pub metrics: MetricsLog,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Contrastive adaptation of an encoder on unlabeled patches.
pub fn run_ssl(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    enc: &EncoderConfig,
    fusion: &FusionConfig,
    patches: &[ImageRecord],
    init: EncoderInit<'_>,
) -> Result<SslOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if patches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ssl needs at least 2 unlabeled patches, got {}",
            patches.len()
        )));
    }
    let mut params = init_params(enc, cfg.seed, init)?;
    params.extend(&init_head(fusion, enc, cfg.seed)?);
    let contrastive = ContrastiveConfig {
        temperature: cfg.temperature,
        eps: NORM_EPS,
    };
    let batch = cfg.batch_size.min(patches.len());
    let batches = patches.len() / batch;
    let gate_names: Vec<String> = params.names().filter(|n| n.starts_with("head.gate")).map(str::to_string).collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut metrics = MetricsLog::new(enc.stage_count);
    let mut step_losses = Vec::new();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(patches.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut lr = cfg.lr_at(epoch, 0, batches);
        for b in 0..batches {
            lr = cfg.lr_at(epoch, b, batches);
            let mut arng = rng::derive(cfg.seed, Stream::Augment, epoch as u64, b as u64);
            let pairs = order[b * batch..(b + 1) * batch]
                .iter()
                .map(|&i| make_view_pair(&patches[i], aug, &mut arng))
                .collect::<Result<Vec<_>>>()?;
            tape.clear();
            let bindings = params.bind(&mut tape, |_| true);
            let loss = ssl_forward(&mut tape, &pairs, &bindings, enc, fusion, &contrastive);
            let loss = checked_loss(&tape, loss, epoch, b)?;
            let value = tape.scalar(loss);
            tape.backward(loss)?;
            let grads = params.gradients(&tape, &bindings);
            opt.step(&mut params, &grads, lr, |_| true)?;
            total += value;
            step_losses.push(value);
        }
        let gates = gate_names
            .iter()
            .map(|n| {
                let d = params.get(n).expect("gate present").data();
                d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
            })
            .collect();
        metrics.rows.push(MetricsRow {
            epoch: epoch + 1,
            phase: Phase::Ssl,
            loss: total / batches as f64,
            lr,
            miou: None,
            gates,
        });
    }
    let head = params.with_prefix("head.");
    let encoder = finish_checkpoint(params.with_prefix("encoder."), cfg, cfg.epochs);
    Ok(SslOutcome {
        encoder,
        head,
        metrics,
        step_losses,
    })
}

// ---------------------------------------------------------------------------
// Source pretraining

#[derive(Debug, Clone)]
pub struct SourceOutcome {
    pub encoder: Checkpoint,
    pub metrics: MetricsLog,
    /// Fraction of correctly classified training patches per epoch, measured
    /// on each batch before its update.
    pub accuracy: Vec<f64>,
}

/// Most frequent mask class; ties go to the lower index.
pub fn dominant_class(mask: &[u8], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &m in mask {
        counts[m as usize] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Supervised encoder pretraining on a labeled source domain: patch →
/// dominant phase classification through a linear head on the pooled last
/// stage. The head is dropped from the returned checkpoint.
pub fn pretrain_source(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    enc: &EncoderConfig,
    images: &[ImageRecord],
    num_classes: usize,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("source pretraining set is empty".into()));
    }
    let labels = images
        .iter()
        .map(|im| {
            im.mask
                .as_ref()
                .map(|m| dominant_class(m, num_classes))
                .ok_or_else(|| Error::InvalidArgument(format!("{}: source image has no mask", im.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = init_params(enc, cfg.seed, EncoderInit::Random)?;
    let width = enc.channels(enc.stage_count - 1);
    let head_layout = vec![
        ("classifier.weight".to_string(), vec![width, num_classes]),
        ("classifier.bias".to_string(), vec![num_classes]),
    ];
    params.extend(&kaiming_init(&head_layout, &mut rng::derive(cfg.seed, Stream::Init, 3, 0)));
    let batch = cfg.batch_size.min(images.len());
    let batches = images.len().div_ceil(batch);
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut metrics = MetricsLog::new(0);
    let mut accuracy = Vec::new();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(images.len(), cfg.seed, epoch);
        let (mut total, mut correct) = (0.0, 0usize);
        let mut lr = cfg.lr_at(epoch, 0, batches);
        for (b, chunk) in order.chunks(batch).enumerate() {
            lr = cfg.lr_at(epoch, b, batches);
            let mut arng = rng::derive(cfg.seed, Stream::Augment, epoch as u64, b as u64);
            let inputs = chunk
                .iter()
                .map(|&i| {
                    let im = &images[i];
                    if cfg.flips {
                        let mask = vec![0u8; im.width * im.height];
                        finetune_augment(&im.to_chw(), &mask, aug.normalize_mean, aug.normalize_std, &mut arng)
                            .map(|(t, _)| t)
                    } else {
                        image_input(im, aug)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            tape.clear();
            let bindings = params.bind(&mut tape, |_| true);
            let x = tape.constant(Tensor::stack(&inputs)?);
            let feats = encode(&mut tape, x, &bindings, enc)?;
            let pooled = *feats.gap_vectors.last().expect("at least one stage");
            let w = crate::tensor::bound(&bindings, "classifier.weight")?;
            let bias = crate::tensor::bound(&bindings, "classifier.bias")?;
            let logits = tape.linear(pooled, w, bias)?;
            let lv = tape.value(logits).data();
            for (r, &label) in y.iter().enumerate() {
                let row = &lv[r * num_classes..(r + 1) * num_classes];
                let pred = (0..num_classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                correct += usize::from(pred == label);
            }
            let loss = cross_entropy_on_tape(&mut tape, logits, &y);
            let loss = checked_loss(&tape, loss, epoch, b)?;
            total += tape.scalar(loss) * chunk.len() as f64;
            tape.backward(loss)?;
            let grads = params.gradients(&tape, &bindings);
            opt.step(&mut params, &grads, lr, |_| true)?;
        }
        accuracy.push(correct as f64 / images.len() as f64);
        metrics.rows.push(MetricsRow {
            epoch: epoch + 1,
            phase: Phase::SourcePretrain,
            loss: total / images.len() as f64,
            lr,
            miou: None,
            gates: Vec::new(),
        });
    }
    Ok(SourceOutcome {
        encoder: finish_checkpoint(params.with_prefix("encoder."), cfg, cfg.epochs),
        metrics,
        accuracy,
    })
}

// ---------------------------------------------------------------------------
// Segmentation

/// Architecture and input normalization of a segmentation model.
#[derive(Debug, Clone, Copy)]
pub struct SegModel<'a> {
    pub encoder: &'a EncoderConfig,
    pub decoder: &'a DecoderConfig,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl SegModel<'_> {
    /// Forward pass of one image without recording gradients for anything.
    pub fn predict(&self, params: &ParamStore, image: &ImageRecord) -> Result<PredBatch> {
        let mut tape = Tape::new();
        let bindings = params.bind(&mut tape, |_| false);
        let x = normalize(&image.to_chw(), self.mean, self.std)?;
        let x = tape.constant(x.reshape(&[1, 3, image.height, image.width])?);
        let logits = segment_forward(&mut tape, x, &bindings, self.encoder, self.decoder)?;
        PredBatch::from_logits(tape.value(logits).clone())
    }
}

/// mIoU of a set of predictions under both aggregation conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub predictions: Vec<Vec<u8>>,
    pub per_image: Vec<MiouReport>,
    pub pooled: MiouReport,
    pub per_image_mean: f64,
    pub pixel_accuracy: f64,
    pub rule: AbsentClassRule,
}

impl EvalReport {
    pub fn miou(&self, aggregation: MiouAggregation) -> f64 {
        match aggregation {
            MiouAggregation::Pooled => self.pooled.mean,
            MiouAggregation::PerImage => self.per_image_mean,
        }
    }
}

/// Scores predicted class maps against the images' masks. Per-image
/// confusion matrices are merged in input order.
pub fn score(
    ids: Vec<String>,
    predictions: Vec<Vec<u8>>,
    truths: &[&[u8]],
    num_classes: usize,
    rule: AbsentClassRule,
) -> Result<EvalReport> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} masks",
            predictions.len(),
            truths.len()
        )));
    }
    let mut pooled = ConfusionMatrix::new(num_classes);
    let mut per_image = Vec::with_capacity(predictions.len());
    for (pred, truth) in predictions.iter().zip(truths) {
        let mut cm = ConfusionMatrix::new(num_classes);
        cm.add(pred, truth)?;
        per_image.push(cm.report(rule));
        pooled.merge(&cm);
    }
    let per_image_mean = per_image.iter().map(|r| r.mean).sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        ids,
        predictions,
        per_image,
        pixel_accuracy: pooled.pixel_accuracy(),
        pooled: pooled.report(rule),
        per_image_mean,
        rule,
    })
}

/// Predicts and scores every image (in parallel, reduced in input order).
pub fn evaluate(model: &SegModel<'_>, params: &ParamStore, images: &[ImageRecord], rule: AbsentClassRule) -> Result<EvalReport> {
    let predictions = map_items(images.len(), |i| model.predict(params, &images[i]).map(|p| p.argmax()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truths = images
        .iter()
        .map(|im| {
            im.mask
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: evaluation image has no mask", im.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    score(
        images.iter().map(|im| im.id.clone()).collect(),
        predictions,
        &truths,
        model.decoder.num_classes,
        rule,
    )
}

/// Labeled splits for fine-tuning. Without a `val` split no model selection
/// happens: the final epoch is kept and the per-epoch mIoU column tracks the
/// test split for monitoring only.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    pub train: &'a [ImageRecord],
    pub val: &'a [ImageRecord],
    pub test: &'a [ImageRecord],
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Encoder and decoder parameters of the best validation epoch, or of the
    /// final epoch when there is no validation split.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub final_params: ParamStore,
    pub metrics: MetricsLog,
    pub step_losses: Vec<f64>,
    /// `best` evaluated on the test split.
    pub test: Option<EvalReport>,
}

fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Builds a labeled batch, with random joint flips when `rng` is given.
fn seg_batch(
    images: &[&ImageRecord],
    num_classes: usize,
    mean: [f32; 3],
    std: [f32; 3],
    mut rng: Option<&mut rng::Rng>,
) -> Result<(Tensor, MaskBatch)> {
    let (h, w) = (images[0].height, images[0].width);
    let mut inputs = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len() * h * w);
    for im in images {
        let mask = im
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: training image has no mask", im.id)))?;
        if (im.height, im.width) != (h, w) {
            return Err(Error::shape("finetune batch", format!("{} is {}x{}, batch is {w}x{h}", im.id, im.width, im.height)));
        }
        let (x, m) = match rng.as_deref_mut() {
            Some(r) => finetune_augment(&im.to_chw(), mask, mean, std, r)?,
            None => (normalize(&im.to_chw(), mean, std)?, mask.clone()),
        };
        inputs.push(x);
        labels.extend_from_slice(&m);
    }
    let truth = MaskBatch::new(labels, [images.len(), h, w], num_classes)?;
    Ok((Tensor::stack(&inputs)?, truth))
}

/// One optimizer step on a labeled batch; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    tape: &mut Tape,
    model: &SegModel<'_>,
    params: &mut ParamStore,
    opt: &mut Optimizer,
    input: Tensor,
    truth: &MaskBatch,
    lr: f64,
    freeze_encoder: bool,
) -> Result<f64> {
    let trainable = |n: &str| !(freeze_encoder && is_encoder(n));
    tape.clear();
    let bindings = params.bind(tape, trainable);
    let x = tape.constant(input);
    let logits = segment_forward(tape, x, &bindings, model.encoder, model.decoder)?;
    let loss = dice_on_tape(tape, logits, truth)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            loss: value,
        });
    }
    tape.backward(loss)?;
    let grads = params.gradients(tape, &bindings);
    opt.step(params, &grads, lr, trainable)?;
    Ok(value)
}

/// End-to-end Dice fine-tuning with best-by-validation model selection.
pub fn run_finetune(
    cfg: &TrainConfig,
    model: &SegModel<'_>,
    data: FinetuneData<'_>,
    init: EncoderInit<'_>,
    rule: AbsentClassRule,
    aggregation: MiouAggregation,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    model.decoder.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning train split is empty".into()));
    }
    let selecting = !data.val.is_empty();
    let held_out = if selecting { data.val } else { data.test };
    let mut params = init_params(model.encoder, cfg.seed, init)?;
    params.extend(&init_decoder(model.decoder, model.encoder, cfg.seed)?);
    let k = model.decoder.num_classes;
    let batch = cfg.batch_size.min(data.train.len());
    let batches = data.train.len().div_ceil(batch);
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut metrics = MetricsLog::new(0);
    let mut best = BestTracker::new();
    let mut step_losses = Vec::new();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut lr = cfg.lr_at(epoch, 0, batches);
        for (b, chunk) in order.chunks(batch).enumerate() {
            lr = cfg.lr_at(epoch, b, batches);
            let items: Vec<&ImageRecord> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut arng = rng::derive(cfg.seed, Stream::Augment, epoch as u64, b as u64);
            let (x, truth) = seg_batch(&items, k, model.mean, model.std, cfg.flips.then_some(&mut arng))?;
            let loss = finetune_step(&mut tape, model, &mut params, &mut opt, x, &truth, lr, cfg.freeze_encoder)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b,
                        loss,
                    },
                    Error::NonFinite { .. } => Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            total += loss * chunk.len() as f64;
            step_losses.push(loss);
        }
        let last = epoch + 1 == cfg.epochs;
        let miou = if !held_out.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let m = evaluate(model, &params, held_out, rule)?.miou(aggregation);
            if selecting {
                best.observe(epoch + 1, m, || params.clone());
            }
            Some(m)
        } else {
            None
        };
        metrics.rows.push(MetricsRow {
            epoch: epoch + 1,
            phase: Phase::Finetune,
            loss: total / data.train.len() as f64,
            lr,
            miou,
            gates: Vec::new(),
        });
    }
    let best_epoch = best.epoch().unwrap_or(cfg.epochs);
    let best_params = best.into_payload().unwrap_or_else(|| params.clone());
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(model, &best_params, data.test, rule)?)
    };
    Ok(FinetuneOutcome {
        best: finish_checkpoint(best_params, cfg, best_epoch),
        best_epoch,
        final_params: params,
        metrics,
        step_losses,
        test,
    })
}
