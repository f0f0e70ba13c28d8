//! TOML run configuration.
//!
//! A run file has the sections `train`, `augment`, `encoder`, `fusion`,
//! `decoder`, `data`, `init`, `output` and `metrics`. Every section and key is
//! optional; unknown keys are rejected. [`RunConfigFile::resolve`] fills in
//! the defaults of a phase and produces a [`RunConfig`], whose TOML form lists
//! every value that applied and parses back to the same configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{load_image, load_mask, ImageRecord, PatchDataset, PatchEntry, Split};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{Granularity, OptimizerConfig, ScheduleConfig};
use crate::segment::{AbsentClassRule, DecoderConfig, MiouAggregation};
use crate::ssl::FusionConfig;
use crate::train::{Phase, TrainConfig};

/// `[train]` as written by the user; missing keys take the phase defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub phase: Option<Phase>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerConfig>,
    pub schedule: Option<ScheduleConfig>,
    pub granularity: Option<Granularity>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub freeze_encoder: Option<bool>,
    pub flips: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Patch manifest (`id\tx\ty\tpatch\tsplit` lines).
    pub manifest: Option<PathBuf>,
    /// Directory holding `<id>.pgm` / `<id>.ppm` source images.
    pub image_dir: Option<PathBuf>,
    /// Directory holding the masks; defaults to `image_dir`.
    pub mask_dir: Option<PathBuf>,
    /// Splits read by SSL or source pretraining.
    pub splits: Option<Vec<Split>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    /// `"random"` or a checkpoint path.
    pub encoder: String,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            encoder: "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub absent_class_rule: AbsentClassRule,
    pub aggregation: MiouAggregation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub data: DataSection,
    pub init: InitSection,
    pub output: OutputSection,
    pub metrics: MetricsSection,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub data: DataSection,
    pub init: InitSection,
    pub output: OutputSection,
    pub metrics: MetricsSection,
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    /// Reads a run file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = std::path::absolute(match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        })
            .map_err(|e| Error::io(path, e))?;
        let base = base.as_path();
        absolutize(base, &mut cfg.data.manifest);
        absolutize(base, &mut cfg.data.image_dir);
        absolutize(base, &mut cfg.data.mask_dir);
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        if cfg.init.encoder != "random" && Path::new(&cfg.init.encoder).is_relative() {
            cfg.init.encoder = base.join(&cfg.init.encoder).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    /// Applies the defaults of `phase` and validates the result.
    pub fn resolve(self, phase: Phase) -> Result<RunConfig> {
        let t = self.train;
        if let Some(p) = t.phase {
            if p != phase {
                return Err(Error::Config(format!(
                    "train.phase = \"{}\" but the command runs \"{}\"",
                    p.as_str(),
                    phase.as_str()
                )));
            }
        }
        let d = TrainConfig::defaults_for(phase);
        let train = TrainConfig {
            phase,
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            optimizer: t.optimizer.unwrap_or(d.optimizer),
            schedule: t.schedule.unwrap_or(d.schedule),
            granularity: t.granularity.unwrap_or(d.granularity),
            temperature: t.temperature.unwrap_or(d.temperature),
            seed: t.seed.unwrap_or(d.seed),
            eval_every: t.eval_every.unwrap_or(d.eval_every),
            freeze_encoder: t.freeze_encoder.unwrap_or(d.freeze_encoder),
            flips: t.flips.unwrap_or(d.flips),
        };
        let mut data = self.data;
        if data.mask_dir.is_none() {
            data.mask_dir = data.image_dir.clone();
        }
        if data.splits.is_none() {
            data.splits = Some(match phase {
                Phase::Ssl => vec![Split::Train, Split::Val, Split::Unlabeled],
                Phase::SourcePretrain => vec![Split::Train, Split::Val, Split::Test, Split::Unlabeled],
                Phase::Finetune => vec![Split::Train, Split::Val, Split::Test],
            });
        }
        let cfg = RunConfig {
            train,
            augment: self.augment,
            encoder: self.encoder,
            fusion: self.fusion,
            decoder: self.decoder,
            data,
            init: self.init,
            output: self.output,
            metrics: self.metrics,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.fusion.resolved_taps(&self.encoder)?;
        if self.train.phase == Phase::Ssl && !self.augment.view_size.is_multiple_of(self.encoder.size_multiple()) {
            return Err(Error::Config(format!(
                "augment.view_size = {} must be divisible by {}",
                self.augment.view_size,
                self.encoder.size_multiple()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Parses a resolved configuration, such as a checkpoint's snapshot.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    /// The configured encoder checkpoint, or `None` for random init. A path
    /// that does not exist is a configuration error naming `init.encoder`.
    pub fn encoder_checkpoint(&self) -> Result<Option<PathBuf>> {
        if self.init.encoder == "random" {
            return Ok(None);
        }
        let p = PathBuf::from(&self.init.encoder);
        if !p.is_file() {
            return Err(Error::Config(format!(
                "init.encoder: checkpoint `{}` does not exist",
                p.display()
            )));
        }
        Ok(Some(p))
    }

    fn required(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("{key} is required for {}", self.train.phase.as_str())))
    }

    /// Loads the manifest and crops every entry of the configured splits.
    /// Masks are attached when `with_masks` is set.
    pub fn load_patches(&self, splits: &[Split], with_masks: bool) -> Result<Vec<(PatchEntry, ImageRecord)>> {
        let manifest = self.required(&self.data.manifest, "data.manifest")?;
        let image_dir = self.required(&self.data.image_dir, "data.image_dir")?;
        let mask_dir = self.data.mask_dir.clone().unwrap_or_else(|| image_dir.clone());
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ds = PatchDataset::from_manifest(&text)?;
        let num_classes = with_masks.then_some(self.decoder.num_classes);
        load_manifest_patches(&ds, &image_dir, &mask_dir, splits, num_classes)
    }
}

/// Path of the source image `id` inside `dir` (`.pgm` or `.ppm`).
pub fn image_path(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["pgm", "ppm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no image `{id}.pgm` or `{id}.ppm` in {}",
        dir.display()
    )))
}

/// Mask file of image `id`: `img_N` pairs with `mask_N`, anything else with
/// `<id>_mask`.
pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    match id.strip_prefix("img_") {
        Some(rest) => dir.join(format!("mask_{rest}.pgm")),
        None => dir.join(format!("{id}_mask.pgm")),
    }
}

/// Crops the entries of `splits` out of their source images, in manifest
/// order. Each source image is read once.
pub fn load_manifest_patches(
    ds: &PatchDataset,
    image_dir: &Path,
    mask_dir: &Path,
    splits: &[Split],
    num_classes: Option<usize>,
) -> Result<Vec<(PatchEntry, ImageRecord)>> {
    let mut cache: std::collections::HashMap<String, ImageRecord> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for e in ds.entries.iter().filter(|e| splits.contains(&e.split)) {
        if !cache.contains_key(&e.image_id) {
            let mut img = load_image(image_path(image_dir, &e.image_id)?)?;
            img.id = e.image_id.clone();
            if let Some(k) = num_classes {
                img.mask = Some(load_mask(mask_path(mask_dir, &e.image_id))?);
                img.num_classes = Some(k);
            }
            img.validate()?;
            cache.insert(e.image_id.clone(), img);
        }
        out.push((e.clone(), cache[&e.image_id].crop(e.window())?));
    }
    Ok(out)
}
