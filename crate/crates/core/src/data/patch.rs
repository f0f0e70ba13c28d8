use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

/// Square crop window with top-left origin `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

/// Window origins along one axis: multiples of the stride, plus a final
/// origin clamped to `dim - patch` when the stride grid falls short.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Stride for an overlap fraction: `floor(patch · (1 − overlap))`, at least 1.
pub(crate) fn stride_for(patch: usize, overlap: f64) -> usize {
    // The small bias keeps e.g. 100 · (1 − 0.3) from flooring to 69.
    ((patch as f64 * (1.0 - overlap)) + 1e-9).floor().max(1.0) as usize
}

/// Sliding-window tiling of an image, in row-major order.
pub fn patchify(image: &ImageRecord, patch_size: usize, overlap: f64) -> Result<Vec<Window>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if patch_size > image.width {
        return Err(Error::InvalidArgument(format!(
            "{}: patch {patch_size} exceeds image width {} (x axis)",
            image.id, image.width
        )));
    }
    if patch_size > image.height {
        return Err(Error::InvalidArgument(format!(
            "{}: patch {patch_size} exceeds image height {} (y axis)",
            image.id, image.height
        )));
    }
    let stride = stride_for(patch_size, overlap);
    let xs = axis_origins(image.width, patch_size, stride);
    let ys = axis_origins(image.height, patch_size, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| Window {
                x,
                y,
                size: patch_size,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::InvalidArgument(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Split tag per source image id.
pub type SplitAssignment = BTreeMap<String, Split>;

/// Assigns whole source images to train/test.
///
/// The result depends only on `seed` and the set of ids: ids are sorted,
/// shuffled with a seeded generator, and the first `round(ratio · n)` become
/// train.
pub fn split_dataset(images: &[ImageRecord], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty image list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("train ratio {ratio} must lie in (0, 1)")));
    }
    let mut ids: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != images.len() {
        return Err(Error::InvalidArgument("duplicate image ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (ratio * ids.len() as f64).round() as usize;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchEntry {
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub patch_size: usize,
    pub split: Split,
}

impl PatchEntry {
    pub fn window(&self) -> Window {
        Window {
            x: self.x,
            y: self.y,
            size: self.patch_size,
        }
    }
}

/// Manifest of extracted patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub entries: Vec<PatchEntry>,
    pub patch_size: usize,
    /// Unknown when the dataset was read back from a manifest file.
    pub overlap: Option<f64>,
}

impl PatchDataset {
    /// Patchifies every image and tags each window with its image's split.
    /// Images are visited in id order; images missing from `assignment` are
    /// tagged `default_split`.
    pub fn build(
        images: &[ImageRecord],
        patch_size: usize,
        overlap: f64,
        assignment: &SplitAssignment,
        default_split: Split,
    ) -> Result<Self> {
        let mut sorted: Vec<&ImageRecord> = images.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut entries = Vec::new();
        for image in sorted {
            let split = assignment.get(&image.id).copied().unwrap_or(default_split);
            for w in patchify(image, patch_size, overlap)? {
                entries.push(PatchEntry {
                    image_id: image.id.clone(),
                    x: w.x,
                    y: w.y,
                    patch_size,
                    split,
                });
            }
        }
        let ds = Self {
            entries,
            patch_size,
            overlap: Some(overlap),
        };
        ds.validate(images)?;
        Ok(ds)
    }

    /// Checks bounds against the source images and rejects duplicate windows.
    pub fn validate(&self, images: &[ImageRecord]) -> Result<()> {
        let dims: BTreeMap<&str, (usize, usize)> =
            images.iter().map(|i| (i.id.as_str(), (i.width, i.height))).collect();
        let mut seen = HashSet::new();
        for (line, e) in self.entries.iter().enumerate() {
            let &(w, h) = dims.get(e.image_id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("entry {line}: unknown image `{}`", e.image_id))
            })?;
            if e.x + e.patch_size > w || e.y + e.patch_size > h {
                return Err(Error::InvalidArgument(format!(
                    "entry {line}: window ({}, {}, {}) exceeds {w}x{h} image `{}`",
                    e.x, e.y, e.patch_size, e.image_id
                )));
            }
            if !seen.insert((e.image_id.as_str(), e.x, e.y)) {
                return Err(Error::InvalidArgument(format!(
                    "entry {line}: duplicate window ({}, {}) of `{}`",
                    e.x, e.y, e.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &PatchEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.with_split(split).count()
    }

    /// Tab-separated manifest: `id\tx\ty\tpatch\tsplit`, LF endings.
    pub fn to_manifest(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\t{}\n", e.image_id, e.x, e.y, e.patch_size, e.split))
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.strip_suffix('\n').unwrap_or(line);
            if !body.is_empty() {
                entries.push(parse_entry(body, offset)?);
            }
            offset += line.len();
        }
        let patch_size = entries.first().map_or(0, |e| e.patch_size);
        Ok(Self {
            entries,
            patch_size,
            overlap: None,
        })
    }
}

fn parse_entry(line: &str, offset: usize) -> Result<PatchEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    let err = |m: String| Error::Parse { offset, message: m };
    let [id, x, y, size, split] = fields[..] else {
        return Err(err(format!("expected 5 tab-separated fields, got {}", fields.len())));
    };
    let num = |s: &str, name: &str| -> Result<usize> {
        s.parse().map_err(|_| err(format!("invalid {name} `{s}`")))
    };
    Ok(PatchEntry {
        image_id: id.to_string(),
        x: num(x, "x")?,
        y: num(y, "y")?,
        patch_size: num(size, "patch size")?,
        split: split.parse().map_err(|_| err(format!("unknown split tag `{split}`")))?,
    })
}
