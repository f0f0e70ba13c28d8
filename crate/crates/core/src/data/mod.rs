//! Image records, netpbm I/O, patch extraction, dataset splits and the
//! synthetic micrograph generator.

pub mod netpbm;
mod patch;
mod synth;

pub use netpbm::{load_image, load_mask, save_image, save_mask};
pub use patch::{patchify, split_dataset, PatchDataset, PatchEntry, Split, SplitAssignment, Window};
pub use synth::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grayscale or RGB micrograph, optionally with a per-pixel class mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: u8,
    pub pixels: Vec<u8>,
    pub mask: Option<Vec<u8>>,
    pub num_classes: Option<usize>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "{}: channels must be 1 or 3, got {}",
                self.id, self.channels
            )));
        }
        if self.pixels.len() != self.width * self.height * self.channels as usize {
            return Err(Error::InvalidArgument(format!(
                "{}: pixel buffer has {} bytes, expected {}",
                self.id,
                self.pixels.len(),
                self.width * self.height * self.channels as usize
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.width * self.height {
                return Err(Error::InvalidArgument(format!(
                    "{}: mask has {} entries, expected {}",
                    self.id,
                    mask.len(),
                    self.width * self.height
                )));
            }
            if let Some(k) = self.num_classes {
                if let Some(&bad) = mask.iter().find(|&&m| m as usize >= k) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: mask value {bad} >= num_classes {k}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copies out a window, mask included.
    pub fn crop(&self, window: Window) -> Result<ImageRecord> {
        if window.x + window.size > self.width || window.y + window.size > self.height {
            return Err(Error::InvalidArgument(format!(
                "{}: window {window:?} exceeds {}x{}",
                self.id, self.width, self.height
            )));
        }
        let ch = self.channels as usize;
        let mut pixels = Vec::with_capacity(window.size * window.size * ch);
        for y in window.y..window.y + window.size {
            let row = (y * self.width + window.x) * ch;
            pixels.extend_from_slice(&self.pixels[row..row + window.size * ch]);
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = Vec::with_capacity(window.size * window.size);
            for y in window.y..window.y + window.size {
                let row = y * self.width + window.x;
                out.extend_from_slice(&m[row..row + window.size]);
            }
            out
        });
        Ok(ImageRecord {
            id: format!("{}@{},{}", self.id, window.x, window.y),
            width: window.size,
            height: window.size,
            channels: self.channels,
            pixels,
            mask,
            num_classes: self.num_classes,
        })
    }

    /// Raw intensities as a `[3, H, W]` tensor in `[0, 255]`; gray images
    /// are replicated across the three channels.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                let src = if self.channels == 1 { p } else { p * 3 + c };
                data[c * hw + p] = self.pixels[src] as f32;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("pixel values are finite")
    }
}
