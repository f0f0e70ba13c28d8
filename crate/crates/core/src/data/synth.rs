use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

/// Parameters of the Voronoi-grain micrograph generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub grain_count: usize,
    pub phase_count: usize,
    /// Standard deviation of additive Gaussian pixel noise, in gray levels.
    pub noise_std: f64,
    /// Phase whose grains carry lamellar stripes.
    pub stripe_phase: Option<usize>,
    /// Full stripe period in pixels (one light and one dark band).
    pub stripe_period: f64,
    /// Base intensities are spread evenly over this range.
    pub intensity_range: (u8, u8),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grain_count: 16,
            phase_count: 2,
            noise_std: 0.0,
            stripe_phase: None,
            stripe_period: 6.0,
            intensity_range: (40, 200),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phase_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "phase_count must be >= 2, got {}",
                self.phase_count
            )));
        }
        if self.grain_count < self.phase_count {
            return Err(Error::InvalidArgument(format!(
                "grain_count {} must be >= phase_count {}",
                self.grain_count, self.phase_count
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if let Some(s) = self.stripe_phase {
            if s >= self.phase_count {
                return Err(Error::InvalidArgument(format!(
                    "stripe_phase {s} must be < phase_count {}",
                    self.phase_count
                )));
            }
            if self.stripe_period.is_nan() || self.stripe_period < 2.0 {
                return Err(Error::InvalidArgument(format!(
                    "stripe_period {} must be >= 2 pixels",
                    self.stripe_period
                )));
            }
        }
        let (lo, hi) = self.intensity_range;
        if (hi as usize) < lo as usize + 2 * (self.phase_count - 1) {
            return Err(Error::InvalidArgument(format!(
                "intensity range {lo}..{hi} too narrow for {} phases",
                self.phase_count
            )));
        }
        Ok(())
    }

    fn spacing(&self) -> f64 {
        let (lo, hi) = self.intensity_range;
        (hi as f64 - lo as f64) / (self.phase_count - 1) as f64
    }

    /// Noise-free intensity of each phase.
    pub fn base_levels(&self) -> Vec<u8> {
        let lo = self.intensity_range.0 as f64;
        (0..self.phase_count)
            .map(|p| (lo + self.spacing() * p as f64).round() as u8)
            .collect()
    }

    /// Intensity of the alternate stripe band, half-way to a neighbouring
    /// phase level so it never collides with a base level.
    pub fn stripe_level(&self) -> Option<u8> {
        self.stripe_phase.map(|s| {
            let base = self.intensity_range.0 as f64 + self.spacing() * s as f64;
            let alt = if s + 1 < self.phase_count {
                base + self.spacing() / 2.0
            } else {
                base - self.spacing() / 2.0
            };
            alt.round() as u8
        })
    }
}

struct Grain {
    x: f64,
    y: f64,
    phase: usize,
    stripe_dir: (f64, f64),
    stripe_offset: f64,
}

/// Generates `count` gray micrographs with per-pixel phase masks.
///
/// Image `i` is a pure function of `(spec, width, height, i)`: it draws from
/// its own generator stream, so images can be produced in any order.
pub fn generate_synthetic(spec: &SyntheticSpec, width: usize, height: usize, count: usize) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    Ok((0..count).map(|i| generate_one(spec, width, height, i)).collect())
}

fn generate_one(spec: &SyntheticSpec, width: usize, height: usize, index: usize) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let grains: Vec<Grain> = (0..spec.grain_count)
        .map(|g| {
            let x = rng.random::<f64>() * width as f64;
            let y = rng.random::<f64>() * height as f64;
            let phase = if g < spec.phase_count {
                g
            } else {
                rng.random_range(0..spec.phase_count)
            };
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            let stripe_offset = rng.random::<f64>() * spec.stripe_period;
            Grain {
                x,
                y,
                phase,
                stripe_dir: (angle.cos(), angle.sin()),
                stripe_offset,
            }
        })
        .collect();
    let levels = spec.base_levels();
    let stripe = spec.stripe_level();
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("validated std"));

    let mut pixels = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let grain = grains
                .iter()
                .min_by(|a, b| {
                    let da = (a.x - cx).powi(2) + (a.y - cy).powi(2);
                    let db = (b.x - cx).powi(2) + (b.y - cy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("grain_count >= 2");
            let mut level = levels[grain.phase] as f64;
            if let (Some(alt), true) = (stripe, Some(grain.phase) == spec.stripe_phase) {
                let t = cx * grain.stripe_dir.0 + cy * grain.stripe_dir.1 + grain.stripe_offset;
                if (t / (spec.stripe_period / 2.0)).floor().rem_euclid(2.0) == 1.0 {
                    level = alt as f64;
                }
            }
            if let Some(n) = &noise {
                level += n.sample(&mut rng);
            }
            pixels.push(level.round().clamp(0.0, 255.0) as u8);
            mask.push(grain.phase as u8);
        }
    }
    ImageRecord {
        id: format!("img_{index:04}"),
        width,
        height,
        channels: 1,
        pixels,
        mask: Some(mask),
        num_classes: Some(spec.phase_count),
    }
}
