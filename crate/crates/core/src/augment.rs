//! View generation for contrastive pretraining and joint image/mask flips for
//! fine-tuning.
//!
//! Images travel through the pipeline as planar `[3, H, W]` intensities in
//! `[0, 255]`; normalization is always the last step.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side length of each generated view.
    pub view_size: usize,
    /// Area fraction range of the random resized crop.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 − δ, 1 + δ]`.
    pub jitter_delta: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            view_size: 64,
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            jitter_delta: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off: views equal the normalized input.
    pub fn identity(view_size: usize) -> Self {
        Self {
            view_size,
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_delta: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} = {p} must lie in [0, 1]")))
            }
        };
        prob("flip_prob", self.flip_prob)?;
        prob("grayscale_prob", self.grayscale_prob)?;
        prob("blur_prob", self.blur_prob)?;
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augment.crop_scale_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if !(self.jitter_delta >= 0.0 && self.jitter_delta < 1.0) {
            return Err(Error::Config(format!(
                "augment.jitter_delta = {} must lie in [0, 1)",
                self.jitter_delta
            )));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!(
                "augment.blur_sigma_range ({slo}, {shi}) must satisfy 0 < min <= max"
            )));
        }
        if self.view_size < 8 {
            return Err(Error::Config(format!("augment.view_size = {} must be >= 8", self.view_size)));
        }
        if self.normalize_std.contains(&0.0) {
            return Err(Error::Config("augment.normalize_std must be nonzero".into()));
        }
        Ok(())
    }
}

/// Two augmented views of one source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub source: String,
}

/// Planar 3-channel working image.
#[derive(Clone)]
struct Planes {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Planes {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::shape("augment", format!("expected [3,H,W], got {:?}", t.shape())));
        };
        Ok(Self {
            h,
            w,
            data: t.data().to_vec(),
        })
    }

    fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    fn luma(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        (0..hw)
            .map(|p| LUMA[0] * self.data[p] + LUMA[1] * self.data[hw + p] + LUMA[2] * self.data[2 * hw + p])
            .collect()
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Crop box `(x, y, w, h)` of the random resized crop.
fn sample_crop(rng: &mut impl Rng, width: usize, height: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let (lo_ratio, hi_ratio) = (3.0 / 4.0, 4.0 / 3.0);
    let area = (width * height) as f64;
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, lo_ratio, hi_ratio);
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return (x, y, w, h);
        }
    }
    // fall back to the largest centred box within the ratio bounds
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < lo_ratio {
        (width, ((width as f64 / lo_ratio).round() as usize).min(height))
    } else if in_ratio > hi_ratio {
        (((height as f64 * hi_ratio).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

/// Bilinear resize of a crop box to `size × size` (half-pixel centres,
/// edge-clamped inside the box).
fn resized_crop(img: &Planes, (x, y, w, h): (usize, usize, usize, usize), size: usize) -> Planes {
    let axis = |len: usize| -> Vec<(usize, usize, f32)> {
        (0..size)
            .map(|o| {
                let u = ((o as f64 + 0.5) * len as f64 / size as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = u.floor() as usize;
                (i0, (i0 + 1).min(len - 1), (u - i0 as f64) as f32)
            })
            .collect()
    };
    let (cols, rows) = (axis(w), axis(h));
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = img.plane(c);
        let at = |r: usize, q: usize| plane[(y + r) * img.w + x + q];
        for &(r0, r1, fy) in &rows {
            for &(q0, q1, fx) in &cols {
                let top = at(r0, q0) * (1.0 - fx) + at(r0, q1) * fx;
                let bottom = at(r1, q0) * (1.0 - fx) + at(r1, q1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Planes { h: size, w: size, data }
}

fn hflip(img: &mut Planes) {
    for row in img.data.chunks_mut(img.w) {
        row.reverse();
    }
}

fn vflip(img: &mut Planes) {
    let (h, w) = (img.h, img.w);
    for plane in img.data.chunks_mut(h * w) {
        for r in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - r) * w);
            top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

fn blend_toward(img: &mut Planes, factor: f32, other: impl Fn(usize) -> f32) {
    let hw = img.h * img.w;
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i % hw)).clamp(0.0, 255.0);
    }
}

fn color_jitter(img: &mut Planes, rng: &mut impl Rng, delta: f64) {
    let factors: [f32; 3] = std::array::from_fn(|_| uniform(rng, 1.0 - delta, 1.0 + delta) as f32);
    let mut order = [0usize, 1, 2];
    order.shuffle(rng);
    for op in order {
        let f = factors[op];
        match op {
            0 => img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 255.0)),
            1 => {
                let luma = img.luma();
                let mean = (luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64) as f32;
                blend_toward(img, f, |_| mean);
            }
            _ => {
                let luma = img.luma();
                blend_toward(img, f, |p| luma[p]);
            }
        }
    }
}

fn grayscale(img: &mut Planes) {
    let luma = img.luma();
    for plane in img.data.chunks_mut(img.h * img.w) {
        plane.copy_from_slice(&luma);
    }
}

fn gaussian_blur(img: &mut Planes, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let kernel: Vec<f32> = weights.iter().map(|w| (w / total) as f32).collect();
    let (h, w) = (img.h as isize, img.w as isize);
    let mut tmp = vec![0.0f32; img.data.len()];
    for (c, plane) in img.data.chunks_mut((h * w) as usize).enumerate() {
        let t = &mut tmp[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                t[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * plane[(y * w + (x + k as isize - radius).clamp(0, w - 1)) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * t[((y + k as isize - radius).clamp(0, h - 1) * w + x) as usize])
                    .sum();
            }
        }
    }
}

/// `(x / 255 − mean[c]) / std[c]` per channel.
pub fn normalize(image: &Tensor, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    if std.contains(&0.0) {
        return Err(Error::InvalidArgument("normalization std must be nonzero".into()));
    }
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("normalize", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let hw = h * w;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / 255.0 - mean[i / hw]) / std[i / hw])
        .collect();
    Tensor::new(image.shape(), data)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &Tensor, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("denormalize", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let hw = h * w;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * std[i / hw] + mean[i / hw]) * 255.0)
        .collect();
    Tensor::new(image.shape(), data)
}

fn augmented_view(source: &Planes, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let crop = sample_crop(rng, source.w, source.h, cfg.crop_scale_range);
    let mut img = resized_crop(source, crop, cfg.view_size);
    if rng.random::<f64>() < cfg.flip_prob {
        hflip(&mut img);
    }
    color_jitter(&mut img, rng, cfg.jitter_delta);
    if rng.random::<f64>() < cfg.grayscale_prob {
        grayscale(&mut img);
    }
    if rng.random::<f64>() < cfg.blur_prob {
        let sigma = uniform(rng, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
        gaussian_blur(&mut img, sigma);
    }
    let t = Tensor::new(&[3, img.h, img.w], img.data)?;
    normalize(&t, cfg.normalize_mean, cfg.normalize_std)
}

/// Two independent draws of the view pipeline on the same patch.
pub fn make_view_pair(patch: &ImageRecord, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    if patch.width < 8 || patch.height < 8 {
        return Err(Error::InvalidArgument(format!(
            "{}: patch {}x{} is smaller than 8x8",
            patch.id, patch.width, patch.height
        )));
    }
    let source = Planes::from_tensor(&patch.to_chw())?;
    let view_a = augmented_view(&source, cfg, rng)?;
    let view_b = augmented_view(&source, cfg, rng)?;
    Ok(ViewPair {
        view_a,
        view_b,
        source: patch.id.clone(),
    })
}

/// Joint horizontal/vertical flips (each with probability 0.5) of a raw
/// `[3, H, W]` image and its mask, then normalization of the image.
pub fn finetune_augment(
    image: &Tensor,
    mask: &[u8],
    mean: [f32; 3],
    std: [f32; 3],
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<u8>)> {
    let mut img = Planes::from_tensor(image)?;
    if mask.len() != img.h * img.w {
        return Err(Error::shape(
            "finetune_augment",
            format!("mask has {} entries, image is {}x{}", mask.len(), img.h, img.w),
        ));
    }
    let mut m = Planes {
        h: img.h,
        w: img.w,
        data: mask.iter().map(|&v| v as f32).collect(),
    };
    if rng.random::<f64>() < 0.5 {
        hflip(&mut img);
        hflip(&mut m);
    }
    if rng.random::<f64>() < 0.5 {
        vflip(&mut img);
        vflip(&mut m);
    }
    let t = Tensor::new(&[3, img.h, img.w], img.data)?;
    Ok((normalize(&t, mean, std)?, m.data.iter().map(|&v| v as u8).collect()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn patch(w: usize, h: usize, channels: u8) -> ImageRecord {
        ImageRecord {
            id: "p".into(),
            width: w,
            height: h,
            channels,
            pixels: (0..w * h * channels as usize).map(|i| (i * 37 % 251) as u8).collect(),
            mask: None,
            num_classes: None,
        }
    }

    #[test]
    fn identity_config_reproduces_normalized_input() {
        let p = patch(16, 16, 3);
        let cfg = AugmentConfig::identity(16);
        let pair = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let expected = normalize(&p.to_chw(), cfg.normalize_mean, cfg.normalize_std).unwrap();
        assert_eq!(pair.view_a, expected);
        assert_eq!(pair.view_b, expected);
    }

    #[test]
    fn grayscale_replicates_channels() {
        let p = patch(20, 20, 3);
        let cfg = AugmentConfig {
            view_size: 16,
            grayscale_prob: 1.0,
            normalize_mean: [0.0; 3],
            normalize_std: [1.0; 3],
            ..Default::default()
        };
        let pair = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = pair.view_a.data();
        let hw = 16 * 16;
        assert_eq!(&d[..hw], &d[hw..2 * hw]);
        assert_eq!(&d[..hw], &d[2 * hw..]);
    }

    #[test]
    fn jitter_keeps_gray_channels_equal() {
        let p = patch(16, 16, 1);
        let cfg = AugmentConfig {
            view_size: 16,
            jitter_delta: 0.5,
            grayscale_prob: 0.0,
            normalize_mean: [0.0; 3],
            normalize_std: [1.0; 3],
            ..Default::default()
        };
        for seed in 0..10 {
            let pair = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d = pair.view_b.data();
            let hw = 16 * 16;
            assert_eq!(&d[..hw], &d[hw..2 * hw]);
            assert_eq!(&d[..hw], &d[2 * hw..]);
        }
    }

    #[test]
    fn same_seed_same_views() {
        let p = patch(24, 24, 1);
        let cfg = AugmentConfig {
            view_size: 16,
            ..Default::default()
        };
        let a = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.view_a.to_le_bytes(), b.view_a.to_le_bytes());
        assert_eq!(a.view_b.to_le_bytes(), b.view_b.to_le_bytes());
        assert_ne!(a.view_a, a.view_b);
    }

    #[test]
    fn views_have_configured_shape_and_bounded_values() {
        let cfg = AugmentConfig {
            view_size: 12,
            ..Default::default()
        };
        let lo = (0.0 - IMAGENET_MEAN.iter().cloned().fold(f32::MIN, f32::max))
            / IMAGENET_STD.iter().cloned().fold(f32::MAX, f32::min);
        let hi = (1.0 - IMAGENET_MEAN.iter().cloned().fold(f32::MAX, f32::min))
            / IMAGENET_STD.iter().cloned().fold(f32::MAX, f32::min);
        for seed in 0..20 {
            let p = patch(9 + seed as usize, 30 - seed as usize, if seed % 2 == 0 { 1 } else { 3 });
            let pair = make_view_pair(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for v in [&pair.view_a, &pair.view_b] {
                assert_eq!(v.shape(), &[3, 12, 12]);
                assert!(v.data().iter().all(|x| x.is_finite() && *x >= lo - 1e-5 && *x <= hi + 1e-5));
            }
        }
    }

    #[test]
    fn tiny_patch_rejected() {
        assert!(make_view_pair(&patch(7, 9, 1), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let white = Tensor::full(&[3, 1, 1], 255.0);
        let n = normalize(&white, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(n.data(), &[1.0, 1.0, 1.0]);
        let black = Tensor::zeros(&[3, 1, 1]);
        let n = normalize(&black, IMAGENET_MEAN, IMAGENET_STD).unwrap();
        for (got, want) in n.data().iter().zip([-2.1179, -2.0357, -1.8044]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        assert!(normalize(&black, IMAGENET_MEAN, [0.229, 0.0, 0.225]).is_err());
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let img = Tensor::from_fn(&[3, 4, 4], |i| (i * 5) as f32).unwrap();
        let back = denormalize(&normalize(&img, IMAGENET_MEAN, IMAGENET_STD).unwrap(), IMAGENET_MEAN, IMAGENET_STD).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a / 255.0 - b / 255.0).abs() < 1e-5);
        }
    }

    #[test]
    fn finetune_flips_are_joint() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| i as f32).unwrap();
        let mask: Vec<u8> = vec![0, 1, 2, 3, 4, 5];
        let mut seen_identity = false;
        let mut seen_hflip = false;
        for seed in 0..32 {
            let (out, m) = finetune_augment(&img, &mask, [0.0; 3], [1.0; 3], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            // the mask value at each pixel tells us where that pixel came from
            for (p, &src) in m.iter().enumerate() {
                let src = src as usize;
                assert!((out.data()[p] * 255.0 - img.data()[src]).abs() < 1e-3);
            }
            let mut sorted = m.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, mask);
            seen_identity |= m == mask;
            seen_hflip |= m == vec![2, 1, 0, 5, 4, 3];
        }
        assert!(seen_identity && seen_hflip);
        assert!(finetune_augment(&img, &mask[..5], [0.0; 3], [1.0; 3], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
