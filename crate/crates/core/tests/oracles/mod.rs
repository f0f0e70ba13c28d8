//! Independent reference implementations used by the integration suites.
//!
//! Everything here is written as plainly as possible, in `f64`, without
//! sharing code with the library.

#![allow(dead_code)]

pub mod cases;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use matssl::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Like [`random_tensor`] but every entry is at least `gap` away from zero,
/// so a finite-difference step never crosses a ReLU kink.
pub fn random_tensor_off_zero(rng: &mut impl Rng, shape: &[usize], scale: f32, gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(gap..scale);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contrastive loss by direct double loop: rows `k` and `k + N` are
/// positives, every other row is a negative.
pub fn brute_ntxent(z: &[Vec<f64>], tau: f64) -> f64 {
    let rows = z.len();
    let n = rows / 2;
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..rows {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (cos(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -((cos(&z[i], &z[j]) / tau).exp() / denom).ln();
    }
    total / rows as f64
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Soft Dice loss over `[N, K, H·W]` probabilities: per-class Dice over the
/// whole batch, averaged over classes that appear in the labels.
pub fn brute_dice(probs: &[f64], labels: &[u8], n: usize, k: usize, hw: usize) -> f64 {
    let mut dices = Vec::new();
    for c in 0..k {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for b in 0..n {
            for i in 0..hw {
                let p = probs[(b * k + c) * hw + i];
                let y = if labels[b * hw + i] as usize == c { 1.0 } else { 0.0 };
                inter += p * y;
                ps += p;
                ys += y;
            }
        }
        if ys > 0.0 {
            dices.push(2.0 * inter / (ps + ys + 1e-6));
        }
    }
    1.0 - dices.iter().sum::<f64>() / dices.len() as f64
}

/// Mean IoU over classes present in prediction or truth, by set counting.
pub fn brute_miou(pred: &[u8], truth: &[u8], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let inter = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let union = pred.iter().zip(truth).filter(|&(&p, &t)| p == c || t == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn random_mask(rng: &mut impl Rng, len: usize, k: usize) -> Vec<u8> {
    (0..len).map(|_| rng.random_range(0..k as u8)).collect()
}
