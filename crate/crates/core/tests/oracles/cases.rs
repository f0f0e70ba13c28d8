//! Gradient-check cases: every differentiable tape op and both training
//! losses, each with an input generator keyed by seed.

use matssl::segment::{cross_entropy_on_tape, dice_on_tape, MaskBatch};
use matssl::ssl::{gated_fuse, ntxent_on_tape, ContrastiveConfig};
use matssl::tensor::{Tape, Tensor, Var, NORM_EPS};
use matssl::Result;

use super::{random_mask, random_tensor, random_tensor_off_zero, rng};

pub type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
pub type Inputs = Box<dyn Fn(u64) -> Vec<Tensor>>;

pub struct Case {
    pub name: String,
    pub forward: Forward,
    pub inputs: Inputs,
}

/// Collapses any output to a scalar through a per-element nonlinearity, so
/// each output entry receives a different upstream gradient.
fn readout(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.sigmoid(v)?;
    tape.sum(s)
}

fn case(
    name: impl Into<String>,
    forward: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    inputs: impl Fn(u64) -> Vec<Tensor> + 'static,
) -> Case {
    Case {
        name: name.into(),
        forward: Box::new(forward),
        inputs: Box::new(inputs),
    }
}

fn tensors(seed: u64, shapes: &[(&[usize], f32)]) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes.iter().map(|(s, scale)| random_tensor(&mut r, s, *scale)).collect()
}

pub fn all() -> Vec<Case> {
    let mut cases = vec![
        case(
            "conv2d 3x3 stride 1",
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 2, 5, 5], 1.0), (&[3, 2, 3, 3], 0.5), (&[3], 0.5)]),
        ),
        case(
            "conv2d 3x3 stride 2",
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[1, 3, 6, 6], 1.0), (&[2, 3, 3, 3], 0.5), (&[2], 0.5)]),
        ),
        case(
            "conv2d 1x1",
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 4, 3, 3], 1.0), (&[2, 4, 1, 1], 0.5), (&[2], 0.5)]),
        ),
        case(
            "global_average_pool",
            |t, v| {
                let y = t.global_average_pool(v[0])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 3, 4, 4], 2.0)]),
        ),
        case(
            "relu",
            |t, v| {
                let y = t.relu(v[0])?;
                readout(t, y)
            },
            |s| vec![random_tensor_off_zero(&mut rng(s), &[3, 7], 2.0, 0.01)],
        ),
        case(
            "sigmoid",
            |t, v| {
                let y = t.sigmoid(v[0])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[3, 5], 4.0)]),
        ),
        case(
            "add",
            |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 2, 3, 3], 1.0), (&[2, 2, 3, 3], 1.0)]),
        ),
        case(
            "linear",
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[4, 6], 1.0), (&[6, 3], 0.5), (&[3], 0.5)]),
        ),
        case(
            "concat columns",
            |t, v| {
                let y = t.concat(&[v[0], v[1], v[2]])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[3, 2], 1.0), (&[3, 4], 1.0), (&[3, 1], 1.0)]),
        ),
        case(
            "concat channels",
            |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 1, 3, 3], 1.0), (&[2, 3, 3, 3], 1.0)]),
        ),
        case(
            "scale_columns scalar gate",
            |t, v| {
                let y = t.scale_columns(v[0], v[1])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[3, 5], 2.0), (&[1], 1.5)]),
        ),
        case(
            "scale_columns channel gate",
            |t, v| {
                let y = t.scale_columns(v[0], v[1])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[3, 5], 2.0), (&[5], 1.5)]),
        ),
        case(
            "upsample2x",
            |t, v| {
                let y = t.upsample2x(v[0])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[2, 2, 3, 4], 2.0)]),
        ),
        case(
            "sum",
            |t, v| {
                let y = t.sigmoid(v[0])?;
                t.sum(y)
            },
            |s| tensors(s, &[(&[4, 4], 3.0)]),
        ),
        case(
            "cosine_similarity",
            |t, v| t.cosine_similarity(v[0], v[1], NORM_EPS),
            |s| tensors(s, &[(&[6], 1.0), (&[6], 1.0)]),
        ),
        case(
            "cross_entropy",
            |t, v| cross_entropy_on_tape(t, v[0], &[0, 2, 1, 2]),
            |s| tensors(s, &[(&[4, 3], 3.0)]),
        ),
        case(
            "gated_fuse",
            |t, v| {
                let y = gated_fuse(t, &[v[0], v[1]], &[v[2], v[3]])?;
                readout(t, y)
            },
            |s| tensors(s, &[(&[3, 2], 2.0), (&[3, 4], 2.0), (&[1], 1.5), (&[4], 1.5)]),
        ),
        case(
            "linear -> ntxent",
            |t, v| {
                let z = t.linear(v[0], v[1], v[2])?;
                ntxent_on_tape(t, z, &ContrastiveConfig::default())
            },
            |s| tensors(s, &[(&[4, 5], 1.0), (&[5, 3], 1.0), (&[3], 0.5)]),
        ),
        case(
            "conv2d -> dice",
            |t, v| {
                let truth = MaskBatch::new(random_mask(&mut rng(5), 16, 2), [1, 4, 4], 2)?;
                let logits = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                dice_on_tape(t, logits, &truth)
            },
            |s| tensors(s, &[(&[1, 2, 4, 4], 1.0), (&[2, 2, 3, 3], 0.5), (&[2], 0.5)]),
        ),
    ];
    for tau in [0.07, 0.5] {
        let cfg = ContrastiveConfig {
            temperature: tau,
            eps: NORM_EPS,
        };
        cases.push(case(
            format!("ntxent tau={tau}"),
            move |t, v| ntxent_on_tape(t, v[0], &cfg),
            |s| tensors(s, &[(&[6, 4], 1.0)]),
        ));
    }
    for k in [2usize, 3] {
        cases.push(case(
            format!("dice {k} classes"),
            move |t, v| {
                let truth = MaskBatch::new(random_mask(&mut rng(7 + k as u64), 18, k), [2, 3, 3], k)?;
                dice_on_tape(t, v[0], &truth)
            },
            move |s| tensors(s, &[(&[2, k, 3, 3], 2.0)]),
        ));
    }
    cases
}
