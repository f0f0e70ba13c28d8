//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances and experiment settings are fixed below.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use matssl::augment::AugmentConfig;
use matssl::checkpoint::Checkpoint;
use matssl::data::{generate_synthetic, patchify, ImageRecord, SyntheticSpec};
use matssl::encoder::{init_params, EncoderConfig, EncoderInit};
use matssl::optim::{cosine_lr, Optimizer, OptimizerConfig, ScheduleConfig};
use matssl::segment::{
    dice_loss, init_decoder, miou, AbsentClassRule, DecoderConfig, MaskBatch, MiouAggregation, PredBatch,
};
use matssl::ssl::{ntxent_loss, ContrastiveConfig, EmbeddingBatch, FusionConfig};
use matssl::tensor::{gradient_check, Tape, Tensor};
use matssl::train::{
    finetune_step, image_input, pretrain_source, run_finetune, run_ssl, FinetuneData, Phase, SegModel, TrainConfig,
};
use matssl::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ------------------------------------------------------------------------

const GRAD_H: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const GRAD_SEEDS: [u64; 3] = [101, 202, 303];
const GRAD_BUDGET_S: f64 = 60.0;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = oracles::cases::all();
    let mut worst: (f64, String) = (0.0, String::new());
    for case in &cases {
        for seed in GRAD_SEEDS {
            let err = gradient_check(&case.forward, &(case.inputs)(seed), GRAD_H)
                .map_err(|e| format!("{} seed {seed}: {e}", case.name))?;
            if err > worst.0 {
                worst = (err, format!("{} seed {seed}", case.name));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < GRAD_TOL, || format!("max rel err {:.2e} at {}", worst.0, worst.1))?;
    ensure(secs < GRAD_BUDGET_S, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} cases x {} seeds, max rel err {:.2e} ({}), {secs:.2}s",
        cases.len(),
        GRAD_SEEDS.len(),
        worst.0,
        worst.1
    ))
}

// 2 ------------------------------------------------------------------------

const NTXENT_ORACLE_TOL: f64 = 1e-6;
const IDENTICAL_TOL: f64 = 1e-6;
const ORTHOGONAL_TOL: f64 = 1e-7;

fn ntxent(z: Tensor, tau: f64) -> Result<f64, String> {
    let cfg = ContrastiveConfig {
        temperature: tau,
        ..Default::default()
    };
    EmbeddingBatch::new(z)
        .and_then(|b| ntxent_loss(&b, &cfg))
        .map_err(|e| e.to_string())
}

fn loss_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut r = oracles::rng(5000 + i);
        let pairs = r.random_range(2..10usize);
        let dim = r.random_range(2..16usize);
        let z = oracles::random_tensor(&mut r, &[2 * pairs, dim], 1.0);
        let want = oracles::brute_ntxent(&oracles::rows_of(&z), 0.07);
        worst = worst.max((ntxent(z, 0.07)? - want).abs());
    }
    ensure(worst < NTXENT_ORACLE_TOL, || format!("brute-force gap {worst:.2e}"))?;

    let n = 16;
    let same = Tensor::from_fn(&[2 * n, 8], |i| (i % 8) as f32 - 3.5).map_err(|e| e.to_string())?;
    let got = ntxent(same, 0.07)?;
    let want = ((2 * n - 1) as f64).ln();
    ensure((got - want).abs() < IDENTICAL_TOL, || format!("identical: {got} vs {want}"))?;

    let tau: f64 = 0.07;
    let ortho = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).map_err(|e| e.to_string())?;
    let got2 = ntxent(ortho, tau)?;
    let want2 = (1.0 + 2.0 * (-1.0 / tau).exp()).ln();
    ensure((got2 - want2).abs() < ORTHOGONAL_TOL, || format!("orthogonal: {got2:e} vs {want2:e}"))?;
    Ok(format!(
        "50 batches max gap {worst:.1e}; log(2N-1) gap {:.1e}; orthogonal gap {:.1e}",
        (got - want).abs(),
        (got2 - want2).abs()
    ))
}

// 3 ------------------------------------------------------------------------

const METRIC_TOL: f64 = 1e-4;

fn hard(labels: &[u8], k: usize) -> Result<PredBatch, String> {
    let hw = labels.len();
    let mut data = vec![0.0f32; k * hw];
    for (i, &l) in labels.iter().enumerate() {
        data[l as usize * hw + i] = 1.0;
    }
    Tensor::new(&[1, k, 1, hw], data)
        .and_then(PredBatch::from_probabilities)
        .map_err(|e| e.to_string())
}

fn metric_oracles() -> Outcome {
    let e = |x: Error| x.to_string();
    let truth = MaskBatch::new(vec![1, 1, 0, 0], [1, 1, 4], 2).map_err(e)?;
    let checks = [
        (dice_loss(&hard(&[1, 0, 0, 0], 2)?, &truth).map_err(e)?, 1.0 - (2.0 / 3.0 + 0.8) / 2.0, "dice partial"),
        (dice_loss(&hard(&[1, 1, 0, 0], 2)?, &truth).map_err(e)?, 0.0, "dice perfect"),
        (dice_loss(&hard(&[0, 0, 1, 1], 2)?, &truth).map_err(e)?, 1.0, "dice disjoint"),
    ];
    for (got, want, name) in checks {
        ensure((got - want).abs() < METRIC_TOL, || format!("{name}: {got} vs {want}"))?;
    }
    let r = miou(&[1, 1, 0, 0], &[1, 0, 0, 0], 2, AbsentClassRule::Exclude).map_err(e)?;
    ensure(
        (r.mean - 7.0 / 12.0).abs() < METRIC_TOL
            && (r.per_class[0].unwrap_or(-1.0) - 2.0 / 3.0).abs() < METRIC_TOL
            && (r.per_class[1].unwrap_or(-1.0) - 0.5).abs() < METRIC_TOL,
        || format!("miou 7/12 case: {r:?}"),
    )?;
    let r = miou(&[0; 4], &[0; 4], 4, AbsentClassRule::Exclude).map_err(e)?;
    ensure((r.mean - 1.0).abs() < METRIC_TOL, || format!("absent classes: {r:?}"))?;

    let mut rng = oracles::rng(31337);
    for i in 0..100 {
        let k = rng.random_range(2..6usize);
        let len = rng.random_range(1..400usize);
        let mask = oracles::random_mask(&mut rng, len, k);
        let m = miou(&mask, &mask, k, AbsentClassRule::Exclude).map_err(e)?.mean;
        ensure(m == 1.0, || format!("miou(x, x) = {m} on mask {i}"))?;
    }
    Ok("dice 0.2667/0/1, miou 7/12 and absent-class cases, miou(x,x)=1 on 100 masks".into())
}

// 4 ------------------------------------------------------------------------

const MIDPOINT_TOL: f64 = 1e-6;

fn schedule_endpoints() -> Outcome {
    let ssl = TrainConfig::defaults_for(Phase::Ssl);
    let lr_max = ssl.optimizer.lr();
    let ScheduleConfig::Cosine { lr_min } = ssl.schedule else {
        return Err(format!("ssl default schedule is {:?}", ssl.schedule));
    };
    let t = ssl.epochs as f64;
    let (start, end, mid) = (
        cosine_lr(0.0, t, lr_max, lr_min),
        cosine_lr(t, t, lr_max, lr_min),
        cosine_lr(t / 2.0, t, lr_max, lr_min),
    );
    ensure(start == 0.1, || format!("lr(0) = {start:e}"))?;
    ensure(end == 1e-4, || format!("lr(T) = {end:e}"))?;
    ensure((mid - 0.05005).abs() < MIDPOINT_TOL, || format!("lr(T/2) = {mid}"))?;
    Ok(format!("lr(0)={start}, lr(T)={end}, lr(T/2)={mid:.8} with T={t}"))
}

// 5 ------------------------------------------------------------------------

fn blank(width: usize, height: usize) -> ImageRecord {
    ImageRecord {
        id: "im".into(),
        width,
        height,
        channels: 1,
        pixels: vec![0; width * height],
        mask: None,
        num_classes: None,
    }
}

fn patchify_contract() -> Outcome {
    let e = |x: Error| x.to_string();
    let big = blank(512, 512);
    for (overlap, want) in [(0.0, 4), (0.5, 9), (0.6, 16)] {
        let n = patchify(&big, 256, overlap).map_err(e)?.len();
        ensure(n == want, || format!("overlap {overlap}: {n} windows, want {want}"))?;
    }
    let mut rng = oracles::rng(777);
    for combo in 0..200 {
        let patch = rng.random_range(8..64usize);
        let (w, h) = (rng.random_range(patch..patch * 5), rng.random_range(patch..patch * 5));
        let overlap = rng.random_range(0.0..0.9);
        let mut hits = vec![0u32; w * h];
        for win in patchify(&blank(w, h), patch, overlap).map_err(e)? {
            for y in win.y..win.y + win.size {
                for x in win.x..win.x + win.size {
                    hits[y * w + x] += 1;
                }
            }
        }
        ensure(hits.iter().all(|&c| c >= 1), || {
            format!("combo {combo}: {w}x{h} patch {patch} overlap {overlap:.3} leaves pixels uncovered")
        })?;
    }
    Ok("4/9/16 windows at overlap 0/0.5/0.6; full coverage on 200 random combinations".into())
}

// 6 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("run");
    let capture = || -> Result<Vec<(String, Vec<u8>)>, String> {
        fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        let artifacts = common::pipeline(&root);
        let out = artifacts
            .iter()
            .map(|p| {
                let name = p.strip_prefix(&root).unwrap().display().to_string();
                fs::read(p).map(|b| (name, b)).map_err(|e| e.to_string())
            })
            .collect();
        fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        out
    };
    let (first, second) = (capture()?, capture()?);
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical across two seed-0 runs ({})",
        first.len(),
        first.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
    ))
}

// 7 ------------------------------------------------------------------------

const TRANSFER_SEEDS: u64 = 5;
const TRANSFER_MIN_TOTAL_GAP: f64 = 0.02;
const TRANSFER_BUDGET_S: f64 = 30.0 * 60.0;

struct Arm {
    random: f64,
    source: f64,
    ssl: f64,
}

fn transfer_seed(seed: u64) -> Result<Arm, Error> {
    let enc = EncoderConfig {
        stage_count: 3,
        base_channels: 8,
        blocks_per_stage: 1,
        input_channels: 3,
    };
    let dec = DecoderConfig::default();
    let aug = AugmentConfig {
        view_size: 32,
        ..Default::default()
    };
    let fusion = FusionConfig {
        hidden: 64,
        embed_dim: 32,
        ..Default::default()
    };

    // Source domain: coarse grains, fine stripes, wide intensity contrast.
    let source_spec = SyntheticSpec {
        seed: 1000 + seed,
        grain_count: 6,
        phase_count: 2,
        noise_std: 10.0,
        stripe_phase: Some(1),
        stripe_period: 4.0,
        intensity_range: (40, 200),
    };
    // Target domain: finer grains, coarser stripes, low contrast, more noise.
    let target_spec = SyntheticSpec {
        seed: 2000 + seed,
        grain_count: 12,
        phase_count: 2,
        noise_std: 25.0,
        stripe_phase: Some(1),
        stripe_period: 6.0,
        intensity_range: (70, 150),
    };
    let source = generate_synthetic(&source_spec, 64, 64, 200)?;
    let labeled = generate_synthetic(&target_spec, 64, 64, 50)?;
    let unlabeled = generate_synthetic(
        &SyntheticSpec {
            seed: 3000 + seed,
            ..target_spec
        },
        64,
        64,
        400,
    )?;

    let source_cfg = TrainConfig {
        seed,
        ..TrainConfig::defaults_for(Phase::SourcePretrain)
    };
    let pretrained = pretrain_source(&source_cfg, &aug, &enc, &source, 2)?.encoder;

    let ssl_cfg = TrainConfig {
        seed,
        epochs: 20,
        batch_size: 64,
        optimizer: OptimizerConfig::Sgd {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-6,
        },
        ..TrainConfig::defaults_for(Phase::Ssl)
    };
    let adapted = run_ssl(&ssl_cfg, &aug, &enc, &fusion, &unlabeled, EncoderInit::Checkpoint(&pretrained))?.encoder;

    let ft_cfg = TrainConfig {
        seed,
        epochs: 8,
        batch_size: 8,
        ..TrainConfig::defaults_for(Phase::Finetune)
    };
    let model = SegModel {
        encoder: &enc,
        decoder: &dec,
        mean: aug.normalize_mean,
        std: aug.normalize_std,
    };
    let data = FinetuneData {
        train: &labeled[..40],
        val: &[],
        test: &labeled[40..],
    };
    let score = |init: EncoderInit<'_>| -> Result<f64, Error> {
        let out = run_finetune(&ft_cfg, &model, data, init, AbsentClassRule::Exclude, MiouAggregation::Pooled)?;
        Ok(out.test.map_or(0.0, |r| r.pooled.mean))
    };
    Ok(Arm {
        random: score(EncoderInit::Random)?,
        source: score(EncoderInit::Checkpoint(&pretrained))?,
        ssl: score(EncoderInit::Checkpoint(&adapted))?,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn directional_transfer() -> Outcome {
    let start = Instant::now();
    let mut arms = Vec::new();
    for seed in 0..TRANSFER_SEEDS {
        let arm = transfer_seed(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        println!(
            "    seed {seed}: random {:.4}  source {:.4}  source+ssl {:.4}",
            arm.random, arm.source, arm.ssl
        );
        arms.push(arm);
    }
    let random = median(arms.iter().map(|a| a.random).collect());
    let source = median(arms.iter().map(|a| a.source).collect());
    let ssl = median(arms.iter().map(|a| a.ssl).collect());
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "median test mIoU random {random:.4}, source {source:.4}, source+ssl {ssl:.4} (total gap {:.2} points, {secs:.0}s)",
        100.0 * (ssl - random)
    );
    ensure(ssl >= source && source >= random, || format!("ordering violated: {summary}"))?;
    ensure(ssl - random >= TRANSFER_MIN_TOTAL_GAP, || format!("gap too small: {summary}"))?;
    ensure(secs < TRANSFER_BUDGET_S, || format!("over budget: {summary}"))?;
    Ok(summary)
}

// 8 ------------------------------------------------------------------------

const OVERFIT_STEPS: usize = 200;
const OVERFIT_LR: f64 = 1e-4;
const OVERFIT_TARGET: f64 = 0.05;

fn overfit_sanity() -> Outcome {
    let run = || -> Result<Option<(usize, f64)>, Error> {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let aug = AugmentConfig::default();
        let spec = SyntheticSpec {
            seed: 5,
            grain_count: 8,
            ..Default::default()
        };
        let image = generate_synthetic(&spec, 64, 64, 1)?.remove(0);
        let model = SegModel {
            encoder: &enc,
            decoder: &dec,
            mean: aug.normalize_mean,
            std: aug.normalize_std,
        };
        let mut params = init_params(&enc, 0, EncoderInit::Random)?;
        params.extend(&init_decoder(&dec, &enc, 0)?);
        let x = image_input(&image, &aug)?.reshape(&[1, 3, 64, 64])?;
        let truth = MaskBatch::new(image.mask.clone().unwrap_or_default(), [1, 64, 64], 2)?;
        let mut opt = Optimizer::new(OptimizerConfig::finetune_default());
        let mut tape = Tape::new();
        for step in 0..OVERFIT_STEPS {
            let loss = finetune_step(&mut tape, &model, &mut params, &mut opt, x.clone(), &truth, OVERFIT_LR, false)?;
            if loss < OVERFIT_TARGET {
                return Ok(Some((step + 1, loss)));
            }
        }
        Ok(None)
    };
    match run().map_err(|e| e.to_string())? {
        Some((step, loss)) => Ok(format!("dice loss {loss:.4} < {OVERFIT_TARGET} after {step} of {OVERFIT_STEPS} steps")),
        None => Err(format!("dice loss never fell below {OVERFIT_TARGET} in {OVERFIT_STEPS} steps")),
    }
}

// 9 ------------------------------------------------------------------------

fn checkpoint_round_trip() -> Outcome {
    let e = |x: Error| x.to_string();
    let enc = EncoderConfig {
        stage_count: 3,
        base_channels: 8,
        blocks_per_stage: 1,
        input_channels: 3,
    };
    let dec = DecoderConfig {
        num_classes: 3,
        nested_skip: false,
    };
    let aug = AugmentConfig::default();
    let model = SegModel {
        encoder: &enc,
        decoder: &dec,
        mean: aug.normalize_mean,
        std: aug.normalize_std,
    };
    let mut params = init_params(&enc, 9, EncoderInit::Random).map_err(e)?;
    params.extend(&init_decoder(&dec, &enc, 9).map_err(e)?);
    let spec = SyntheticSpec {
        seed: 9,
        phase_count: 3,
        noise_std: 12.0,
        ..Default::default()
    };
    let probes = generate_synthetic(&spec, 32, 32, 4).map_err(e)?;
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let path = dir.path().join("probe.ckpt");
    Checkpoint::new(params.clone()).save(&path).map_err(e)?;
    let loaded = Checkpoint::load(&path).map_err(e)?;
    for probe in &probes {
        let bits = |p: &matssl::tensor::ParamStore| -> Result<Vec<u32>, String> {
            let pred = model.predict(p, probe).map_err(e)?;
            Ok(pred.logits.data().iter().map(|v| v.to_bits()).collect())
        };
        ensure(bits(&params)? == bits(&loaded.params)?, || format!("{}: logits differ after reload", probe.id))?;
    }
    let mut bytes = fs::read(&path).map_err(|x| x.to_string())?;
    bytes.pop();
    let err = match Checkpoint::from_bytes(&bytes) {
        Err(err @ Error::PayloadLength { .. }) => err,
        other => return Err(format!("truncated payload gave {other:?}")),
    };
    Ok(format!("{} probe images bit-exact after reload; truncated file: \"{err}\"", probes.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("loss oracles", loss_oracles),
        ("metric oracles", metric_oracles),
        ("schedule endpoints", schedule_endpoints),
        ("patchify contract", patchify_contract),
        ("pipeline determinism", determinism),
        ("directional transfer experiment", directional_transfer),
        ("overfit sanity", overfit_sanity),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
