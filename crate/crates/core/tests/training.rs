//! Trainer behaviour: loss levels, determinism, freezing, controls and
//! checkpoints.

use matssl::augment::{make_view_pair, AugmentConfig};
use matssl::checkpoint::Checkpoint;
use matssl::data::{generate_synthetic, ImageRecord, SyntheticSpec};
use matssl::encoder::{init_params, EncoderConfig, EncoderInit};
use matssl::optim::{Optimizer, OptimizerConfig};
use matssl::rng::{derive, Stream};
use matssl::segment::{init_decoder, AbsentClassRule, DecoderConfig, MaskBatch, MiouAggregation};
use matssl::ssl::{init_head, ssl_forward, ContrastiveConfig, FusionConfig};
use matssl::tensor::Tape;
use matssl::train::{
    evaluate, finetune_step, image_input, pretrain_source, run_finetune, run_ssl, FinetuneData, Phase, SegModel,
    TrainConfig,
};
use matssl::Error;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        stage_count: 3,
        base_channels: 8,
        blocks_per_stage: 1,
        input_channels: 3,
    }
}

fn small_fusion() -> FusionConfig {
    FusionConfig {
        hidden: 64,
        embed_dim: 32,
        ..Default::default()
    }
}

fn ssl_aug() -> AugmentConfig {
    AugmentConfig {
        view_size: 32,
        ..Default::default()
    }
}

fn images(seed: u64, size: usize, count: usize, noise: f64) -> Vec<ImageRecord> {
    let spec = SyntheticSpec {
        seed,
        noise_std: noise,
        ..Default::default()
    };
    generate_synthetic(&spec, size, size, count).unwrap()
}

fn ssl_config(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        ..TrainConfig::defaults_for(Phase::Ssl)
    }
}

fn finetune_config(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        ..TrainConfig::defaults_for(Phase::Finetune)
    }
}

#[test]
fn first_ssl_loss_is_near_uninformative_level() {
    for batch in [8usize, 32] {
        let data = images(9, 48, batch, 10.0);
        let out = run_ssl(&ssl_config(1, batch), &ssl_aug(), &small_encoder(), &small_fusion(), &data, EncoderInit::Random).unwrap();
        let expected = ((2 * batch - 1) as f64).ln();
        let rel = (out.step_losses[0] - expected).abs() / expected;
        assert!(rel < 0.15, "batch {batch}: {} vs {expected}", out.step_losses[0]);
    }
}

#[test]
fn ssl_is_deterministic() {
    let data = images(4, 40, 12, 5.0);
    let run = || {
        let out = run_ssl(&ssl_config(2, 4), &ssl_aug(), &small_encoder(), &small_fusion(), &data, EncoderInit::Random).unwrap();
        (out.metrics.to_csv(), out.encoder.to_bytes().unwrap(), out.step_losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn ssl_drops_partial_batch_and_logs_gates() {
    let data = images(4, 40, 10, 5.0);
    let out = run_ssl(&ssl_config(2, 4), &ssl_aug(), &small_encoder(), &small_fusion(), &data, EncoderInit::Random).unwrap();
    assert_eq!(out.step_losses.len(), 2 * 2);
    assert!(out.metrics.header().ends_with("gate_0,gate_1,gate_2"));
    assert!(out.metrics.rows.iter().all(|r| r.gates.len() == 3 && r.miou.is_none()));
    assert!(out.head.contains("head.gate0") && !out.encoder.params.contains("head.gate0"));
}

#[test]
fn one_small_ssl_step_descends() {
    let enc = small_encoder();
    let fusion = small_fusion();
    let aug = ssl_aug();
    let data = images(21, 40, 6, 8.0);
    let mut r = derive(0, Stream::Augment, 0, 0);
    let pairs: Vec<_> = data.iter().map(|p| make_view_pair(p, &aug, &mut r).unwrap()).collect();
    let mut params = init_params(&enc, 0, EncoderInit::Random).unwrap();
    params.extend(&init_head(&fusion, &enc, 0).unwrap());
    let contrastive = ContrastiveConfig::default();
    let loss_of = |params: &matssl::tensor::ParamStore, backprop: bool| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| backprop);
        let loss = ssl_forward(&mut tape, &pairs, &b, &enc, &fusion, &contrastive).unwrap();
        let value = tape.scalar(loss);
        let grads = backprop.then(|| {
            tape.backward(loss).unwrap();
            params.gradients(&tape, &b)
        });
        (value, grads)
    };
    let (before, grads) = loss_of(&params, true);
    let mut opt = Optimizer::new(OptimizerConfig::Sgd {
        lr: 1e-4,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    opt.step(&mut params, &grads.unwrap(), 1e-4, |_| true).unwrap();
    let (after, _) = loss_of(&params, false);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn exploding_learning_rate_aborts_with_location() {
    let data = images(4, 40, 8, 5.0);
    let mut cfg = ssl_config(3, 4);
    cfg.optimizer = OptimizerConfig::Sgd {
        lr: 1e30,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let err = run_ssl(&cfg, &ssl_aug(), &small_encoder(), &small_fusion(), &data, EncoderInit::Random).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch, .. } if epoch >= 1), "{err}");
    assert!(!err.is_validation());
}

#[test]
fn source_pretraining_separates_noise_free_phases() {
    let data = images(31, 32, 64, 0.0);
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::defaults_for(Phase::SourcePretrain)
    };
    let out = pretrain_source(&cfg, &AugmentConfig::default(), &small_encoder(), &data, 2).unwrap();
    assert_eq!(out.accuracy.len(), 20);
    assert!(*out.accuracy.last().unwrap() > 0.95, "{:?}", out.accuracy);
    assert!(out.encoder.params.names().all(|n| n.starts_with("encoder.")));
    let again = pretrain_source(&cfg, &AugmentConfig::default(), &small_encoder(), &data, 2).unwrap();
    assert_eq!(out.encoder.to_bytes().unwrap(), again.encoder.to_bytes().unwrap());
}

fn seg_model<'a>(enc: &'a EncoderConfig, dec: &'a DecoderConfig) -> SegModel<'a> {
    let aug = AugmentConfig::default();
    SegModel {
        encoder: enc,
        decoder: dec,
        mean: aug.normalize_mean,
        std: aug.normalize_std,
    }
}

#[test]
fn frozen_encoder_does_not_move() {
    let enc = small_encoder();
    let dec = DecoderConfig::default();
    let model = seg_model(&enc, &dec);
    let img = &images(2, 32, 1, 0.0)[0];
    let mut params = init_params(&enc, 0, EncoderInit::Random).unwrap();
    params.extend(&init_decoder(&dec, &enc, 0).unwrap());
    let before = params.clone();
    let x = image_input(img, &AugmentConfig::default()).unwrap().reshape(&[1, 3, 32, 32]).unwrap();
    let truth = MaskBatch::new(img.mask.clone().unwrap(), [1, 32, 32], 2).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::finetune_default());
    let mut tape = Tape::new();
    for _ in 0..3 {
        finetune_step(&mut tape, &model, &mut params, &mut opt, x.clone(), &truth, 1e-3, true).unwrap();
    }
    for (name, t) in params.iter() {
        let unchanged = t == before.get(name).unwrap();
        assert_eq!(unchanged, name.starts_with("encoder."), "{name}");
    }
}

#[test]
fn single_image_overfits() {
    let enc = EncoderConfig::default();
    let dec = DecoderConfig::default();
    let model = seg_model(&enc, &dec);
    let img = &images(5, 64, 1, 0.0)[0];
    let mut params = init_params(&enc, 0, EncoderInit::Random).unwrap();
    params.extend(&init_decoder(&dec, &enc, 0).unwrap());
    let x = image_input(img, &AugmentConfig::default()).unwrap().reshape(&[1, 3, 64, 64]).unwrap();
    let truth = MaskBatch::new(img.mask.clone().unwrap(), [1, 64, 64], 2).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::finetune_default());
    let mut tape = Tape::new();
    let losses: Vec<f64> = (0..200)
        .map(|_| finetune_step(&mut tape, &model, &mut params, &mut opt, x.clone(), &truth, 1e-4, false).unwrap())
        .collect();
    assert!(losses.iter().any(|&l| l < 0.05), "best {}", losses.iter().cloned().fold(1.0, f64::min));
    let report = evaluate(&model, &params, std::slice::from_ref(img), AbsentClassRule::Exclude).unwrap();
    assert!(report.pooled.mean > 0.95, "{}", report.pooled.mean);
}

#[test]
fn noise_labels_are_not_learned_by_a_frozen_random_encoder() {
    use rand::Rng;
    let enc = small_encoder();
    let dec = DecoderConfig::default();
    let model = seg_model(&enc, &dec);
    let mut r = derive(99, Stream::Init, 0, 0);
    let mut train = images(8, 32, 16, 10.0);
    for im in &mut train {
        im.mask = Some((0..32 * 32).map(|_| r.random_range(0..2)).collect());
    }
    let cfg = TrainConfig {
        freeze_encoder: true,
        ..finetune_config(15, 8)
    };
    let data = FinetuneData {
        train: &train,
        val: &[],
        test: &[],
    };
    let out = run_finetune(&cfg, &model, data, EncoderInit::Random, AbsentClassRule::Exclude, MiouAggregation::Pooled).unwrap();
    // With balanced random labels the best constant prediction (p = ½) scores
    // Dice ½ per class.
    let tail = &out.step_losses[out.step_losses.len() - 6..];
    for &l in tail {
        assert!((l - 0.5).abs() < 0.05, "{:?}", tail);
    }
}

#[test]
fn finetune_is_deterministic_and_selects_best_validation_epoch() {
    let enc = small_encoder();
    let dec = DecoderConfig::default();
    let model = seg_model(&enc, &dec);
    let all = images(12, 32, 14, 15.0);
    let data = FinetuneData {
        train: &all[..8],
        val: &all[8..11],
        test: &all[11..],
    };
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        },
        ..finetune_config(6, 3)
    };
    let run = || run_finetune(&cfg, &model, data, EncoderInit::Random, AbsentClassRule::Exclude, MiouAggregation::Pooled).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    // 8 images in batches of 3 keep the final partial batch.
    assert_eq!(a.step_losses.len(), 6 * 3);

    let scores: Vec<f64> = a.metrics.rows.iter().map(|r| r.miou.unwrap()).collect();
    let mut argmax = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[argmax] {
            argmax = i;
        }
    }
    assert_eq!(a.best_epoch, argmax + 1);
    let retested = evaluate(&model, &a.best.params, data.test, AbsentClassRule::Exclude).unwrap();
    assert_eq!(a.test.unwrap().pooled, retested.pooled);
}

#[test]
fn checkpoint_reload_reproduces_predictions_bit_for_bit() {
    let enc = small_encoder();
    let dec = DecoderConfig {
        num_classes: 3,
        nested_skip: true,
    };
    let model = seg_model(&enc, &dec);
    let mut params = init_params(&enc, 3, EncoderInit::Random).unwrap();
    params.extend(&init_decoder(&dec, &enc, 3).unwrap());
    let probe = &images(40, 32, 1, 20.0)[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::new(params.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (a, b) = (model.predict(&params, probe).unwrap(), model.predict(&loaded.params, probe).unwrap());
    let bits = |t: &matssl::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::PayloadLength { .. })));
}

#[test]
fn encoder_transfers_between_phases() {
    let enc = small_encoder();
    let data = images(4, 40, 8, 5.0);
    let ssl = run_ssl(&ssl_config(1, 4), &ssl_aug(), &enc, &small_fusion(), &data, EncoderInit::Random).unwrap();
    let loaded = init_params(&enc, 123, EncoderInit::Checkpoint(&ssl.encoder)).unwrap();
    for (name, t) in ssl.encoder.params.iter() {
        assert_eq!(loaded.get(name).unwrap(), t);
    }
    let other = EncoderConfig {
        base_channels: 4,
        ..enc
    };
    assert!(init_params(&other, 0, EncoderInit::Checkpoint(&ssl.encoder)).is_err());
}
