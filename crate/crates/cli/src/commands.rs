use std::fs;
use std::path::{Path, PathBuf};

use matssl::checkpoint::Checkpoint;
use matssl::config::{load_manifest_patches, RunConfig, RunConfigFile};
use matssl::data::{
    generate_synthetic, load_image, load_mask, save_image, save_mask, split_dataset, ImageRecord, PatchDataset,
    PatchEntry, Split, SplitAssignment, SyntheticSpec,
};
use matssl::encoder::EncoderInit;
use matssl::train::{
    evaluate, pretrain_source, run_finetune, run_ssl, score, EvalReport, FinetuneData, Phase, SegModel,
};
use matssl::Error;

use crate::{CliError, CliResult, EvalArgs, PatchifyArgs, SynthArgs, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::validation(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let spec = SyntheticSpec {
        seed: a.seed,
        grain_count: a.grains,
        phase_count: a.phases,
        noise_std: a.noise,
        stripe_phase: a.stripe_phase,
        stripe_period: a.stripe_period,
        intensity_range: (a.intensity_min, a.intensity_max),
    };
    let images = generate_synthetic(&spec, a.size, a.size, a.count)?;
    create_dir(&a.out)?;
    let mut manifest = String::new();
    for (i, img) in images.iter().enumerate() {
        let (image_name, mask_name) = (format!("img_{i:04}.pgm"), format!("mask_{i:04}.pgm"));
        save_image(a.out.join(&image_name), img)?;
        save_mask(a.out.join(&mask_name), img)?;
        manifest.push_str(&format!("{image_name}\t{mask_name}\n"));
    }
    write(&a.out.join("manifest.tsv"), manifest)?;
    let spec_toml = toml_spec(&spec, a)?;
    write(&a.out.join("synth.toml"), spec_toml)?;
    println!("wrote {} image/mask pairs to {}", images.len(), a.out.display());
    Ok(())
}

fn toml_spec(spec: &SyntheticSpec, a: &SynthArgs) -> CliResult<String> {
    let mut out = format!("count = {}\nwidth = {}\nheight = {}\n", a.count, a.size, a.size);
    out.push_str(&format!(
        "seed = {}\ngrain_count = {}\nphase_count = {}\nnoise_std = {:?}\nstripe_period = {:?}\nintensity_range = [{}, {}]\n",
        spec.seed,
        spec.grain_count,
        spec.phase_count,
        spec.noise_std,
        spec.stripe_period,
        spec.intensity_range.0,
        spec.intensity_range.1
    ));
    if let Some(p) = spec.stripe_phase {
        out.push_str(&format!("stripe_phase = {p}\n"));
    }
    Ok(out)
}

/// Source images of a directory in name order, mask files excluded.
fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if matches!(ext, "pgm" | "ppm") && !stem.starts_with("mask_") && !stem.ends_with("_mask") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!("{}: no .pgm/.ppm images", dir.display())));
    }
    Ok(paths)
}

pub fn patchify(a: &PatchifyArgs) -> CliResult {
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for path in list_images(&a.input)? {
        let img = load_image(&path)?;
        match matssl::data::patchify(&img, a.patch, a.overlap) {
            Ok(_) => images.push(img),
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::validation(failures.join("\n")));
    }
    let (assignment, default) = if a.unlabeled {
        (SplitAssignment::new(), Split::Unlabeled)
    } else {
        (split_dataset(&images, a.split_ratio, a.seed)?, Split::Train)
    };
    let ds = PatchDataset::build(&images, a.patch, a.overlap, &assignment, default)?;
    write(&a.out, ds.to_manifest())?;
    for split in [Split::Train, Split::Val, Split::Test, Split::Unlabeled] {
        let n = ds.count(split);
        if n > 0 {
            println!("{split}: {n} patches");
        }
    }
    Ok(())
}

fn load_config(phase: Phase, a: &TrainArgs) -> CliResult<RunConfig> {
    let mut file = RunConfigFile::load(&a.config)?;
    if let Some(init) = &a.encoder_init {
        file.init.encoder = init.clone();
    }
    if let Some(out) = &a.out {
        file.output.dir = out.clone();
    }
    if let Some(seed) = a.seed {
        file.train.seed = Some(seed);
    }
    Ok(file.resolve(phase)?)
}

fn patches(cfg: &RunConfig, with_masks: bool) -> CliResult<Vec<(PatchEntry, ImageRecord)>> {
    let splits = cfg.data.splits.clone().unwrap_or_default();
    let out = cfg.load_patches(&splits, with_masks)?;
    if out.is_empty() {
        return Err(CliError::validation(format!(
            "data.manifest has no entries in splits {splits:?}"
        )));
    }
    Ok(out)
}

fn save_checkpoint(mut ckpt: Checkpoint, snapshot: &str, path: &Path) -> CliResult {
    ckpt.config = snapshot.to_string();
    ckpt.save(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(phase: Phase, a: &TrainArgs) -> CliResult {
    let cfg = load_config(phase, a)?;
    let init_ckpt = match cfg.encoder_checkpoint()? {
        Some(p) => Some(Checkpoint::load(&p)?),
        None => None,
    };
    let init = match &init_ckpt {
        Some(c) => EncoderInit::Checkpoint(c),
        None => EncoderInit::Random,
    };
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    let snapshot = cfg.to_toml()?;
    write(&out.join("resolved.toml"), &snapshot)?;

    match phase {
        Phase::SourcePretrain => {
            let items: Vec<ImageRecord> = patches(&cfg, true)?.into_iter().map(|(_, p)| p).collect();
            let res = pretrain_source(&cfg.train, &cfg.augment, &cfg.encoder, &items, cfg.decoder.num_classes)?;
            write(&out.join("metrics.csv"), res.metrics.to_csv())?;
            save_checkpoint(res.encoder, &snapshot, &out.join("source_final.ckpt"))?;
            if let Some(acc) = res.accuracy.last() {
                println!("final training accuracy {acc:.4}");
            }
        }
        Phase::Ssl => {
            let items: Vec<ImageRecord> = patches(&cfg, false)?.into_iter().map(|(_, p)| p).collect();
            let res = run_ssl(&cfg.train, &cfg.augment, &cfg.encoder, &cfg.fusion, &items, init)?;
            write(&out.join("metrics.csv"), res.metrics.to_csv())?;
            save_checkpoint(res.encoder, &snapshot, &out.join("ssl_final.ckpt"))?;
            let head = Checkpoint::new(res.head);
            save_checkpoint(head, &snapshot, &out.join("ssl_head.ckpt"))?;
        }
        Phase::Finetune => {
            let all = patches(&cfg, true)?;
            let pick = |s: Split| -> Vec<ImageRecord> {
                all.iter().filter(|(e, _)| e.split == s).map(|(_, p)| p.clone()).collect()
            };
            let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
            let model = SegModel {
                encoder: &cfg.encoder,
                decoder: &cfg.decoder,
                mean: cfg.augment.normalize_mean,
                std: cfg.augment.normalize_std,
            };
            let data = FinetuneData {
                train: &train,
                val: &val,
                test: &test,
            };
            let res = run_finetune(
                &cfg.train,
                &model,
                data,
                init,
                cfg.metrics.absent_class_rule,
                cfg.metrics.aggregation,
            )?;
            write(&out.join("metrics.csv"), res.metrics.to_csv())?;
            save_checkpoint(res.best, &snapshot, &out.join("finetune_best.ckpt"))?;
            if let Some(report) = &res.test {
                write(&out.join("test_report.csv"), report_csv(report, cfg.decoder.num_classes)?)?;
                println!(
                    "test mIoU {:.4} (pooled), {:.4} (per image); best epoch {}",
                    report.pooled.mean, report.per_image_mean, res.best_epoch
                );
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per image, then the pooled and per-image-mean summaries.
pub fn report_csv(r: &EvalReport, num_classes: usize) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["scope".to_string(), "image".into(), "miou".into(), "pixel_accuracy".into()];
    header.extend((0..num_classes).map(|c| format!("iou_{c}")));
    let mut rows = vec![header];
    let row = |scope: &str, image: &str, miou: f64, acc: Option<f64>, iou: &[Option<f64>]| {
        let mut cells = vec![scope.to_string(), image.to_string(), miou.to_string(), fmt_opt(acc)];
        cells.extend((0..num_classes).map(|c| fmt_opt(iou.get(c).copied().flatten())));
        cells
    };
    for (id, rep) in r.ids.iter().zip(&r.per_image) {
        rows.push(row("image", id, rep.mean, None, &rep.per_class));
    }
    rows.push(row("pooled", "", r.pooled.mean, Some(r.pixel_accuracy), &r.pooled.per_class));
    rows.push(row("per_image_mean", "", r.per_image_mean, None, &[]));
    for cells in rows {
        w.write_record(&cells).map_err(|e| CliError::validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::validation(e.to_string()))
}

fn prediction_name(id: &str) -> String {
    match id.split_once('@') {
        Some((image, xy)) => {
            let (x, y) = xy.split_once(',').unwrap_or((xy, "0"));
            format!("{image}_x{x}_y{y}.pgm")
        }
        None => format!("{id}.pgm"),
    }
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = RunConfig::from_toml(&ckpt.config)
        .map_err(|e| CliError::validation(format!("{}: config snapshot: {e}", a.checkpoint.display())))?;
    let split: Split = a.split.parse()?;
    let text = fs::read_to_string(&a.manifest).map_err(|e| io_err(&a.manifest, e))?;
    let ds = PatchDataset::from_manifest(&text)?;
    let mask_dir = a.mask_dir.clone().unwrap_or_else(|| a.image_dir.clone());
    let k = cfg.decoder.num_classes;
    let items: Vec<ImageRecord> = load_manifest_patches(&ds, &a.image_dir, &mask_dir, &[split], Some(k))?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    if items.is_empty() {
        return Err(CliError::validation(format!("manifest has no `{split}` entries")));
    }
    let rule = cfg.metrics.absent_class_rule;
    let report = match &a.predictions {
        Some(dir) => {
            let preds = items
                .iter()
                .map(|im| load_mask(dir.join(prediction_name(&im.id))))
                .collect::<matssl::Result<Vec<_>>>()?;
            let truths: Vec<&[u8]> = items.iter().map(|im| im.mask.as_deref().unwrap_or(&[])).collect();
            score(items.iter().map(|im| im.id.clone()).collect(), preds, &truths, k, rule)?
        }
        None => {
            let model = SegModel {
                encoder: &cfg.encoder,
                decoder: &cfg.decoder,
                mean: cfg.augment.normalize_mean,
                std: cfg.augment.normalize_std,
            };
            let mut params = matssl::tensor::ParamStore::new();
            let expected = matssl::encoder::init_params(&cfg.encoder, 0, EncoderInit::Random)?;
            let mut layout = expected;
            layout.extend(&matssl::segment::init_decoder(&cfg.decoder, &cfg.encoder, 0)?);
            ckpt.params.check_layout(&layout).map_err(|e| match e {
                Error::ParamMismatch { name, detail } => {
                    CliError::validation(format!("checkpoint does not match its config at `{name}`: {detail}"))
                }
                other => other.into(),
            })?;
            params.extend(&ckpt.params);
            evaluate(&model, &params, &items, rule)?
        }
    };
    create_dir(&a.out)?;
    let pred_dir = a.out.join("predictions");
    create_dir(&pred_dir)?;
    for (im, pred) in items.iter().zip(&report.predictions) {
        let record = ImageRecord {
            id: im.id.clone(),
            width: im.width,
            height: im.height,
            channels: 1,
            pixels: pred.clone(),
            mask: None,
            num_classes: Some(k),
        };
        save_image(pred_dir.join(prediction_name(&im.id)), &record)?;
    }
    write(&a.out.join("report.csv"), report_csv(&report, k)?)?;
    println!(
        "mIoU {:.4} (pooled), {:.4} (per image), pixel accuracy {:.4}, absent classes: {:?}",
        report.pooled.mean, report.per_image_mean, report.pixel_accuracy, rule
    );
    Ok(())
}
