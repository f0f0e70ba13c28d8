#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn matssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matssl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn matssl")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = matssl(dir, args);
    assert!(
        out.status.success(),
        "matssl {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub const SSL_TOML: &str = r#"
[train]
epochs = 3
batch_size = 8
seed = 0
[augment]
view_size = 16
[encoder]
stage_count = 2
base_channels = 4
blocks_per_stage = 1
[fusion]
hidden = 16
embed_dim = 8
[data]
manifest = "manifest.tsv"
image_dir = "data"
[output]
dir = "ssl_run"
"#;

pub const FINETUNE_TOML: &str = r#"
[train]
epochs = 5
batch_size = 4
seed = 0
[encoder]
stage_count = 2
base_channels = 4
blocks_per_stage = 1
[data]
manifest = "manifest.tsv"
image_dir = "data"
[init]
encoder = "ssl_run/ssl_final.ckpt"
[output]
dir = "ft_run"
"#;

/// synth → patchify → ssl → finetune in `dir`; returns the artifact paths
/// that must be reproducible.
pub fn pipeline(dir: &Path) -> Vec<PathBuf> {
    ok(dir, &["synth", "--out", "data", "--count", "10", "--size", "32", "--noise", "10", "--seed", "0"]);
    ok(dir, &["patchify", "--input", "data", "--out", "manifest.tsv", "--patch", "16", "--seed", "0"]);
    std::fs::write(dir.join("ssl.toml"), SSL_TOML).unwrap();
    std::fs::write(dir.join("finetune.toml"), FINETUNE_TOML).unwrap();
    ok(dir, &["ssl", "--config", "ssl.toml"]);
    ok(dir, &["finetune", "--config", "finetune.toml"]);
    [
        "manifest.tsv",
        "ssl_run/metrics.csv",
        "ssl_run/ssl_final.ckpt",
        "ssl_run/ssl_head.ckpt",
        "ft_run/metrics.csv",
        "ft_run/finetune_best.ckpt",
        "ft_run/test_report.csv",
    ]
    .iter()
    .map(|p| dir.join(p))
    .collect()
}
