#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use budaseg::config::RunConfig;
use budaseg::model::SegNetConfig;
use budaseg::synth::BenchmarkSpec;

pub fn budaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budaseg")).args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes `cfg` with `output_dir` redirected to `out` and returns the config path.
pub fn write_config(dir: &Path, mut cfg: RunConfig, out: &Path) -> PathBuf {
    cfg.paths.output_dir = out.to_path_buf();
    let path = dir.join(format!("{}.json", out.file_name().unwrap().to_string_lossy()));
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// Small benchmark and model so a full pipeline finishes in seconds.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        data: BenchmarkSpec { n_source: 8, n_target: 6, n_eval: 3, patch_size: 32, ..BenchmarkSpec::default() },
        model: SegNetConfig { base_channels: 4, depth: 2, ..SegNetConfig::default() },
        ..RunConfig::default()
    };
    cfg.train.pretrain.epochs = 2;
    cfg.train.adapt.iterations = 2;
    cfg.train.adapt.epochs_per_iteration = 1;
    cfg
}

/// Every regular file under `root`, relative path → bytes, sorted by path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
