//! The experiment commands behind the CLI. Each reads a [`RunConfig`],
//! writes its artifacts under the configured paths and returns a summary.
//!
//! Layout under `paths.output_dir`:
//!
//! ```text
//! data/          manifest.json, images/, labels/          (gen-data)
//! checkpoints/   pretrained.ckpt                          (pretrain)
//!                adapted_iter{t}.ckpt                     (adapt)
//! reports/       pretrain_loss.csv, adapt_metrics.csv, audit.json,
//!                pseudo_labels/iter{t}/{id}.png, eval.csv, bench.json,
//!                ablation.csv, ablation.svg, ablation_summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, bench_step_time, evaluate, BenchReport, EvalReport, Series};
use crate::model::SegNet;
use crate::selftrain::{adapt, pretrain_source, AdaptOutcome, IterationMetrics, Method, PretrainReport};
use crate::synth::{self, make_benchmark, read_split, render_scene, write_split, DomainId, Manifest};
use crate::{derive_seed, seeded};

pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";

pub fn adapted_checkpoint_name(iteration: usize) -> String {
    format!("adapted_iter{iteration}.ckpt")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    metrics::write_text(path, &text)
}

/// Loads a checkpoint, reporting a missing file as a configuration problem.
pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    SegNet::load(path)
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<SegNet> {
    SegNet::build(cfg.model.clone(), &mut seeded(derive_seed(seed, "init")))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let split = make_benchmark(&cfg.data, cfg.seed)?;
    let dir = cfg.paths.data();
    ensure_dir(&dir)?;
    write_split(&split, &dir, cfg.seed)
}

fn read_data(cfg: &RunConfig) -> Result<crate::selftrain::DatasetSplit> {
    let dir = cfg.paths.data();
    if !dir.join(synth::MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run gen-data first",
            dir.join(synth::MANIFEST_FILE).display()
        )));
    }
    read_split(&dir)
}

/// Saves `model` as the last good state and passes a divergence through.
fn save_on_divergence<T>(result: Result<T>, model: &SegNet, dir: &Path, name: &str) -> Result<T> {
    if let Err(Error::Diverged { .. }) = &result {
        model.save(&dir.join(name))?;
    }
    result
}

pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let split = read_data(cfg)?;
    let ckpt_dir = cfg.paths.checkpoints();
    ensure_dir(&ckpt_dir)?;
    let mut model = build_model(cfg, cfg.seed)?;
    let result =
        pretrain_source(&mut model, &split.source_labeled, &cfg.train.pretrain, derive_seed(cfg.seed, "pretrain"));
    let report = save_on_divergence(result, &model, &ckpt_dir, "pretrained_last_good.ckpt")?;
    model.save(&ckpt_dir.join(PRETRAINED_CHECKPOINT))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    metrics::write_text(&cfg.paths.reports().join("pretrain_loss.csv"), &csv)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub consumed: Vec<String>,
    pub eval_ids: Vec<String>,
    /// Evaluation ids that a gradient step consumed; always empty.
    pub leaked: Vec<String>,
}

pub fn adapt_cmd(cfg: &RunConfig) -> Result<AdaptOutcome> {
    let split = read_data(cfg)?;
    let ckpt_dir = cfg.paths.checkpoints();
    let mut model = load_checkpoint(&ckpt_dir.join(PRETRAINED_CHECKPOINT))?;
    let result = adapt(&mut model, &split, &cfg.train.adapt, derive_seed(cfg.seed, "adapt"));
    let outcome = save_on_divergence(result, &model, &ckpt_dir, "adapted_last_good.ckpt")?;

    for (t, snap) in outcome.snapshots.iter().enumerate() {
        snap.save(&ckpt_dir.join(adapted_checkpoint_name(t + 1)))?;
    }
    let reports = cfg.paths.reports();
    for (t, labels) in outcome.pseudo_labels.iter().enumerate() {
        let dir = reports.join("pseudo_labels").join(format!("iter{}", t + 1));
        ensure_dir(&dir)?;
        for (p, l) in split.target_unlabeled.iter().zip(labels) {
            synth::write_label(l, &dir.join(format!("{}.png", p.patch_id)))?;
        }
    }
    let csv = metrics::metrics_csv(&outcome.metrics, cfg.model.num_classes);
    metrics::write_text(&reports.join("adapt_metrics.csv"), &csv)?;
    let eval_ids: Vec<String> = split.target_eval.iter().map(|p| p.patch_id.clone()).collect();
    let audit = AuditReport {
        consumed: outcome.audit.consumed.iter().cloned().collect(),
        leaked: outcome.audit.leaked(eval_ids.iter().map(String::as_str)),
        eval_ids,
    };
    write_json(&reports.join("audit.json"), &audit)?;
    Ok(outcome)
}

/// `_iterN` suffix of a checkpoint file name.
fn iteration_of(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit_once("_iter"))
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(0)
}

/// Evaluates `checkpoint` (default: the final adapted checkpoint) on the
/// held-out target split and writes `eval.csv` in the metrics schema.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let path: PathBuf = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => cfg.paths.checkpoints().join(adapted_checkpoint_name(cfg.train.adapt.iterations)),
    };
    let model = load_checkpoint(&path)?;
    let split = read_data(cfg)?;
    let report = evaluate(&model, &split.target_eval)?;
    let row = IterationMetrics {
        iteration: iteration_of(&path),
        method: cfg.train.adapt.method,
        seed: cfg.seed,
        eval_dice_loss: report.dice_loss_pct,
        mean_iou: report.iou.mean,
        per_class_iou: report.iou.per_class.clone(),
        step_time_mean_s: 0.0,
        forward_passes_per_step: 0.0,
    };
    let csv = metrics::metrics_csv(&[row], cfg.model.num_classes);
    metrics::write_text(&cfg.paths.reports().join("eval.csv"), &csv)?;
    Ok(report)
}

/// Step-time benchmark of `buda` against `mc-dropout` at batch size 1 on one
/// target-domain scene. Starts from the pretrained checkpoint when present,
/// otherwise from a fresh initialization.
pub fn bench_cmd(cfg: &RunConfig) -> Result<Vec<BenchReport>> {
    let ckpt = cfg.paths.checkpoints().join(PRETRAINED_CHECKPOINT);
    let model = if ckpt.exists() { SegNet::load(&ckpt)? } else { build_model(cfg, cfg.seed)? };
    let scene =
        render_scene(&cfg.data.target, cfg.data.patch_size, derive_seed(cfg.seed, "bench"), DomainId::Target, "bench");
    let k = cfg.train.adapt.samples;
    let mut reports = Vec::new();
    for method in [Method::Buda, Method::McDropout] {
        let seed = derive_seed(cfg.seed, &format!("bench/{method}"));
        reports.push(bench_step_time(method, &model, &scene.image, &scene.label, k, cfg.train.bench_steps, seed)?);
    }
    write_json(&cfg.paths.reports().join("bench.json"), &reports)?;
    Ok(reports)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Element-wise median over seeds of the eval Dice loss (%) per iteration `1..=T`.
    pub median_dice_loss: Vec<f64>,
    pub median_final_mean_iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub methods: Vec<MethodSummary>,
    /// Median zero-shot target Dice loss (%) of the pretrained models.
    pub median_zero_shot_dice_loss: f64,
    pub pretrain_ready: Vec<bool>,
    #[serde(skip)]
    pub rows: Vec<IterationMetrics>,
}

impl AblationSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// For each of `train.ablation_runs` seeds: generate the benchmark, pretrain,
/// then adapt copies of the same pretrained model with `buda` and `plain`.
pub fn ablate_cmd(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationSummary> {
    let methods = [Method::Buda, Method::Plain];
    let seeds: Vec<u64> = (0..cfg.train.ablation_runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let mut rows = Vec::new();
    let (mut zero_shot, mut ready) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        let split = make_benchmark(&cfg.data, seed)?;
        let mut model = build_model(cfg, seed)?;
        let report =
            pretrain_source(&mut model, &split.source_labeled, &cfg.train.pretrain, derive_seed(seed, "pretrain"))?;
        ready.push(report.ready);
        progress(&format!("seed {seed}: pretrained, final source dice loss {:.4}", report.final_dice_loss));
        for method in methods {
            let mut m = model.clone();
            let acfg = crate::selftrain::AdaptationConfig { method, ..cfg.train.adapt.clone() };
            let out = adapt(&mut m, &split, &acfg, derive_seed(seed, "adapt"))?;
            if method == Method::Buda {
                zero_shot.push(out.zero_shot.dice_loss_pct);
            }
            let losses: Vec<String> = out.metrics.iter().map(|r| format!("{:.2}", r.eval_dice_loss)).collect();
            progress(&format!("seed {seed}: {method} dice loss per iteration [{}]", losses.join(", ")));
            rows.extend(out.metrics);
        }
    }

    let t = cfg.train.adapt.iterations;
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .map(|&method| {
            let of = |it: usize| rows.iter().filter(move |r| r.method == method && r.iteration == it);
            MethodSummary {
                method,
                median_dice_loss: (1..=t)
                    .map(|it| median(&of(it).map(|r| r.eval_dice_loss).collect::<Vec<_>>()))
                    .collect(),
                median_final_mean_iou: median(&of(t).map(|r| r.mean_iou).collect::<Vec<_>>()),
            }
        })
        .collect();

    let reports = cfg.paths.reports();
    metrics::write_text(&reports.join("ablation.csv"), &metrics::metrics_csv(&rows, cfg.model.num_classes))?;
    let series: Vec<Series> = summaries
        .iter()
        .map(|s| Series {
            name: s.method.to_string(),
            points: s.median_dice_loss.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect(),
        })
        .collect();
    let svg = metrics::line_chart_svg(
        "Median eval Dice loss per self-training iteration",
        "iteration",
        "Dice loss (%)",
        &series,
    );
    metrics::write_text(&reports.join("ablation.svg"), &svg)?;
    let summary = AblationSummary {
        seeds,
        iterations: t,
        methods: summaries,
        median_zero_shot_dice_loss: median(&zero_shot),
        pretrain_ready: ready,
        rows,
    };
    write_json(&reports.join("ablation_summary.json"), &summary)?;
    Ok(summary)
}
