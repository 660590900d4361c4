//! Evaluation metrics, the step-time benchmark and report writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, OneHot};
use crate::loss::{dice_loss_value, SamplingConfig, DEFAULT_SMOOTHING};
use crate::model::SegNet;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::selftrain::{argmax_labels, stack_images, train_step, IterationMetrics, Method, StepRule};
use crate::synth::ScenePatch;
use crate::tensor::Tensor;
use crate::{seeded, Rng};

/// `counts[truth * C + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_maps(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::shape("confusion", format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
        }
        let c = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::invalid("confusion", format!("class index {} >= {c}", p.max(t))));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let c = self.num_classes;
        let tp = self.get(class, class);
        let fp = (0..c).map(|t| self.get(t, class)).sum::<u64>() - tp;
        let fn_ = (0..c).map(|p| self.get(class, p)).sum::<u64>() - tp;
        (tp, fp, fn_)
    }

    /// Hard per-class Dice `2TP / (2TP + FP + FN)`; `None` for classes absent
    /// from both prediction and truth.
    pub fn dice(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let (tp, fp, fn_) = self.tp_fp_fn(k);
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add_maps(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where the class has an empty union.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a nonempty union.
    pub mean: f64,
}

pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let per_class: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|k| {
            let (tp, fp, fn_) = cm.tp_fp_fn(k);
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over patches of the soft Dice loss, in percent.
    pub dice_loss_pct: f64,
    /// IoU from the confusion matrix pooled over all patches.
    pub iou: IouReport,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

/// Dice loss (percent) and IoU of `model` on labelled patches, one
/// standard-mode forward per patch. The variance head is ignored.
pub fn evaluate(model: &SegNet, set: &[ScenePatch]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let c = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(c);
    let mut dice_total = 0.0;
    for p in set {
        let x = stack_images(&[&p.image])?;
        let out = model.predict(&x)?;
        let prob = crate::autodiff::softmax_channels(&out.o)?;
        let y = OneHot::from_labels(&[&p.label], c)?;
        dice_total += dice_loss_value(&prob, &y, DEFAULT_SMOOTHING)?;
        let pred = argmax_labels(&out.o)?;
        cm.add_maps(&pred[0], &p.label)?;
    }
    Ok(EvalReport { dice_loss_pct: 100.0 * dice_total / set.len() as f64, iou: iou(&cm)?, confusion: cm })
}

pub fn eval_dice(model: &SegNet, set: &[ScenePatch]) -> Result<f64> {
    Ok(evaluate(model, set)?.dice_loss_pct)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub method: Method,
    pub samples: usize,
    pub timed_steps: usize,
    pub step_time_mean_s: f64,
    pub step_time_std_s: f64,
    /// Process resident-set high-water mark during the timed steps; `None`
    /// when the platform does not expose it.
    pub peak_resident_memory_bytes: Option<u64>,
    /// Bytes held by the largest step graph (values plus saved activations).
    pub peak_graph_bytes: usize,
    pub forward_passes_per_step: u64,
}

pub const BENCH_WARMUP_STEPS: usize = 5;
pub const BENCH_MIN_STEPS: usize = 50;

fn proc_status_kib(field: &str) -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Resets the kernel's resident-set high-water mark to the current RSS.
pub fn reset_peak_rss() -> bool {
    fs::write("/proc/self/clear_refs", "5").is_ok()
}

pub fn peak_rss_bytes() -> Option<u64> {
    proc_status_kib("VmHWM:").map(|k| k * 1024)
}

/// Times full optimisation steps (forward, loss, backward, update) on a
/// private copy of `model`, excluding [`BENCH_WARMUP_STEPS`] warm-up steps.
pub fn bench_step_time(
    method: Method,
    model: &SegNet,
    image: &Tensor<f32>,
    label: &LabelMap,
    samples: usize,
    n_steps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if n_steps < BENCH_MIN_STEPS {
        return Err(Error::invalid("bench_step_time", format!("needs at least {BENCH_MIN_STEPS} timed steps")));
    }
    let mut model = model.clone();
    let mut opt = Optimizer::new(OptimizerConfig::default());
    let x = stack_images(&[image])?;
    let y = OneHot::from_labels(&[label], model.config().num_classes)?;
    let sampling = SamplingConfig::with_samples(samples);
    let mut rng: Rng = seeded(seed);
    let rule = StepRule::Adapt(method);
    for _ in 0..BENCH_WARMUP_STEPS {
        train_step(&mut model, &mut opt, &x, &y, rule, &sampling, &mut rng)?;
    }
    let rss_reset = reset_peak_rss();
    let mut times = Vec::with_capacity(n_steps);
    let (mut passes, mut graph_bytes) = (0, 0);
    for _ in 0..n_steps {
        let t0 = Instant::now();
        let stats = train_step(&mut model, &mut opt, &x, &y, rule, &sampling, &mut rng)?;
        times.push(t0.elapsed().as_secs_f64());
        passes = stats.forward_passes;
        graph_bytes = graph_bytes.max(stats.graph_bytes);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    Ok(BenchReport {
        method,
        samples,
        timed_steps: n_steps,
        step_time_mean_s: mean,
        step_time_std_s: var.sqrt(),
        peak_resident_memory_bytes: if rss_reset { peak_rss_bytes() } else { None },
        peak_graph_bytes: graph_bytes,
        forward_passes_per_step: passes,
    })
}

/// Column order of the per-iteration metrics CSV.
pub fn metrics_csv_header(num_classes: usize) -> String {
    let mut h = String::from("iteration,method,seed,eval_dice_loss,mean_iou");
    for c in 0..num_classes {
        let _ = write!(h, ",per_class_iou_{c}");
    }
    h.push_str(",step_time_mean_s,forward_passes_per_step");
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

pub fn metrics_csv_row(m: &IterationMetrics) -> String {
    let mut row = format!("{},{},{},{:.6},{:.6}", m.iteration, m.method, m.seed, m.eval_dice_loss, m.mean_iou);
    for v in &m.per_class_iou {
        row.push(',');
        row.push_str(&fmt_opt(*v));
    }
    let _ = write!(row, ",{:.6},{}", m.step_time_mean_s, m.forward_passes_per_step);
    row
}

pub fn metrics_csv(rows: &[IterationMetrics], num_classes: usize) -> String {
    let mut out = metrics_csv_header(num_classes);
    out.push('\n');
    for r in rows {
        out.push_str(&metrics_csv_row(r));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One named polyline of `(x, y)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Standalone SVG line chart with labelled axes and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        xml_escape(title)
    );
    let (ax0, ay0, ax1, ay1) = (left, h - bottom, w - right, top);
    let _ = writeln!(s, r#"<line x1="{ax0}" y1="{ay0}" x2="{ax1}" y2="{ay0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{ax0}" y1="{ay0}" x2="{ax0}" y2="{ay1}" stroke="black"/>"#);
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{yv:.2}</text>"#,
            left - 6.0,
            sy(yv) + 4.0
        );
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for xv in xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv}</text>"#,
            sx(xv),
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        xml_escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 20.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 12.0,
            w - right + 36.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            w - right + 42.0,
            ly + 4.0,
            xml_escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
