//! Source pretraining, pseudo labelling and iterative self-training.
//!
//! Adaptation continues from the pretrained weights. Each iteration freezes
//! pseudo labels taken from the model as it stood at the end of the previous
//! iteration, trains on them, then evaluates on the held-out target split.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, OneHot};
use crate::loss::{buda_loss, cross_entropy_loss, dice_loss, EpsMode, SamplingConfig, DEFAULT_SMOOTHING};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ForwardMode, SegNet};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::synth::{DomainId, ScenePatch};
use crate::tensor::Tensor;
use crate::{derive_seed, seeded, Rng};

/// A target image whose label is withheld.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPatch {
    pub image: Tensor<f32>,
    pub domain: DomainId,
    pub patch_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub source_labeled: Vec<ScenePatch>,
    pub target_unlabeled: Vec<UnlabeledPatch>,
    /// Ground truth kept for evaluation only.
    pub target_eval: Vec<ScenePatch>,
}

impl DatasetSplit {
    /// Rejects duplicate patch ids anywhere in the split, which also
    /// guarantees the evaluation images are disjoint from the training ones.
    pub fn new(
        source_labeled: Vec<ScenePatch>,
        target_unlabeled: Vec<UnlabeledPatch>,
        target_eval: Vec<ScenePatch>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let ids = source_labeled
            .iter()
            .map(|p| &p.patch_id)
            .chain(target_unlabeled.iter().map(|p| &p.patch_id))
            .chain(target_eval.iter().map(|p| &p.patch_id));
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(Error::invalid("dataset_split", format!("patch id `{id}` appears more than once")));
            }
        }
        Ok(Self { source_labeled, target_unlabeled, target_eval })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Uncertainty-guided sampled Dice on a single forward pass.
    Buda,
    /// Dice on `softmax(O)` against the pseudo labels.
    Plain,
    /// `K` dropout forward passes, mean Dice.
    McDropout,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Buda => "buda",
            Method::Plain => "plain",
            Method::McDropout => "mc-dropout",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Final-epoch mean Dice loss (fraction) under which the model counts as ready.
    pub ready_dice_loss: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 2, optimizer: OptimizerConfig::adam(1e-3), ready_dice_loss: 0.35 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub method: Method,
    /// Draws per step (buda) or forward passes per step (mc-dropout).
    pub samples: usize,
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub eps_mode: EpsMode,
    pub dice_smoothing: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Buda,
            samples: 4,
            iterations: 4,
            epochs_per_iteration: 5,
            batch_size: 2,
            optimizer: OptimizerConfig::adam(1e-3),
            eps_mode: EpsMode::PerPixel,
            dice_smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations (T) must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.sampling().validate()?;
        self.optimizer.validate()
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { samples: self.samples, eps_mode: self.eps_mode, smoothing: self.dice_smoothing }
    }
}

/// Stacks `[1, H, W]` images into `[N, 1, H, W]`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", format!("{:?} vs {shape:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}

/// Per-pixel argmax over channels of `[N, C, H, W]` logits; ties go to the
/// lowest class index.
pub fn argmax_labels(o: &Tensor<f32>) -> Result<Vec<LabelMap>> {
    let [n, c, h, w] = o.dims4("argmax")?;
    let plane = h * w;
    let x = o.data();
    (0..n)
        .map(|i| {
            let base = i * c * plane;
            let data = (0..plane)
                .map(|u| {
                    let mut best = 0;
                    for ch in 1..c {
                        if x[base + ch * plane + u] > x[base + best * plane + u] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data)
        })
        .collect()
}

/// One standard-mode forward per image; the variance map is ignored.
pub fn generate_pseudo_labels(model: &SegNet, images: &[&Tensor<f32>]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let x = stack_images(&[img])?;
        let pred = model.predict(&x)?;
        out.extend(argmax_labels(&pred.o)?);
    }
    Ok(out)
}

/// Loss of `K` stochastic dropout forward passes averaged in order.
#[allow(clippy::too_many_arguments)]
pub fn mc_dropout_loss(
    model: &SegNet,
    g: &mut Graph<f32>,
    bound: &[Var],
    x: Var,
    y: &OneHot<f32>,
    samples: usize,
    smoothing: f64,
    rng: &mut Rng,
) -> Result<Var> {
    if model.config().dropout_rate == 0.0 {
        return Err(Error::invalid("mc_dropout_step", "dropout_rate is 0, so every pass is identical"));
    }
    if samples == 0 {
        return Err(Error::invalid("mc_dropout_step", "needs at least one forward pass"));
    }
    let mut terms = Vec::with_capacity(samples);
    for _ in 0..samples {
        let out = model.forward(g, bound, x, ForwardMode::McDropout(rng))?;
        let p = g.softmax_channels(out.o)?;
        terms.push(dice_loss(g, p, y, smoothing)?);
    }
    g.mean_scalars(&terms)
}

/// Which loss a training step optimises.
#[derive(Clone, Copy, Debug)]
pub enum StepRule {
    /// Equal-weight Dice + cross-entropy (supervised pretraining).
    Supervised,
    Adapt(Method),
}

/// Builds the loss for one batch on a fresh graph and returns `(graph, bound params, loss)`.
fn step_graph(
    model: &SegNet,
    x: &Tensor<f32>,
    y: &OneHot<f32>,
    rule: StepRule,
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> Result<(Graph<f32>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let loss = match rule {
        StepRule::Adapt(Method::McDropout) => {
            mc_dropout_loss(model, &mut g, &bound, xv, y, sampling.samples, sampling.smoothing, rng)?
        }
        _ => {
            let out = model.forward(&mut g, &bound, xv, ForwardMode::Standard)?;
            match rule {
                StepRule::Supervised => {
                    let p = g.softmax_channels(out.o)?;
                    let d = dice_loss(&mut g, p, y, sampling.smoothing)?;
                    let ce = cross_entropy_loss(&mut g, out.o, y)?;
                    g.add(d, ce)?
                }
                StepRule::Adapt(Method::Plain) => {
                    let p = g.softmax_channels(out.o)?;
                    dice_loss(&mut g, p, y, sampling.smoothing)?
                }
                StepRule::Adapt(Method::Buda) => buda_loss(&mut g, out.o, out.v, y, sampling, rng)?,
                StepRule::Adapt(Method::McDropout) => unreachable!("handled above"),
            }
        }
    };
    Ok((g, bound, loss))
}

/// Per-step instrumentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub forward_passes: u64,
    pub graph_bytes: usize,
}

/// Forward, loss, backward and optimiser update for one batch. Parameters
/// that the loss does not reach (the variance head outside `buda`) receive a
/// zero gradient.
pub fn train_step(
    model: &mut SegNet,
    opt: &mut Optimizer<f32>,
    x: &Tensor<f32>,
    y: &OneHot<f32>,
    rule: StepRule,
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> Result<StepStats> {
    let before = model.forward_count();
    let (mut g, bound, loss) = step_graph(model, x, y, rule, sampling, rng)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Diverged { stage: "train_step".into(), loss: value });
    }
    g.backward(loss)?;
    let graph_bytes = g.stored_bytes();
    model.accumulate_grads(&mut g, &bound);
    drop(g);
    for p in model.params_mut() {
        if p.grad.is_none() {
            p.grad = Some(vec![0.0; p.value.numel()]);
        }
    }
    opt.step(model.params_mut())?;
    Ok(StepStats { loss: value, forward_passes: model.forward_count() - before, graph_bytes })
}

/// Training-time consumption record used to prove evaluation isolation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub consumed: BTreeSet<String>,
}

impl AuditLog {
    pub fn record(&mut self, id: &str) {
        self.consumed.insert(id.to_string());
    }

    /// Ids of `patches` that any gradient step consumed.
    pub fn leaked<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        ids.into_iter().filter(|id| self.consumed.contains(*id)).map(str::to_string).collect()
    }
}

struct EpochOutcome {
    mean_loss: f64,
    step_times: Vec<f64>,
    forward_passes: Vec<u64>,
}

/// Shuffled mini-batch epochs over `items`. On a non-finite loss the model is
/// restored to its state at the start of the failing epoch.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut SegNet,
    opt: &mut Optimizer<f32>,
    items: &[(&str, &Tensor<f32>, &LabelMap)],
    batch_size: usize,
    rule: StepRule,
    sampling: &SamplingConfig,
    shuffle_rng: &mut Rng,
    step_rng: &mut Rng,
    audit: &mut AuditLog,
    stage: &str,
) -> Result<EpochOutcome> {
    let num_classes = model.config().num_classes;
    let snapshot = model.params().to_vec();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(shuffle_rng);
    let (mut total, mut count) = (0.0, 0usize);
    let mut step_times = Vec::new();
    let mut forward_passes = Vec::new();
    for chunk in order.chunks(batch_size) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| items[i].1).collect();
        let labels: Vec<&LabelMap> = chunk.iter().map(|&i| items[i].2).collect();
        let x = stack_images(&images)?;
        let y = OneHot::from_labels(&labels, num_classes)?;
        let t0 = Instant::now();
        let stats = match train_step(model, opt, &x, &y, rule, sampling, step_rng) {
            Err(Error::Diverged { loss, .. }) => {
                model.params_mut().clone_from_slice(&snapshot);
                return Err(Error::Diverged { stage: stage.to_string(), loss });
            }
            other => other?,
        };
        step_times.push(t0.elapsed().as_secs_f64());
        forward_passes.push(stats.forward_passes);
        for &i in chunk {
            audit.record(items[i].0);
        }
        total += stats.loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(EpochOutcome { mean_loss: if count == 0 { 0.0 } else { total / count as f64 }, step_times, forward_passes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean Dice + cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean Dice loss (fraction) of the final epoch's source predictions.
    pub final_dice_loss: f64,
    pub ready: bool,
    pub audit: AuditLog,
}

pub fn pretrain_source(
    model: &mut SegNet,
    data: &[ScenePatch],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("source training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be >= 1".into()));
    }
    cfg.optimizer.validate()?;
    let items: Vec<(&str, &Tensor<f32>, &LabelMap)> =
        data.iter().map(|p| (p.patch_id.as_str(), &p.image, &p.label)).collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut shuffle = seeded(derive_seed(seed, "pretrain/shuffle"));
    let mut step_rng = seeded(derive_seed(seed, "pretrain/step"));
    let sampling = SamplingConfig::default();
    let mut audit = AuditLog::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let out = run_epoch(
            model,
            &mut opt,
            &items,
            cfg.batch_size,
            StepRule::Supervised,
            &sampling,
            &mut shuffle,
            &mut step_rng,
            &mut audit,
            "pretrain",
        )?;
        epoch_losses.push(out.mean_loss);
    }
    let eval = evaluate(model, data)?;
    let final_dice_loss = eval.dice_loss_pct / 100.0;
    Ok(PretrainReport { epoch_losses, final_dice_loss, ready: final_dice_loss < cfg.ready_dice_loss, audit })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub method: Method,
    pub seed: u64,
    /// Percent.
    pub eval_dice_loss: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub step_time_mean_s: f64,
    pub forward_passes_per_step: f64,
}

impl IterationMetrics {
    fn new(iteration: usize, method: Method, seed: u64, eval: &EvalReport, times: &[f64], passes: &[u64]) -> Self {
        let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let passes: Vec<f64> = passes.iter().map(|&p| p as f64).collect();
        Self {
            iteration,
            method,
            seed,
            eval_dice_loss: eval.dice_loss_pct,
            mean_iou: eval.iou.mean,
            per_class_iou: eval.iou.per_class.clone(),
            step_time_mean_s: mean(times),
            forward_passes_per_step: mean(&passes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// Target evaluation of the starting (pretrained) model.
    pub zero_shot: EvalReport,
    /// One entry per iteration, `1..=T`.
    pub metrics: Vec<IterationMetrics>,
    /// Pseudo labels used in each iteration, in `target_unlabeled` order.
    pub pseudo_labels: Vec<Vec<LabelMap>>,
    /// Model at the end of each iteration.
    pub snapshots: Vec<SegNet>,
    pub audit: AuditLog,
}

/// Runs `T` self-training iterations on `model` in place.
pub fn adapt(model: &mut SegNet, data: &DatasetSplit, cfg: &AdaptationConfig, seed: u64) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if data.target_unlabeled.is_empty() {
        return Err(Error::Empty("target training set"));
    }
    if data.target_eval.is_empty() {
        return Err(Error::Empty("target evaluation set"));
    }
    let sampling = cfg.sampling();
    let rule = StepRule::Adapt(cfg.method);
    let images: Vec<&Tensor<f32>> = data.target_unlabeled.iter().map(|p| &p.image).collect();
    let zero_shot = evaluate(model, &data.target_eval)?;
    let mut audit = AuditLog::default();
    let (mut metrics, mut history, mut snapshots) = (Vec::new(), Vec::new(), Vec::new());
    for t in 1..=cfg.iterations {
        let labels = generate_pseudo_labels(model, &images)?;
        let items: Vec<(&str, &Tensor<f32>, &LabelMap)> =
            data.target_unlabeled.iter().zip(&labels).map(|(p, l)| (p.patch_id.as_str(), &p.image, l)).collect();
        let mut opt = Optimizer::new(cfg.optimizer.clone());
        let mut shuffle = seeded(derive_seed(seed, &format!("adapt/shuffle/{t}")));
        let mut step_rng = seeded(derive_seed(seed, &format!("adapt/step/{t}")));
        let (mut times, mut passes) = (Vec::new(), Vec::new());
        for _ in 0..cfg.epochs_per_iteration {
            let out = run_epoch(
                model,
                &mut opt,
                &items,
                cfg.batch_size,
                rule,
                &sampling,
                &mut shuffle,
                &mut step_rng,
                &mut audit,
                &format!("adapt iteration {t}"),
            )?;
            times.extend(out.step_times);
            passes.extend(out.forward_passes);
        }
        let eval = evaluate(model, &data.target_eval)?;
        metrics.push(IterationMetrics::new(t, cfg.method, seed, &eval, &times, &passes));
        history.push(labels);
        snapshots.push(model.clone());
    }
    Ok(AdaptOutcome { zero_shot, metrics, pseudo_labels: history, snapshots, audit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_shift_invariance_and_ties() {
        let o = Tensor::new([1, 3, 1, 2], vec![0.5, 1.0, 0.5, 2.0, -1.0, 1.0]).unwrap();
        let l = argmax_labels(&o).unwrap();
        assert_eq!(l[0].data(), &[0, 1]);
        let shifted = Tensor::new([1, 3, 1, 2], vec![10.5, 1.0, 10.5, 2.0, 9.0, 1.0]).unwrap();
        assert_eq!(argmax_labels(&shifted).unwrap()[0].data(), &[0, 1]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = ScenePatch {
            image: Tensor::zeros([1, 8, 8]),
            label: LabelMap::filled(8, 8, 0),
            domain: DomainId::Target,
            patch_id: "x".into(),
        };
        let err = DatasetSplit::new(vec![], vec![p.unlabeled()], vec![p.clone()]).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }
}
