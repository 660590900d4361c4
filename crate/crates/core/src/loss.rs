//! Uncertainty-guided sampled Dice loss and the supervised losses.
//!
//! The adaptation objective perturbs the logits with the predicted standard
//! deviations, `Ô_k = O + ε_k · V`, and averages the Dice loss of
//! `softmax(Ô_k)` against the pseudo label over `K` draws. Sampling happens on
//! the network outputs, so one network forward pass serves all `K` draws.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_channels, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::labels::OneHot;
use crate::tensor::{Element, Tensor};

/// Added to numerator and denominator of every per-class Dice ratio so the
/// ratio is defined for classes absent from both prediction and label.
pub const DEFAULT_SMOOTHING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsMode {
    /// Independent standard normal per element of `O`.
    PerPixel,
    /// One standard normal per draw, shared by every element.
    PerSampleScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Number of draws `K`.
    pub samples: usize,
    pub eps_mode: EpsMode,
    pub smoothing: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples: 4, eps_mode: EpsMode::PerPixel, smoothing: DEFAULT_SMOOTHING }
    }
}

impl SamplingConfig {
    pub fn with_samples(samples: usize) -> Self {
        Self { samples, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sampling needs K >= 1".into()));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one ε tensor shaped like `shape`.
pub fn draw_eps<T: Element, R: rand::Rng + ?Sized>(shape: &[usize], mode: EpsMode, rng: &mut R) -> Tensor<T> {
    match mode {
        EpsMode::PerPixel => Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        }),
        EpsMode::PerSampleScalar => {
            let z: f64 = StandardNormal.sample(rng);
            Tensor::full(shape.to_vec(), T::lit(z))
        }
    }
}

/// `O + ε · V`, differentiable in both `O` and `V`. `eps` is either shaped
/// like `O` or a single scalar.
pub fn sample_logits<T: Element>(g: &mut Graph<T>, o: Var, v: Var, eps: &Tensor<T>) -> Result<Var> {
    let shape = g.value(o).shape().to_vec();
    if g.value(v).shape() != shape.as_slice() {
        return Err(Error::shape("sample_logits", format!("O is {shape:?} but V is {:?}", g.value(v).shape())));
    }
    let eps = if eps.shape() == shape.as_slice() {
        eps.clone()
    } else if eps.is_scalar() {
        Tensor::full(shape, eps.data()[0])
    } else {
        return Err(Error::shape(
            "sample_logits",
            format!("eps shape {:?} matches neither O nor a scalar", eps.shape()),
        ));
    };
    let e = g.constant(eps);
    let ev = g.mul(e, v)?;
    g.add(o, ev)
}

/// Per `(batch, class)` sums `Σ P·Y` and `Σ P² + Σ Y²`, accumulated in f64.
fn dice_terms<T: Element>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if p.shape() != y.shape() {
        return Err(Error::shape("dice_loss", format!("P is {:?} but label is {:?}", p.shape(), y.shape())));
    }
    let [n, c, h, w] = p.dims4("dice_loss")?;
    let plane = h * w;
    if n * c * plane == 0 {
        return Err(Error::Empty("dice_loss input"));
    }
    let mut inter = vec![0.0; n * c];
    let mut denom = vec![0.0; n * c];
    for (j, (pp, yy)) in p.data().chunks(plane).zip(y.data().chunks(plane)).enumerate() {
        let (mut i_acc, mut d_acc) = (0.0f64, 0.0f64);
        for (&a, &b) in pp.iter().zip(yy) {
            let (a, b) = (a.f64(), b.f64());
            i_acc += a * b;
            d_acc += a * a + b * b;
        }
        inter[j] = i_acc;
        denom[j] = d_acc;
    }
    Ok((inter, denom, plane))
}

/// Macro-averaged soft Dice loss over classes and batch items.
pub fn dice_loss_value<T: Element>(p: &Tensor<T>, y: &OneHot<T>, smoothing: f64) -> Result<f64> {
    let (inter, denom, _) = dice_terms(p, y.tensor())?;
    let total: f64 = inter.iter().zip(&denom).map(|(&i, &d)| 1.0 - (2.0 * i + smoothing) / (d + smoothing)).sum();
    Ok(total / inter.len() as f64)
}

struct DiceOp<T: Element> {
    target: Tensor<T>,
    smoothing: f64,
}

impl<T: Element> CustomOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0];
        let (inter, denom, plane) = dice_terms(p, &self.target).expect("validated in forward");
        let scale = grad_out[0].f64() / inter.len() as f64;
        let s = self.smoothing;
        let mut grad = Vec::with_capacity(p.numel());
        for (j, (pp, yy)) in p.data().chunks(plane).zip(self.target.data().chunks(plane)).enumerate() {
            let num = 2.0 * inter[j] + s;
            let den = denom[j] + s;
            // d/dP [1 - num/den] = -(2Y·den - num·2P) / den²
            for (&a, &b) in pp.iter().zip(yy) {
                let d = -(2.0 * b.f64() * den - num * 2.0 * a.f64()) / (den * den);
                grad.push(T::lit(d * scale));
            }
        }
        vec![Some(grad)]
    }
}

/// Dice loss of probabilities `p` against a one-hot label, recorded on `g`.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, p: Var, y: &OneHot<T>, smoothing: f64) -> Result<Var> {
    let value = dice_loss_value(g.value(p), y, smoothing)?;
    let op = DiceOp { target: y.tensor().clone(), smoothing };
    Ok(g.custom(&[p], Tensor::scalar(T::lit(value)), Box::new(op)))
}

fn check_nonnegative<T: Element>(v: &Tensor<T>) -> Result<()> {
    match v.data().iter().position(|&x| !(x >= T::zero())) {
        Some(index) => Err(Error::NegativeVariance { index, value: v.data()[index].f64() }),
        None => Ok(()),
    }
}

/// Sampled Dice loss with caller-supplied draws: mean over `eps` of
/// `dice(softmax(O + ε_k·V), Y)`.
pub fn buda_loss_with_eps<T: Element>(
    g: &mut Graph<T>,
    o: Var,
    v: Var,
    y: &OneHot<T>,
    eps: &[Tensor<T>],
    smoothing: f64,
) -> Result<Var> {
    check_nonnegative(g.value(v))?;
    let mut terms = Vec::with_capacity(eps.len());
    for e in eps {
        let sampled = sample_logits(g, o, v, e)?;
        let p = g.softmax_channels(sampled)?;
        terms.push(dice_loss(g, p, y, smoothing)?);
    }
    g.mean_scalars(&terms)
}

/// Draws `K` ε tensors from `rng` and evaluates [`buda_loss_with_eps`].
pub fn buda_loss<T: Element, R: rand::Rng + ?Sized>(
    g: &mut Graph<T>,
    o: Var,
    v: Var,
    y: &OneHot<T>,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    check_nonnegative(g.value(v))?;
    let shape = g.value(o).shape().to_vec();
    let eps: Vec<Tensor<T>> = (0..cfg.samples).map(|_| draw_eps(&shape, cfg.eps_mode, rng)).collect();
    buda_loss_with_eps(g, o, v, y, &eps, cfg.smoothing)
}

/// Value-only evaluation of the sampled loss.
pub fn buda_loss_value<T: Element, R: rand::Rng + ?Sized>(
    o: &Tensor<T>,
    v: &Tensor<T>,
    y: &OneHot<T>,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let (ov, vv) = (g.constant(o.clone()), g.constant(v.clone()));
    let loss = buda_loss(&mut g, ov, vv, y, cfg, rng)?;
    Ok(g.value(loss).data()[0].f64())
}

/// Per-pixel `log softmax` over channels.
fn log_softmax<T: Element>(o: &Tensor<T>) -> Result<Vec<f64>> {
    let [n, c, h, w] = o.dims4("cross_entropy")?;
    let plane = h * w;
    let x = o.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let base = i * c * plane;
        for u in 0..plane {
            let m = (0..c).map(|ch| x[base + ch * plane + u].f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (x[base + ch * plane + u].f64() - m).exp()).sum::<f64>().ln();
            for ch in 0..c {
                out[base + ch * plane + u] = x[base + ch * plane + u].f64() - lse;
            }
        }
    }
    Ok(out)
}

struct CrossEntropyOp<T: Element> {
    target: Tensor<T>,
}

impl<T: Element> CustomOp<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let o = inputs[0];
        let p = softmax_channels(o).expect("validated in forward");
        let [n, _, h, w] = o.dims4("cross_entropy").expect("validated in forward");
        let scale = grad_out[0].f64() / (n * h * w) as f64;
        let grad =
            p.data().iter().zip(self.target.data()).map(|(&p, &y)| T::lit((p.f64() - y.f64()) * scale)).collect();
        vec![Some(grad)]
    }
}

/// Mean per-pixel negative log-likelihood of the labelled class.
pub fn cross_entropy_value<T: Element>(o: &Tensor<T>, y: &OneHot<T>) -> Result<f64> {
    if o.shape() != y.shape() {
        return Err(Error::shape("cross_entropy", format!("O is {:?} but label is {:?}", o.shape(), y.shape())));
    }
    let [n, _, h, w] = o.dims4("cross_entropy")?;
    if n * h * w == 0 {
        return Err(Error::Empty("cross_entropy input"));
    }
    let ls = log_softmax(o)?;
    let nll: f64 = ls.iter().zip(y.tensor().data()).map(|(&l, &t)| -l * t.f64()).sum();
    Ok(nll / (n * h * w) as f64)
}

pub fn cross_entropy_loss<T: Element>(g: &mut Graph<T>, o: Var, y: &OneHot<T>) -> Result<Var> {
    let value = cross_entropy_value(g.value(o), y)?;
    let op = CrossEntropyOp { target: y.tensor().clone() };
    Ok(g.custom(&[o], Tensor::scalar(T::lit(value)), Box::new(op)))
}
