//! Checks of the sampled loss against its defining properties.

#![allow(dead_code)]

use budaseg::autodiff::{softmax_channels, Graph};
use budaseg::loss::{buda_loss, dice_loss_value, draw_eps, sample_logits, EpsMode, SamplingConfig, DEFAULT_SMOOTHING};
use budaseg::{derive_seed, seeded, LabelMap, OneHot, Tensor};
use rand::Rng as _;

/// Largest |buda(O, 0, Y, K) − dice(softmax O, Y)| over `instances` random
/// problems for each K in `ks`.
pub fn zero_variance_max_gap(ks: &[usize], instances: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, c) = (rng.random_range(1..=2usize), rng.random_range(2..=5usize));
        let (h, w) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let o = Tensor::<f64>::from_fn([n, c, h, w], |_| rng.random_range(-4.0..4.0));
        let labels: Vec<LabelMap> = (0..n)
            .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap())
            .collect();
        let y = OneHot::from_labels(&labels.iter().collect::<Vec<_>>(), c).unwrap();
        let want = dice_loss_value(&softmax_channels(&o).unwrap(), &y, DEFAULT_SMOOTHING).unwrap();
        for &k in ks {
            for mode in [EpsMode::PerPixel, EpsMode::PerSampleScalar] {
                let cfg = SamplingConfig { samples: k, eps_mode: mode, smoothing: DEFAULT_SMOOTHING };
                let mut g = Graph::new();
                let ov = g.constant(o.clone());
                let vv = g.constant(Tensor::zeros(o.shape().to_vec()));
                let loss = buda_loss(&mut g, ov, vv, &y, &cfg, &mut rng).unwrap();
                worst = worst.max((g.value(loss).data()[0] - want).abs());
            }
        }
    }
    worst
}

pub struct SamplerStats {
    /// Largest |mean − O| / (4V/√n) over elements; ≤ 1 passes.
    pub mean_ratio: f64,
    /// Largest |std − V| / V over elements.
    pub std_rel_err: f64,
}

/// Draws `n` sampled outputs of a fixed random (O, V) and compares the
/// per-element moments with O and V.
pub fn sampler_stats(n: usize, seed: u64) -> SamplerStats {
    let mut rng = seeded(seed);
    let shape = [1usize, 3, 4, 4];
    let o = Tensor::<f64>::from_fn(shape, |_| rng.random_range(-3.0..3.0));
    let v = Tensor::<f64>::from_fn(shape, |_| rng.random_range(0.1..2.0));
    let m = o.numel();
    let (mut sum, mut sq) = (vec![0.0; m], vec![0.0; m]);
    let mut eps_rng = seeded(derive_seed(seed, "eps"));
    for _ in 0..n {
        let mut g = Graph::new();
        let (ov, vv) = (g.constant(o.clone()), g.constant(v.clone()));
        let eps = draw_eps::<f64, _>(&shape, EpsMode::PerPixel, &mut eps_rng);
        let s = sample_logits(&mut g, ov, vv, &eps).unwrap();
        for (i, &x) in g.value(s).data().iter().enumerate() {
            sum[i] += x;
            sq[i] += x * x;
        }
    }
    let nf = n as f64;
    let (mut mean_ratio, mut std_rel_err) = (0.0f64, 0.0f64);
    for i in 0..m {
        let mean = sum[i] / nf;
        let std = ((sq[i] - nf * mean * mean) / (nf - 1.0)).sqrt();
        let (oi, vi) = (o.data()[i], v.data()[i]);
        mean_ratio = mean_ratio.max((mean - oi).abs() / (4.0 * vi / nf.sqrt()));
        std_rel_err = std_rel_err.max((std - vi).abs() / vi);
    }
    SamplerStats { mean_ratio, std_rel_err }
}

/// The offset example: O = 2, V = 1, ε = 1. Returns (sampled output, residual
/// to a pseudo label of 6).
pub fn offset_example() -> (f64, f64) {
    let mut g = Graph::<f64>::new();
    let o = g.constant(Tensor::full([1, 1, 1, 1], 2.0));
    let v = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let s = sample_logits(&mut g, o, v, &Tensor::scalar(1.0)).unwrap();
    let sampled = g.value(s).data()[0];
    (sampled, 6.0 - sampled)
}
