//! Central-difference gradient checks for every differentiable operation,
//! run in f64. Shared by the core test suite and the acceptance target.

#![allow(dead_code, clippy::needless_range_loop)]

use budaseg::autodiff::{Graph, Var};
use budaseg::loss::{buda_loss_with_eps, cross_entropy_loss, dice_loss, draw_eps, sample_logits, EpsMode};
use budaseg::model::{ForwardMode, SegNet, SegNetConfig};
use budaseg::{seeded, LabelMap, OneHot, Rng, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const H: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-5;
pub const INSTANCES: usize = 20;

#[derive(Debug, Default)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    /// Coordinates within `H` of a kink, where the finite difference itself
    /// is unreliable.
    pub skipped: usize,
    pub failures: Vec<String>,
}

fn close(a: f64, n: f64) -> bool {
    let err = (a - n).abs();
    err <= ABS_TOL || err <= REL_TOL * a.abs().max(n.abs())
}

/// Builds the scalar loss from leaves holding `inputs`.
type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Compares analytic gradients with central differences for every input
/// element of every input in `wrt`. With `kink_guard`, coordinates where the
/// difference quotient has not converged are skipped; the rule looks only at
/// the forward function, never at the analytic gradient.
fn check_instance(report: &mut CaseReport, inputs: &[Tensor<f64>], wrt: &[usize], kink_guard: bool, build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let f0 = g.value(loss).data()[0];
    for &i in wrt {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let (fp, fm) = (eval(&plus, build), eval(&minus, build));
            let numeric = (fp - fm) / (2.0 * H);
            if kink_guard {
                plus[i].data_mut()[j] -= H / 2.0;
                minus[i].data_mut()[j] += H / 2.0;
                let (hp, hm) = (eval(&plus, build), eval(&minus, build));
                // Smooth: both quotients agree and the second difference is
                // scale-free. A kink at distance d < H makes the second
                // difference grow like |Δslope| / H as the step shrinks.
                let s1 = (fp - 2.0 * f0 + fm) / (H * H);
                let s2 = (hp - 2.0 * f0 + hm) / (H * H / 4.0);
                let curvature_jump = (s2 - s1).abs() > 1e-2 + 0.25 * s1.abs().max(s2.abs());
                if !close(numeric, (hp - hm) / H) || curvature_jump {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if !close(analytic[j], numeric) {
                report.failures.push(format!(
                    "{}: input {i} element {j}: analytic {:.9e} numeric {:.9e}",
                    report.name, analytic[j], numeric
                ));
            }
        }
    }
    report.instances += 1;
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    draw_eps::<f64, _>(shape, EpsMode::PerPixel, rng).map(|x| x * scale)
}

/// Values bounded away from zero so a relu kink never falls inside `±H`.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.05 apart so pooling windows never tie.
fn spaced(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn random_labels(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> OneHot<f64> {
    let maps: Vec<LabelMap> = (0..n)
        .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap())
        .collect();
    let refs: Vec<&LabelMap> = maps.iter().collect();
    OneHot::from_labels(&refs, c).unwrap()
}

/// `Σ out · R` for a fixed random `R`, turning any tensor op into a scalar.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Var {
    let rv = g.constant(r.clone());
    let m = g.mul(out, rv).unwrap();
    g.sum(m)
}

fn case(name: &'static str, seed: u64, mut one: impl FnMut(&mut CaseReport, &mut Rng)) -> CaseReport {
    let mut report = CaseReport { name, ..Default::default() };
    let mut rng = seeded(seed);
    for _ in 0..INSTANCES {
        one(&mut report, &mut rng);
    }
    report
}

fn small_shape(rng: &mut Rng) -> Vec<usize> {
    vec![rng.random_range(1..=2), rng.random_range(2..=3), rng.random_range(2..=4), rng.random_range(2..=4)]
}

pub fn run_suite() -> Vec<CaseReport> {
    let mut out = Vec::new();

    out.push(case("add", 1, |rep, rng| {
        let s = small_shape(rng);
        let (a, b, r) = (randn(rng, &s, 1.0), randn(rng, &s, 1.0), randn(rng, &s, 1.0));
        check_instance(rep, &[a, b], &[0, 1], false, &|g, v| {
            let o = g.add(v[0], v[1]).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("mul", 2, |rep, rng| {
        let s = small_shape(rng);
        let (a, b, r) = (randn(rng, &s, 1.0), randn(rng, &s, 1.0), randn(rng, &s, 1.0));
        check_instance(rep, &[a, b], &[0, 1], false, &|g, v| {
            let o = g.mul(v[0], v[1]).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("scale+sum", 3, |rep, rng| {
        let s = small_shape(rng);
        let a = randn(rng, &s, 1.0);
        let f: f64 = rng.random_range(-3.0..3.0);
        check_instance(rep, &[a], &[0], false, &|g, v| {
            let o = g.scale(v[0], f);
            let sq = g.mul(o, o).unwrap();
            g.sum(sq)
        });
    }));

    out.push(case("mean_scalars", 4, |rep, rng| {
        let k = rng.random_range(1..=4);
        let xs: Vec<Tensor<f64>> = (0..k).map(|_| randn(rng, &[3], 1.0)).collect();
        let wrt: Vec<usize> = (0..k).collect();
        check_instance(rep, &xs, &wrt, false, &|g, v| {
            let terms: Vec<Var> = v
                .iter()
                .map(|&x| {
                    let sq = g.mul(x, x).unwrap();
                    g.sum(sq)
                })
                .collect();
            g.mean_scalars(&terms).unwrap()
        });
    }));

    out.push(case("relu", 5, |rep, rng| {
        let s = small_shape(rng);
        let (a, r) = (away_from_zero(rng, &s), randn(rng, &s, 1.0));
        check_instance(rep, &[a], &[0], false, &|g, v| {
            let o = g.relu(v[0]);
            project(g, o, &r)
        });
    }));

    out.push(case("softplus", 6, |rep, rng| {
        let s = small_shape(rng);
        let (a, r) = (randn(rng, &s, 4.0), randn(rng, &s, 1.0));
        check_instance(rep, &[a], &[0], false, &|g, v| {
            let o = g.softplus(v[0]);
            project(g, o, &r)
        });
    }));

    out.push(case("conv2d", 7, |rep, rng| {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=k / 2 + 1));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let x = randn(rng, &[n, cin, h, w], 1.0);
        let wt = randn(rng, &[cout, cin, k, k], 0.5);
        let b = randn(rng, &[cout], 0.5);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let r = randn(rng, &[n, cout, ho, wo], 1.0);
        check_instance(rep, &[x, wt, b], &[0, 1, 2], false, &|g, v| {
            let o = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("maxpool2d", 8, |rep, rng| {
        let s = [rng.random_range(1..=2), rng.random_range(1..=2), 4, 4];
        let k = if rng.random_bool(0.5) { 2 } else { 4 };
        let x = spaced(rng, &s);
        let r = randn(rng, &[s[0], s[1], 4 / k, 4 / k], 1.0);
        check_instance(rep, &[x], &[0], false, &|g, v| {
            let o = g.maxpool2d(v[0], k).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("upsample_nearest", 9, |rep, rng| {
        let s = small_shape(rng);
        let k = rng.random_range(1..=3);
        let x = randn(rng, &s, 1.0);
        let r = randn(rng, &[s[0], s[1], s[2] * k, s[3] * k], 1.0);
        check_instance(rep, &[x], &[0], false, &|g, v| {
            let o = g.upsample_nearest(v[0], k).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("concat_channels", 10, |rep, rng| {
        let s = small_shape(rng);
        let cb = rng.random_range(1..=3);
        let a = randn(rng, &s, 1.0);
        let b = randn(rng, &[s[0], cb, s[2], s[3]], 1.0);
        let r = randn(rng, &[s[0], s[1] + cb, s[2], s[3]], 1.0);
        check_instance(rep, &[a, b], &[0, 1], false, &|g, v| {
            let o = g.concat_channels(v[0], v[1]).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("dropout", 11, |rep, rng| {
        let s = small_shape(rng);
        let (x, r) = (randn(rng, &s, 1.0), randn(rng, &s, 1.0));
        let rate: f64 = rng.random_range(0.1..0.7);
        let mask_seed: u64 = rng.random();
        // Re-seeding per evaluation keeps the mask fixed across perturbations.
        check_instance(rep, &[x], &[0], false, &|g, v| {
            let o = g.dropout(v[0], rate, &mut seeded(mask_seed)).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("softmax_channels", 12, |rep, rng| {
        let s = small_shape(rng);
        let (x, r) = (randn(rng, &s, 2.0), randn(rng, &s, 1.0));
        check_instance(rep, &[x], &[0], false, &|g, v| {
            let o = g.softmax_channels(v[0]).unwrap();
            project(g, o, &r)
        });
    }));

    out.push(case("dice_loss", 13, |rep, rng| {
        let s = small_shape(rng);
        let x = randn(rng, &s, 2.0);
        let y = random_labels(rng, s[0], s[1], s[2], s[3]);
        check_instance(rep, &[x], &[0], false, &|g, v| {
            let p = g.softmax_channels(v[0]).unwrap();
            dice_loss(g, p, &y, 1e-6).unwrap()
        });
    }));

    out.push(case("cross_entropy", 14, |rep, rng| {
        let s = small_shape(rng);
        let x = randn(rng, &s, 2.0);
        let y = random_labels(rng, s[0], s[1], s[2], s[3]);
        check_instance(rep, &[x], &[0], false, &|g, v| cross_entropy_loss(g, v[0], &y).unwrap());
    }));

    out.push(case("sample_logits", 15, |rep, rng| {
        let s = small_shape(rng);
        let o = randn(rng, &s, 1.0);
        let v = randn(rng, &s, 1.0).map(f64::abs);
        let eps = randn(rng, &s, 1.0);
        let r = randn(rng, &s, 1.0);
        check_instance(rep, &[o, v], &[0, 1], false, &|g, x| {
            let out = sample_logits(g, x[0], x[1], &eps).unwrap();
            project(g, out, &r)
        });
    }));

    for (name, mode, seed) in
        [("buda_loss per-pixel", EpsMode::PerPixel, 16), ("buda_loss scalar", EpsMode::PerSampleScalar, 17)]
    {
        out.push(case(name, seed, |rep, rng| {
            let s = small_shape(rng);
            let o = randn(rng, &s, 2.0);
            // V stays well above H so perturbations keep it nonnegative.
            let v = Tensor::from_fn(s.clone(), |_| rng.random_range(0.05..1.5));
            let y = random_labels(rng, s[0], s[1], s[2], s[3]);
            let k = rng.random_range(1..=4);
            let eps: Vec<Tensor<f64>> = (0..k).map(|_| draw_eps(&s, mode, rng)).collect();
            check_instance(rep, &[o, v], &[0, 1], false, &|g, x| {
                buda_loss_with_eps(g, x[0], x[1], &y, &eps, 1e-6).unwrap()
            });
        }));
    }

    // End to end: network parameters through both heads into the sampled loss.
    out.push(case("segnet+buda_loss", 18, |rep, rng| {
        let cfg = SegNetConfig { in_channels: 1, num_classes: 3, base_channels: 4, depth: 1, dropout_rate: 0.3 };
        let mut net: SegNet<f64> = SegNet::build(cfg, rng).unwrap();
        // The variance head starts at zero; randomize it so gradients reach
        // the trunk through both heads.
        for p in net.params_mut().iter_mut().filter(|p| p.name.starts_with("head_v")) {
            p.value = randn(rng, p.value.shape(), 0.5);
        }
        let x = randn(rng, &[1, 1, 4, 4], 1.0);
        let y = random_labels(rng, 1, 3, 4, 4);
        let eps: Vec<Tensor<f64>> = (0..2).map(|_| draw_eps(&[1, 3, 4, 4], EpsMode::PerPixel, rng)).collect();
        let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        let wrt: Vec<usize> = (0..inputs.len()).collect();
        check_instance(rep, &inputs, &wrt, true, &|g, params| {
            let xv = g.constant(x.clone());
            let out = net.forward(g, params, xv, ForwardMode::Standard).unwrap();
            buda_loss_with_eps(g, out.o, out.v, &y, &eps, 1e-6).unwrap()
        });
    }));

    out
}
