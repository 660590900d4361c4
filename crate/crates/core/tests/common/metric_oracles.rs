//! Brute-force oracles for the confusion matrix, IoU and hard Dice.

#![allow(dead_code)]

use std::collections::BTreeSet;

use budaseg::metrics::{confusion, iou};
use budaseg::{seeded, LabelMap};
use rand::Rng as _;

pub fn random_map(rng: &mut budaseg::Rng, h: usize, w: usize, c: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap()
}

fn class_set(m: &LabelMap, class: u8) -> BTreeSet<usize> {
    m.data().iter().enumerate().filter(|(_, &c)| c == class).map(|(i, _)| i).collect()
}

/// Checks `pairs` random 8×8 map pairs; returns the number of comparisons.
pub fn check_metric_oracles(pairs: usize, seed: u64) -> Result<usize, String> {
    let mut rng = seeded(seed);
    let mut compared = 0;
    for case in 0..pairs {
        let c = rng.random_range(2..=5usize);
        let (pred, truth) = (random_map(&mut rng, 8, 8, c), random_map(&mut rng, 8, 8, c));
        let cm = confusion(&pred, &truth, c).map_err(|e| e.to_string())?;

        for t in 0..c {
            for p in 0..c {
                let count =
                    pred.data().iter().zip(truth.data()).filter(|(&a, &b)| a as usize == p && b as usize == t).count();
                if cm.get(t, p) != count as u64 {
                    return Err(format!("case {case}: confusion[{t}][{p}] = {} but loop counts {count}", cm.get(t, p)));
                }
                compared += 1;
            }
        }

        let report = iou(&cm).map_err(|e| e.to_string())?;
        let dice = cm.dice();
        let mut present = Vec::new();
        for k in 0..c as u8 {
            let (ps, ts) = (class_set(&pred, k), class_set(&truth, k));
            let inter = ps.intersection(&ts).count() as f64;
            let union = ps.union(&ts).count() as f64;
            let (want_iou, want_dice) = if union == 0.0 {
                (None, None)
            } else {
                (Some(inter / union), Some(2.0 * inter / (ps.len() + ts.len()) as f64))
            };
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                (None, None) => true,
                _ => false,
            };
            let k = k as usize;
            if !close(report.per_class[k], want_iou) {
                return Err(format!("case {case}: IoU[{k}] {:?} vs set oracle {want_iou:?}", report.per_class[k]));
            }
            if !close(dice[k], want_dice) {
                return Err(format!("case {case}: Dice[{k}] {:?} vs set oracle {want_dice:?}", dice[k]));
            }
            if let (Some(i), Some(d)) = (report.per_class[k], dice[k]) {
                if (d - 2.0 * i / (1.0 + i)).abs() > 1e-9 {
                    return Err(format!("case {case}: class {k} violates Dice = 2 IoU / (1 + IoU)"));
                }
            }
            present.extend(want_iou);
            compared += 3;
        }
        let want_mean = present.iter().sum::<f64>() / present.len() as f64;
        if (report.mean - want_mean).abs() > 1e-9 {
            return Err(format!("case {case}: mean IoU {} vs oracle {want_mean}", report.mean));
        }
    }
    Ok(compared)
}
