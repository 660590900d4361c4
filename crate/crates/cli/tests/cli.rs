mod common;

use std::fs;

use budaseg::config::RunConfig;
use budaseg::model::{SegNet, SegNetConfig};
use budaseg::seeded;
use budaseg::synth::{read_split, ClassIntensity, DomainSpec, NUM_CLASSES};
use common::{budaseg, small_config, stderr, stdout, tree, write_config};

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = budaseg(&["--print-config"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    let parsed = RunConfig::from_json(&text).unwrap();
    assert_eq!(parsed.to_json().trim(), text.trim());

    let path = dir.path().join("c.json");
    fs::write(&path, &text).unwrap();
    let second = budaseg(&["--config", path.to_str().unwrap(), "--print-config"]);
    assert_eq!(stdout(&second), text);

    let seeded_run = budaseg(&["--seed", "42", "--print-config"]);
    assert_eq!(RunConfig::from_json(&stdout(&seeded_run)).unwrap().seed, 42);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let o = budaseg(&["--config", bad.to_str().unwrap(), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = budaseg(&["--config", dir.path().join("absent.json").to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("nope.ckpt");
    let o = budaseg(&["--out", dir.path().to_str().unwrap(), "eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));

    // A regular file where the output directory should go.
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = budaseg(&["--out", blocker.join("run").to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = budaseg(&[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = budaseg(&["--out", out.to_str().unwrap(), "--seed", seed, "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
        out.join("data")
    };
    let (a, b, c) = (run("a", "3"), run("b", "3"), run("c", "4"));
    let split = read_split(&a).unwrap();
    assert_eq!((split.source_labeled.len(), split.target_unlabeled.len(), split.target_eval.len()), (100, 60, 15));
    assert_eq!(tree(&a), tree(&b));
    let images = |d: &std::path::Path| tree(&d.join("images"));
    assert_ne!(images(&a), images(&c));
    // Unlabelled target labels never reach disk.
    assert_eq!(fs::read_dir(a.join("labels")).unwrap().count(), 115);
}

/// A noise-free target domain where each class has one gray level, and a
/// network wired by hand to output `-a·|x − level_c|` for every class `c`.
#[test]
fn eval_of_oracle_checkpoint_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let levels = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut cfg = small_config();
    cfg.data.target = DomainSpec {
        class_intensity: levels.iter().map(|&mean| ClassIntensity { mean, std: 0.0 }).collect(),
        contrast_gamma: 1.0,
        noise_std: 0.0,
        tear_rate: 0.0,
        ..DomainSpec::default_target()
    };
    cfg.data.n_eval = 4;
    let base = 8;
    cfg.model = SegNetConfig { base_channels: base, depth: 1, ..SegNetConfig::default() };
    let out = dir.path().join("run");
    let config = write_config(dir.path(), cfg.clone(), &out);
    let config = config.to_str().unwrap();
    assert!(budaseg(&["--config", config, "gen-data"]).status.success());

    // Gray level of each class as stored on disk.
    let split = read_split(&out.join("data")).unwrap();
    let mut stored = [None::<f32>; NUM_CLASSES];
    for p in &split.target_eval {
        for (&x, &c) in p.image.data().iter().zip(p.label.data()) {
            let slot = &mut stored[c as usize];
            assert!(slot.is_none_or(|v| v == x), "class {c} is not a single gray level");
            *slot = Some(x);
        }
    }
    let v: Vec<f32> = stored.iter().zip(levels).map(|(s, l)| s.unwrap_or(l as f32)).collect();

    let a = 1.0e4f32;
    let mut model = SegNet::build(cfg.model.clone(), &mut seeded(0)).unwrap();
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        let d = p.value.data_mut();
        d.fill(0.0);
        let centre = |o: usize, i: usize| if shape.len() == 4 { ((o * shape[1] + i) * 3 + 1) * 3 + 1 } else { 0 };
        match p.name.as_str() {
            // f0 = x + 1, f_{c+1} = relu(x − v_c).
            "enc0.weight" => (0..=NUM_CLASSES).for_each(|o| d[centre(o, 0)] = 1.0),
            "enc0.bias" => {
                d[0] = 1.0;
                (0..NUM_CLASSES).for_each(|c| d[c + 1] = -v[c]);
            }
            // Pass the skip half of the concatenation through unchanged.
            "dec0.weight" => (0..base).for_each(|o| d[centre(o, base + o)] = 1.0),
            // −a|x − v_c| = a(x − v_c) − 2a·relu(x − v_c)
            "head_o.weight" => (0..NUM_CLASSES).for_each(|c| {
                d[c * base] = a;
                d[c * base + c + 1] = -2.0 * a;
            }),
            "head_o.bias" => (0..NUM_CLASSES).for_each(|c| d[c] = -a * (1.0 + v[c])),
            _ => {}
        }
    }
    let ckpt = dir.path().join("oracle.ckpt");
    model.save(&ckpt).unwrap();

    let o = budaseg(&["--config", config, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("reports/eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let dice_loss: f64 = row[3].parse().unwrap();
    let mean_iou: f64 = row[4].parse().unwrap();
    assert_eq!(mean_iou, 1.0, "{csv}");
    assert_eq!(dice_loss, 0.0, "{csv}");
}

#[test]
fn pipeline_and_tiny_ablation_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.ablation_runs = 2;
    let out = dir.path().join("run");
    let config = write_config(dir.path(), cfg, &out);
    let config = config.to_str().unwrap();
    for cmd in ["gen-data", "pretrain", "adapt", "eval"] {
        let o = budaseg(&["--config", config, cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "checkpoints/pretrained.ckpt",
        "checkpoints/adapted_iter2.ckpt",
        "reports/adapt_metrics.csv",
        "reports/audit.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = budaseg(&["--config", config, "ablate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("reports/ablation.csv")).unwrap();
    // 2 seeds × 2 methods × 2 iterations.
    assert_eq!(csv.lines().count(), 1 + 8);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["methods"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(out.join("reports/ablation.svg")).unwrap().contains("<polyline"));
}
