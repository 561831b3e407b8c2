use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wasi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wasi"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("WASI_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_matrix(path: &Path, rows: usize, cols: usize) {
    // Decaying singular values so that the threshold picks an interior rank.
    let mut bytes = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v: f64 = (0..rows.min(cols))
                .map(|q| 0.7f64.powi(q as i32) * ((i * (q + 1)) as f64 * 0.37).sin() * ((j * (q + 2)) as f64 * 0.21).cos())
                .sum();
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn decompose_respects_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    write_matrix(&w, 12, 12);
    let out = dir.path().join("d09");
    let o = wasi(&out, &["decompose", "--eps", "0.9", "--matrix", w.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("manifest.json"));
    let k = m["ranks"][0].as_u64().unwrap() as usize;
    assert!((1..12).contains(&k));
    assert!(m["relative_error"].as_f64().unwrap() <= 0.1 + 1e-9);
    let l = std::fs::read(out.join("L.bin")).unwrap();
    assert_eq!(l.len(), 12 * k * 8);

    let full = dir.path().join("d10");
    let o = wasi(&full, &["decompose", "--eps", "1.0", "--matrix", w.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json(&full.join("manifest.json"))["relative_error"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn decompose_tensor_writes_tucker_parts() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(dir.path(), &["decompose", "--synthetic", "4x5x6", "--eps", "1.0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["ranks"], serde_json::json!([4, 5, 6]));
    for f in ["core.bin", "U1.bin", "U2.bin", "U3.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn decompose_missing_file_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(dir.path(), &["decompose", "--matrix", "no/such/w.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/w.bin"));
}

#[test]
fn plan_with_a_large_budget_takes_the_top_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(dir.path(), &["plan", "--data", "synthetic:easy", "--hidden", "8,8", "--budget", "1000000000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("perplexity_table.json"));
    let p = json(&dir.path().join("rank_plan.json"));
    let top = t["thresholds"].as_array().unwrap().len() - 1;
    assert_eq!(p["threshold_indices"], serde_json::json!([top, top]));
}

/// Every assignment of thresholds to layers, read straight from the table.
fn exhaustive(t: &Value, budget: u64) -> (Vec<usize>, u64, f64) {
    let perp = t["perplexity"].as_array().unwrap();
    let ranks = t["ranks"].as_array().unwrap();
    let dims = t["dims"].as_array().unwrap();
    let (n, e) = (perp.len(), t["thresholds"].as_array().unwrap().len());
    let mem = |l: usize, j: usize| -> u64 {
        let r: Vec<u64> = ranks[l][j].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let d: Vec<u64> = dims[l].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        r.iter().product::<u64>() + r.iter().zip(&d).map(|(a, b)| a * b).sum::<u64>()
    };
    let mut best: Option<(Vec<usize>, u64, f64)> = None;
    for code in 0..e.pow(n as u32) {
        let idx: Vec<usize> = (0..n).map(|l| code / e.pow((n - 1 - l) as u32) % e).collect();
        let m: u64 = idx.iter().enumerate().map(|(l, &j)| mem(l, j)).sum();
        let p: f64 = idx.iter().enumerate().map(|(l, &j)| perp[l][j].as_f64().unwrap()).sum();
        if m > budget {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bi, bm, bp)) => (p, m, &idx) < (*bp, *bm, bi),
        };
        if better {
            best = Some((idx, m, p));
        }
    }
    best.expect("feasible")
}

#[test]
fn plan_matches_exhaustive_search_on_four_layers() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(
        dir.path(),
        &[
            "plan", "--data", "synthetic:easy", "--hidden", "6,6,6,6", "--thresholds", "0.5,0.8,0.95,1.0",
            "--batch-size", "16", "--budget", "2000",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&dir.path().join("perplexity_table.json"));
    let p = json(&dir.path().join("rank_plan.json"));
    assert_eq!(t["perplexity"].as_array().unwrap().len(), 4);
    let (idx, m, _) = exhaustive(&t, 2000);
    let got: Vec<usize> = p["threshold_indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    assert_eq!(got, idx);
    assert_eq!(p["memory"].as_u64().unwrap(), m);
}

#[test]
fn plan_flags_are_exclusive_and_infeasible_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let both = wasi(dir.path(), &["plan", "--data", "synthetic:easy", "--budget", "10", "--perplexity-target", "1"]);
    assert_eq!(both.status.code(), Some(2));
    let tight = wasi(dir.path(), &["plan", "--data", "synthetic:easy", "--hidden", "8", "--budget", "1"]);
    assert_eq!(tight.status.code(), Some(3), "{}", stderr(&tight));
    let none = wasi(dir.path(), &["plan", "--data", "synthetic:easy"]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn cost_singleton_grid_is_one_row_of_formulas() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(
        dir.path(),
        &[
            "cost", "--batch", "2", "--spatial", "4", "--features", "8x6", "--weight-ranks", "3",
            "--activation-ranks", "fixed:1x2x2", "--svg", "chart.svg",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let head: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let get = |k: &str| row[head.iter().position(|h| *h == k).unwrap()].parse::<f64>().unwrap();
    let (b, n, i, o_, k) = (2.0, 4.0, 8.0, 6.0, 3.0);
    assert_eq!(get("f_vanilla"), 2.0 * b * n * i * o_);
    assert_eq!(get("m_w_vanilla"), i * o_);
    assert_eq!(get("m_w_wasi"), k * (i + o_));
    assert_eq!(get("m_a_vanilla"), b * n * i);
    assert_eq!(get("m_a_wasi"), 1.0 * 2.0 * 2.0 + (2.0 * 1.0 + 4.0 * 2.0 + 8.0 * 2.0));
    assert!((get("c_inference") - i * o_ / (k * (i + o_))).abs() < 1e-5);
    let svg = std::fs::read_to_string(dir.path().join("chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn cost_rejects_bad_grids() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(wasi(dir.path(), &["cost", "--features", "8"]).status.code(), Some(2));
    assert_eq!(wasi(dir.path(), &["cost", "--activation-ranks", "half"]).status.code(), Some(2));
}

#[test]
fn train_vanilla_separates_easy_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(dir.path(), &["train", "--mode", "vanilla", "--data", "synthetic:easy", "--epochs", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("run.json"));
    let last = r["epochs"].as_array().unwrap().last().unwrap().clone();
    assert!(last["train_accuracy"].as_f64().unwrap() >= 0.99);
    assert!(last["val_accuracy"].as_f64().unwrap() >= 0.99);
    let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(dir.path().join("checkpoint/manifest.json").exists());
}

#[test]
fn lossless_wasi_tracks_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let (v, w) = (dir.path().join("v"), dir.path().join("w"));
    let common = ["--data", "synthetic:easy", "--epochs", "1", "--batch-size", "32", "--seed", "4"];
    let a = wasi(&v, &[&["train", "--mode", "vanilla"], &common[..]].concat());
    let b = wasi(&w, &[&["train", "--mode", "wasi", "--eps", "1.0", "--full-ranks"], &common[..]].concat());
    assert!(a.status.success() && b.status.success(), "{}{}", stderr(&a), stderr(&b));
    let la = json(&v.join("run.json"))["step_losses"].clone();
    let lb = json(&w.join("run.json"))["step_losses"].clone();
    for s in 0..10 {
        let (x, y) = (la[s].as_f64().unwrap(), lb[s].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-6, "step {s}: {x} vs {y}");
    }
    for f in ["layer0.L.bin", "layer0.R.bin", "layer0.core.bin", "layer0.U1.bin", "layer0.U3.bin"] {
        assert!(w.join("checkpoint").join(f).exists(), "{f}");
    }
}

#[test]
fn runs_are_deterministic_and_seed_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["train", "--data", "synthetic:easy", "--epochs", "2", "--hidden", "8", "--no-checkpoint"];
    let strip = |p: &Path| {
        let mut v = json(&p.join("run.json"));
        v.as_object_mut().unwrap().remove("timestamp");
        v
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(wasi(&a, &[&args[..], &["--seed", "7"]].concat()).status.success());
    assert!(wasi(&b, &[&args[..], &["--seed", "7"]].concat()).status.success());
    let env = Command::new(env!("CARGO_BIN_EXE_wasi")).args(args).arg("--out").arg(&c).env("WASI_SEED", "7").output().unwrap();
    assert!(env.status.success(), "{}", stderr(&env));
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(strip(&a), strip(&c));
    assert_eq!(strip(&a)["seed"], 7);
}

#[test]
fn config_sections_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[train]\nmode = \"vanilla\"\nepochs = 3\nseed = 2\n\n[model]\nhidden = [8]\n\n[data]\nsource = \"synthetic:easy\"\n",
    )
    .unwrap();
    let o = wasi(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&dir.path().join("run.json"));
    assert_eq!(r["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(r["config"]["mode"], "vanilla");
    assert_eq!(r["seed"], 2);
}

#[test]
fn absent_config_and_bad_input_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(dir.path(), &["--config", "absent.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(wasi(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(wasi(dir.path(), &["train", "--data", "synthetic:easy", "--eps", "1.5"]).status.code(), Some(2));
    assert_eq!(wasi(dir.path(), &["train", "--mode", "dense", "--data", "synthetic:easy"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_a_step_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasi(
        dir.path(),
        &["train", "--data", "synthetic:easy", "--lr", "1e300", "--clip", "0", "--weight-decay", "0", "--epochs", "3"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}
