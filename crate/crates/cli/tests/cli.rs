use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lacim_core::experiment::ExperimentConfig;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn lacim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lacim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lacim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny() -> String {
    repo_file("configs/tiny.json").to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_defaults_match_builtin_config() {
    let shipped = ExperimentConfig::load(&repo_file("configs/default.json")).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
    let cfg = ExperimentConfig::default();
    assert_eq!((cfg.train.lr, cfg.train.batch_size, cfg.train.iterations), (5e-4, 512, 2000));
    assert_eq!((cfg.infer.lr, cfg.infer.weight_decay, cfg.infer.iterations), (0.002, 0.0002, 50));
    ExperimentConfig::load(&repo_file("configs/tiny.json")).unwrap();
}

#[test]
fn simulate_train_infer_mcc_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", d]);
    for e in 1..=5 {
        assert!(data.join(format!("env_{e}.csv")).exists());
    }
    let scm = json(&data.join("scm.json"));
    assert_eq!(scm["seed"], 3);
    assert!(data.join("config.json").exists());

    for mode in ["lacim", "pooled", "erm"] {
        let run = dir.path().join(mode);
        let r = run.to_str().unwrap();
        let stdout = ok(&["train", "--config", &cfg, "--data", d, "--mode", mode, "--out", r]);
        assert!(stdout.contains("final loss"));
        if mode == "erm" {
            assert!(run.join("erm.json").exists());
            continue;
        }
        let ckpt = run.join("model.json");
        let losses = json(&run.join("train.json"))["losses"].as_array().unwrap().len();
        assert_eq!(losses, 5);

        let env1 = data.join("env_1.csv");
        ok(&["infer", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", env1.to_str().unwrap(), "--out", r]);
        let preds = fs::read_to_string(run.join("predictions.csv")).unwrap();
        assert_eq!(preds.lines().next().unwrap(), "row,y0,y1,s0,s1,z0,z1");
        assert_eq!(preds.lines().count(), 41);

        ok(&["mcc", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--out", r]);
        let mcc = json(&run.join("mcc.json"));
        for key in ["mcc_s", "mcc_z"] {
            let v = mcc[key].as_f64().unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&v), "{key} = {v}");
        }
        assert_eq!(mcc["per_env"].as_array().unwrap().len(), 5);
        assert!(run.join("latent_scatter_env_5.csv").exists());
    }
}

#[test]
fn suite_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["suite", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["suite", "--config", &cfg, "--out", b.to_str().unwrap()]);
    let agg = fs::read(a.join("aggregate.csv")).unwrap();
    assert_eq!(agg, fs::read(b.join("aggregate.csv")).unwrap());
    let text = String::from_utf8(agg).unwrap();
    for mode in ["lacim_m5", "lacim_m3", "pooled"] {
        assert!(text.contains(mode), "{mode} missing from aggregate");
    }
    assert!(a.join("runs/pooled_r1.json").exists());

    let c = dir.path().join("c");
    ok(&["suite", "--config", &cfg, "--seed", "4", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(c.join("aggregate.csv")).unwrap(), fs::read(a.join("aggregate.csv")).unwrap());
}

#[test]
fn toy_and_theory_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let out = dir.path().to_str().unwrap();
    ok(&["toy-ood", "--config", &cfg, "--repeats", "1", "--out", out]);
    let toy = json(&dir.path().join("toy_ood.json"));
    assert!(toy.to_string().contains("lacim_accuracy"));

    let stdout = ok(&["theory", "--config", &cfg, "--out", out]);
    for check in ["diversity", "stein", "ood_bound", "nonempty_open_set"] {
        assert!(stdout.contains(check), "{check} missing");
    }
    let theory = json(&dir.path().join("theory.json"));
    assert!(theory.to_string().contains("diversity"));
}

#[test]
fn bad_inputs_exit_with_error_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).unwrap();
    let out = lacim(&["theory", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = lacim(&["train", "--data", empty.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = lacim(&["train", "--mode", "bogus", "--data", "x"]);
    assert!(!out.status.success());
}
