use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn deltaforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltaforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = deltaforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{
  "probe": {"family": "mlp", "layer_sizes": [4, 8, 3], "seed": 1},
  "data": {"n_samples": 32},
  "training": {"steps_base": 20, "steps_finetune": 5, "lr": 0.1}
}"#;

struct Trained {
    dir: tempfile::TempDir,
}

impl Trained {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), SPEC).unwrap();
        let t = Self { dir };
        ok(&[
            "probe",
            "train",
            "--spec",
            s(&t.path("spec.json")),
            "--out-pre",
            s(&t.path("pre.safetensors")),
            "--out-post",
            s(&t.path("post.safetensors")),
        ]);
        ok(&[
            "delta",
            "compute",
            "--pre",
            s(&t.path("pre.safetensors")),
            "--post",
            s(&t.path("post.safetensors")),
            "--select",
            "all",
            "--out",
            s(&t.path("delta.safetensors")),
        ]);
        t
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn edit(&self, extra: &[&str]) -> Output {
        let (delta, edited, pert) = (
            self.path("delta.safetensors"),
            self.path("edited.safetensors"),
            self.path("pert.safetensors"),
        );
        let mut args = vec!["edit", "--delta", s(&delta), "--out", s(&edited), "--perturbation-out", s(&pert)];
        args.extend_from_slice(extra);
        deltaforge(&args)
    }

    fn estimate(&self) -> Value {
        let out = ok(&[
            "estimate",
            "--spec",
            s(&self.path("spec.json")),
            "--post",
            s(&self.path("post.safetensors")),
            "--perturbation",
            s(&self.path("pert.safetensors")),
        ]);
        serde_json::from_slice(&out.stdout).unwrap()
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert!(deltaforge(&["--help"]).status.success());
    assert!(deltaforge(&["--version"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(deltaforge(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(deltaforge(&["edit", "--op", "dare"]).status.code(), Some(1));
}

#[test]
fn missing_file_exits_two() {
    let out = deltaforge(&[
        "apply",
        "--pre",
        "/nonexistent/pre.safetensors",
        "--edited",
        "/nonexistent/e.safetensors",
        "--out",
        "/tmp/never.safetensors",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_parameters_exit_one() {
    let t = Trained::new();
    assert_eq!(t.edit(&["--op", "dare"]).status.code(), Some(1));
    assert_eq!(t.edit(&["--op", "dare", "--p", "1.0"]).status.code(), Some(1));
    assert_eq!(t.edit(&["--op", "biased", "--p", "0.5", "--k", "0.5", "--bias-on", "product_sign"]).status.code(), Some(1));
    assert_eq!(t.edit(&["--op", "warp"]).status.code(), Some(1));
}

#[test]
fn identity_pipeline_reproduces_post() {
    let t = Trained::new();
    let out = t.edit(&["--op", "comp", "--p", "0.5", "--k", "1.0", "--seed", "4"]);
    assert!(out.status.success());
    ok(&[
        "apply",
        "--pre",
        s(&t.path("pre.safetensors")),
        "--edited",
        s(&t.path("edited.safetensors")),
        "--out",
        s(&t.path("rebuilt.safetensors")),
    ]);
    let rebuilt = deltaforge_core::load_checkpoint(t.path("rebuilt.safetensors"), false).unwrap();
    let post = deltaforge_core::load_checkpoint(t.path("post.safetensors"), false).unwrap();
    let pre = deltaforge_core::load_checkpoint(t.path("pre.safetensors"), false).unwrap();
    for (name, r) in rebuilt.iter() {
        let (p, q) = (post.get(name).unwrap(), pre.get(name).unwrap());
        for ((&x, &y), &z) in r.values().iter().zip(p.values()).zip(q.values()) {
            assert!((x - y).abs() <= 2f32.powi(-20) * y.abs().max(z.abs()), "{name}: {x} vs {y}");
        }
    }

    let report = t.estimate();
    assert_eq!(report["value"], 0.0);
    assert_eq!(report["exact"], 0.0);
}

#[test]
fn estimate_reports_terms_and_op_record() {
    let t = Trained::new();
    assert!(t.edit(&["--op", "dare", "--p", "0.5", "--seed", "7"]).status.success());
    let report = t.estimate();
    for key in ["value", "exact", "C", "sample_points", "terms", "op_record"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["C"], 5);
    assert_eq!(report["op_record"]["op"], "dare");
    assert_eq!(report["op_record"]["seed"], 7);
    let terms: Vec<f64> = report["terms"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = terms.iter().sum::<f64>() / terms.len() as f64;
    assert!((mean - report["value"].as_f64().unwrap()).abs() <= 1e-12 * mean.abs().max(1e-300));

    // Same seed, same bytes.
    let first = fs::read(t.path("edited.safetensors")).unwrap();
    assert!(t.edit(&["--op", "dare", "--p", "0.5", "--seed", "7"]).status.success());
    assert_eq!(first, fs::read(t.path("edited.safetensors")).unwrap());
}

#[test]
fn product_sign_uses_gradient_checkpoint() {
    let t = Trained::new();
    ok(&[
        "probe",
        "grad",
        "--spec",
        s(&t.path("spec.json")),
        "--params",
        s(&t.path("post.safetensors")),
        "--out",
        s(&t.path("grad.safetensors")),
    ]);
    let grad = t.path("grad.safetensors");
    let out = t.edit(&[
        "--op",
        "biased",
        "--p",
        "0.5",
        "--k",
        "0.5",
        "--bias-on",
        "product_sign",
        "--gradient",
        s(&grad),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t.estimate()["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn sweep_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    fs::write(
        &config,
        r#"{
  "probe": {"family": "linreg", "seed": 0},
  "data": {"n_samples": 32},
  "training": {"steps_base": 20, "steps_finetune": 5},
  "experiment": "dare_grid",
  "grid": {"p": [0.5, 0.9], "k": [0.0, 1.0]},
  "seeds": [0, 1, 2]
}"#,
    )
    .unwrap();
    let csv = dir.path().join("rows.csv");
    ok(&["sweep", "--config", s(&config), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,op,params_json,seed,riemann_estimate,exact_delta_loss,frobenius_error,sparsity,sign_flip_fraction"
    );
    assert_eq!(lines.count(), 12);

    let json = dir.path().join("rows.json");
    ok(&["sweep", "--config", s(&config), "--out", s(&json), "--format", "json"]);
    let rows: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 12);

    fs::write(&config, r#"{"probe": {"family": "linreg"}, "experiment": "svd_rank", "grid": {"rank": []}, "seeds": [0]}"#)
        .unwrap();
    assert_eq!(deltaforge(&["sweep", "--config", s(&config), "--out", s(&csv)]).status.code(), Some(1));
}
