use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn metta(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metta"));
    cmd.args(args)
        .arg("--out")
        .arg(out)
        .env("METTA_THREADS", "0");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

/// The bundled config shrunk to a few seconds of work.
fn small_config(dir: &Path) -> PathBuf {
    let text =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json"))
            .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["dataset"]["train_count"] = 48.into();
    v["dataset"]["test_count"] = 24.into();
    v["dataset"]["image_size"] = 16.into();
    v["training"]["epochs"] = 1.into();
    v["training"]["policy"]["output_size"] = 16.into();
    v["training"]["linear"]["epochs"] = 1.into();
    v["analysis"]["S"] = 4.into();
    v["analysis"]["jitter_subset"] = 6.into();
    v["analysis"]["retrieval_corpus"] = 12.into();
    let path = dir.join("small.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = metta(&["selftest"], None, dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn eval_without_head_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = metta(&["eval"], Some(&cfg), &dir.path().join("run"));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("linear.mtck"), "{err}");
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["eval"].as_object_mut().unwrap().remove("seed");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = metta(&["gen-data"], Some(&cfg), dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed") && err.contains("eval"), "{err}");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(metta(&["gen-data"], Some(&cfg), &run).status.success());
    std::fs::write(run.join("backbone.mtck"), b"MTCK\x09\x00\x00\x00").unwrap();
    let out = metta(&["train-linear"], Some(&cfg), &run);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn small_pipeline_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    for sub in [
        "gen-data",
        "train-backbone",
        "train-linear",
        "eval",
        "interp",
        "jitter",
        "retrieve",
        "grad-check",
    ] {
        let out = metta(&[sub], Some(&cfg), &run);
        assert!(
            out.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let eval = std::fs::read_to_string(run.join("eval_report.csv")).unwrap();
    let mut lines = eval.lines();
    assert_eq!(lines.next(), Some("method,S,top1,nll,seed"));
    let cells: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    for m in ["central", "tta", "metta"] {
        for s in ["10", "32"] {
            assert!(
                cells.contains(&(m.to_string(), s.to_string())),
                "missing {m} S={s}"
            );
        }
    }
    let interp = std::fs::read_to_string(run.join("interp_curve.csv")).unwrap();
    assert!(interp.starts_with("alpha,endpoint,nll,accuracy\n"));
    assert_eq!(interp.lines().count(), 1 + 2 * 11);
    let jitter = std::fs::read_to_string(run.join("jitter.csv")).unwrap();
    assert!(
        jitter.starts_with("image_id,class,prob_mean,prob_std,prob_min,prob_max,argmax_flips\n")
    );
    assert_eq!(jitter.lines().count(), 1 + 6 * 4);
    for f in [
        "jitter_probs.csv",
        "retrieval_report.csv",
        "grad_check.csv",
        "train_backbone_log.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
}
