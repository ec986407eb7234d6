use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vault_core::checkpoint::decode;

fn vault(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vault")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("fx");
    let res = vault(&["fixture", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out.join("manifest.jsonl")
}

const SMALL_MODEL: &str = r#""d_vlm": 32, "d_lm": 32, "vlm_depth": 1, "lm_depth": 1, "num_heads": 2, "mlp_ratio": 2,
    "max_text_len": 10, "image_size": 16, "patch_size": 8, "conv_channels": [4, 8, 16]"#;

fn config(dir: &Path, manifest: &Path, train: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"model": {{{SMALL_MODEL}}}, "train": {{{train}}}, "data": {{"manifest": "{}"}}}}"#,
        s(manifest)
    );
    fs::write(&path, text).unwrap();
    path
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

fn records(out_dir: &Path) -> Vec<Value> {
    fs::read_to_string(out_dir.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn fixture_is_reproducible_byte_for_byte() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ma = fixture(a.path(), 16, 0);
    let mb = fixture(b.path(), 16, 0);
    assert_eq!(fs::read_to_string(&ma).unwrap().lines().count(), 16);
    let images = read_dir_sorted(&a.path().join("fx/images"));
    assert_eq!(images.len(), 16);
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    assert_eq!(images, read_dir_sorted(&b.path().join("fx/images")));
}

#[test]
fn fixture_rejects_bad_requests() {
    let dir = TempDir::new().unwrap();
    let res = vault(&["fixture", "--n", "5", "--out", s(dir.path())]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("10"), "{}", stderr(&res));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let res = vault(&["fixture", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&res), 2);
}

#[test]
fn every_command_documents_flags_and_defaults() {
    for (cmd, flags) in [
        ("fixture", &["--n", "--seed", "--out", "--format", "[default: 16]"][..]),
        ("train", &["--config", "--variant", "--out-dir", "tomvault"][..]),
        ("eval", &["--checkpoint", "--manifest", "--split", "[default: test]"][..]),
        ("gradcheck", &["--config", "--corrupt-gradient"][..]),
        ("ablate", &["--config", "--out-dir"][..]),
    ] {
        let help = stdout(&vault(&[cmd, "--help"]));
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}:\n{help}");
        }
    }
    assert_eq!(code(&vault(&["train", "--variant", "bert"])), 2);
}

#[test]
fn train_writes_results_for_each_seed() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 16, 0);
    let cfg = config(dir.path(), &manifest, r#""epochs": 2, "batch_size": 4"#);
    let out = dir.path().join("run");
    let res = vault(&["train", "--config", s(&cfg), "--variant", "vault", "--out-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let summary: Value = serde_json::from_str(&stdout(&res)).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 3);
    let recs = records(&out);
    let mut test_seeds: Vec<u64> = recs.iter().filter(|r| r["split"] == "test").map(|r| r["seed"].as_u64().unwrap()).collect();
    test_seeds.sort();
    assert_eq!(test_seeds, [0, 1, 2]);
    for r in &recs {
        for key in ["config_hash", "seed", "epoch", "split", "accuracy", "macro_f1", "weighted_f1", "per_class_f1", "diverged"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        assert_eq!(r["config_hash"], summary["config_hash"]);
    }
    for seed in 0..3 {
        assert!(out.join(format!("seed{seed}.vltc")).is_file());
    }
}

#[test]
fn freezing_without_an_lm_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 16, 0);
    let cfg = config(dir.path(), &manifest, r#""epochs": 1, "freeze_lm": true"#);
    for variant in ["vilt", "tomvilt"] {
        let res = vault(&["train", "--config", s(&cfg), "--variant", variant, "--out-dir", s(&dir.path().join(variant))]);
        assert_eq!(code(&res), 2, "{variant}");
    }
}

#[test]
fn broken_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let res = vault(&["train", "--config", s(&cfg), "--variant", "vault", "--out-dir", s(dir.path())]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("epochz"), "{}", stderr(&res));
}

#[test]
fn tomvault_checkpoint_holds_conv_and_cross_attention() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 12, 1);
    let cfg = config(dir.path(), &manifest, r#""epochs": 1, "seeds": [0]"#);
    let out = dir.path().join("run");
    let res = vault(&["train", "--config", s(&cfg), "--variant", "tomvault", "--out-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let names: Vec<String> = decode::<f32>(&fs::read(out.join("seed0.vltc")).unwrap())
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert!(names.iter().any(|n| n.contains("conv")), "{names:?}");
    assert!(names.iter().any(|n| n.contains("cross_attn")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("lm.")), "{names:?}");
}

#[test]
fn eval_reproduces_an_overfit_run() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 200, 3);
    let cfg = config(dir.path(), &manifest, r#""epochs": 30, "batch_size": 2, "peak_lr": 5e-4, "seeds": [0], "eval_train": true"#);
    let out = dir.path().join("run");
    let res = vault(&["train", "--config", s(&cfg), "--variant", "vault", "--out-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let summary: Value = serde_json::from_str(&stdout(&res)).unwrap();
    let best = summary["runs"][0]["best_epoch"].clone();

    let ckpt = out.join("seed0.vltc");
    let args = ["eval", "--checkpoint", s(&ckpt), "--split", "train"];
    let first = vault(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&vault(&args)));

    let metrics: Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert!(metrics["accuracy"].as_f64().unwrap() >= 0.95, "{metrics}");
    let recorded = records(&out)
        .into_iter()
        .find(|r| r["split"] == "train" && r["epoch"] == best)
        .unwrap();
    assert_eq!(metrics["accuracy"], recorded["accuracy"]);
    assert_eq!(metrics["macro_f1"], recorded["macro_f1"]);

    let test = vault(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    let test: Value = serde_json::from_str(&stdout(&test)).unwrap();
    assert_eq!(test, summary["runs"][0]["test"]);
}

#[test]
fn eval_reports_missing_images_and_mismatched_checkpoints() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 12, 2);
    let cfg = config(dir.path(), &manifest, r#""epochs": 1, "seeds": [0]"#);
    let (vilt, tom) = (dir.path().join("vilt"), dir.path().join("tom"));
    for (variant, out) in [("vilt", &vilt), ("tomvault", &tom)] {
        let res = vault(&["train", "--config", s(&cfg), "--variant", variant, "--out-dir", s(out)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }

    fs::copy(vilt.join("seed0.vltc"), tom.join("seed9.vltc")).unwrap();
    let res = vault(&["eval", "--checkpoint", s(&tom.join("seed9.vltc"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("cross_attn"), "{}", stderr(&res));

    fs::remove_file(dir.path().join("fx/images/syn00003.png")).unwrap();
    fs::remove_file(dir.path().join("fx/images/syn00007.png")).unwrap();
    let res = vault(&["eval", "--checkpoint", s(&vilt.join("seed0.vltc"))]);
    assert_eq!(code(&res), 2);
    let err = stderr(&res);
    assert!(err.contains("syn00003") && err.contains("syn00007"), "{err}");
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let ok = vault(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let report = stdout(&ok);
    for variant in ["vilt", "vault", "tomvilt", "tomvault"] {
        let line = report.lines().find(|l| l.starts_with(&format!("{variant} ("))).unwrap();
        let counts = line.split(['(', ' ']).nth(2).unwrap();
        let (checked, total) = counts.split_once('/').unwrap();
        assert_eq!(checked, total, "{line}");
    }

    let bad = vault(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("vlm."), "{}", stderr(&bad));
}

#[test]
fn ablate_tabulates_five_rows() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 12, 4);
    let cfg = config(dir.path(), &manifest, r#""epochs": 1, "seeds": [0, 1]"#);
    let out = dir.path().join("abl");
    let res = vault(&["ablate", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["vilt", "vault", "vault-frozen", "tomvilt", "tomvault"]);
    assert_eq!(rows[2]["lm_unchanged"], true);
    assert_eq!(rows[1]["lm_unchanged"], false);
    assert!(rows[0]["lm_unchanged"].is_null());

    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert_eq!(table, stdout(&res));
    assert_eq!(table.lines().filter(|l| l.contains('±')).count(), 5);
}

#[test]
fn all_seeds_diverging_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let manifest = fixture(dir.path(), 12, 5);
    let cfg = config(dir.path(), &manifest, r#""epochs": 2, "seeds": [0, 1], "divergence_factor": 0.0, "divergence_window": 1"#);
    let res = vault(&["train", "--config", s(&cfg), "--variant", "vilt", "--out-dir", s(&dir.path().join("run"))]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    let summary: Value = serde_json::from_str(&stdout(&res)).unwrap();
    assert_eq!(summary["diverged"], 2);
}
