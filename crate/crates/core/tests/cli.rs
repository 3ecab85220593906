use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmie::synthgen::read_corpus;

fn mmie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmie")).args(args).output().expect("spawn mmie")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "task = re\nnum_train = 24\nnum_val = 8\nnum_test = 8\nd_model = 8\ntext_heads = 2\nffn_dim = 8\nimage_channels = 2,2\npooled_dim = 4\nlatent_dim = 2\nattn_heads = 2\nepochs = 2\n";

fn tiny_setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_owned();
    let out = mmie(&["gen-data", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    cfg
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mmie(&["train"]).status.code(), Some(1));
    assert_eq!(mmie(&["train", "--task", "pos"]).status.code(), Some(1));
    assert_eq!(mmie(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mmie(&["verify", "no-such-suite"]).status.code(), Some(1));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "task = ner\n\nlearning_rate = 0.1\n").unwrap();
    let out = mmie(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(":3:"), "{}", stderr(&out));

    fs::write(&bad, "task = ner\nlr = 0.1\nlr = 0.2\n").unwrap();
    assert_eq!(mmie(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert!(mmie(&["--help"]).status.success());
}

#[test]
fn gen_data_is_deterministic_and_readable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_setup(a.path());
    tiny_setup(b.path());
    for split in ["train", "val", "test"] {
        let name = format!("re_{split}.jsonl");
        let (x, y) = (fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        assert_eq!(x, y, "{name}");
        let samples = read_corpus(&a.path().join(&name)).unwrap();
        assert!(!samples.is_empty());
        assert!(samples.iter().all(|s| s.validate().is_ok()));
    }
    let c = tempfile::tempdir().unwrap();
    let cfg = a.path().join("tiny.cfg");
    let out = mmie(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", c.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert_ne!(fs::read(a.path().join("re_train.jsonl")).unwrap(), fs::read(c.path().join("re_train.jsonl")).unwrap());
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let out_dir = dir.path().to_str().unwrap();
    let out = mmie(&["train", "--config", &cfg, "--seed", "3", "--out", out_dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let stem = names.iter().find(|n| n.ends_with(".ckpt")).unwrap().trim_end_matches(".ckpt").to_owned();
    assert!(stem.starts_with("re-") && stem.ends_with("-s3"), "{stem}");
    for ext in ["labels", "log", "cfg", "metrics.json"] {
        assert!(names.contains(&format!("{stem}.{ext}")), "{ext} missing from {names:?}");
    }

    let out = mmie(&["eval", "--config", &cfg, "--seed", "3", "--out", out_dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    let read = |name: &str| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(dir.path().join(name)).unwrap()).unwrap() };
    let trained = read(&format!("{stem}.metrics.json"));
    let evaluated = read(&format!("{stem}.test.eval.json"));
    for key in ["precision", "recall", "f1", "per_type"] {
        assert_eq!(trained[key], evaluated[key], "{key}");
    }

    // a checkpoint from a different architecture is refused
    let other = dir.path().join("other.cfg");
    fs::write(&other, TINY.replace("latent_dim = 2", "latent_dim = 3")).unwrap();
    let ckpt = dir.path().join(format!("{stem}.ckpt"));
    let out = mmie(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn several_seeds_write_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let out = mmie(&["train", "--config", &cfg, "--seeds", "1,2", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with(".seeds.json"))
        .expect("seed summary");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(v["seeds"], serde_json::json!([1, 2]));
    assert_eq!(v["f1"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmie(&["verify", "crf-oracle", "attn-props", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify-crf-oracle-s42.json")).unwrap()).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
}
