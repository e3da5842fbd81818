// Named to sort ahead of the acceptance target: cargo stops at the first
// failing test binary, and acceptance stays red while any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn clipforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipforge")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, videos: usize, frames: usize, classes: usize, seed: u64) -> Output {
    clipforge(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--videos",
        &videos.to_string(),
        "--frames",
        &frames.to_string(),
        "--classes",
        &classes.to_string(),
        "--seed",
        &seed.to_string(),
    ])
}

/// Small config on a store at `root`, writing under `out`.
fn write_config(path: &Path, root: &Path, out: &Path) {
    let cfg = json!({
        "data": {"root": root, "downsample_rate": 2, "input_size": 16, "test_fraction": 0.25},
        "backbone": {"widths": [8, 8], "dilations": [1, 2], "strides": [2, 1], "input_size": 16},
        "pretrain": {"epochs": 2, "clips_per_epoch": 32, "eval_clips": 16, "batch_size": 16},
        "finetune": {"budget_per_class": 4, "epochs": 2, "batch_size": 4, "eval_frames_per_video": 3},
        "output": {"dir": out}
    });
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn gen_synth_is_deterministic_and_accepts_zero_videos() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, 3, 20, 2, 11)), 0);
    assert_eq!(code(&gen(&b, 3, 20, 2, 11)), 0);
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }

    let empty = tmp.path().join("empty");
    assert_eq!(code(&gen(&empty, 0, 20, 2, 1)), 0);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(empty.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["videos"].as_array().unwrap().len(), 0);

    let bad = gen(&tmp.path().join("bad"), 2, 20, 1, 1);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tmp.path().join("store"), &tmp.path().join("runs"));

    let out = clipforge(&["pretrain", "--config", cfg.to_str().unwrap(), "--variant", "sideways"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for v in ["siamese", "disentangle", "order-only", "transform-only"] {
        assert!(err.contains(v), "{err}");
    }

    fs::write(&cfg, r#"{"pretrain": {"learnig_rate": 0.1}}"#).unwrap();
    let out = clipforge(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("learnig_rate"));

    let out = Command::new(env!("CARGO_BIN_EXE_clipforge"))
        .args(["permspace", "--k", "3"])
        .env("CLIPFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert_eq!(code(&clipforge(&["permspace", "--k", "9"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    assert_eq!(code(&gen(&store, 8, 24, 2, 3)), 0);
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &store, &tmp.path().join("runs"));
    let cfg = cfg.to_str().unwrap();

    let out = clipforge(&["finetune", "--task", "planes", "--init", "nonexistent/path", "--config", cfg]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("nonexistent/path"));

    let out = clipforge(&["pretrain", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(code(&out), 3);

    let run = tmp.path().join("empty_run");
    fs::create_dir_all(&run).unwrap();
    let out = clipforge(&["report", "--run", run.to_str().unwrap(), "--out", tmp.path().join("plots").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("train_log.csv") && err.contains("finetune_log.csv"), "{err}");
}

#[test]
fn pretrain_finetune_and_report_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    assert_eq!(code(&gen(&store, 8, 24, 2, 3)), 0);
    let cfg = tmp.path().join("cfg.json");
    let runs = tmp.path().join("runs");
    write_config(&cfg, &store, &runs);
    let cfg = cfg.to_str().unwrap();

    let pre = runs.join("pre");
    let out = clipforge(&["pretrain", "--config", cfg, "--variant", "order-only", "--out", pre.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = fs::read_to_string(pre.join("train_log.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(3) == Some("0.000000")), "{log}");
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(pre.join("final/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let planes = runs.join("planes");
    let out = clipforge(&[
        "finetune",
        "--task",
        "planes",
        "--init",
        pre.join("final").to_str().unwrap(),
        "--config",
        cfg,
        "--out",
        planes.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plots = tmp.path().join("plots_planes");
    let out = clipforge(&["report", "--run", planes.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let heat = image::open(plots.join("confusion.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (2 * 32, 2 * 32));
    assert!(plots.join("finetune_log_loss.png").is_file());

    let sal = runs.join("sal");
    let out = clipforge(&["finetune", "--task", "saliency", "--init", "random", "--config", cfg, "--out", sal.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plots = tmp.path().join("plots_sal");
    let out = clipforge(&["report", "--run", sal.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // 2 held-out videos x 3 frames each
    let panels = fs::read_dir(&plots)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("saliency_panel_"))
        .count();
    assert_eq!(panels, 6);
    assert!(!plots.join("confusion.png").exists());

    let plots = tmp.path().join("plots_pre");
    let out = clipforge(&["report", "--run", pre.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(plots.join("train_log_loss.png").is_file());
}

#[test]
fn permspace_prints_the_class_table() {
    let out = clipforge(&["permspace", "--k", "4"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class_id,representative");
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[1], "0,0 1 2 3");
}

#[test]
fn selfcheck_passes_and_names_a_corrupted_check() {
    let out = clipforge(&["selfcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(" ok ")).count(), 8, "{text}");

    let out = clipforge(&["selfcheck", "--corrupt", "metric_goldens"]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("metric_goldens"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("FAIL")).count(), 1, "{text}");
}
