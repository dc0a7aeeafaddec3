//! End-to-end CLI tests: command round-trips, artifacts, exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crobim"))
}

/// Small-model overrides so every run finishes in seconds.
fn tiny_sets(out_dir: &Path) -> Vec<String> {
    [
        "model.image_size=32",
        "model.channels=[4, 6, 8, 12]",
        "model.text_dim=8",
        "model.max_tokens=6",
        "model.num_prompts=2",
        "model.hidden_dim=16",
        "model.comp_dim=8",
        "model.comp_heads=2",
        "model.msda_heads=2",
        "model.msda_points=2",
        "run.steps=6",
        "run.batch_size=2",
        "run.synth_train=3",
        "run.synth_val=2",
        "run.checkpoint_every=3",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .chain([
        "--set".to_string(),
        format!("run.out_dir={}", out_dir.display()),
    ])
    .collect()
}

fn run(args: &[String]) -> Output {
    bin().args(args).output().expect("spawn crobim")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crobim_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("not-a-command").output().unwrap();
    assert_eq!(code(&out), 1);
    let out = bin()
        .args(["--set", "model.bogus=1", "verify"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "unknown config key must be a usage error");
    let out = bin()
        .args(["--config", "/nonexistent/config.toml", "verify"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    // help is not an error
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn config_file_drives_a_run() {
    let dir = tmp("cfgfile");
    let cfg_path = dir.join("run.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "model.image_size = 32\n\
             model.channels = [4, 6, 8, 12]\n\
             model.text_dim = 8\n\
             model.max_tokens = 6\n\
             model.num_prompts = 2\n\
             model.hidden_dim = 16\n\
             model.comp_dim = 8\n\
             run.steps = 3\n\
             run.batch_size = 2\n\
             run.synth_train = 2\n\
             run.synth_val = 0\n\
             run.out_dir = \"{}\"\n",
            dir.display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(
        code(&out),
        0,
        "config-file train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("checkpoint_final.ckpt").exists());
    // --set overrides win over the file
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "run.steps=0",
            "train",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "steps=0 must be rejected by validation");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_eval_predict_stats_roundtrip() {
    let dir = tmp("roundtrip");
    let sets = tiny_sets(&dir);

    let mut args = sets.clone();
    args.push("train".into());
    let out = run(&args);
    assert_eq!(
        code(&out),
        0,
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = dir.join("checkpoint_final.ckpt");
    assert!(ckpt.exists());
    assert!(dir.join("loss_log.tsv").exists());
    assert!(dir.join("metrics_train.txt").exists());
    assert!(dir.join("data").join("manifest.tsv").exists());

    // eval on the train split
    let mut args = sets.clone();
    args.extend([
        "eval".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--split".into(),
        "train".into(),
        "--shards".into(),
        "2".into(),
    ]);
    let out = run(&args);
    assert_eq!(
        code(&out),
        0,
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("oIoU:") && text.contains("Pr@0.9:"), "{text}");

    // predict on a materialized training image, with dumps
    let image = dir.join("data").join("images").join("synth-0-0.png");
    assert!(image.exists());
    let mut args = sets.clone();
    args.extend([
        "predict".into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--image".into(),
        image.display().to_string(),
        "--expression".into(),
        "the red circle".into(),
        "--dump".into(),
    ]);
    let out = run(&args);
    assert_eq!(
        code(&out),
        0,
        "predict failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (mask, _) = crobim::dataio::manifest::load_mask(&dir.join("mask.png")).unwrap();
    assert_eq!(mask.shape(), &[32, 32], "mask dims must equal input dims");
    assert!(dir.join("overlay.png").exists());
    let attn = dir.join("attention");
    for f in [
        "index.tsv",
        "S_1.bin",
        "deficit.bin",
        "regions.bin",
        "deficit.png",
    ] {
        assert!(attn.join(f).exists(), "missing dump {f}");
    }

    // stats over the materialized manifest
    let mut args = sets.clone();
    args.extend([
        "stats".into(),
        "--manifest".into(),
        dir.join("data").join("manifest.tsv").display().to_string(),
    ]);
    let out = run(&args);
    assert_eq!(
        code(&out),
        0,
        "stats failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "stats.txt",
        "stats.json",
        "hist_word_length.png",
        "hist_categories.png",
        "hist_object_size.png",
    ] {
        assert!(dir.join(f).exists(), "missing stats artifact {f}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn checkpoint_config_mismatch_reports_dims() {
    let dir = tmp("mismatch");
    let sets = tiny_sets(&dir);
    let mut args = sets.clone();
    args.push("train".into());
    assert_eq!(code(&run(&args)), 0);
    // evaluating with a different hidden width must fail with both shapes
    let mut args = sets.clone();
    for a in args.iter_mut() {
        if a == "model.hidden_dim=16" {
            *a = "model.hidden_dim=32".into();
        }
    }
    args.extend([
        "eval".into(),
        "--checkpoint".into(),
        dir.join("checkpoint_final.ckpt").display().to_string(),
        "--split".into(),
        "train".into(),
    ]);
    let out = run(&args);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("16") && err.contains("32"),
        "mismatch error must list the offending dims: {err}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn non_finite_loss_exits_two() {
    let dir = tmp("numerical");
    let mut args = tiny_sets(&dir);
    args.extend(["--set".to_string(), "run.learning_rate=1e30".to_string()]);
    args.push("train".into());
    let out = run(&args);
    assert_eq!(
        code(&out),
        2,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablation_flags_train_and_evaluate() {
    for flag in ["--no-capm", "--no-compensation", "--single-direction"] {
        let dir = tmp(&format!("flag{}", flag.trim_start_matches("--")));
        let mut args = tiny_sets(&dir);
        args.push(flag.to_string());
        let mut train_args = args.clone();
        train_args.push("train".into());
        let out = run(&train_args);
        assert_eq!(
            code(&out),
            0,
            "{flag} train failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mut eval_args = args.clone();
        eval_args.extend([
            "eval".into(),
            "--checkpoint".into(),
            dir.join("checkpoint_final.ckpt").display().to_string(),
            "--split".into(),
            "train".into(),
        ]);
        let out = run(&eval_args);
        assert_eq!(
            code(&out),
            0,
            "{flag} eval failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}

#[test]
fn verify_passes_at_tiny_dims() {
    let dir = tmp("verify");
    let mut args = tiny_sets(&dir);
    args.push("verify".into());
    let out = run(&args);
    assert_eq!(
        code(&out),
        0,
        "verify failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(dir.join("verify_report.txt").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn out_dir_env_override() {
    let dir = tmp("envdir");
    let override_dir = dir.join("overridden");
    let mut args = tiny_sets(&dir); // out_dir points at `dir`
    args.push("train".into());
    let out = bin()
        .args(&args)
        .env("CROBIM_OUT_DIR", &override_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(override_dir.join("checkpoint_final.ckpt").exists());
    assert!(!dir.join("checkpoint_final.ckpt").exists());
    std::fs::remove_dir_all(&dir).ok();
}
