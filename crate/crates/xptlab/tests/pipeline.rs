//! Drives the compiled binary through a miniature experiment, generation to
//! aggregate report, and checks the documented exit codes along the way.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use xptlab::cli::checkpoint_io::read_backbone_bytes;

/// Deliberately tiny: two layers of width 16 and a handful of examples per
/// split, so the whole pipeline finishes in seconds. A fixed tuning rate
/// skips the grid probes.
const CONFIG: &str = r#"{
  "model": {
    "n_layers": 2, "n_heads": 2, "d_model": 16, "d_ff": 32,
    "vocab_size": 512, "max_seq": 32, "n_classes": 2,
    "cls_token_id": 0, "pad_token_id": 1, "mask_token_id": 2
  },
  "prompt": {"length": 4, "init_std": 0.02, "seed": 0},
  "data": {
    "n_languages": 3,
    "n_sentences": 400,
    "n_train": 64,
    "n_val": 16,
    "n_test": 16,
    "n_analysis": 16,
    "mlm_per_lang": 60,
    "mask_rate": 0.15,
    "negative_mode": "noisy",
    "difficulties": [0.0, 0.0, 0.0],
    "seed": 7
  },
  "pretrain": {"epochs": 1, "lr": 0.001, "batch_size": 16, "mask_rate": 0.15, "seed": 11},
  "tune": {"lr": 0.001, "lr_grid": [0.01, 0.001], "batch_size": 16, "epochs": 2},
  "analysis": {"tsne": {"perplexity": 8.0, "n_iters": 120, "early_exaggeration": 12.0,
    "exaggeration_iters": 40, "initial_momentum": 0.5, "final_momentum": 0.8,
    "momentum_switch_iter": 40, "step_size": 200.0, "seed": 0}},
  "seeds": [0]
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xptlab"))
        .current_dir(dir)
        .env("XPTLAB_THREADS", "1")
        .args(args)
        .output()
        .expect("failed to spawn xptlab")
}

fn check(out: &Output, stage: &str) {
    assert!(
        out.status.success(),
        "{stage} failed ({}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process had no exit code")
}

#[test]
fn pipeline_end_to_end_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("config.json"), CONFIG).unwrap();

    // Usage and input errors before any artifact exists.
    assert_eq!(code(&run(dir, &["frobnicate"])), 2, "unknown subcommand");
    assert_eq!(
        code(&run(dir, &["gen", "--config", "absent.json", "--out", "data"])),
        2,
        "missing config file"
    );
    fs::write(dir.join("typo.json"), r#"{"modle": {"n_layers": 2}}"#).unwrap();
    assert_eq!(
        code(&run(dir, &["gen", "--config", "typo.json", "--out", "data"])),
        4,
        "config with an unknown field"
    );

    check(&run(dir, &["gen", "--config", "config.json", "--out", "data"]), "gen");
    assert!(dir.join("data/manifest.json").is_file());

    // A second gen into the same directory must refuse unless forced.
    assert_eq!(
        code(&run(dir, &["gen", "--config", "config.json", "--out", "data"])),
        2,
        "gen over an existing dataset"
    );
    check(
        &run(dir, &["gen", "--config", "config.json", "--out", "data", "--force"]),
        "gen --force",
    );

    // Eval before pretraining: the checkpoint is missing.
    assert_eq!(
        code(&run(dir, &["eval", "--config", "config.json", "--data", "data"])),
        4,
        "eval without a checkpoint"
    );

    check(
        &run(dir, &["pretrain", "--config", "config.json", "--data", "data", "--out", "pretrain.ckpt"]),
        "pretrain",
    );

    for (mode, out) in [("pt", "pt.ckpt"), ("ft", "ft.ckpt")] {
        let t = run(
            dir,
            &[
                "tune", "--config", "config.json", "--data", "data", "--ckpt", "pretrain.ckpt",
                "--mode", mode, "--seed", "0", "--out", out,
            ],
        );
        check(&t, mode);
    }

    // Prompt tuning must leave the backbone untouched byte for byte; full
    // fine-tuning must move it.
    let base = read_backbone_bytes(&dir.join("pretrain.ckpt")).unwrap();
    let pt = read_backbone_bytes(&dir.join("pt.ckpt")).unwrap();
    let ft = read_backbone_bytes(&dir.join("ft.ckpt")).unwrap();
    assert_eq!(base, pt, "prompt tuning modified the backbone");
    assert_ne!(base, ft, "full fine-tuning left the backbone untouched");

    let eval = run(
        dir,
        &["eval", "--config", "config.json", "--data", "data", "--ckpt", "pt.ckpt", "--split", "test"],
    );
    check(&eval, "eval");
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("acc lang0"), "eval output lacks per-language accuracy:\n{stdout}");
    assert!(stdout.contains("transfer gap"), "eval output lacks the transfer gap:\n{stdout}");

    // Flipping one payload byte must be caught by the checksum.
    let mut bytes = fs::read(dir.join("pt.ckpt")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xFF;
    fs::write(dir.join("corrupt.ckpt"), bytes).unwrap();
    let bad = run(
        dir,
        &["eval", "--config", "config.json", "--data", "data", "--ckpt", "corrupt.ckpt"],
    );
    assert_eq!(code(&bad), 4, "corrupted checkpoint accepted");
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("checksum"), "corruption not blamed on the checksum:\n{stderr}");

    let analyze = run(
        dir,
        &[
            "analyze", "--config", "config.json", "--data", "data", "--pretrain", "pretrain.ckpt",
            "--ft", "ft.ckpt", "--pt", "pt.ckpt", "--out", "analysis", "--seed", "0",
        ],
    );
    check(&analyze, "analyze");
    for name in [
        "report_seed0.csv",
        "scatter_pretrained_seed0.svg",
        "scatter_ft_seed0.svg",
        "scatter_pt_seed0.svg",
        "reps_pt_lang0_seed0.json",
    ] {
        assert!(dir.join("analysis").join(name).is_file(), "analyze did not write {name}");
    }

    check(
        &run(dir, &["report", "--out", "summary.csv", "analysis/report_seed0.csv"]),
        "report",
    );
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(
        summary.starts_with("# config_hash="),
        "summary does not pin the config hash:\n{summary}"
    );
    assert!(summary.lines().count() > 2, "summary has no aggregated rows:\n{summary}");
}
