//! Exit-code and output contracts of the compiled binary.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn xmgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmgan"))
        .args(args)
        .output()
        .expect("failed to launch binary")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("xmgan_cli_surface_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn no_arguments_is_usage_error() {
    let out = xmgan(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_flag_exits_two() {
    let out = xmgan(&["train", "--frobnicate", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn off_simplex_alpha_exits_two_with_message() {
    // checkpoint is irrelevant: the simplex check runs first
    let out = xmgan(&[
        "generate",
        "--ckpt",
        "/nonexistent.bin",
        "--alpha",
        "0.7,0.4",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simplex"));
}

#[test]
fn missing_checkpoint_is_runtime_failure() {
    let out = xmgan(&["evaluate", "--ckpt", "/nonexistent.bin"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn make_data_prints_effective_config_and_succeeds() {
    let dir = temp_dir("mkdata");
    let out_path = dir.join("data");
    let out = xmgan(&[
        "make-data",
        "--seed",
        "3",
        "--image-size",
        "16",
        "--per-class",
        "2",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // effective config is echoed before the action output
    assert!(stdout.contains("seed=3"));
    assert!(stdout.contains("image_size=16"));
    assert!(stdout.contains("k=3"));
    assert!(out_path.join("manifest.csv").exists());
    assert!(out_path.join("0/0.ppm").exists());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn train_and_downstream_commands_compose() {
    let dir = temp_dir("pipeline");
    let run_dir = dir.join("runs");
    let run = |args: &[&str]| -> Output {
        Command::new(env!("CARGO_BIN_EXE_xmgan"))
            .env("XMGAN_RUN_DIR", run_dir.to_str().unwrap())
            .args(args)
            .output()
            .unwrap()
    };
    // tiny end-to-end: train, then generate and evaluate from the checkpoint
    let common = [
        "--image-size", "16",
        "--enc-channels", "8,16",
        "--heads", "2",
        "--noise-dim", "4",
        "--per-class", "6",
        "--seed", "1",
    ];
    let mut train_args = vec![
        "train", "--steps", "3", "--batch-size", "2", "--eval-every", "3",
        "--eval-per-class", "3", "--ckpt-every", "3", "--run", "t",
    ];
    train_args.extend_from_slice(&common);
    let out = run(&train_args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("t/ckpt_latest.bin");
    assert!(ckpt.exists());
    let config = run_dir.join("t/config.txt");
    assert!(config.exists());

    // reuse the run's own config file to rebuild the exact network
    let mut gen_args = vec![
        "generate",
        "--config", config.to_str().unwrap(),
        "--ckpt", ckpt.to_str().unwrap(),
        "--class", "1",
        "--alpha", "0.25,0.75",
        "--num", "4",
    ];
    let grid_path = dir.join("grid.ppm");
    gen_args.extend_from_slice(&["--out", grid_path.to_str().unwrap()]);
    let out = run(&gen_args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(grid_path.exists());

    let eval_args = vec![
        "evaluate",
        "--config", config.to_str().unwrap(),
        "--ckpt", ckpt.to_str().unwrap(),
        "--num", "3",
    ];
    let out = run(&eval_args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fid_lite="));
    assert!(stdout.contains("lpips_lite="));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn gradcheck_passes_quickly_with_one_seed() {
    let out = xmgan(&["gradcheck", "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max_rel_error="));
    assert!(stdout.contains("gradcheck PASS"));
}
