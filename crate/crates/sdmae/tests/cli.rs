//! Thin end-to-end checks of the command-line surface: exit codes and
//! error diagnostics. The full pipeline is exercised by the acceptance
//! suite.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdmae"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = bin().args(["make-toy", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["make-toy", "train-teacher", "distill", "score", "eval", "bench", "ablate", "plot"]
    {
        assert!(text.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn missing_data_directory_is_runtime_error() {
    let run = tmp("cli_missing_data");
    let out = bin()
        .args(["score", "--data", "/definitely/not/there", "--run"])
        .arg(&run)
        .args(["--set", "preset=toy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn eval_with_mismatched_labels_names_the_video() {
    let data = tmp("cli_mismatch_data");
    let run = tmp("cli_mismatch_run");
    let out = bin()
        .args(["make-toy", "--seed", "5", "--test-videos", "1", "--train-videos", "1", "--frames", "20", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());
    // scores CSV with the wrong number of rows
    let scores = run.join("scores");
    std::fs::create_dir_all(&scores).unwrap();
    let mut csv = String::from("frame_index,raw_score,smoothed_score\n");
    for t in 0..7 {
        csv.push_str(&format!("{t},0.1,0.1\n"));
    }
    std::fs::write(scores.join("video_00.csv"), csv).unwrap();
    let out = bin()
        .args(["eval", "--data"])
        .arg(&data)
        .arg("--run")
        .arg(&run)
        .args(["--set", "preset=toy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("video_00"), "stderr was: {err}");
}

#[test]
fn bench_rejects_too_few_frames() {
    let run = tmp("cli_bench_small");
    let out = bin()
        .args(["bench", "--frames", "10", "--run"])
        .arg(&run)
        .args(["--set", "preset=toy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 100"));
}
