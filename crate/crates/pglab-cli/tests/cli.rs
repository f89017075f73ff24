//! Command-line behavior: exit codes (0 success, 1 verification failure, 2 usage error),
//! run-directory artifacts, and config layering between file, flags and --set overrides.

use std::path::Path;
use std::process::{Command, Output};

fn pglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pglab")).args(args).output().expect("spawn pglab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// -----------------------------------------------------------------------------------------
// Exit codes.
// -----------------------------------------------------------------------------------------

#[test]
fn malformed_invocations_exit_2() {
    assert_eq!(code(&pglab(&["frobnicate"])), 2, "unknown subcommand");
    assert_eq!(code(&pglab(&["train", "--frobnicate", "x"])), 2, "unknown flag");
    assert_eq!(code(&pglab(&["train"])), 2, "missing required --out");
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out_str = out_dir.to_str().unwrap();

    let result = pglab(&["train", "--task", "nope", "--out", out_str]);
    assert_eq!(code(&result), 2);
    assert!(stderr(&result).contains("nope"), "names the bad task: {}", stderr(&result));

    let result = pglab(&["train", "--set", "lr=banana", "--out", out_str]);
    assert_eq!(code(&result), 2);

    let result = pglab(&["train", "--set", "gate_gamma=8", "--out", out_str]);
    assert_eq!(code(&result), 2, "gate threshold must stay below the group size");

    assert_eq!(code(&pglab(&["gradcheck", "--presets", "bogus"])), 2);
    assert_eq!(code(&pglab(&["passk", "--n", "3", "--c", "5"])), 2, "more hits than samples");
    assert_eq!(code(&pglab(&["passk", "--k", "1"])), 2, "needs --scores or --n/--c");

    // Enumeration refuses spaces too large to sum exactly rather than grinding forever.
    let result = pglab(&["enumcheck", "--max-len", "14"]);
    assert_eq!(code(&result), 2);
    assert!(stderr(&result).contains("refuses"), "explains the refusal: {}", stderr(&result));
}

#[test]
fn verification_commands_exit_0_on_success_and_1_on_failure() {
    let ok = pglab(&["gradcheck", "--presets", "sft,grpo", "--trials", "3"]);
    assert_eq!(code(&ok), 0, "stderr: {}", stderr(&ok));
    assert!(stdout(&ok).contains("ok"));

    // An absurd tolerance turns the same healthy comparison into a reported failure.
    let failing = pglab(&["gradcheck", "--presets", "grpo", "--trials", "3", "--tolerance", "1e-18"]);
    assert_eq!(code(&failing), 1);
    assert!(stdout(&failing).contains("FAIL"));

    let ok = pglab(&["enumcheck", "--mu", "0,0.5", "--lambda", "0,0.1"]);
    assert_eq!(code(&ok), 0, "stderr: {}", stderr(&ok));
}

#[test]
fn pass_k_estimates_print_exactly() {
    let out = pglab(&["passk", "--n", "8", "--c", "3", "--k", "1,4"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("0.375"), "pass@1 = 3/8: {text}");
}

// -----------------------------------------------------------------------------------------
// Training artifacts and config layering.
// -----------------------------------------------------------------------------------------

fn assert_run_artifacts(dir: &Path, final_step: &str) {
    for name in ["config.echo", "metrics.jsonl", "steps.jsonl", "eval.jsonl", "pool.json"] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    assert!(dir.join("grids/accuracy.csv").is_file(), "missing accuracy grid csv");
    assert!(dir.join("grids/accuracy.pgm").is_file(), "missing accuracy grid image");
    let ck = dir.join("checkpoints").join(format!("step_{final_step}.ck"));
    assert!(ck.is_file(), "missing final checkpoint {}", ck.display());
}

#[test]
fn train_writes_the_full_artifact_set() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let result = pglab(&[
        "train",
        "--task",
        "modadd",
        "--steps",
        "6",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&result), 0, "stderr: {}", stderr(&result));
    assert_run_artifacts(&out_dir, "000006");

    // The header echoes the resolved config, including derived cadences.
    let text = stdout(&result);
    assert!(text.contains("task=modadd"));
    assert!(text.contains("eval_every=1"), "6 steps derive an every-step cadence: {text}");
    assert!(text.contains("ckpt_every=6"));
}

#[test]
fn flags_and_set_overrides_beat_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "task=modadd\nsteps=8\nlr=0.02\neval_every=2\n").unwrap();
    let out_dir = tmp.path().join("run");
    let result = pglab(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "steps=4",
        "--seed",
        "9",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&result), 0, "stderr: {}", stderr(&result));

    let echo = std::fs::read_to_string(out_dir.join("config.echo")).unwrap();
    assert!(echo.contains("steps=4"), "--set wins over the file: {echo}");
    assert!(echo.contains("lr=0.02"), "file value survives where not overridden: {echo}");
    assert!(echo.contains("seed=9"), "flag applies: {echo}");
    assert!(echo.contains("eval_every=2"), "explicit cadence is not re-derived: {echo}");
    assert_run_artifacts(&out_dir, "000004");
}

#[test]
fn report_compares_two_runs_and_counts_exclusive_solves() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for (dir, seed) in dirs.iter().zip(["3", "3"]) {
        let result = pglab(&[
            "train",
            "--task",
            "modadd",
            "--steps",
            "6",
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&result), 0, "stderr: {}", stderr(&result));
    }
    let result = pglab(&[
        "report",
        dirs[0].to_str().unwrap(),
        dirs[1].to_str().unwrap(),
        "--k",
        "1,2",
    ]);
    assert_eq!(code(&result), 0, "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("pass@1"), "table shows pass@k columns: {text}");
    assert!(text.contains("exclusive"), "exclusive-solve section present: {text}");
}

#[test]
fn gate_ablation_reports_per_threshold_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let result = pglab(&[
        "ablate-gate",
        "--task",
        "modadd",
        "--steps",
        "6",
        "--seed",
        "1",
        "--gamma",
        "0,1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&result), 0, "stderr: {}", stderr(&result));
    let text = stdout(&result);
    assert!(text.contains("gamma=0") && text.contains("gamma=1"), "both rows: {text}");
    assert!(text.contains("mean offline ratio"), "ratio column: {text}");
    assert!(out_dir.join("gamma_0/metrics.jsonl").is_file());
    assert!(out_dir.join("gamma_1/metrics.jsonl").is_file());
}
