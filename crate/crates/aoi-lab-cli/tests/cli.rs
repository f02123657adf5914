//! End-to-end checks of the installed binary: plumbing between subcommands,
//! documented exit codes, and byte-level reproducibility of result tables.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aoi-lab"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

/// The reproducibility contract excludes the trailing wall-clock column.
fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(exit_code(&mut bin()), 2);
}

#[test]
fn unknown_solver_and_missing_files_use_documented_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        exit_code(bin().args(["bench", "--solver", "bogus", "--out"]).arg(&out)),
        2
    );
    assert_eq!(exit_code(bin().args(["eval", "--out"]).arg(&out)), 2);
    assert_eq!(
        exit_code(
            bin()
                .args(["eval", "--checkpoint", "/definitely/not/here.ckpt", "--out"])
                .arg(&out)
        ),
        4
    );
    assert_eq!(
        exit_code(
            bin()
                .args(["plotdata", "--input", "/definitely/not/here.csv", "--out"])
                .arg(&out)
        ),
        4
    );
    assert_eq!(
        exit_code(bin().args(["bench", "--omega", "0.5", "--out"]).arg(&out)),
        2
    );
}

#[test]
fn gen_then_exact_solve_prints_the_breakdown() {
    let dir = TempDir::new().unwrap();
    let scen = dir.path().join("scen");
    run_ok(
        bin()
            .args(["gen", "--seed", "7", "--m", "4", "--l-sub", "2", "--instances", "2", "--out"])
            .arg(&scen),
    );
    let file = scen.join("scenario-m04-g20-p0-i000.json");
    assert!(file.exists());

    let out = run_ok(
        bin()
            .args(["solve", "--solver", "exact", "--l-sub", "2", "--scenario"])
            .arg(&file)
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("solver=exact"), "stdout: {stdout}");
    assert!(stdout.contains("total AoI"), "stdout: {stdout}");
    assert!(stdout.contains("order:"), "stdout: {stdout}");
}

#[test]
fn bench_tables_are_reproducible_and_feed_plotdata() {
    let dir = TempDir::new().unwrap();
    let args = |out: &Path| {
        let mut c = bin();
        c.args([
            "bench", "--seed", "11", "--m", "3", "--m", "4", "--l-sub", "2", "--instances", "2",
            "--solver", "nn", "--solver", "random", "--out",
        ])
        .arg(out);
        c.env("AOI_LAB_THREADS", "2");
        c
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&mut args(&out_a));
    run_ok(&mut args(&out_b));
    let a = std::fs::read_to_string(out_a.join("bench.csv")).unwrap();
    let b = std::fs::read_to_string(out_b.join("bench.csv")).unwrap();
    assert_eq!(strip_timing(&a), strip_timing(&b));
    // Two cluster counts × 2 instances × 2 solvers, plus the header.
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 2);

    let plots = dir.path().join("plots");
    run_ok(
        bin()
            .args(["plotdata", "--axis", "m", "--input"])
            .arg(out_a.join("bench.csv"))
            .arg("--out")
            .arg(&plots),
    );
    let nn = std::fs::read_to_string(plots.join("plot-m-nn.csv")).unwrap();
    let mut lines = nn.lines();
    assert_eq!(lines.next(), Some("x,mean_total_aoi_s"));
    assert_eq!(nn.lines().count(), 3); // header + x=3 + x=4

    assert_eq!(
        exit_code(
            bin()
                .args(["plotdata", "--axis", "zzz", "--input"])
                .arg(out_a.join("bench.csv"))
                .arg("--out")
                .arg(&plots)
        ),
        2
    );
}

#[test]
fn train_eval_solve_round_trip() {
    let dir = TempDir::new().unwrap();
    let train_dir = dir.path().join("train");
    let out = run_ok(bin().args([
        "train",
        "--seed",
        "3",
        "--m",
        "4",
        "--l-sub",
        "2",
        "--epochs",
        "1",
        "--steps-per-epoch",
        "1",
        "--batch-size",
        "2",
        "--out",
        train_dir.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("training finished"), "stdout: {stdout}");
    let checkpoint = train_dir.join("policy-final.ckpt");
    assert!(checkpoint.exists());
    assert!(train_dir.join("metrics.csv").exists());

    let eval_dir = dir.path().join("eval");
    run_ok(
        bin()
            .args([
                "eval", "--seed", "5", "--m", "4", "--l-sub", "2", "--instances", "2", "--width",
                "4", "--checkpoint",
            ])
            .arg(&checkpoint)
            .arg("--out")
            .arg(&eval_dir),
    );
    let table = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3); // header + instances × decoders
    assert!(table.contains("twa-greedy") && table.contains("twa-beam"));

    // Grid-resolution contradiction between checkpoint and requested sweep.
    assert_eq!(
        exit_code(
            bin()
                .args(["eval", "--m", "4", "--l-sub", "5", "--checkpoint"])
                .arg(&checkpoint)
                .arg("--out")
                .arg(&eval_dir)
        ),
        2
    );

    let out = run_ok(
        bin()
            .args([
                "solve", "--solver", "twa-greedy", "--m", "4", "--l-sub", "2", "--checkpoint",
            ])
            .arg(&checkpoint)
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("solver=twa-greedy"), "stdout: {stdout}");
}

#[test]
fn thread_cap_is_validated() {
    let dir = TempDir::new().unwrap();
    let mut ok = bin();
    ok.args(["gen", "--m", "2", "--l-sub", "2", "--instances", "1", "--out"])
        .arg(dir.path())
        .env("AOI_LAB_THREADS", "1");
    run_ok(&mut ok);

    let mut bad = bin();
    bad.args(["gen", "--m", "2", "--l-sub", "2", "--instances", "1", "--out"])
        .arg(dir.path())
        .env("AOI_LAB_THREADS", "many");
    assert_eq!(exit_code(&mut bad), 2);
}
