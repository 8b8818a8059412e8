//! End-to-end tests of the command-line binary: every subcommand, exit-code
//! contracts, manifest replay, and agreement between the file-based and
//! in-memory data paths.

use std::path::{Path, PathBuf};
use std::process::Command;

fn lvat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lvat"))
}

/// Fresh scratch directory unique to this test process.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lvat-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Output {
    let out = lvat().args(args).output().expect("spawning the binary");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Common flags for a fast training run on the synthetic corpus.
const TINY: &[&str] = &[
    "--labels",
    "50",
    "--epochs",
    "1",
    "--decay-start",
    "1",
    "--eval-every",
    "1",
    "--widths",
    "784,16,10",
    "--synth-train",
    "300",
    "--synth-test",
    "60",
];

/// Metrics CSV rows with the wall-clock column dropped.
fn metrics_without_wall(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            fields[..fields.len() - 1].join(",")
        })
        .collect()
}

#[test]
fn presets_table_prints_the_published_rows() {
    let out = run(&["presets"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let rows: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(rows.len(), 1 + 7 * 3, "7 variants x 3 label counts plus header");
    for expected in [
        "ladder,50,1504,16.15,0.0381,0,0,0,1,0.3,0.000001,1,linf",
        "ladder,100,1966,14.2,0.1563,0,0,0,1,0.3,0.000001,1,linf",
        "ladder,1000,3883,12.35,0.0539,0,0,0,1,0.3,0.000001,1,linf",
        "vat,50,0,0,0,5,0,0,1,0,0.000001,1,linf",
        "vat,1000,0,0,0,2.5,0,0,1,0,0.000001,1,linf",
        "lvac,100,1966,14.2,0.1563,0.0731,0,0,1,0.3,0.000001,1,linf",
        "lvan,100,1966,14.2,0.1563,0.0731,0,0,1,0.3,0.000001,1,linf",
        "lvac-lw,50,1000,10,0.1,1,0.1,0.001,1,0.3,0.000001,1,linf",
        "lvan-lw,50,1504,16.15,0.0381,0.0733,0.3897,0.08372,1,0.3,0.000001,1,linf",
        "lvan-lw,100,1966,14.2,0.1563,0.0731,0.4822,0.001402,1,0.3,0.000001,1,linf",
        "lvan-lw,1000,3883,12.35,0.0539,2.5206,0.0143,0.0006002,1,0.3,0.000001,1,linf",
        "supervised,100,0,0,0,0,0,0,1,0,0.000001,1,linf",
    ] {
        assert!(rows.contains(&expected), "missing preset row: {expected}");
    }
}

#[test]
fn training_from_written_idx_files_matches_the_in_memory_corpus() {
    let dir = scratch("idx-chain");
    let data = dir.join("data");
    let out = run(&[
        "synth-data",
        "--out-dir",
        data.to_str().unwrap(),
        "--n-train",
        "300",
        "--n-test",
        "60",
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        assert!(data.join(name).exists(), "missing {name}");
    }

    let from_files = dir.join("from-files");
    let mut args = vec!["train", "--variant", "supervised"];
    args.extend_from_slice(TINY);
    let file_args: Vec<&str> = args
        .iter()
        .copied()
        .filter(|a| !a.starts_with("--synth") && *a != "300" && *a != "60")
        .collect();
    let out = run(&[
        file_args.as_slice(),
        &["--data-dir", data.to_str().unwrap(), "--out-dir", from_files.to_str().unwrap()],
    ]
    .concat());
    assert_eq!(out.code, 0, "{}", out.stderr);

    let in_memory = dir.join("in-memory");
    let out = run(&[args.as_slice(), &["--out-dir", in_memory.to_str().unwrap()]].concat());
    assert_eq!(out.code, 0, "{}", out.stderr);

    assert_eq!(
        metrics_without_wall(&from_files.join("metrics.csv")),
        metrics_without_wall(&in_memory.join("metrics.csv")),
        "IDX round trip must not change training"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn manifest_replay_reproduces_the_run() {
    let dir = scratch("replay");
    let first = dir.join("first");
    let mut args = vec!["train", "--variant", "ladder", "--seed", "3"];
    args.extend_from_slice(TINY);
    let out = run(&[args.as_slice(), &["--out-dir", first.to_str().unwrap()]].concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let manifest = first.join("manifest.toml");
    assert!(manifest.exists());

    let second = dir.join("second");
    let out = run(&[
        "train",
        "--config",
        manifest.to_str().unwrap(),
        "--out-dir",
        second.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(
        metrics_without_wall(&first.join("metrics.csv")),
        metrics_without_wall(&second.join("metrics.csv")),
        "a run replayed from its own manifest must reproduce its metrics"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_attack_and_introspect_agree_with_training_output() {
    let dir = scratch("inspect");
    let rundir = dir.join("run");
    let mut args = vec!["train", "--variant", "supervised"];
    args.extend_from_slice(TINY);
    let out = run(&[args.as_slice(), &["--out-dir", rundir.to_str().unwrap()]].concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let ckpt = rundir.join("model.ckpt");
    let data_args = ["--synth-train", "300", "--synth-test", "60"];

    // Clean error from `eval` equals the final training record's.
    let out = run(&[&["eval", "--checkpoint", ckpt.to_str().unwrap()], &data_args[..]].concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let eval_aer: f64 = out
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("clean_aer "))
        .expect("clean_aer line")
        .parse()
        .unwrap();
    let metrics = std::fs::read_to_string(rundir.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let recorded: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(eval_aer, recorded);

    // Zero-radius attacks equal the clean error under every norm.
    let out = run(&[
        &[
            "attack",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--eps-l1",
            "0",
            "--eps-l2",
            "0",
            "--eps-linf",
            "0",
        ],
        &data_args[..],
    ]
    .concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let mut clean_row = None;
    let mut attacked = Vec::new();
    for line in out.stdout.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == "clean" {
            clean_row = Some(fields[2].parse::<f64>().unwrap());
        } else {
            attacked.push(fields[2].parse::<f64>().unwrap());
        }
    }
    let clean = clean_row.expect("clean row");
    assert_eq!(attacked.len(), 3);
    assert!(attacked.iter().all(|&v| v == clean), "{attacked:?} vs clean {clean}");

    // Smoothness is reported and non-negative; repeated calls agree.
    let call = || {
        let out = run(&[
            &["introspect", "--checkpoint", ckpt.to_str().unwrap()],
            &data_args[..],
        ]
        .concat());
        assert_eq!(out.code, 0, "{}", out.stderr);
        out.stdout
            .lines()
            .find_map(|l| l.strip_prefix("smoothness "))
            .expect("smoothness line")
            .parse::<f64>()
            .unwrap()
    };
    let first = call();
    assert!(first >= 0.0);
    assert_eq!(first, call(), "introspection must be deterministic");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn matrix_writes_per_run_rows_and_aggregates() {
    let dir = scratch("matrix");
    let out_dir = dir.join("mx");
    let out = run(&[
        &[
            "matrix",
            "--variants",
            "supervised",
            "--labels-list",
            "50",
            "--seeds",
            "1,2",
        ],
        TINY,
        &["--out-dir", out_dir.to_str().unwrap()],
    ]
    .concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let runs = std::fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3, "header + one row per seed:\n{runs}");
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).expect("one aggregate row");
    assert!(row.starts_with("supervised,50,2,0,"), "{row}");
    assert!(out_dir.join("manifest.toml").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn usage_errors_exit_2_and_missing_data_exits_3() {
    let out = run(&["train", "--variant", "bogus"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("bogus"), "{}", out.stderr);

    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.code, 2);

    let dir = scratch("errors");
    let config = dir.join("bad.toml");
    std::fs::write(&config, "variant = \"ladder\"\nmystery_knob = 3\n").unwrap();
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("mystery_knob"), "{}", out.stderr);

    let out = run(&["eval", "--checkpoint", dir.join("none.ckpt").to_str().unwrap()]);
    assert_eq!(out.code, 3);
    assert!(out.stderr.contains("none.ckpt"), "{}", out.stderr);

    let out = run(&[
        "train",
        "--variant",
        "ladder",
        "--data-dir",
        dir.join("no-data").to_str().unwrap(),
    ]);
    assert_eq!(out.code, 3);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn preset_overrides_land_in_the_manifest() {
    let dir = scratch("override");
    let rundir = dir.join("run");
    let mut args = vec!["train", "--variant", "lvan-lw", "--epsilon0", "0.2"];
    args.extend_from_slice(TINY);
    let out = run(&[args.as_slice(), &["--out-dir", rundir.to_str().unwrap()]].concat());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let manifest = std::fs::read_to_string(rundir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("epsilon0 = 0.2"), "{manifest}");
    assert!(manifest.contains("epsilon1 = 0.3897"), "{manifest}");
    assert!(manifest.contains("lambda0 = 1504.0"), "{manifest}");
    let _ = std::fs::remove_dir_all(&dir);
}
