use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gms(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gms"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("gms runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gms(dir, args);
    assert!(
        out.status.success(),
        "gms {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn manifest(path: &Path) -> Value {
    let mut name = path.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    serde_json::from_slice(&std::fs::read(path.with_file_name(name)).unwrap()).unwrap()
}

/// A small dataset and an untrained checkpoint shared by several tests.
fn fixture(dir: &Path) {
    ok(
        dir,
        &[
            "daydream",
            "--out",
            "d.jsonl",
            "--runs",
            "2",
            "--generations",
            "5",
            "--pop",
            "10",
            "--seed",
            "4",
        ],
    );
    ok(
        dir,
        &[
            "train", "--data", "d.jsonl", "--out", "m.gms", "--epochs", "0", "--T", "10",
        ],
    );
}

#[test]
fn daydream_writes_exactly_generations_times_population() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "daydream",
            "--out",
            "d.jsonl",
            "--runs",
            "1",
            "--generations",
            "1",
            "--pop",
            "2",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2);
    // the class histogram is printed
    assert!(String::from_utf8_lossy(&out.stdout).contains('%'));
}

#[test]
fn daydream_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl.gz", "b.jsonl.gz"] {
        ok(
            dir.path(),
            &[
                "daydream",
                "--out",
                name,
                "--runs",
                "2",
                "--generations",
                "3",
                "--pop",
                "6",
                "--seed",
                "9",
            ],
        );
    }
    let a = std::fs::read(dir.path().join("a.jsonl.gz")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl.gz")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifests_reconstruct_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "daydream",
        "--out",
        "d.jsonl",
        "--runs",
        "1",
        "--generations",
        "2",
        "--pop",
        "4",
        "--seed",
        "5",
    ];
    ok(dir.path(), &args);
    let m = manifest(&dir.path().join("d.jsonl"));
    assert_eq!(m["command"], "daydream");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["params"]["pop"], 4);
    assert_eq!(m["params"]["lambda"], 1.0);
    assert_eq!(m["command_line"], format!("gms {}", args.join(" ")));
    assert!(m["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
    assert!(m["started_at"].is_string() && m["finished_at"].is_string());

    // replaying the recorded argv gives the same artifact
    let replay: Vec<String> = m["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().replace("d.jsonl", "e.jsonl"))
        .collect();
    ok(dir.path(), &replay.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        std::fs::read(dir.path().join("d.jsonl")).unwrap(),
        std::fs::read(dir.path().join("e.jsonl")).unwrap()
    );
}

#[test]
fn zero_epochs_saves_initial_weights_and_loss_rows_match_epochs() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let loss = std::fs::read_to_string(dir.path().join("m.gms.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1);

    ok(
        dir.path(),
        &[
            "train", "--data", "d.jsonl", "--out", "z.gms", "--epochs", "0", "--T", "10",
        ],
    );
    assert_eq!(
        std::fs::read(dir.path().join("m.gms")).unwrap(),
        std::fs::read(dir.path().join("z.gms")).unwrap(),
        "training is seeded"
    );

    ok(
        dir.path(),
        &[
            "train", "--data", "d.jsonl", "--out", "t.gms", "--epochs", "2", "--T", "10",
        ],
    );
    let loss = std::fs::read_to_string(dir.path().join("t.gms.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2);
    let m = manifest(&dir.path().join("t.gms"));
    assert_eq!(m["summary"]["epoch_losses"].as_array().unwrap().len(), 2);
}

#[test]
fn sampling_is_reproducible_and_validates_the_class() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let args = [
        "sample",
        "--ckpt",
        "m.gms",
        "--capacity",
        "240",
        "--count",
        "5",
        "--seed",
        "3",
    ];
    let a: Value = serde_json::from_slice(&ok(dir.path(), &args).stdout).unwrap();
    let b: Value = serde_json::from_slice(&ok(dir.path(), &args).stdout).unwrap();
    assert_eq!(a["decisions"], b["decisions"]);
    assert_eq!(a["decisions"].as_array().unwrap().len(), 5);

    let with: Value = serde_json::from_slice(
        &ok(
            dir.path(),
            &[
                "sample",
                "--ckpt",
                "m.gms",
                "--capacity",
                "0",
                "--count",
                "2",
                "--w",
                "0",
                "--snapshots",
                "10,5,0",
            ],
        )
        .stdout,
    )
    .unwrap();
    let snaps = with["snapshots"].as_array().unwrap();
    assert_eq!(snaps.len(), 2);
    assert_eq!(snaps[0].as_array().unwrap().len(), 3);

    assert_eq!(
        code(&gms(dir.path(), &["sample", "--ckpt", "m.gms", "--capacity", "250"])),
        2
    );
    assert_eq!(
        code(&gms(dir.path(), &["sample", "--ckpt", "m.gms", "--capacity", "330"])),
        2
    );
    assert_eq!(
        code(&gms(
            dir.path(),
            &["sample", "--ckpt", "m.gms", "--capacity", "0", "--w", "-1"]
        )),
        2
    );
    assert_eq!(
        code(&gms(
            dir.path(),
            &["sample", "--ckpt", "missing.gms", "--capacity", "0"]
        )),
        1
    );
}

#[test]
fn bench_single_cell_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "bench",
            "--targets",
            "120",
            "--algos",
            "ga",
            "--repeats",
            "1",
            "--timeout",
            "5",
            "--out",
            "t.csv",
        ],
    );
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "algorithm,120");
    assert!(lines[1].starts_with("Genetic Algorithm,"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("t.csv")).unwrap().trim_end(),
        csv.trim_end()
    );
    assert_eq!(manifest(&dir.path().join("t.csv"))["command"], "bench");

    assert_eq!(code(&gms(dir.path(), &["bench", "--algos", "ga,hillclimb"])), 2);
    assert_eq!(code(&gms(dir.path(), &["bench", "--algos", "diffusion"])), 2);
    assert_eq!(code(&gms(dir.path(), &["bench", "--repeats", "0", "--algos", "ga"])), 2);
}

#[test]
fn eval_emits_table_shaped_output() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = ok(
        dir.path(),
        &[
            "eval",
            "--ckpt",
            "m.gms",
            "--data",
            "d.jsonl",
            "--n",
            "1",
            "--unguided",
            "--out",
            "ev",
        ],
    );
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "metric,0,30,60,90,120,150,180,240,270,300");
    let metrics: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(metrics, ["Accu(%)", "MSE", "DR(permille)", "FID"]);
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("ev.json")).unwrap()).unwrap();
    assert_eq!(report["guided"], false);
    assert_eq!(report["w"], 0.0);
    assert_eq!(report["rows"].as_array().unwrap().len(), 10);
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gms(dir.path(), &[])), 2);
    assert_eq!(code(&gms(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&gms(dir.path(), &["daydream"])), 2);
    let help = gms(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("T = 400"));
    assert_eq!(
        code(&gms(dir.path(), &["train", "--data", "absent.jsonl", "--out", "m.gms"])),
        1
    );
}

#[test]
fn serve_fails_when_the_port_is_taken() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = gms(dir.path(), &["serve", "--port", &port]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("serving on"));
}
