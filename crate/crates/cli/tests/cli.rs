use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
dataset = data/h.jsonl
out = runs/t
num_sequences = 30
history_len = 6
target_len = 3
steps = 30
clamp_start = 15
d = 6
epochs = 2
batch_size = 32
val_limit = 16
";

fn tppdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tppdiff"))
        .current_dir(dir)
        .args(["--config", "run.cfg"])
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tppdiff(dir, args);
    assert!(
        out.status.success(),
        "tppdiff {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = tppdiff(dir, args);
    assert!(!out.status.success(), "tppdiff {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_provenance() {
    let dir = workspace();
    let p = dir.path();
    let gen = ok(p, &["gen"]);
    assert!(gen.contains("sequences: 30") && gen.contains("K=5"), "{gen}");
    ok(p, &["train"]);
    let eval = ok(p, &["eval", "--set", "horizons=1,3"]);
    assert!(eval.contains("mean-interval"), "{eval}");

    let m = json(&p.join("runs/t/metrics.json"));
    assert_eq!(m["config"]["d"], 6);
    assert_eq!(m["config"]["horizons"], serde_json::json!([1, 3]));
    assert_eq!(m["dataset_sha256"].as_str().unwrap().len(), 64);
    assert!(m["model"]["mae_raw"].as_f64().unwrap() > 0.0);
    assert!(m["baselines"]["mean_interval"]["acc"].is_number());

    let per_step = std::fs::read_to_string(p.join("runs/t/per_step.csv")).unwrap();
    let lines: Vec<&str> = per_step.lines().collect();
    assert!(lines[0].starts_with("# {"));
    assert!(lines[1].starts_with("step,mae,acc"));
    assert_eq!(lines.len(), 2 + 3);
    let horizon = std::fs::read_to_string(p.join("runs/t/horizon.csv")).unwrap();
    let rows: Vec<&str> = horizon.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("3,"));

    let log = std::fs::read_to_string(p.join("runs/t/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    ok(p, &["sample"]);
    let samples = std::fs::read_to_string(p.join("runs/t/samples.jsonl")).unwrap();
    let meta = std::fs::read_to_string(p.join("runs/t/samples.meta.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), meta.lines().count());
    let first: Value = serde_json::from_str(meta.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first["clamp_start"], 15);
    assert_eq!(first["steps"], 30);
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = workspace();
    let p = dir.path();
    let err = fails(p, &["gen", "--set", "widht=3"]);
    assert!(err.contains("widht"), "{err}");
    let err = fails(p, &["train", "--set", "lr=fast"]);
    assert!(err.contains("invalid config"), "{err}");
    let err = fails(p, &["train"]);
    assert!(err.contains("tppdiff gen"), "{err}");
}

#[test]
fn checkpoint_mismatch_names_the_field() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["gen"]);
    ok(p, &["train", "--set", "epochs=1"]);
    let err = fails(p, &["eval", "--set", "d=8"]);
    assert!(err.contains("mark_dim"), "{err}");
    let err = fails(p, &["eval", "--set", "beta_n=0.05"]);
    assert!(err.contains("noise schedule"), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["gen"]);
    ok(p, &["train", "--set", "epochs=3", "--set", "out=full"]);
    ok(p, &["train", "--set", "epochs=1", "--set", "out=split"]);
    ok(
        p,
        &[
            "train",
            "--set",
            "epochs=3",
            "--set",
            "out=split",
            "--set",
            "resume=true",
        ],
    );
    for f in ["last.bin", "model.bin", "train_log.csv"] {
        assert_eq!(
            std::fs::read(p.join("full").join(f)).unwrap(),
            std::fs::read(p.join("split").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn single_cell_sweep_matches_direct_run() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["gen"]);
    ok(p, &["train"]);
    ok(p, &["eval"]);
    ok(p, &["sweep", "--grid", "n_blocks=1", "--set", "out=sw"]);
    let direct = json(&p.join("runs/t/metrics.json"));
    let csv = std::fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), direct["model"]["mae"].as_f64().unwrap());
    assert_eq!(row[2].parse::<f64>().unwrap(), direct["model"]["acc"].as_f64().unwrap());
    assert_eq!(row[3], "ok");
}

#[test]
fn failing_sweep_cell_is_recorded() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["gen"]);
    let err = fails(
        p,
        &[
            "sweep",
            "--grid",
            "history_len=6,400",
            "--set",
            "out=sw",
            "--set",
            "epochs=1",
        ],
    );
    assert!(err.contains("1 sweep cell(s) failed"), "{err}");
    let csv = std::fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",ok,"), "{}", rows[0]);
    assert!(rows[1].contains("error"), "{}", rows[1]);
}
