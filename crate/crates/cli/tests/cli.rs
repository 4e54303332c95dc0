use std::path::Path;
use std::process::{Command, Output};

fn seqcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcomp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY: &[&str] = &[
    "--t_in", "16", "--t_out", "4", "--patch_len", "4", "--stride", "4", "--k_complementors", "2", "--embed_dim",
    "8", "--heads", "2", "--d_ff", "8", "--batch_size", "8", "--epochs", "2", "--max_batches_per_epoch", "3",
    "--eval_stride", "4",
];

fn synth(dir: &Path) -> String {
    let csv = dir.join("data.csv");
    let out = seqcomp(&["synth", "--out", csv.to_str().unwrap(), "--rows", "300", "--channels", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    format!(r#"{{"kind":"csv","path":"{}"}}"#, csv.display())
}

fn train_tiny(dir: &Path, runs: &str) -> std::path::PathBuf {
    let data = synth(dir);
    let run = dir.join("run");
    let mut args = vec!["train", "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--runs", runs, "--data", &data]);
    let out = seqcomp(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run
}

#[test]
fn synth_writes_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let text = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 3);
}

#[test]
fn train_then_eval_reproduces_validation_mse() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "1");
    for f in ["record.json", "checkpoint_0.txt", "metrics.csv", "dynamics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    let best = record["runs"][0]["best_val_mse"].as_f64().unwrap();

    let ck = run.join("checkpoint_0.txt");
    let out = seqcomp(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "val"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["mse"].as_f64().unwrap() - best).abs() < 1e-10);

    let dump = dir.path().join("z.txt");
    let out = seqcomp(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dump-repr", dump.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    // (16 - 4) / 4 + 2 = 5 patch tokens plus 2 complementors, width 8
    assert!(std::fs::read_to_string(dump).unwrap().starts_with("7 8\n"));
}

#[test]
fn analyze_over_three_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "3");
    let out_dir = dir.path().join("analysis");
    let cks: Vec<String> = (0..3).map(|i| run.join(format!("checkpoint_{i}.txt")).display().to_string()).collect();
    let out = seqcomp(&[
        "analyze", "--checkpoint", &cks[0], "--checkpoint", &cks[1], "--checkpoint", &cks[2], "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let scatter = std::fs::read_to_string(out_dir.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("entropy vs mse: r ="));
}

#[test]
fn unknown_key_and_invalid_values_exit_1() {
    let out = seqcomp(&["train", "--no_such_key", "3"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(code(&seqcomp(&["train", "--heads", "3"])), 1);
    assert_eq!(code(&seqcomp(&["train", "--k_complementors"])), 1);
    assert_eq!(code(&seqcomp(&["frobnicate"])), 1);
    assert_eq!(code(&seqcomp(&["eval", "--checkpoint", "/nonexistent/ck.txt"])), 1);
    assert_eq!(code(&seqcomp(&["--help"])), 0);
}

#[test]
fn compare_direction_and_degenerate_input() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    std::fs::write(&a, "1 2 3 4 5 6 7 8").unwrap();
    std::fs::write(&b, "2,3,4,5,6,7,8,9").unwrap();
    let out = seqcomp(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["p_value"].as_f64().unwrap() - 2.0 / 256.0).abs() < 1e-12);

    let out = seqcomp(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_one_seed() {
    let out = seqcomp(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}
