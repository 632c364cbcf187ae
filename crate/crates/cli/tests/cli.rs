use std::fs;
use std::path::Path;
use std::process::Command;

use freekd_cli::report::{mean_std, RunFile, ABLATION_HEADER, SUMMARY_HEADER};

fn freekd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_freekd")).args(args).output().unwrap()
}

fn small(out: &Path, mode: &str) -> Vec<String> {
    [
        "--format", "sbm", "--sbm_nodes", "45", "--mode", mode, "--max_epochs", "6", "--batch_size", "16",
        "--views", "2", "--tokens", "4", "--token_percent", "20", "--cross_percent", "5", "--seeds", "0,1",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

fn run_small(out: &Path, mode: &str, extra: &[&str]) -> std::process::Output {
    let mut args: Vec<String> = vec!["run".into()];
    args.extend(small(out, mode));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    freekd(&refs)
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(freekd(&["run", "--format", "sbm", "--mode", "nope"]).status.code(), Some(2));
    assert_eq!(freekd(&["run", "--format", "sbm", "--seeds", ""]).status.code(), Some(2));
    assert_eq!(freekd(&["run", "--bogus", "1"]).status.code(), Some(2));
    let missing = dir.path().join("missing");
    assert_eq!(freekd(&["run", "--dataset", missing.to_str().unwrap()]).status.code(), Some(3));
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "format = sbm\nmu = lots\n").unwrap();
    assert_eq!(freekd(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_fails_on_corruption() {
    let ok = freekd(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.lines().filter(|l| l.ends_with(" ok")).count() >= 12, "{text}");
    assert!(text.contains("max relative error"));
    let bad = freekd(&["gradcheck", "--corrupt", "structure-kd"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn repeated_runs_write_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run_small(out, "freekd-prompt", &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = fs::read(a.join("freekd-prompt/summary.csv")).unwrap();
    let csv_b = fs::read(b.join("freekd-prompt/summary.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(String::from_utf8(csv_a).unwrap().starts_with(SUMMARY_HEADER));
}

#[test]
fn summary_is_recomputable_from_run_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_small(dir.path(), "freekd", &[]).status.success());
    let mode_dir = dir.path().join("freekd");
    let runs: Vec<RunFile> = ["seed-0.json", "seed-1.json"]
        .iter()
        .map(|f| serde_json::from_str(&fs::read_to_string(mode_dir.join(f)).unwrap()).unwrap())
        .collect();
    assert_eq!(runs[0].config["mode"], "freekd");
    let csv = fs::read_to_string(mode_dir.join("summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (k, row) in rows.iter().enumerate() {
        let f1: Vec<f64> = runs.iter().map(|r| r.report.results[k].test_f1).collect();
        let (mean, std) = mean_std(&f1);
        assert_eq!(row[5].parse::<f64>().unwrap(), mean);
        assert_eq!(row[6].parse::<f64>().unwrap(), std);
    }
    // epochs are recorded in order
    for r in &runs {
        let epochs: Vec<usize> = r.report.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, (0..epochs.len()).collect::<Vec<_>>());
    }
}

#[test]
fn zero_weights_reproduce_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_small(dir.path(), "freekd", &["--mu", "0", "--rho", "0"]).status.success());
    assert!(run_small(dir.path(), "single", &[]).status.success());
    for seed in 0..2 {
        let read = |mode: &str| -> RunFile {
            serde_json::from_str(&fs::read_to_string(dir.path().join(mode).join(format!("seed-{seed}.json"))).unwrap())
                .unwrap()
        };
        assert_eq!(read("freekd").report.results, read("single").report.results);
    }
}

#[test]
fn ablation_table_has_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["ablate".into()];
    args.extend(small(dir.path(), "freekd"));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = freekd(&refs);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(ABLATION_HEADER));
    let modes: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        modes,
        [
            "single",
            "freekd-wo-judge",
            "freekd-loss",
            "freekd-node-only",
            "freekd-all-neighbors",
            "freekd-all-structures",
            "freekd"
        ]
    );
}

#[test]
fn embeddings_export_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["export-embeddings".into()];
    args.extend(small(dir.path(), "freekd"));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = freekd(&refs);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let emb_dir = dir.path().join("embeddings");
    let first = fs::read_to_string(emb_dir.join("model-0.csv")).unwrap();
    assert_eq!(first.lines().count(), 46);
    assert_eq!(first.lines().nth(1).unwrap().split(',').count(), 65);

    // exporting from the saved checkpoints gives the same file
    let again = dir.path().join("again");
    let mut args: Vec<String> = vec!["export-embeddings".into()];
    args.extend(small(&again, "freekd"));
    for k in 0..2 {
        args.push("--checkpoint".into());
        args.push(emb_dir.join(format!("model-{k}.checkpoint.json")).display().to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(freekd(&refs).status.success());
    assert_eq!(fs::read_to_string(again.join("embeddings/model-0.csv")).unwrap(), first);
}
