use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use freekd_core::checks::{run_gradient_suite, CaseResult, GRAD_TOLERANCE};
use freekd_core::dataset::load_dataset;
use freekd_core::gnn::{Checkpoint, GnnModel, GraphView};
use freekd_core::graph::Graph;
use freekd_core::synthetic::sbm;
use freekd_core::train::{run, Mode, TrainReport};

use crate::config::{DatasetSource, ExperimentConfig, SplitRule};
use crate::error::CliError;
use crate::report::{ablation_csv, ablation_text, summarize, summary_csv, write_atomic, ModelSummary, RunFile, RUN_SCHEMA};

/// Loads the dataset and applies the split rule and feature normalization.
pub fn load_graph(cfg: &ExperimentConfig) -> Result<Graph, CliError> {
    let (graph, linqs) = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => (sbm(spec)?, false),
        DatasetSource::File { path, format } => (
            load_dataset(path, *format)?,
            *format == freekd_core::dataset::DatasetFormat::Linqs,
        ),
    };
    let graph = match cfg.split {
        SplitRule::File if !graph.has_splits() => {
            return Err(CliError::Data("split = file but the dataset has no split files".into()))
        }
        SplitRule::File => graph,
        SplitRule::Auto if graph.has_splits() => graph,
        SplitRule::Auto if linqs => graph.split_fixed(cfg.split_val, cfg.split_test, cfg.split_seed)?,
        SplitRule::Auto => graph.split_masks(cfg.split_ratios, cfg.split_seed)?,
        SplitRule::Stratified(r) => graph.split_masks(r, cfg.split_seed)?,
        SplitRule::Fixed { val, test } => graph.split_fixed(val, test, cfg.split_seed)?,
    };
    Ok(if cfg.normalize_features {
        graph.row_normalized()
    } else {
        graph
    })
}

/// Runs every seed of `cfg` and writes `config.txt`, `seed-<n>.json` and
/// `summary.csv` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, graph: &Graph, dir: &Path) -> Result<Vec<TrainReport>, CliError> {
    write_atomic(&dir.join("config.txt"), &cfg.raw.to_text())?;
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = run(graph, &cfg.train, seed)?;
        let report = outcome.report;
        let f1: Vec<String> = report.results.iter().map(|r| format!("{:.4}", r.test_f1)).collect();
        eprintln!(
            "{} seed {seed}: {} epochs, test F1 [{}], {:.1}s",
            cfg.train.mode,
            report.epochs.len(),
            f1.join(", "),
            report.wall_time_secs
        );
        let file = RunFile {
            schema: RUN_SCHEMA.to_string(),
            config: cfg.raw.to_map(),
            report,
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&dir.join(format!("seed-{seed}.json")), &json)?;
        reports.push(file.report);
    }
    write_atomic(&dir.join("summary.csv"), &summary_csv(cfg.train.mode, &summarize(&reports)))?;
    Ok(reports)
}

/// The `run` command: results go to `<out>/<mode>/`.
pub fn run_command(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let graph = load_graph(cfg)?;
    let dir = cfg.out.join(cfg.train.mode.name());
    let reports = run_experiment(cfg, &graph, &dir)?;
    for s in summarize(&reports) {
        println!(
            "model {} ({}): test F1 {:.2} ± {:.2} over {} runs",
            s.model,
            s.architecture,
            100.0 * s.test_f1.0,
            100.0 * s.test_f1.1,
            s.runs
        );
    }
    Ok(dir.join("summary.csv"))
}

/// Reconfigures `cfg` for another mode, keeping everything else.
pub fn with_mode(cfg: &ExperimentConfig, mode: Mode) -> Result<ExperimentConfig, CliError> {
    let mut raw = cfg.raw.clone();
    raw.set("mode", mode.name())?;
    ExperimentConfig::from_raw(&raw)
}

/// The `ablate` command: every ablation mode under the same seeds, with
/// runs in `<out>/ablation/<mode>/` and the table in `<out>/ablation.csv`.
pub fn ablate_command(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<(Mode, Vec<ModelSummary>)>), CliError> {
    if cfg.train.models.len() != 2 {
        return Err(CliError::Config("the ablation compares pairs; configure exactly 2 models".into()));
    }
    let graph = load_graph(cfg)?;
    let mut rows = Vec::with_capacity(Mode::ABLATION.len());
    for mode in Mode::ABLATION {
        let c = with_mode(cfg, mode)?;
        let reports = run_experiment(&c, &graph, &cfg.out.join("ablation").join(mode.name()))?;
        rows.push((mode, summarize(&reports)));
    }
    let path = cfg.out.join("ablation.csv");
    write_atomic(&path, &ablation_csv(&rows))?;
    print!("{}", ablation_text(&rows));
    Ok((path, rows))
}

/// Runs the gradient suite and prints one line per check.
pub fn gradcheck_command(corrupt: Option<&str>) -> Result<Vec<CaseResult>, CliError> {
    let results = run_gradient_suite(corrupt)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        worst = worst.max(r.check.max_rel_error);
        println!(
            "{:<24} {:>5} entries  max rel err {:.3e}  {}",
            r.name,
            r.check.entries,
            r.check.max_rel_error,
            if r.passes() { "ok" } else { "FAIL" }
        );
    }
    println!("{} checks, max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:e})", results.len());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passes()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn embeddings_csv(emb: &freekd_tensor::Matrix) -> String {
    let mut out = String::from("node");
    for k in 0..emb.cols() {
        let _ = write!(out, ",h{k}");
    }
    out.push('\n');
    for r in 0..emb.rows() {
        let _ = write!(out, "{r}");
        for v in emb.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// The `export-embeddings` command. Models come from checkpoint files when
/// given, otherwise from training with `seed`. Writes one CSV per model
/// (and a checkpoint per trained model) into `<out>/embeddings/`.
pub fn export_command(cfg: &ExperimentConfig, seed: u64, checkpoints: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let graph = load_graph(cfg)?;
    let dir = cfg.out.join("embeddings");
    let mut models = Vec::new();
    if checkpoints.is_empty() {
        let outcome = run(&graph, &cfg.train, seed)?;
        for (k, m) in outcome.models.iter().enumerate() {
            let json = serde_json::to_string(&m.to_checkpoint()).map_err(|e| CliError::Internal(e.to_string()))?;
            write_atomic(&dir.join(format!("model-{k}.checkpoint.json")), &json)?;
        }
        models = outcome.models;
    } else {
        for p in checkpoints {
            let model = GnnModel::from_checkpoint(&Checkpoint::load(p)?)?;
            if model.input_dim() != graph.feature_dim() || model.num_classes() != graph.num_classes() {
                return Err(CliError::Data(format!("checkpoint {} does not fit the dataset", p.display())));
            }
            models.push(model);
        }
    }
    let view = GraphView::new(&graph);
    let mut written = Vec::new();
    for (k, m) in models.iter_mut().enumerate() {
        let (_, emb) = m.predict(&view, None)?;
        let path = dir.join(format!("model-{k}.csv"));
        write_atomic(&path, &embeddings_csv(&emb))?;
        written.push(path);
    }
    Ok(written)
}
