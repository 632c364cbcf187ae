//! Output files: per-run JSON, aggregate CSV and the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use freekd_core::gnn::Architecture;
use freekd_core::train::{Mode, TrainReport};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RUN_SCHEMA: &str = "freekd-run/1";
pub const SUMMARY_SCHEMA: &str = "freekd-summary/1";
pub const ABLATION_SCHEMA: &str = "freekd-ablation/1";

pub const SUMMARY_HEADER: &str =
    "schema,mode,model,architecture,runs,test_f1_mean,test_f1_std,best_val_f1_mean,best_val_f1_std,best_epoch_mean";
pub const ABLATION_HEADER: &str =
    "schema,mode,runs,model_0,test_f1_mean_0,test_f1_std_0,model_1,test_f1_mean_1,test_f1_std_1";

/// Content of one `seed-<n>.json` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub schema: String,
    /// Every configuration key with its resolved value.
    pub config: BTreeMap<String, String>,
    pub report: TrainReport,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub model: usize,
    pub architecture: Architecture,
    pub runs: usize,
    pub test_f1: (f64, f64),
    pub best_val_f1: (f64, f64),
    pub best_epoch_mean: f64,
}

/// Per-model statistics over the runs of one mode.
pub fn summarize(reports: &[TrainReport]) -> Vec<ModelSummary> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    (0..first.results.len())
        .map(|k| {
            let pick = |f: fn(&freekd_core::train::ModelResult) -> f64| -> Vec<f64> {
                reports.iter().map(|r| f(&r.results[k])).collect()
            };
            ModelSummary {
                model: k,
                architecture: first.results[k].architecture,
                runs: reports.len(),
                test_f1: mean_std(&pick(|r| r.test_f1)),
                best_val_f1: mean_std(&pick(|r| r.best_val_f1)),
                best_epoch_mean: mean_std(&pick(|r| r.best_epoch as f64)).0,
            }
        })
        .collect()
}

pub fn summary_csv(mode: Mode, rows: &[ModelSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{SUMMARY_SCHEMA},{mode},{},{},{},{},{},{},{},{}",
            r.model,
            r.architecture,
            r.runs,
            r.test_f1.0,
            r.test_f1.1,
            r.best_val_f1.0,
            r.best_val_f1.1,
            r.best_epoch_mean
        );
    }
    out
}

/// One row per mode; every mode must have exactly two models.
pub fn ablation_csv(rows: &[(Mode, Vec<ModelSummary>)]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for (mode, models) in rows {
        let runs = models.first().map_or(0, |m| m.runs);
        let _ = write!(out, "{ABLATION_SCHEMA},{mode},{runs}");
        for m in models {
            let _ = write!(out, ",{},{},{}", m.architecture, m.test_f1.0, m.test_f1.1);
        }
        out.push('\n');
    }
    out
}

/// Human-readable version of the ablation table.
pub fn ablation_text(rows: &[(Mode, Vec<ModelSummary>)]) -> String {
    let mut out = format!("{:<24} {:>18} {:>18}\n", "mode", "model 0 test F1", "model 1 test F1");
    for (mode, models) in rows {
        let _ = write!(out, "{:<24}", mode.name());
        for m in models {
            let cell = format!("{:.2} ± {:.2}", 100.0 * m.test_f1.0, 100.0 * m.test_f1.1);
            let _ = write!(out, " {cell:>18}");
        }
        out.push('\n');
    }
    out
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| CliError::output(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::output(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
