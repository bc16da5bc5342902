//! Per-trial results, aggregation, and report emission (CSV plus a
//! human-readable table). Aggregates are always recomputable from the
//! per-trial rows; the `report` subcommand re-parses and re-derives them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    /// Human description, e.g. `subjects 01-10`.
    pub detail: String,
    pub seed: u64,
    pub epochs: usize,
    pub runtime_s: f64,
    pub error_pct: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    /// Experiment label, e.g. `yaleb-k10-mlrdsc`.
    pub label: String,
    pub config_hash: String,
    pub outcomes: Vec<TrialOutcome>,
}

impl TrialReport {
    pub fn successes(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(|o| o.error_pct).collect()
    }

    pub fn failed_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.failure.is_some()).count()
    }

    pub fn mean_error(&self) -> Option<f64> {
        let ok = self.successes();
        if ok.is_empty() {
            return None;
        }
        Some(ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn median_error(&self) -> Option<f64> {
        let mut ok = self.successes();
        if ok.is_empty() {
            return None;
        }
        ok.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = ok.len() / 2;
        Some(if ok.len() % 2 == 1 {
            ok[mid]
        } else {
            (ok[mid - 1] + ok[mid]) / 2.0
        })
    }
}

fn csv_field(s: &str) -> String {
    // The schema never quotes; commas and newlines are flattened.
    s.replace([',', '\n', '\r'], ";")
}

/// Writes `trials.csv`, `summary.csv`, and `summary.txt` under `dir`.
/// Floats are printed with Rust's shortest-round-trip formatting, so a
/// re-parse reproduces the aggregates exactly.
pub fn emit_report(reports: &[TrialReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().any(|r| r.outcomes.is_empty()) {
        bail!("nothing to report: need at least one trial per experiment");
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let trials_path = dir.join("trials.csv");
    let mut trials = String::from("experiment,config,trial,detail,seed,epochs,runtime_s,error_pct,failure\n");
    for report in reports {
        for o in &report.outcomes {
            let _ = writeln!(
                trials,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&report.label),
                report.config_hash,
                o.trial,
                csv_field(&o.detail),
                o.seed,
                o.epochs,
                o.runtime_s,
                o.error_pct.map(|e| e.to_string()).unwrap_or_default(),
                o.failure.as_deref().map(csv_field).unwrap_or_default(),
            );
        }
    }
    std::fs::write(&trials_path, trials).with_context(|| format!("writing {}", trials_path.display()))?;

    let summary_csv_path = dir.join("summary.csv");
    let mut summary_csv = String::from("experiment,config,trials,failed,mean_error_pct,median_error_pct\n");
    for report in reports {
        let _ = writeln!(
            summary_csv,
            "{},{},{},{},{},{}",
            csv_field(&report.label),
            report.config_hash,
            report.outcomes.len(),
            report.failed_count(),
            report.mean_error().map(|e| e.to_string()).unwrap_or_default(),
            report.median_error().map(|e| e.to_string()).unwrap_or_default(),
        );
    }
    std::fs::write(&summary_csv_path, summary_csv)
        .with_context(|| format!("writing {}", summary_csv_path.display()))?;

    let table_path = dir.join("summary.txt");
    std::fs::write(&table_path, render_table(reports))
        .with_context(|| format!("writing {}", table_path.display()))?;

    Ok(vec![trials_path, summary_csv_path, table_path])
}

/// Fixed-width table used for terminal output and `summary.txt`.
pub fn render_table(reports: &[TrialReport]) -> String {
    let mut out = String::new();
    let width = reports
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(10)
        .max(10);
    let _ = writeln!(
        out,
        "{:width$}  {:>7}  {:>6}  {:>10}  {:>12}  config",
        "experiment",
        "trials",
        "failed",
        "mean err%",
        "median err%",
        width = width
    );
    for report in reports {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.2}"),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:width$}  {:>7}  {:>6}  {:>10}  {:>12}  {}",
            report.label,
            report.outcomes.len(),
            report.failed_count(),
            fmt(report.mean_error()),
            fmt(report.median_error()),
            report.config_hash,
            width = width
        );
    }
    out
}

/// Re-parses a `trials.csv`, grouping rows back into reports by label.
pub fn parse_trials_csv(path: &Path) -> Result<Vec<TrialReport>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "experiment,config,trial,detail,seed,epochs,runtime_s,error_pct,failure" {
        bail!("{}: unexpected header '{header}'", path.display());
    }
    let mut reports: Vec<TrialReport> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(9, ',').collect();
        if fields.len() != 9 {
            bail!("{}:{}: expected 9 fields", path.display(), lineno + 2);
        }
        let outcome = TrialOutcome {
            trial: fields[2].parse().context("trial")?,
            detail: fields[3].to_string(),
            seed: fields[4].parse().context("seed")?,
            epochs: fields[5].parse().context("epochs")?,
            runtime_s: fields[6].parse().context("runtime_s")?,
            error_pct: if fields[7].is_empty() {
                None
            } else {
                Some(fields[7].parse().context("error_pct")?)
            },
            failure: if fields[8].is_empty() {
                None
            } else {
                Some(fields[8].to_string())
            },
        };
        match reports.iter_mut().find(|r| r.label == fields[0]) {
            Some(report) => report.outcomes.push(outcome),
            None => reports.push(TrialReport {
                label: fields[0].to_string(),
                config_hash: fields[1].to_string(),
                outcomes: vec![outcome],
            }),
        }
    }
    if reports.is_empty() {
        bail!("{}: no trial rows", path.display());
    }
    Ok(reports)
}
