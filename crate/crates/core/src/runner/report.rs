//! Experiment reports, the strategy comparison table and relative-L2 plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{RejectionReport, ScoreAggregation};
use crate::training::{Strategy, TrainLog};

pub const REPORT_VERSION: u32 = 1;

/// Outcome of uncertainty rejection; an empty retained set is reported, not zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionSection {
    pub threshold: f64,
    pub aggregation: ScoreAggregation,
    /// The 0.065-style threshold means different things for different class counts.
    pub num_classes: usize,
    pub result: Option<RejectionReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub n_models: usize,
    pub eval_samples: usize,
    pub model_accuracies: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub disagreement_matrix: Vec<Vec<f64>>,
    pub mean_disagreement: f64,
    pub rejection: RejectionSection,
    /// Per-epoch `||v|| / mean ||w_i||`; empty for plain fine-tuning.
    pub relative_l2: Vec<f64>,
    /// Model-epochs.
    pub compute_budget: usize,
    pub train_log: TrainLog,
    /// Excluded from determinism checks.
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    /// Serialized form with the wall-clock field zeroed.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        serde_json::to_vec_pretty(&r).expect("report serializes")
    }
}

pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report: ExperimentReport = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if report.format_version != REPORT_VERSION {
        return Err(Error::Version {
            found: report.format_version,
            expected: REPORT_VERSION,
        });
    }
    report.config.transfer.seed = report.config.seed;
    Ok(report)
}

pub const SUMMARY_HEADER: [&str; 15] = [
    "strategy",
    "n_models",
    "member_accuracies",
    "member_accuracy_mean",
    "ensemble_accuracy",
    "mean_disagreement",
    "rejection_threshold",
    "retained",
    "eval_samples",
    "accuracy_before",
    "accuracy_after",
    "delta",
    "final_relative_l2",
    "compute_budget",
    "seed",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// One row per report. Member accuracies are `;`-joined so the header does
/// not depend on ensemble size.
pub fn write_summary(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(SUMMARY_HEADER).map_err(wrap)?;
    for r in reports {
        let members = r
            .model_accuracies
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let member_mean = r.model_accuracies.iter().sum::<f64>() / r.model_accuracies.len() as f64;
        let rej = r.rejection.result.as_ref();
        w.write_record([
            r.strategy.name().to_string(),
            r.n_models.to_string(),
            members,
            member_mean.to_string(),
            r.ensemble_accuracy.to_string(),
            r.mean_disagreement.to_string(),
            r.rejection.threshold.to_string(),
            rej.map_or_else(|| "0".into(), |x| x.retained.to_string()),
            r.eval_samples.to_string(),
            opt(rej.map(|x| x.accuracy_before)),
            opt(rej.map(|x| x.accuracy_after)),
            opt(rej.map(|x| x.delta)),
            opt(r.relative_l2.last().copied()),
            r.compute_budget.to_string(),
            r.seed.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Relative-L2 curve as a standalone SVG line plot.
pub fn relative_l2_svg(title: &str, values: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let ymax = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let n = values.len().max(2) - 1;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = PAD,
        bottom = H - PAD,
        right = W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#,
        PAD - 12.0,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-size="10" font-family="sans-serif">{ymax:.3}</text>"#,
        PAD + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif">epoch</text>"#,
        W / 2.0,
        H - 10.0
    );
    if !values.is_empty() {
        let pts = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(s, r#"<polyline points="{pts}" stroke="steelblue" stroke-width="2" fill="none"/>"#);
    }
    s.push_str("</svg>\n");
    s
}
