//! Fit histories, final parameters and metric reports, in memory and on disk.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dynamics_error, McEstimate, MetricReport, DEFAULT_DYNAMICS_ERROR_DRAWS};
use crate::model::{SystemModel, Vector};
use crate::rng::{purpose, stream_rng};
use crate::simulate::InitialConditionSpec;

/// Scores parameter estimates against known true parameters with ε(θ).
///
/// Every evaluation reuses the same Monte-Carlo draws, so successive epochs
/// are compared on common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEvaluator {
    pub theta_true: Vector,
    pub initial: InitialConditionSpec,
    pub draws: usize,
    pub seed: u64,
}

impl TruthEvaluator {
    pub fn new(theta_true: Vector, initial: InitialConditionSpec, seed: u64) -> Self {
        Self {
            theta_true,
            initial,
            draws: DEFAULT_DYNAMICS_ERROR_DRAWS,
            seed,
        }
    }

    pub fn evaluate(&self, model: &dyn SystemModel, theta: &Vector) -> Result<McEstimate> {
        let mut rng = stream_rng(self.seed, purpose::METRIC, 0);
        dynamics_error(model, theta, &self.theta_true, &self.initial, self.draws, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The objective improved by no more than the tolerance.
    Tolerance,
    MaxEpochs,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tolerance => "tolerance",
            Self::MaxEpochs => "max_epochs",
        }
    }
}

/// State of a fit after one epoch (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Joint objective for CE-EM; Monte-Carlo estimate of Q for particle EM.
    pub objective: f64,
    pub dynamics_error: Option<McEstimate>,
    /// Seconds spent fitting since the start, not counting ε(θ) scoring.
    pub wall_seconds: f64,
    pub theta: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// `"ceem"` or `"pem"`.
    pub algorithm: String,
    pub initial: EpochRecord,
    /// One record per epoch run.
    pub epochs: Vec<EpochRecord>,
    pub theta: Vector,
    /// Final state estimate per trajectory.
    pub states: Vec<Vec<Vector>>,
    pub termination: Termination,
}

impl FitReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.objective).collect()
    }

    /// Initial record followed by every epoch.
    pub fn records(&self) -> impl Iterator<Item = &EpochRecord> {
        std::iter::once(&self.initial).chain(&self.epochs)
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }

    /// Mean wall time per epoch.
    pub fn seconds_per_epoch(&self) -> f64 {
        let elapsed = self.final_record().wall_seconds - self.initial.wall_seconds;
        elapsed / self.epochs.len().max(1) as f64
    }

    /// Same estimates and objectives, ignoring wall-clock times.
    pub fn same_estimates(&self, other: &FitReport) -> bool {
        let strip = |r: &EpochRecord| (r.epoch, r.objective, r.dynamics_error, r.theta.clone());
        self.algorithm == other.algorithm
            && self.termination == other.termination
            && self.theta == other.theta
            && self.states == other.states
            && self.records().map(strip).eq(other.records().map(strip))
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `epoch,J,eps,wall_s,theta_0..` with one row per record; `eps` is
/// empty when no true parameters were known.
pub fn write_history(report: &FitReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let q = report.theta.len();
    let mut header = vec!["epoch".to_string(), "J".into(), "eps".into(), "wall_s".into()];
    header.extend((0..q).map(|i| format!("theta_{i}")));
    w.write_record(&header)?;
    for r in report.records() {
        let mut row = vec![
            r.epoch.to_string(),
            fmt17(r.objective),
            r.dynamics_error.map(|e| fmt17(e.mean)).unwrap_or_default(),
            format!("{:.6}", r.wall_seconds),
        ];
        row.extend(r.theta.iter().map(|v| fmt17(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed row of a history file.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub objective: f64,
    pub dynamics_error: Option<f64>,
    pub wall_seconds: f64,
    pub theta: Vec<f64>,
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let bad = |what: &str| Error::Dataset(format!("{}: malformed {what}", path.display()));
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let num = |i: usize| record.get(i).ok_or_else(|| bad("row")).and_then(|s| s.parse::<f64>().map_err(|_| bad("number")));
        let eps = record.get(2).ok_or_else(|| bad("row"))?;
        rows.push(HistoryRow {
            epoch: record.get(0).ok_or_else(|| bad("row"))?.parse().map_err(|_| bad("epoch"))?,
            objective: num(1)?,
            dynamics_error: if eps.is_empty() { None } else { Some(eps.parse().map_err(|_| bad("eps"))?) },
            wall_seconds: num(3)?,
            theta: (4..record.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Final parameter estimate as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalParams {
    pub algorithm: String,
    pub model_id: String,
    pub termination: String,
    pub epochs: usize,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics_error: Option<f64>,
    pub theta: Vec<f64>,
}

impl FinalParams {
    pub fn from_report(report: &FitReport, model_id: &str) -> Self {
        let last = report.final_record();
        Self {
            algorithm: report.algorithm.clone(),
            model_id: model_id.to_string(),
            termination: report.termination.as_str().to_string(),
            epochs: report.epochs.len(),
            objective: last.objective,
            dynamics_error: last.dynamics_error.map(|e| e.mean),
            theta: report.theta.iter().copied().collect(),
        }
    }

    pub fn theta(&self) -> Vector {
        Vector::from_column_slice(&self.theta)
    }
}

pub fn write_params(params: &FinalParams, path: &Path) -> Result<()> {
    let text = toml::to_string(params).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<FinalParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Dataset(format!("malformed parameter file {}: {e}", path.display())))
}

/// Writes `trajectory_id,rmse` rows followed by `mean` and `std` summary rows,
/// and an `eps` row when ε(θ) is present.
pub fn write_metrics(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trajectory_id", "rmse"])?;
    for (i, r) in report.per_trajectory_rmse.iter().enumerate() {
        w.write_record([i.to_string(), fmt17(*r)])?;
    }
    w.write_record(["mean".to_string(), fmt17(report.mean_rmse)])?;
    w.write_record(["std".to_string(), fmt17(report.std_rmse)])?;
    if let Some(e) = report.dynamics_error {
        w.write_record(["eps".to_string(), fmt17(e.mean)])?;
        w.write_record(["eps_std_error".to_string(), fmt17(e.std_error)])?;
    }
    w.flush()?;
    Ok(())
}
