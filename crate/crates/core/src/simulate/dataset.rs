//! On-disk trajectory datasets.
//!
//! A dataset directory holds `manifest.toml` and one comma-separated file per
//! trajectory (`traj_00000.csv`, ...). Each file has the header
//! `t,u_0..u_{p-1},y_0..y_{m-1}[,x_0..x_{n-1}]` and values written with 17
//! significant digits, which round-trips every `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::model::Vector;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_id: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub dt: f64,
    pub num_trajectories: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    pub sigma_w: Vec<f64>,
    pub sigma_v: Vec<f64>,
    /// Known observation matrix, row-major, when the model observes linearly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_matrix: Option<Vec<f64>>,
}

/// A batch of trajectories sharing one model and manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: Manifest,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(manifest: Manifest, trajectories: Vec<Trajectory>) -> Result<Self> {
        let ds = Self { manifest, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.trajectories.len() != m.num_trajectories {
            return Err(Error::Dataset(format!(
                "manifest lists {} trajectories but {} are present",
                m.num_trajectories,
                self.trajectories.len()
            )));
        }
        if m.sigma_w.len() != m.n || m.sigma_v.len() != m.m {
            return Err(Error::Dataset("manifest noise std-devs do not match n and m".into()));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            tr.validate(m.n, m.m, m.p)
                .map_err(|e| Error::Dataset(format!("trajectory {i}: {e}")))?;
            if tr.len() != m.horizon {
                return Err(Error::Dataset(format!(
                    "trajectory {i} has {} steps but manifest T = {}",
                    tr.len(),
                    m.horizon
                )));
            }
        }
        Ok(())
    }

    /// Total number of scalar observations.
    pub fn observation_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.len() * self.manifest.m).sum()
    }
}

fn trajectory_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("traj_{i:05}.csv"))
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset(dataset: &TrajectoryDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = toml::to_string(&dataset.manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;

    let m = &dataset.manifest;
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        let mut w = csv::Writer::from_path(trajectory_path(dir, i))?;
        let mut header = vec!["t".to_string()];
        header.extend((0..m.p).map(|j| format!("u_{j}")));
        header.extend((0..m.m).map(|j| format!("y_{j}")));
        if tr.x.is_some() {
            header.extend((0..m.n).map(|j| format!("x_{j}")));
        }
        w.write_record(&header)?;
        for t in 0..tr.len() {
            let mut row = vec![t.to_string()];
            row.extend(tr.u[t].iter().map(|v| fmt17(*v)));
            row.extend(tr.y[t].iter().map(|v| fmt17(*v)));
            if let Some(x) = &tr.x {
                row.extend(x[t].iter().map(|v| fmt17(*v)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Dataset(format!("malformed manifest {}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let manifest = read_manifest(dir)?;
    let mut trajectories = Vec::with_capacity(manifest.num_trajectories);
    for i in 0..manifest.num_trajectories {
        trajectories.push(read_trajectory(&trajectory_path(dir, i), &manifest)?);
    }
    TrajectoryDataset::new(manifest, trajectories)
}

fn read_trajectory(path: &Path, manifest: &Manifest) -> Result<Trajectory> {
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("cannot read {name}: {e}")))?;
    let headers = reader.headers()?.clone();
    let column = |label: &str| headers.iter().position(|h| h.trim() == label);
    let require = |label: String| {
        column(&label).ok_or_else(|| Error::Dataset(format!("{name} is missing column {label}")))
    };
    require("t".into())?;
    let u_cols = (0..manifest.p).map(|j| require(format!("u_{j}"))).collect::<Result<Vec<_>>>()?;
    let y_cols = (0..manifest.m).map(|j| require(format!("y_{j}"))).collect::<Result<Vec<_>>>()?;
    let x_cols = if column("x_0").is_some() {
        Some((0..manifest.n).map(|j| require(format!("x_{j}"))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };

    let mut y = Vec::new();
    let mut u = Vec::new();
    let mut x = x_cols.as_ref().map(|_| Vec::new());
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |cols: &[usize]| -> Result<Vector> {
            cols.iter()
                .map(|&c| {
                    let field = record.get(c).unwrap_or("").trim();
                    field.parse::<f64>().map_err(|_| {
                        Error::Dataset(format!("{name} row {}: cannot parse {:?} in column {}", row_idx + 1, field, &headers[c]))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Vector::from_vec)
        };
        u.push(parse(&u_cols)?);
        y.push(parse(&y_cols)?);
        if let (Some(xs), Some(cols)) = (x.as_mut(), x_cols.as_ref()) {
            xs.push(parse(cols)?);
        }
    }
    if y.len() != manifest.horizon {
        return Err(Error::Dataset(format!(
            "{name} has {} rows but manifest T = {}",
            y.len(),
            manifest.horizon
        )));
    }
    Ok(Trajectory {
        y,
        u,
        x,
        seed: manifest.seed,
    })
}
