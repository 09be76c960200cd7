use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Metrics, RunResult};
use crate::error::{Error, Result};

/// One line of `metrics.csv`. `epoch` is `best` for the final scores of the
/// selected checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub split: String,
    pub epoch: String,
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub run_id: String,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub classification: f64,
    pub ortho: Option<f64>,
    pub llv: Option<f64>,
    pub hlv: Option<f64>,
    pub map: Option<f64>,
}

/// Output directory of a command.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

fn row(run_id: &str, r: &RunResult, split: &str, epoch: String, m: &Metrics) -> MetricRow {
    MetricRow {
        run_id: run_id.to_string(),
        seed: r.seed,
        method: r.method.name().to_string(),
        split: split.to_string(),
        epoch,
        map: m.map,
        auc: m.auc,
        hamming: m.hamming,
    }
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.join(name), text + "\n").map_err(|e| Error::io(format!("writing {name}"), e))
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {name}"), e))
    }

    /// Per-epoch validation rows followed by the final val/test rows.
    pub fn metric_rows(runs: &[RunResult]) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for r in runs {
            for m in &r.models {
                for h in &m.history {
                    out.push(row(&m.run_id, r, "val", h.epoch.to_string(), &h.val));
                }
            }
            let id = format!("{}-s{}", r.method, r.seed);
            out.push(row(&id, r, "val", "best".into(), &r.val));
            if let Some(t) = &r.test {
                out.push(row(&id, r, "test", "best".into(), t));
            }
        }
        out
    }

    pub fn loss_rows(runs: &[RunResult]) -> Vec<LossRow> {
        runs.iter()
            .flat_map(|r| &r.models)
            .flat_map(|m| {
                m.losses.iter().map(|s| LossRow {
                    run_id: m.run_id.clone(),
                    epoch: s.epoch,
                    step: s.step,
                    total: s.total,
                    classification: s.parts.classification,
                    ortho: s.parts.ortho,
                    llv: s.parts.llv,
                    hlv: s.parts.hlv,
                    map: s.parts.map,
                })
            })
            .collect()
    }

    pub fn write_runs(&self, runs: &[RunResult]) -> Result<()> {
        self.write_csv("metrics.csv", &Self::metric_rows(runs))?;
        self.write_csv("losses.csv", &Self::loss_rows(runs))
    }
}
