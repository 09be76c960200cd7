use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, EpochRecord, Metrics, StepLoss, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::{read_msed, write_msed, Dtype};
use crate::model::{EncoderConfig, Model};
use crate::objectives::LossParts;
use crate::tensor::Tensor;

const FORMAT: u32 = 1;
const HEADER: &str = "header.json";

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    train: TrainConfig,
    encoder: EncoderConfig,
    subjects: Vec<String>,
}

/// A training configuration with the state to resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn unopt(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn write_map(dir: &Path, map: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (name, t) in map {
        write_msed(&dir.join(format!("{name}.msed")), t, Dtype::F64)?;
    }
    Ok(())
}

fn read_map(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".msed")) else {
            continue;
        };
        out.insert(name.to_string(), read_msed(&path)?);
    }
    Ok(out)
}

fn check_params(reference: &Model, found: &BTreeMap<String, Tensor>, dir: &Path) -> Result<()> {
    for (name, t) in &reference.params {
        let f = found.get(name).ok_or_else(|| Error::Validation(format!("{}: missing parameter `{name}`", dir.display())))?;
        if f.shape() != t.shape() {
            return Err(Error::DimMismatch {
                path: dir.join(format!("{name}.msed")),
                expected: t.shape().to_vec(),
                found: f.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = found.keys().find(|k| !reference.params.contains_key(*k)) {
        return Err(Error::Validation(format!("{}: unexpected parameter `{extra}`", dir.display())));
    }
    Ok(())
}

/// Writes parameters, best parameters, optimizer moments and history.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let header = Header {
        format: FORMAT,
        train: config.clone(),
        encoder: state.model.config.clone(),
        subjects: state.model.subjects.clone(),
    };
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(dir.join(HEADER), json).map_err(|e| Error::io("writing checkpoint header", e))?;
    write_map(&dir.join("params"), &state.model.params)?;
    write_map(&dir.join("best"), &state.best_params)?;
    write_map(&dir.join("adam_m"), &state.adam.m)?;
    write_map(&dir.join("adam_v"), &state.adam.v)?;

    let scalars = vec![
        state.epoch as f64,
        state.best_epoch as f64,
        state.stale as f64,
        if state.done { 1.0 } else { 0.0 },
        state.skipped_steps as f64,
        state.adam.t as f64,
        opt(state.best_val_map),
    ];
    write_msed(&dir.join("state.msed"), &Tensor::new(vec![scalars.len()], scalars)?, Dtype::F64)?;

    let mut hist = Vec::with_capacity(state.history.len() * 5);
    for r in &state.history {
        hist.extend([r.epoch as f64, r.train_loss, r.val.map, r.val.auc, r.val.hamming]);
    }
    if !state.history.is_empty() {
        write_msed(&dir.join("history.msed"), &Tensor::new(vec![state.history.len(), 5], hist)?, Dtype::F64)?;
    }
    let mut losses = Vec::with_capacity(state.losses.len() * 8);
    for s in &state.losses {
        let p = &s.parts;
        losses.extend([
            s.epoch as f64,
            s.step as f64,
            s.total,
            p.classification,
            opt(p.ortho),
            opt(p.llv),
            opt(p.hlv),
            opt(p.map),
        ]);
    }
    if !state.losses.is_empty() {
        write_msed(&dir.join("losses.msed"), &Tensor::new(vec![state.losses.len(), 8], losses)?, Dtype::F64)?;
    }
    Ok(())
}

fn read_header(dir: &Path) -> Result<Header> {
    let path = dir.join(HEADER);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != FORMAT {
        return Err(Error::Validation(format!("unsupported checkpoint format {}", header.format)));
    }
    Ok(header)
}

fn rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let t = read_msed(path)?;
    if t.ndim() != 2 || t.shape()[1] != width {
        return Err(Error::DimMismatch {
            path: path.to_path_buf(),
            expected: vec![0, width],
            found: t.shape().to_vec(),
        });
    }
    Ok(t.data().chunks(width).map(<[f64]>::to_vec).collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let header = read_header(dir)?;
    let reference = Model::new(header.encoder.clone(), header.subjects.clone(), 0)?;
    let params = read_map(&dir.join("params"))?;
    check_params(&reference, &params, &dir.join("params"))?;
    let best_params = read_map(&dir.join("best"))?;
    check_params(&reference, &best_params, &dir.join("best"))?;
    let m = read_map(&dir.join("adam_m"))?;
    let v = read_map(&dir.join("adam_v"))?;

    let s = read_msed(&dir.join("state.msed"))?;
    if s.len() != 7 {
        return Err(Error::Validation(format!("state.msed has {} entries, expected 7", s.len())));
    }
    let s = s.data();
    let history = rows(&dir.join("history.msed"), 5)?
        .into_iter()
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            train_loss: r[1],
            val: Metrics {
                map: r[2],
                auc: r[3],
                hamming: r[4],
            },
        })
        .collect();
    let losses = rows(&dir.join("losses.msed"), 8)?
        .into_iter()
        .map(|r| StepLoss {
            epoch: r[0] as usize,
            step: r[1] as usize,
            total: r[2],
            parts: LossParts {
                classification: r[3],
                ortho: unopt(r[4]),
                llv: unopt(r[5]),
                hlv: unopt(r[6]),
                map: unopt(r[7]),
            },
        })
        .collect();

    let state = TrainState {
        model: Model {
            config: header.encoder,
            subjects: header.subjects,
            params,
        },
        adam: AdamState { m, v, t: s[5] as u64 },
        epoch: s[0] as usize,
        best_val_map: unopt(s[6]),
        best_epoch: s[1] as usize,
        best_params,
        stale: s[2] as usize,
        done: s[3] != 0.0,
        skipped_steps: s[4] as usize,
        history,
        losses,
    };
    Ok(Checkpoint {
        config: header.train,
        state,
    })
}

/// The best-validation model stored in a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<Model> {
    let header = read_header(dir)?;
    let reference = Model::new(header.encoder.clone(), header.subjects.clone(), 0)?;
    let params = read_map(&dir.join("best"))?;
    check_params(&reference, &params, &dir.join("best"))?;
    Ok(Model {
        config: header.encoder,
        subjects: header.subjects,
        params,
    })
}
