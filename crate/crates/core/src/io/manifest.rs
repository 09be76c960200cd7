use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::msed::{read_msed_expect, write_msed, Dtype};
use crate::error::{Error, Result};
use crate::neuro::{Experiment, StimulusMode, SubjectDataset};
use crate::stimfeat::{check_unique, RawModalFeatures, StimulusFeatureSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub responses: PathBuf,
    pub stimulus_ids: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub llv: PathBuf,
    pub hlv: PathBuf,
    pub stimulus_ids: PathBuf,
    /// Labels CSV; when absent labels are gathered from the subjects.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub provenance: String,
}

/// Dataset description; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub experiment: String,
    pub mode: StimulusMode,
    pub subjects: Vec<SubjectEntry>,
    pub features: FeatureEntry,
    #[serde(default)]
    pub roi_names: Vec<String>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// One id per non-empty line.
pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = ids.join("\n");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Labels CSV: a `stimulus_id` column followed by one 0/1 column per class.
pub fn read_labels_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Tensor)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("stimulus_id") || headers.len() < 2 {
        return Err(Error::Validation(format!(
            "{}: first column must be stimulus_id followed by classes",
            path.display()
        )));
    }
    let classes: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            match v.trim() {
                "0" => data.push(0.0),
                "1" => data.push(1.0),
                other => {
                    return Err(Error::Validation(format!(
                        "{}: label `{other}` is not 0 or 1",
                        path.display()
                    )))
                }
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Validation(format!("{}: no label rows", path.display())));
    }
    let n = ids.len();
    Ok((ids, classes.clone(), Tensor::new(vec![n, classes.len()], data)?))
}

pub fn write_labels_csv(path: &Path, ids: &[String], classes: &[String], labels: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["stimulus_id".to_string()];
    header.extend(classes.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(labels.row(i).iter().map(|&v| if v > 0.5 { "1" } else { "0" }.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn default_class_names(c: usize) -> Vec<String> {
    (0..c).map(|j| format!("class_{j}")).collect()
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    /// Loads and cross-validates every referenced file.
    pub fn load(path: &Path) -> Result<Experiment> {
        let manifest = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.load_from(base)
    }

    pub fn load_from(&self, base: &Path) -> Result<Experiment> {
        let ids = read_ids(&resolve(base, &self.features.stimulus_ids))?;
        check_unique(&ids)?;
        let n_s = ids.len();
        let f_llv = read_msed_expect(&resolve(base, &self.features.llv), &[Some(n_s), None])?;
        let f_hlv = read_msed_expect(&resolve(base, &self.features.hlv), &[Some(n_s), None])?;

        let mut subjects = Vec::with_capacity(self.subjects.len());
        let mut class_names: Option<Vec<String>> = None;
        for s in &self.subjects {
            let sids = read_ids(&resolve(base, &s.stimulus_ids))?;
            check_unique(&sids)?;
            let lp = resolve(base, &s.labels);
            let (lids, classes, labels) = read_labels_csv(&lp)?;
            if lids != sids {
                return Err(Error::Validation(format!(
                    "subject {}: label rows do not follow the stimulus id list",
                    s.id
                )));
            }
            match &class_names {
                Some(c) if *c != classes => {
                    return Err(Error::Validation(format!("subject {}: class columns differ", s.id)));
                }
                None => class_names = Some(classes),
                _ => {}
            }
            let responses = read_msed_expect(&resolve(base, &s.responses), &[Some(sids.len()), None, None])?;
            subjects.push(SubjectDataset::new(s.id.clone(), responses, sids, labels)?);
        }
        let class_names = class_names.ok_or_else(|| Error::Validation("manifest lists no subjects".into()))?;

        let labels = match &self.features.labels {
            Some(p) => {
                let (lids, classes, labels) = read_labels_csv(&resolve(base, p))?;
                if lids != ids || classes != class_names {
                    return Err(Error::Validation("feature labels do not match feature ids or classes".into()));
                }
                labels
            }
            None => gather_labels(&ids, &subjects, class_names.len())?,
        };
        let features = StimulusFeatureSet::new(ids, f_llv, f_hlv, labels, self.features.provenance.clone())?;
        Experiment::new(self.experiment.clone(), self.mode, self.roi_names.clone(), features, subjects)
    }

    /// Writes an experiment as MSED tensors, id lists, label CSVs and a
    /// manifest under `dir`; returns the manifest path.
    pub fn write(dir: &Path, exp: &Experiment, class_names: &[String]) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let f = &exp.features;
        write_msed(&dir.join("features_llv.msed"), &f.f_llv, Dtype::F64)?;
        write_msed(&dir.join("features_hlv.msed"), &f.f_hlv, Dtype::F64)?;
        write_ids(&dir.join("features_ids.txt"), &f.stimulus_ids)?;
        write_labels_csv(&dir.join("features_labels.csv"), &f.stimulus_ids, class_names, &f.labels)?;
        let mut subjects = Vec::new();
        for s in &exp.subjects {
            let stem = &s.subject_id;
            write_msed(&dir.join(format!("{stem}_responses.msed")), &s.responses, Dtype::F64)?;
            write_ids(&dir.join(format!("{stem}_ids.txt")), &s.stimulus_ids)?;
            write_labels_csv(&dir.join(format!("{stem}_labels.csv")), &s.stimulus_ids, class_names, &s.labels)?;
            subjects.push(SubjectEntry {
                id: s.subject_id.clone(),
                responses: format!("{stem}_responses.msed").into(),
                stimulus_ids: format!("{stem}_ids.txt").into(),
                labels: format!("{stem}_labels.csv").into(),
            });
        }
        let manifest = DatasetManifest {
            experiment: exp.name.clone(),
            mode: exp.mode,
            subjects,
            features: FeatureEntry {
                llv: "features_llv.msed".into(),
                hlv: "features_hlv.msed".into(),
                stimulus_ids: "features_ids.txt".into(),
                labels: Some("features_labels.csv".into()),
                provenance: f.provenance.clone(),
            },
            roi_names: exp.roi_names.clone(),
            class_names: class_names.to_vec(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

fn gather_labels(ids: &[String], subjects: &[SubjectDataset], c: usize) -> Result<Tensor> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut labels = Tensor::zeros(&[ids.len(), c]);
    let mut seen = vec![false; ids.len()];
    for s in subjects {
        for (i, id) in s.stimulus_ids.iter().enumerate() {
            let &r = index
                .get(id.as_str())
                .ok_or_else(|| Error::Validation(format!("subject {}: unknown stimulus `{id}`", s.subject_id)))?;
            if seen[r] && labels.row(r) != s.labels.row(i) {
                return Err(Error::Validation(format!("conflicting labels for `{id}`")));
            }
            labels.row_mut(r).copy_from_slice(s.labels.row(i));
            seen[r] = true;
        }
    }
    Ok(labels)
}

/// Feature file description for [`load_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureManifest {
    /// Unfused image/text features.
    Raw {
        stimulus_ids: PathBuf,
        stimuli: usize,
        dim: usize,
        image: PathBuf,
        text: PathBuf,
        #[serde(default)]
        caption_sims: Option<PathBuf>,
    },
    /// Ready guidance features plus labels.
    Fused {
        stimulus_ids: PathBuf,
        stimuli: usize,
        d_llv: usize,
        d_hlv: usize,
        llv: PathBuf,
        hlv: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        provenance: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedFeatures {
    Raw(RawModalFeatures),
    Fused(StimulusFeatureSet),
}

/// Loads a feature manifest and the MSED tensors it names.
pub fn load_features(path: &Path) -> Result<LoadedFeatures> {
    let manifest: FeatureManifest = serde_json::from_str(&read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let ids_of = |p: &Path, n: usize| -> Result<Vec<String>> {
        let ids = read_ids(&resolve(base, p))?;
        check_unique(&ids)?;
        if ids.len() != n {
            return Err(Error::DimMismatch {
                path: resolve(base, p),
                expected: vec![n],
                found: vec![ids.len()],
            });
        }
        Ok(ids)
    };
    match manifest {
        FeatureManifest::Raw {
            stimulus_ids,
            stimuli,
            dim,
            image,
            text,
            caption_sims,
        } => {
            let ids = ids_of(&stimulus_ids, stimuli)?;
            let image = read_msed_expect(&resolve(base, &image), &[Some(stimuli), Some(dim)])?;
            let text = read_msed_expect(&resolve(base, &text), &[Some(stimuli), Some(dim)])?;
            let caps = caption_sims
                .map(|p| read_msed_expect(&resolve(base, &p), &[Some(stimuli), None]))
                .transpose()?;
            Ok(LoadedFeatures::Raw(RawModalFeatures::new(ids, image, text, caps)?))
        }
        FeatureManifest::Fused {
            stimulus_ids,
            stimuli,
            d_llv,
            d_hlv,
            llv,
            hlv,
            labels,
            provenance,
        } => {
            let ids = ids_of(&stimulus_ids, stimuli)?;
            let f_llv = read_msed_expect(&resolve(base, &llv), &[Some(stimuli), Some(d_llv)])?;
            let f_hlv = read_msed_expect(&resolve(base, &hlv), &[Some(stimuli), Some(d_hlv)])?;
            let (lids, _, labels) = read_labels_csv(&resolve(base, &labels))?;
            if lids != ids {
                return Err(Error::Validation("label rows do not follow the stimulus id list".into()));
            }
            Ok(LoadedFeatures::Fused(StimulusFeatureSet::new(ids, f_llv, f_hlv, labels, provenance)?))
        }
    }
}
