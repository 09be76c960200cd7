//! Multi-subject neural datasets: ROI patchification, dimensionality
//! alignment, splits, pooled batching and a synthetic generator.

mod batch;
mod pca;
mod split;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, BatchStream, SampleRef};
pub use pca::{pca_reduce, patchify_rois, patchify_subjects, zero_pad, PcaProjection, PcaReduction};
pub use split::{split_dataset, SplitIndices, SplitSizes, SplitSpec};
pub use synth::{synth_generate, SynthDataConfig, SynthDataset, SynthLayout};

use crate::error::{Error, Result};
use crate::stimfeat::StimulusFeatureSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StimulusMode {
    SameStimuli,
    DisjointStimuli,
}

/// One subject's responses as patch sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    /// `n_i × M × d_in`.
    pub responses: Tensor,
    pub stimulus_ids: Vec<String>,
    /// `n_i × C`.
    pub labels: Tensor,
}

impl SubjectDataset {
    pub fn new(subject_id: impl Into<String>, responses: Tensor, stimulus_ids: Vec<String>, labels: Tensor) -> Result<Self> {
        let subject_id = subject_id.into();
        let n = stimulus_ids.len();
        if n == 0 {
            return Err(Error::Validation(format!("subject {subject_id} has no samples")));
        }
        if responses.ndim() != 3 || responses.shape()[0] != n {
            return Err(Error::Validation(format!(
                "subject {subject_id}: responses {:?} must be {n}×M×d_in",
                responses.shape()
            )));
        }
        if labels.ndim() != 2 || labels.rows() != n {
            return Err(Error::Validation(format!(
                "subject {subject_id}: labels {:?} must have {n} rows",
                labels.shape()
            )));
        }
        Ok(Self {
            subject_id,
            responses,
            stimulus_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimulus_ids.is_empty()
    }

    pub fn patch_count(&self) -> usize {
        self.responses.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.responses.shape()[2]
    }
}

/// Features plus every subject's data, validated for consistency.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub mode: StimulusMode,
    pub roi_names: Vec<String>,
    pub features: StimulusFeatureSet,
    pub subjects: Vec<SubjectDataset>,
    /// Per subject, feature row of each sample.
    feature_rows: Vec<Vec<usize>>,
}

impl Experiment {
    pub fn new(
        name: impl Into<String>,
        mode: StimulusMode,
        roi_names: Vec<String>,
        features: StimulusFeatureSet,
        subjects: Vec<SubjectDataset>,
    ) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::Validation("experiment has no subjects".into()))?;
        let (m, d) = (first.patch_count(), first.patch_dim());
        let c = features.class_count();
        if !roi_names.is_empty() && roi_names.len() != m {
            return Err(Error::Validation(format!(
                "{} ROI names for {m} patches",
                roi_names.len()
            )));
        }
        let index = features.index();
        let mut feature_rows = Vec::with_capacity(subjects.len());
        let mut seen_subjects = std::collections::HashSet::new();
        for s in &subjects {
            if !seen_subjects.insert(s.subject_id.as_str()) {
                return Err(Error::DuplicateId(s.subject_id.clone()));
            }
            if s.patch_count() != m || s.patch_dim() != d {
                return Err(Error::Validation(format!(
                    "subject {} has patches {}×{}, expected {m}×{d}",
                    s.subject_id,
                    s.patch_count(),
                    s.patch_dim()
                )));
            }
            if s.labels.cols() != c {
                return Err(Error::Validation(format!(
                    "subject {} has {} label columns, features have {c}",
                    s.subject_id,
                    s.labels.cols()
                )));
            }
            let mut rows = Vec::with_capacity(s.len());
            for (i, id) in s.stimulus_ids.iter().enumerate() {
                let &r = index.get(id.as_str()).ok_or_else(|| {
                    Error::Validation(format!("subject {}: unknown stimulus `{id}`", s.subject_id))
                })?;
                if s.labels.row(i) != features.labels.row(r) {
                    return Err(Error::Validation(format!(
                        "subject {}: labels of `{id}` disagree with the feature set",
                        s.subject_id
                    )));
                }
                rows.push(r);
            }
            feature_rows.push(rows);
        }
        Ok(Self {
            name: name.into(),
            mode,
            roi_names,
            features,
            subjects,
            feature_rows,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.subjects[0].patch_count()
    }

    pub fn patch_dim(&self) -> usize {
        self.subjects[0].patch_dim()
    }

    pub fn class_count(&self) -> usize {
        self.features.class_count()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject_position(&self) -> HashMap<&str, usize> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.subject_id.as_str(), i))
            .collect()
    }

    pub fn feature_row(&self, subject: usize, sample: usize) -> usize {
        self.feature_rows[subject][sample]
    }

    /// Gathers samples into an aligned batch.
    pub fn batch(&self, refs: &[SampleRef]) -> Batch {
        let m = self.patch_count();
        let d = self.patch_dim();
        let c = self.class_count();
        let mut patches = Vec::with_capacity(refs.len() * m * d);
        let mut labels = Vec::with_capacity(refs.len() * c);
        let mut frow = Vec::with_capacity(refs.len());
        let mut ids = Vec::with_capacity(refs.len());
        for r in refs {
            let s = &self.subjects[r.subject];
            patches.extend_from_slice(s.responses.row(r.sample));
            labels.extend_from_slice(s.labels.row(r.sample));
            frow.push(self.feature_rows[r.subject][r.sample]);
            ids.push(s.stimulus_ids[r.sample].clone());
        }
        let b = refs.len();
        Batch {
            patches: Tensor::new(vec![b, m, d], patches).expect("batch shape"),
            subject_index: refs.iter().map(|r| r.subject).collect(),
            labels: Tensor::new(vec![b, c], labels).expect("batch shape"),
            f_llv: self.features.f_llv.select_rows(&frow),
            f_hlv: self.features.f_hlv.select_rows(&frow),
            stimulus_ids: ids,
            refs: refs.to_vec(),
        }
    }
}
