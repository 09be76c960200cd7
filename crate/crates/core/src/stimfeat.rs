//! Stimulus features: ingestion, multimodal fusion, similarity targets and a
//! synthetic generator with known structure.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::cosine_similarity_matrix;
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};

/// Per-stimulus guidance features and labels, aligned by row.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusFeatureSet {
    pub stimulus_ids: Vec<String>,
    /// Low-level features, `n_s × d_l`.
    pub f_llv: Tensor,
    /// Fused high-level features, `n_s × d_h`, unit rows.
    pub f_hlv: Tensor,
    /// Binary labels, `n_s × C`.
    pub labels: Tensor,
    /// Free-form note on where the features came from.
    pub provenance: String,
}

impl StimulusFeatureSet {
    pub fn new(
        stimulus_ids: Vec<String>,
        f_llv: Tensor,
        f_hlv: Tensor,
        labels: Tensor,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = stimulus_ids.len();
        for (what, t) in [("f_llv", &f_llv), ("f_hlv", &f_hlv), ("labels", &labels)] {
            if t.ndim() != 2 || t.rows() != n {
                return Err(Error::Validation(format!(
                    "{what} has shape {:?}, expected {n} rows",
                    t.shape()
                )));
            }
        }
        if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        check_unique(&stimulus_ids)?;
        Ok(Self {
            stimulus_ids,
            f_llv,
            f_hlv,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimulus_ids.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.cols()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.stimulus_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }
}

pub(crate) fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// Image and text features before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModalFeatures {
    pub stimulus_ids: Vec<String>,
    pub image: Tensor,
    pub text: Tensor,
    /// Image–caption similarity per candidate caption, `n_s × k`.
    pub caption_sims: Option<Tensor>,
}

impl RawModalFeatures {
    pub fn new(
        stimulus_ids: Vec<String>,
        image: Tensor,
        text: Tensor,
        caption_sims: Option<Tensor>,
    ) -> Result<Self> {
        let n = stimulus_ids.len();
        if image.ndim() != 2 || image.shape() != text.shape() || image.rows() != n {
            return Err(Error::Validation(format!(
                "image {:?} and text {:?} must both be {n}×d",
                image.shape(),
                text.shape()
            )));
        }
        if let Some(c) = &caption_sims {
            if c.ndim() != 2 || c.rows() != n {
                return Err(Error::Validation(format!("caption similarities {:?}", c.shape())));
            }
        }
        check_unique(&stimulus_ids)?;
        Ok(Self {
            stimulus_ids,
            image,
            text,
            caption_sims,
        })
    }
}

/// Picks one caption per stimulus uniformly among those whose similarity is
/// at least half the row maximum.
pub fn select_caption<R: Rng + ?Sized>(caption_sims: &Tensor, rng: &mut R) -> Result<Vec<usize>> {
    let (n, k) = caption_sims
        .dims2()
        .ok_or_else(|| Error::InvalidArgument("caption similarities must be n×k".into()))?;
    let mut picks = Vec::with_capacity(n);
    for i in 0..n {
        let row = &caption_sims.data()[i * k..(i + 1) * k];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite caption score in row {i}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = max / 2.0;
        let candidates: Vec<usize> = (0..k).filter(|&j| row[j] >= threshold).collect();
        let &pick = candidates.choose(rng).ok_or_else(|| {
            Error::Validation(format!(
                "row {i}: no caption reaches half the maximum similarity {max}"
            ))
        })?;
        picks.push(pick);
    }
    Ok(picks)
}

fn clamp_unit(row: &[f64], trunc: f64) -> Option<Vec<f64>> {
    let clamped: Vec<f64> = row.iter().map(|v| v.clamp(-trunc, trunc)).collect();
    let n = l2_norm(&clamped);
    (n > 0.0).then(|| clamped.iter().map(|v| v / n).collect())
}

/// Clamps image and text coordinates to `[-trunc, trunc]`, normalizes both,
/// averages them and renormalizes the mean to unit length.
pub fn fuse_multimodal(raw: &RawModalFeatures, trunc: f64) -> Result<Tensor> {
    if !(trunc > 0.0) {
        return Err(Error::InvalidArgument(format!("truncation {trunc} must be positive")));
    }
    let (n, d) = raw.image.dims2().expect("validated");
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let img = clamp_unit(raw.image.row(i), trunc);
        let txt = clamp_unit(raw.text.row(i), trunc);
        let (Some(img), Some(txt)) = (img, txt) else {
            return Err(Error::Validation(format!(
                "stimulus {} has a zero feature row after truncation",
                raw.stimulus_ids[i]
            )));
        };
        let avg: Vec<f64> = img.iter().zip(&txt).map(|(a, b)| (a + b) / 2.0).collect();
        let norm = l2_norm(&avg);
        if norm == 0.0 {
            return Err(Error::Validation(format!(
                "stimulus {}: image and text features cancel",
                raw.stimulus_ids[i]
            )));
        }
        out.extend(avg.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], out)
}

/// Cosine similarity matrix of a batch of stimulus feature rows.
pub fn compute_stimulus_rsm(features: &Tensor) -> Result<Tensor> {
    Ok(cosine_similarity_matrix(features)?.matrix)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthFeatureConfig {
    pub stimuli: usize,
    pub classes: usize,
    pub d_llv: usize,
    pub d_hlv: usize,
    /// Standard deviation of the isotropic noise added to the prototype mixture.
    pub noise: f64,
    pub seed: u64,
}

impl SynthFeatureConfig {
    pub fn new(stimuli: usize, classes: usize, d_llv: usize, d_hlv: usize, seed: u64) -> Self {
        Self {
            stimuli,
            classes,
            d_llv,
            d_hlv,
            noise: 0.05,
            seed,
        }
    }
}

/// Synthetic features plus the construction needed to check them.
#[derive(Debug, Clone)]
pub struct SynthFeatures {
    pub set: StimulusFeatureSet,
    /// Unit class prototypes in the high-level space, `C × d_h`.
    pub prototypes: Tensor,
}

/// Labels with one to three active classes; high-level features are noisy
/// normalized sums of class prototypes and low-level features are
/// independent random directions.
pub fn synth_features(stimuli: usize, classes: usize, d_llv: usize, d_hlv: usize, seed: u64) -> Result<SynthFeatures> {
    synth_features_with(SynthFeatureConfig::new(stimuli, classes, d_llv, d_hlv, seed))
}

pub fn synth_features_with(cfg: SynthFeatureConfig) -> Result<SynthFeatures> {
    if cfg.stimuli == 0 || cfg.classes == 0 || cfg.d_llv == 0 || cfg.d_hlv == 0 {
        return Err(Error::InvalidArgument("synthetic feature sizes must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prototypes = Tensor::randn(&[cfg.classes, cfg.d_hlv], 1.0, &mut rng);
    normalize_rows(&mut prototypes);

    let (n, c) = (cfg.stimuli, cfg.classes);
    let mut labels = Tensor::zeros(&[n, c]);
    let classes: Vec<usize> = (0..c).collect();
    for i in 0..n {
        let active = rng.gen_range(1..=3.min(c));
        for &j in classes.choose_multiple(&mut rng, active) {
            labels.set2(i, j, 1.0);
        }
    }

    let mut f_hlv = Tensor::randn(&[n, cfg.d_hlv], cfg.noise, &mut rng);
    for i in 0..n {
        for j in 0..c {
            if labels.get2(i, j) == 1.0 {
                let p = prototypes.row(j).to_vec();
                for (v, pv) in f_hlv.row_mut(i).iter_mut().zip(p) {
                    *v += pv;
                }
            }
        }
    }
    normalize_rows(&mut f_hlv);

    let mut f_llv = Tensor::randn(&[n, cfg.d_llv], 1.0, &mut rng);
    normalize_rows(&mut f_llv);

    let ids = (0..n).map(|i| format!("stim-{i:05}")).collect();
    let set = StimulusFeatureSet::new(
        ids,
        f_llv,
        f_hlv,
        labels,
        format!("synthetic(seed={}, noise={})", cfg.seed, cfg.noise),
    )?;
    Ok(SynthFeatures { set, prototypes })
}

pub(crate) fn normalize_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let r = t.row_mut(i);
        let n = l2_norm(r);
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
}
