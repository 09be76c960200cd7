use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Experiment, StimulusMode, SubjectDataset};
use crate::error::{Error, Result};
use crate::stimfeat::StimulusFeatureSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthLayout {
    /// Every subject sees stimuli `0..n_i`.
    SameStimuli,
    /// `shared` stimuli seen by everyone, the rest private to each subject.
    Disjoint { shared: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthDataConfig {
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub patches: usize,
    pub patch_dim: usize,
    /// Signal-to-noise power ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    /// Patches of the latent holding the label code; the rest hold style.
    pub semantic_patches: usize,
    /// Angle scale of the per-subject rotation inside each patch, 0 for none.
    pub heterogeneity: f64,
    pub layout: SynthLayout,
    pub seed: u64,
}

impl SynthDataConfig {
    pub fn new(subjects: usize, samples_per_subject: usize, patches: usize, patch_dim: usize, snr: f64, seed: u64) -> Self {
        Self {
            subjects,
            samples_per_subject,
            patches,
            patch_dim,
            snr,
            semantic_patches: (patches / 4).max(1),
            heterogeneity: 1.0,
            layout: SynthLayout::SameStimuli,
            seed,
        }
    }

    fn latent_dim(&self) -> usize {
        self.patches * self.patch_dim
    }

    /// Distinct stimuli the feature set must provide.
    pub fn stimuli_needed(&self) -> usize {
        match self.layout {
            SynthLayout::SameStimuli => self.samples_per_subject,
            SynthLayout::Disjoint { shared } => shared + self.subjects * (self.samples_per_subject - shared),
        }
    }
}

/// Generated subjects plus the ground truth used to build them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthDataConfig,
    pub subjects: Vec<SubjectDataset>,
    /// Per subject, the orthonormal `D × D` map from latent to response.
    pub mixing: Vec<Tensor>,
    /// Per subject, `patch_perms[n][m]` is the response patch holding latent block `m`.
    pub patch_perms: Vec<Vec<usize>>,
    /// `C × D_sem` label-to-semantic map.
    pub semantic_map: Tensor,
    /// `d_l × D_style` low-level-feature-to-style map.
    pub style_map: Tensor,
    /// Per subject noise standard deviation.
    pub noise_std: Vec<f64>,
}

impl SynthDataset {
    /// Noise-free latent `u` of one feature row.
    pub fn latent(&self, features: &StimulusFeatureSet, row: usize) -> Vec<f64> {
        latent_of(&self.semantic_map, &self.style_map, features, row)
    }

    pub fn experiment(&self, name: &str, features: StimulusFeatureSet) -> Result<Experiment> {
        let mode = match self.config.layout {
            SynthLayout::SameStimuli => StimulusMode::SameStimuli,
            SynthLayout::Disjoint { .. } => StimulusMode::DisjointStimuli,
        };
        Experiment::new(name, mode, Vec::new(), features, self.subjects.clone())
    }
}

fn latent_of(semantic: &Tensor, style: &Tensor, features: &StimulusFeatureSet, row: usize) -> Vec<f64> {
    let project = |x: &[f64], map: &Tensor| -> Vec<f64> {
        let cols = map.cols();
        let mut out = vec![0.0; cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in out.iter_mut().zip(map.row(i)) {
                    *o += xi * w;
                }
            }
        }
        out
    };
    let mut u = project(features.labels.row(row), semantic);
    u.extend(project(features.f_llv.row(row), style));
    u
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal matrix near the identity: Cayley transform of a random
/// skew-symmetric matrix scaled by `strength`.
fn cayley_rotation(d: usize, strength: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, d);
    let scale = strength / (d as f64).sqrt();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = gaussian(rng) * scale;
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let inv = (&eye - &a).try_inverse().expect("I - A is invertible for skew A");
    inv * (eye + a)
}

/// Synthetic multi-subject responses with known structure.
///
/// The latent of a stimulus is `u = [labels·P ; f_llv·A]`, laid out as
/// `patches` blocks of `patch_dim`. Subject `n` sees `O⁽ⁿ⁾u` where `O⁽ⁿ⁾`
/// rotates every block by a shared rotation followed by a subject-specific
/// one and then permutes blocks across patch positions.
pub fn synth_generate(features: &StimulusFeatureSet, cfg: &SynthDataConfig) -> Result<SynthDataset> {
    if !(cfg.snr > 0.0) {
        return Err(Error::InvalidArgument(format!("snr must be > 0, got {}", cfg.snr)));
    }
    if cfg.subjects == 0 || cfg.samples_per_subject == 0 || cfg.patches == 0 || cfg.patch_dim == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be ≥ 1".into()));
    }
    if cfg.semantic_patches == 0 || cfg.semantic_patches >= cfg.patches {
        return Err(Error::InvalidArgument(format!(
            "semantic patches {} must be in 1..{}",
            cfg.semantic_patches, cfg.patches
        )));
    }
    if cfg.heterogeneity < 0.0 || !cfg.heterogeneity.is_finite() {
        return Err(Error::InvalidArgument("heterogeneity must be finite and ≥ 0".into()));
    }
    if let SynthLayout::Disjoint { shared } = cfg.layout {
        if shared == 0 || shared > cfg.samples_per_subject {
            return Err(Error::InvalidArgument(format!(
                "shared stimuli {shared} must be in 1..={}",
                cfg.samples_per_subject
            )));
        }
    }
    if features.len() < cfg.stimuli_needed() {
        return Err(Error::InvalidArgument(format!(
            "layout needs {} stimuli, feature set has {}",
            cfg.stimuli_needed(),
            features.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, d) = (cfg.patches, cfg.patch_dim);
    let dim = cfg.latent_dim();
    let d_sem = cfg.semantic_patches * d;
    let c = features.class_count();
    let d_l = features.f_llv.cols();

    // Unit variance per latent coordinate for typical inputs.
    let semantic_map = Tensor::randn(&[c, d_sem], 1.0 / (c as f64 / 4.0).sqrt().max(1.0), &mut rng);
    let style_map = Tensor::randn(&[d_l, dim - d_sem], 1.0, &mut rng);

    let shared_blocks: Vec<DMatrix<f64>> = (0..m).map(|_| random_orthonormal(d, &mut rng)).collect();

    let mut subjects = Vec::with_capacity(cfg.subjects);
    let mut mixing = Vec::with_capacity(cfg.subjects);
    let mut patch_perms = Vec::with_capacity(cfg.subjects);
    let mut noise_std = Vec::with_capacity(cfg.subjects);
    let n_i = cfg.samples_per_subject;

    for s in 0..cfg.subjects {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let mut o = DMatrix::<f64>::zeros(dim, dim);
        for (block, rot) in shared_blocks.iter().enumerate() {
            let own = if cfg.heterogeneity > 0.0 {
                cayley_rotation(d, cfg.heterogeneity, &mut rng) * rot
            } else {
                rot.clone()
            };
            let (r0, c0) = (perm[block] * d, block * d);
            o.view_mut((r0, c0), (d, d)).copy_from(&own);
        }

        let rows: Vec<usize> = match cfg.layout {
            SynthLayout::SameStimuli => (0..n_i).collect(),
            SynthLayout::Disjoint { shared } => {
                let own = n_i - shared;
                (0..shared).chain((0..own).map(|k| shared + s * own + k)).collect()
            }
        };

        let mut signal = Vec::with_capacity(n_i * dim);
        for &r in &rows {
            let u = DMatrix::from_column_slice(dim, 1, &latent_of(&semantic_map, &style_map, features, r));
            signal.extend((&o * u).iter().copied());
        }
        let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
        let std = if cfg.snr.is_infinite() { 0.0 } else { (power / cfg.snr).sqrt() };
        if std > 0.0 {
            signal.iter_mut().for_each(|v| *v += std * gaussian(&mut rng));
        }

        let ids: Vec<String> = rows.iter().map(|&r| features.stimulus_ids[r].clone()).collect();
        let labels = features.labels.select_rows(&rows);
        subjects.push(SubjectDataset::new(
            format!("sub-{:02}", s + 1),
            Tensor::new(vec![n_i, m, d], signal)?,
            ids,
            labels,
        )?);
        let mut o_t = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            for j in 0..dim {
                o_t.set2(i, j, o[(i, j)]);
            }
        }
        mixing.push(o_t);
        patch_perms.push(perm);
        noise_std.push(std);
    }

    Ok(SynthDataset {
        config: *cfg,
        subjects,
        mixing,
        patch_perms,
        semantic_map,
        style_map,
        noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimfeat::synth_features;

    fn setup(snr: f64) -> (StimulusFeatureSet, SynthDataset) {
        let f = synth_features(60, 5, 6, 8, 11).unwrap().set;
        let cfg = SynthDataConfig::new(2, 40, 4, 6, snr, 5);
        let ds = synth_generate(&f, &cfg).unwrap();
        (f, ds)
    }

    #[test]
    fn mixing_is_orthonormal() {
        let (_, ds) = setup(5.0);
        for o in &ds.mixing {
            let g = o.transpose2().matmul(o).unwrap();
            assert!(g.max_abs_diff(&Tensor::identity(o.rows())) < 1e-10);
        }
    }

    #[test]
    fn noiseless_subjects_are_related_by_recorded_maps() {
        let (_, ds) = setup(f64::INFINITY);
        let (a, b) = (&ds.subjects[0], &ds.subjects[1]);
        let map = ds.mixing[1].matmul(&ds.mixing[0].transpose2()).unwrap();
        let xa = Tensor::new(vec![a.len(), 24], a.responses.data().to_vec()).unwrap();
        let xb = xa.matmul(&map.transpose2()).unwrap();
        assert!(xb.data().iter().zip(b.responses.data()).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn snr_sets_noise_power() {
        let (_, ds) = setup(4.0);
        assert!(ds.noise_std.iter().all(|&s| s > 0.0));
        let (_, clean) = setup(f64::INFINITY);
        assert!(clean.noise_std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_nonpositive_snr() {
        let f = synth_features(20, 3, 4, 4, 1).unwrap().set;
        for snr in [0.0, -1.0, f64::NAN] {
            assert!(synth_generate(&f, &SynthDataConfig::new(2, 10, 4, 4, snr, 1)).is_err());
        }
    }

    #[test]
    fn reproducible() {
        let (_, a) = setup(5.0);
        let (_, b) = setup(5.0);
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.responses, y.responses);
        }
    }

    #[test]
    fn disjoint_layout_shares_only_the_common_pool() {
        let f = synth_features(100, 4, 4, 4, 2).unwrap().set;
        let mut cfg = SynthDataConfig::new(3, 30, 4, 4, 5.0, 2);
        cfg.layout = SynthLayout::Disjoint { shared: 10 };
        let ds = synth_generate(&f, &cfg).unwrap();
        let a: std::collections::BTreeSet<_> = ds.subjects[0].stimulus_ids.iter().collect();
        let b: std::collections::BTreeSet<_> = ds.subjects[1].stimulus_ids.iter().collect();
        assert_eq!(a.intersection(&b).count(), 10);
        ds.experiment("x", f).unwrap();
    }
}
