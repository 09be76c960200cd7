use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{StimulusMode, SubjectDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSizes {
    Counts { train: usize, val: usize, test: usize },
    Fractions { train: f64, val: f64, test: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: StimulusMode,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl SplitSpec {
    pub fn counts(mode: StimulusMode, train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            mode,
            sizes: SplitSizes::Counts { train, val, test },
            seed,
        }
    }

    pub fn fractions(mode: StimulusMode, train: f64, val: f64, test: f64, seed: u64) -> Self {
        Self {
            mode,
            sizes: SplitSizes::Fractions { train, val, test },
            seed,
        }
    }
}

/// Sample indices into one subject's dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn resolve(sizes: SplitSizes, n: usize) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = match sizes {
        SplitSizes::Counts { train, val, test } => (train, val, test),
        SplitSizes::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || train + val + test > 1.0 + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "split fractions ({train}, {val}, {test}) are not a partition"
                )));
            }
            let va = (val * n as f64).round() as usize;
            let te = (test * n as f64).round() as usize;
            let tr = ((train * n as f64).round() as usize).min(n.saturating_sub(va + te));
            (tr, va, te)
        }
    };
    if tr + va + te > n {
        return Err(Error::InvalidArgument(format!(
            "split ({tr}, {va}, {te}) needs more than the {n} available samples"
        )));
    }
    Ok((tr, va, te))
}

/// Deterministic per-subject train/val/test partition.
///
/// Same-stimuli mode partitions the union of stimulus ids once, so a stimulus
/// lands in the same split for every subject. Disjoint-stimuli mode reserves
/// stimuli seen by all subjects for test and keeps each subject's training
/// stimuli private; stimuli shared by only some subjects stay with the first
/// subject that saw them.
pub fn split_dataset(datasets: &[SubjectDataset], spec: &SplitSpec) -> Result<Vec<SplitIndices>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        StimulusMode::SameStimuli => {
            let pool: BTreeSet<&str> = datasets
                .iter()
                .flat_map(|d| d.stimulus_ids.iter().map(String::as_str))
                .collect();
            let mut pool: Vec<&str> = pool.into_iter().collect();
            let (tr, va, te) = resolve(spec.sizes, pool.len())?;
            pool.shuffle(&mut rng);
            let mut which: HashMap<&str, u8> = HashMap::new();
            for (k, id) in pool.iter().enumerate() {
                let s = if k < tr {
                    0
                } else if k < tr + va {
                    1
                } else if k < tr + va + te {
                    2
                } else {
                    3
                };
                which.insert(id, s);
            }
            Ok(datasets
                .iter()
                .map(|d| {
                    let mut out = SplitIndices::default();
                    for (i, id) in d.stimulus_ids.iter().enumerate() {
                        match which[id.as_str()] {
                            0 => out.train.push(i),
                            1 => out.val.push(i),
                            2 => out.test.push(i),
                            _ => {}
                        }
                    }
                    out
                })
                .collect())
        }
        StimulusMode::DisjointStimuli => {
            let mut seen: HashMap<&str, Vec<usize>> = HashMap::new();
            for (s, d) in datasets.iter().enumerate() {
                for id in &d.stimulus_ids {
                    let v = seen.entry(id.as_str()).or_default();
                    if v.last() != Some(&s) {
                        v.push(s);
                    }
                }
            }
            let everyone = datasets.len();
            let mut out = Vec::with_capacity(datasets.len());
            for (s, d) in datasets.iter().enumerate() {
                let mut split = SplitIndices::default();
                let mut private = Vec::new();
                for (i, id) in d.stimulus_ids.iter().enumerate() {
                    let owners = &seen[id.as_str()];
                    if owners.len() == everyone && everyone > 1 {
                        split.test.push(i);
                    } else if owners[0] == s {
                        private.push(i);
                    }
                }
                if split.test.is_empty() {
                    return Err(Error::InvalidArgument(
                        "disjoint-stimuli split needs stimuli viewed by every subject".into(),
                    ));
                }
                let (tr, va) = match spec.sizes {
                    SplitSizes::Counts { train, val, .. } => {
                        if train + val > private.len() {
                            return Err(Error::InvalidArgument(format!(
                                "subject {}: {} private samples, split asks for {}",
                                d.subject_id,
                                private.len(),
                                train + val
                            )));
                        }
                        (train, val)
                    }
                    SplitSizes::Fractions { train, val, .. } => {
                        let total = train + val;
                        if !(total > 0.0) {
                            return Err(Error::InvalidArgument("empty train/val fractions".into()));
                        }
                        let va = (val / total * private.len() as f64).round() as usize;
                        (private.len() - va, va)
                    }
                };
                private.shuffle(&mut rng);
                split.val = private[tr..tr + va].to_vec();
                split.train = private[..tr].to_vec();
                split.train.sort_unstable();
                split.val.sort_unstable();
                out.push(split);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn subject(name: &str, ids: impl IntoIterator<Item = String>) -> SubjectDataset {
        let ids: Vec<String> = ids.into_iter().collect();
        let n = ids.len();
        SubjectDataset::new(name, Tensor::zeros(&[n, 1, 1]), ids, Tensor::zeros(&[n, 1])).unwrap()
    }

    #[test]
    fn same_stimuli_counts_are_exact() {
        let d = subject("a", (0..2964).map(|i| format!("s{i}")));
        let spec = SplitSpec::counts(StimulusMode::SameStimuli, 2000, 265, 699, 1);
        let s = &split_dataset(&[d], &spec).unwrap()[0];
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 265, 699));
    }

    #[test]
    fn fractions_round() {
        let d = subject("a", (0..100).map(|i| format!("s{i}")));
        let spec = SplitSpec::fractions(StimulusMode::SameStimuli, 0.8, 0.1, 0.1, 1);
        let s = &split_dataset(&[d], &spec).unwrap()[0];
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let d = subject("a", (0..50).map(|i| format!("s{i}")));
        let spec = SplitSpec::fractions(StimulusMode::SameStimuli, 0.6, 0.2, 0.2, 9);
        let s = &split_dataset(&[d], &spec).unwrap()[0];
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn same_stimulus_lands_in_same_split_for_every_subject() {
        let a = subject("a", (0..30).map(|i| format!("s{i}")));
        let b = subject("b", (0..30).rev().map(|i| format!("s{i}")));
        let spec = SplitSpec::fractions(StimulusMode::SameStimuli, 0.5, 0.25, 0.25, 2);
        let s = split_dataset(&[a.clone(), b.clone()], &spec).unwrap();
        let ids = |d: &SubjectDataset, idx: &[usize]| -> BTreeSet<String> {
            idx.iter().map(|&i| d.stimulus_ids[i].clone()).collect()
        };
        assert_eq!(ids(&a, &s[0].test), ids(&b, &s[1].test));
    }

    #[test]
    fn disjoint_mode_keeps_training_private() {
        let shared: Vec<String> = (0..30).map(|i| format!("shared{i}")).collect();
        let subs: Vec<SubjectDataset> = (0..3)
            .map(|k| {
                subject(
                    &format!("sub{k}"),
                    (0..90).map(move |i| format!("own{k}-{i}")).chain(shared.clone()),
                )
            })
            .collect();
        let spec = SplitSpec::fractions(StimulusMode::DisjointStimuli, 0.9, 0.1, 0.0, 3);
        let s = split_dataset(&subs, &spec).unwrap();
        let train_ids: Vec<BTreeSet<&str>> = s
            .iter()
            .zip(&subs)
            .map(|(sp, d)| sp.train.iter().map(|&i| d.stimulus_ids[i].as_str()).collect())
            .collect();
        for a in 0..3 {
            assert_eq!(s[a].test.len(), 30);
            for b in (a + 1)..3 {
                assert!(train_ids[a].is_disjoint(&train_ids[b]));
            }
        }
    }

    #[test]
    fn infeasible_counts() {
        let d = subject("a", (0..10).map(|i| format!("s{i}")));
        let spec = SplitSpec::counts(StimulusMode::SameStimuli, 8, 2, 1, 0);
        assert!(split_dataset(&[d], &spec).is_err());
    }
}
