use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{predict_refs, save_checkpoint, split_refs, EpochRecord, Method, Metrics, Split, StepLoss, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, holm_bonferroni, t_test, TTest};
use crate::model::Model;
use crate::neuro::{Experiment, SampleRef, SplitIndices};
use crate::objectives::LossWeights;

/// Worker count from `MUSEDEC_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("MUSEDEC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` workers. Output order matches
/// input order regardless of scheduling.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item processed"))
        .collect()
}

/// Candidate values for each loss weight; cells are their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ortho: Vec<f64>,
    pub llv: Vec<f64>,
    pub hlv: Vec<f64>,
}

impl GridSpec {
    pub fn uniform(values: &[f64]) -> Self {
        Self {
            ortho: values.to_vec(),
            llv: values.to_vec(),
            hlv: values.to_vec(),
        }
    }

    /// Cells in ortho-major order, keeping `base.map`.
    pub fn cells(&self, base: &LossWeights) -> Vec<LossWeights> {
        let mut out = Vec::new();
        for &o in &self.ortho {
            for &l in &self.llv {
                for &h in &self.hlv {
                    out.push(LossWeights { ortho: o, llv: l, hlv: h, map: base.map });
                }
            }
        }
        out
    }
}

/// One trained model inside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunModel {
    pub run_id: String,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub losses: Vec<StepLoss>,
}

/// A method trained with one seed. Single-subject methods train one model
/// per subject. Metrics are computed per subject and averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub val: Metrics,
    pub test: Option<Metrics>,
    pub models: Vec<RunModel>,
    #[serde(skip)]
    pub trained: Vec<Model>,
}

fn run_id(method: Method, seed: u64, subject: Option<&str>) -> String {
    match subject {
        Some(s) => format!("{method}-s{seed}-{s}"),
        None => format!("{method}-s{seed}"),
    }
}

fn subject_metrics(model: &Model, exp: &Experiment, splits: &[SplitIndices], split: Split, config: &TrainConfig) -> Result<Vec<Metrics>> {
    let mut out = Vec::with_capacity(splits.len());
    for (subject, sp) in splits.iter().enumerate() {
        let refs: Vec<SampleRef> = split_refs(std::slice::from_ref(sp), split)
            .into_iter()
            .map(|r| SampleRef { subject, ..r })
            .collect();
        if refs.is_empty() {
            continue;
        }
        let (scores, labels) = predict_refs(model, exp, &refs, config.eval_chunk)?;
        out.push(Metrics::from(&evaluate(&scores, &labels, config.threshold)?));
    }
    Ok(out)
}

/// The experiment and splits restricted to one subject.
pub fn subject_subset(exp: &Experiment, splits: &[SplitIndices], subject: usize) -> Result<(Experiment, Vec<SplitIndices>)> {
    let s = exp
        .subjects
        .get(subject)
        .ok_or(Error::UnknownSubject(subject))?;
    let sub = Experiment::new(
        format!("{}-{}", exp.name, s.subject_id),
        exp.mode,
        exp.roi_names.clone(),
        exp.features.clone(),
        vec![s.clone()],
    )?;
    Ok((sub, vec![splits[subject].clone()]))
}

/// Subject-averaged metrics of trained models on `split`. Each model scores
/// the subjects it was trained on; `None` when the split is empty.
pub fn score_models(models: &[Model], exp: &Experiment, splits: &[SplitIndices], split: Split, config: &TrainConfig) -> Result<Option<Metrics>> {
    let ids = exp.subject_ids();
    let mut per_subject = Vec::new();
    for model in models {
        if model.subjects == ids {
            per_subject.extend(subject_metrics(model, exp, splits, split, config)?);
            continue;
        }
        let [id] = model.subjects.as_slice() else {
            return Err(Error::Validation("model subjects do not match the data".into()));
        };
        let pos = ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Validation(format!("model subject `{id}` not in the data")))?;
        let (sub, sp) = subject_subset(exp, splits, pos)?;
        per_subject.extend(subject_metrics(model, &sub, &sp, split, config)?);
    }
    Ok((!per_subject.is_empty()).then(|| Metrics::mean(&per_subject)))
}

/// Trains `config.method` and scores the best checkpoint(s). `train_limit`
/// caps the training samples per subject for single-subject methods. With
/// `checkpoint`, final trainer states are saved there, one subdirectory per
/// subject for single-subject methods.
pub fn run_method(
    config: &TrainConfig,
    exp: &Experiment,
    splits: &[SplitIndices],
    train_limit: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<RunResult> {
    let method = config.method;
    let mut models = Vec::new();
    let mut trained = Vec::new();
    let mut train_one = |e: &Experiment, sp: &[SplitIndices], subject: Option<&str>| -> Result<()> {
        let mut t = Trainer::new(config.clone(), e, sp)?;
        t.run()?;
        if let Some(dir) = checkpoint {
            let dir = subject.map_or_else(|| dir.to_path_buf(), |s| dir.join(s));
            save_checkpoint(&dir, &t.config, &t.state)?;
        }
        let best = t.state.best_model();
        models.push(RunModel {
            run_id: run_id(method, config.seed, subject),
            best_epoch: t.state.best_epoch,
            history: t.state.history,
            losses: t.state.losses,
        });
        trained.push(best);
        Ok(())
    };
    if method.single_subject() {
        for i in 0..exp.subjects.len() {
            let (sub, mut sp) = subject_subset(exp, splits, i)?;
            if let Some(k) = train_limit {
                sp[0].train.truncate(k);
            }
            train_one(&sub, &sp, Some(&exp.subjects[i].subject_id))?;
        }
    } else {
        train_one(exp, splits, None)?;
    }
    let val = score_models(&trained, exp, splits, Split::Val, config)?
        .ok_or_else(|| Error::Config("val split is empty".into()))?;
    let test = score_models(&trained, exp, splits, Split::Test, config)?;
    Ok(RunResult {
        method,
        seed: config.seed,
        val,
        test,
        models,
        trained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub weights: LossWeights,
    pub val: Metrics,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub method: Method,
    pub seed: u64,
    pub cells: Vec<GridCell>,
    /// Index of the cell with the highest validation mAP; ties keep the first.
    pub best: usize,
}

impl GridReport {
    pub fn best_weights(&self) -> LossWeights {
        self.cells[self.best].weights
    }
}

/// Trains every grid cell with the same seed and selects on validation mAP.
pub fn grid_search(config: &TrainConfig, grid: &GridSpec, exp: &Experiment, splits: &[SplitIndices], threads: usize) -> Result<GridReport> {
    let cells = grid.cells(&config.weights);
    if cells.is_empty() {
        return Err(Error::Config("empty weight grid".into()));
    }
    for w in &cells {
        w.validate()?;
    }
    let results = parallel_map(&cells, threads, |w| {
        let mut c = config.clone();
        c.weights = *w;
        run_method(&c, exp, splits, None, None)
    });
    let mut out = Vec::with_capacity(cells.len());
    for (w, r) in cells.iter().zip(results) {
        let r = r?;
        out.push(GridCell {
            weights: *w,
            val: r.val,
            best_epoch: r.models[0].best_epoch,
        });
    }
    let mut best = 0;
    for (i, c) in out.iter().enumerate() {
        if c.val.map > out[best].val.map {
            best = i;
        }
    }
    Ok(GridReport {
        method: config.method,
        seed: config.seed,
        cells: out,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub paired: bool,
    /// Training samples per subject for single-subject methods.
    pub single_subject_train_limit: Option<usize>,
    pub alpha: f64,
    pub threads: usize,
}

impl CompareConfig {
    pub fn new(methods: Vec<Method>, seeds: Vec<u64>) -> Self {
        Self {
            methods,
            seeds,
            paired: true,
            single_subject_train_limit: None,
            alpha: 0.05,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub mean: Metrics,
    /// Sample standard deviation; 0 for a single run.
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub reference: Method,
    pub baseline: Method,
    pub metric: String,
    pub test: TTest,
    pub adjusted_p: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<MethodSummary>,
    /// `paired` or `welch`.
    pub test_mode: String,
    pub significance: Vec<Significance>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn metric(m: &Metrics, name: &str) -> f64 {
    match name {
        "map" => m.map,
        "auc" => m.auc,
        _ => m.hamming,
    }
}

/// Trains every method under every seed and compares test metrics against
/// clip-mused with t-tests and Holm correction.
pub fn compare(base: &TrainConfig, cc: &CompareConfig, exp: &Experiment, splits: &[SplitIndices]) -> Result<ComparisonReport> {
    if cc.methods.is_empty() || cc.seeds.is_empty() {
        return Err(Error::Config("compare needs at least one method and one seed".into()));
    }
    let jobs: Vec<(Method, u64)> = cc.methods.iter().flat_map(|&m| cc.seeds.iter().map(move |&s| (m, s))).collect();
    let results = parallel_map(&jobs, cc.threads, |&(method, seed)| {
        let mut c = base.clone();
        c.method = method;
        c.seed = seed;
        if method == Method::ClipSsVit {
            c.weights = LossWeights::clip_ss_vit();
        }
        run_method(&c, exp, splits, cc.single_subject_train_limit, None)
    });
    let runs: Vec<RunResult> = results.into_iter().collect::<Result<_>>()?;

    let test_of = |m: Method| -> Result<Vec<Metrics>> {
        runs.iter()
            .filter(|r| r.method == m)
            .map(|r| r.test.ok_or_else(|| Error::Config("compare needs a non-empty test split".into())))
            .collect()
    };
    let mut summaries = Vec::new();
    for &m in &cc.methods {
        let t = test_of(m)?;
        let col = |name: &str| mean_std(&t.iter().map(|x| metric(x, name)).collect::<Vec<_>>());
        let (map, auc, ham) = (col("map"), col("auc"), col("hamming"));
        summaries.push(MethodSummary {
            method: m,
            runs: t.len(),
            mean: Metrics { map: map.0, auc: auc.0, hamming: ham.0 },
            std: Metrics { map: map.1, auc: auc.1, hamming: ham.1 },
        });
    }

    let mut significance = Vec::new();
    let reference = Method::ClipMused;
    if cc.methods.contains(&reference) && cc.seeds.len() >= 2 {
        let ours = test_of(reference)?;
        for &b in cc.methods.iter().filter(|&&m| m != reference) {
            let theirs = test_of(b)?;
            for name in ["map", "auc", "hamming"] {
                let a: Vec<f64> = ours.iter().map(|x| metric(x, name)).collect();
                let c: Vec<f64> = theirs.iter().map(|x| metric(x, name)).collect();
                significance.push(Significance {
                    reference,
                    baseline: b,
                    metric: name.to_string(),
                    test: t_test(&a, &c, cc.paired)?,
                    adjusted_p: f64::NAN,
                    rejected: false,
                });
            }
        }
        if !significance.is_empty() {
            let p: Vec<f64> = significance.iter().map(|s| s.test.p_value).collect();
            let holm = holm_bonferroni(&p, cc.alpha)?;
            for (s, (adj, rej)) in significance.iter_mut().zip(holm.adjusted.into_iter().zip(holm.rejected)) {
                s.adjusted_p = adj;
                s.rejected = rej;
            }
        }
    }
    Ok(ComparisonReport {
        runs,
        summaries,
        test_mode: if cc.paired { "paired" } else { "welch" }.to_string(),
        significance,
    })
}
