//! Optimization loop, early stopping, checkpoints, grid search and the
//! multi-method comparison harness.

mod adam;
mod checkpoint;
mod harness;
mod rundir;

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint};
pub use harness::{
    compare, grid_search, parallel_map, run_method, score_models, subject_subset, threads_from_env, CompareConfig, ComparisonReport, GridCell,
    GridReport, GridSpec, MethodSummary, RunModel, RunResult, Significance,
};
pub use rundir::{LossRow, MetricRow, RunDir};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{EncoderConfig, Model, ResidualVariant, Variant};
use crate::neuro::{make_batches, BatchStream, Experiment, SampleRef, SplitIndices};
use crate::objectives::{attach_objective, Guidance, LossInputs, LossParts, LossWeights};
use crate::tensor::Tensor;

/// A trainable method as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SsVit,
    SsMlp,
    MsSmodel,
    MsEmb,
    ClipMused,
    ClipSsVit,
    MappingBased,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SsVit,
        Method::SsMlp,
        Method::MsSmodel,
        Method::MsEmb,
        Method::ClipMused,
        Method::ClipSsVit,
        Method::MappingBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SsVit => "ss-vit",
            Method::SsMlp => "ss-mlp",
            Method::MsSmodel => "ms-smodel",
            Method::MsEmb => "ms-emb",
            Method::ClipMused => "clip-mused",
            Method::ClipSsVit => "clip-ss-vit",
            Method::MappingBased => "mapping-based",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Method::SsVit => Variant::SsVit,
            Method::SsMlp => Variant::SsMlp,
            Method::MsSmodel => Variant::MsSmodel,
            Method::MsEmb => Variant::MsEmb,
            Method::ClipMused | Method::ClipSsVit | Method::MappingBased => Variant::ClipMused,
        }
    }

    /// One model per subject, trained on that subject alone.
    pub fn single_subject(self) -> bool {
        matches!(self, Method::SsVit | Method::SsMlp | Method::ClipSsVit)
    }

    pub fn guidance(self) -> Guidance {
        if self == Method::MappingBased {
            Guidance::Mapping
        } else {
            Guidance::Rsa
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::UnknownMethod(s.to_string(), valid.join(", "))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    #[serde(default)]
    pub residual: ResidualVariant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelHyper {
    pub fn new(layers: usize, heads: usize, model_dim: usize) -> Self {
        Self {
            layers,
            heads,
            model_dim,
            mlp_hidden: 4 * model_dim,
            head_hidden: model_dim,
            residual: ResidualVariant::Paper,
            init_std: default_init_std(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelHyper,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation mAP improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_chunk")]
    pub eval_chunk: usize,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_chunk() -> usize {
    64
}

impl TrainConfig {
    fn base(method: Method, model: ModelHyper, lr: f64, batch: usize, weights: LossWeights) -> Self {
        Self {
            method,
            model,
            learning_rate: lr,
            batch_size: batch,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            weights,
            max_grad_norm: None,
            threshold: default_threshold(),
            eval_chunk: default_chunk(),
            grid: None,
        }
    }

    /// Volume-input regime.
    pub fn hcp(method: Method) -> Self {
        let mut c = Self::base(method, ModelHyper::new(4, 8, 512), 1e-3, 64, LossWeights::hcp());
        c.grid = Some(GridSpec::uniform(&[0.001, 0.01, 0.1]));
        c
    }

    /// ROI-input regime.
    pub fn nsd(method: Method) -> Self {
        let mut c = Self::base(method, ModelHyper::new(24, 8, 512), 1e-4, 64, LossWeights::nsd());
        c.grid = Some(GridSpec::uniform(&[0.0001, 0.001, 0.01]));
        c
    }

    /// Small model sized for synthetic benchmarks on one CPU core.
    pub fn desk(method: Method) -> Self {
        let mut model = ModelHyper::new(2, 2, 32);
        model.mlp_hidden = 64;
        Self::base(method, model, 2e-3, 32, LossWeights::new(0.001, 0.01, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be ≥ 2".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be ≥ 1".into()));
        }
        self.weights.validate()
    }

    pub fn encoder_config(&self, exp: &Experiment) -> EncoderConfig {
        let h = &self.model;
        let mut c = EncoderConfig::new(self.method.variant(), exp.patch_count(), exp.patch_dim(), exp.class_count());
        c.layers = h.layers;
        c.heads = h.heads;
        c.model_dim = h.model_dim;
        c.mlp_hidden = h.mlp_hidden;
        c.head_hidden = h.head_hidden;
        c.residual = h.residual;
        c.init_std = h.init_std;
        if self.method.guidance() == Guidance::Mapping {
            c.mapping = Some((exp.features.f_llv.cols(), exp.features.f_hlv.cols()));
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn rows(self, s: &SplitIndices) -> &[usize] {
        match self {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        }
    }
}

/// Scalar metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
}

impl From<&EvalResult> for Metrics {
    fn from(r: &EvalResult) -> Self {
        Self {
            map: r.map,
            auc: r.auc,
            hamming: r.hamming,
        }
    }
}

impl Metrics {
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        Metrics {
            map: items.iter().map(|m| m.map).sum::<f64>() / n,
            auc: items.iter().map(|m| m.auc).sum::<f64>() / n,
            hamming: items.iter().map(|m| m.hamming).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub parts: LossParts,
}

/// Everything needed to continue training bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_map: Option<f64>,
    pub best_epoch: usize,
    pub best_params: BTreeMap<String, Tensor>,
    pub stale: usize,
    pub done: bool,
    pub skipped_steps: usize,
    pub history: Vec<EpochRecord>,
    pub losses: Vec<StepLoss>,
}

impl TrainState {
    pub fn best_model(&self) -> Model {
        Model {
            params: self.best_params.clone(),
            ..self.model.clone()
        }
    }
}

/// Rows of `split` across all subjects, pooled.
pub fn split_refs(splits: &[SplitIndices], split: Split) -> Vec<SampleRef> {
    splits
        .iter()
        .enumerate()
        .flat_map(|(subject, s)| split.rows(s).iter().map(move |&sample| SampleRef { subject, sample }))
        .collect()
}

/// Predicted probabilities and labels for a list of samples.
pub fn predict_refs(model: &Model, exp: &Experiment, refs: &[SampleRef], chunk: usize) -> Result<(Tensor, Tensor)> {
    let c = exp.class_count();
    let mut scores = Vec::with_capacity(refs.len() * c);
    let mut labels = Vec::with_capacity(refs.len() * c);
    for part in refs.chunks(chunk.max(1)) {
        let batch = exp.batch(part);
        let out = model.forward(&batch.patches, &batch.subject_index, false)?;
        scores.extend_from_slice(out.probs.data());
        labels.extend_from_slice(batch.labels.data());
    }
    let n = refs.len();
    Ok((Tensor::new(vec![n, c], scores)?, Tensor::new(vec![n, c], labels)?))
}

pub fn evaluate_split(model: &Model, exp: &Experiment, splits: &[SplitIndices], split: Split, chunk: usize, threshold: f64) -> Result<EvalResult> {
    let refs = split_refs(splits, split);
    if refs.is_empty() {
        return Err(Error::Config(format!("{} split is empty", split.name())));
    }
    let (scores, labels) = predict_refs(model, exp, &refs, chunk)?;
    evaluate(&scores, &labels, threshold)
}

/// Stateful trainer over one experiment and its splits.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    exp: &'a Experiment,
    splits: &'a [SplitIndices],
    stream: BatchStream,
    adam: AdamConfig,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, exp: &'a Experiment, splits: &'a [SplitIndices]) -> Result<Self> {
        let model = Model::new(config.encoder_config(exp), exp.subject_ids(), config.seed)?;
        let state = TrainState {
            best_params: model.params.clone(),
            model,
            adam: AdamState::default(),
            epoch: 0,
            best_val_map: None,
            best_epoch: 0,
            stale: 0,
            done: false,
            skipped_steps: 0,
            history: Vec::new(),
            losses: Vec::new(),
        };
        Self::resume(config, exp, splits, state)
    }

    /// Continues from a saved state.
    pub fn resume(config: TrainConfig, exp: &'a Experiment, splits: &'a [SplitIndices], state: TrainState) -> Result<Self> {
        config.validate()?;
        if splits.len() != exp.subjects.len() {
            return Err(Error::Config(format!(
                "{} split sets for {} subjects",
                splits.len(),
                exp.subjects.len()
            )));
        }
        if state.model.subjects != exp.subject_ids() {
            return Err(Error::Validation("model subjects differ from the experiment's".into()));
        }
        let train: Vec<Vec<usize>> = splits.iter().map(|s| s.train.clone()).collect();
        let stream = make_batches(&train, config.batch_size, config.seed)?;
        Ok(Self {
            adam: AdamConfig::new(config.learning_rate),
            config,
            exp,
            splits,
            stream,
            state,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// One pass over the shuffled training pool followed by validation.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.state.done {
            return Ok(());
        }
        let epoch = self.state.epoch;
        let guidance = self.config.method.guidance();
        let mut total = 0.0;
        let batches = self.stream.epoch(epoch);
        for (step, refs) in batches.iter().enumerate() {
            let batch = self.exp.batch(refs);
            let model = &self.state.model;
            let mut mg = model.build_graph(&batch.subject_index)?;
            let nodes = attach_objective(&mut mg, &self.config.weights, guidance)?;
            let (name, x) = model.input_tensor(&batch.patches)?;
            let inputs = LossInputs::new(&batch.labels, &batch.f_llv, &batch.f_hlv)?;
            let grads = {
                let mut b = model.bindings();
                b.bind(name, &x);
                inputs.bind(&mut b);
                mg.graph.gradient(&b, "loss").map_err(|e| match e {
                    Error::NonFinite { node } => Error::Diverged {
                        epoch,
                        detail: format!("step {step}: non-finite value at {node}"),
                    },
                    other => other,
                })?
            };
            if !grads.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("step {step}: loss {}", grads.value),
                });
            }
            let parts = nodes.parts(|id| grads.evaluation.value(id).data()[0]);
            let mut g = grads.grads;
            if let Some(max) = self.config.max_grad_norm {
                clip_grad_norm(&mut g, max);
            }
            if adam_step(&mut self.state.model.params, &g, &mut self.state.adam, &self.adam)? == StepOutcome::SkippedNonFinite {
                self.state.skipped_steps += 1;
            }
            total += grads.value;
            self.state.losses.push(StepLoss {
                epoch,
                step,
                total: grads.value,
                parts,
            });
        }
        let val = evaluate_split(
            &self.state.model,
            self.exp,
            self.splits,
            Split::Val,
            self.config.eval_chunk,
            self.config.threshold,
        )?;
        let metrics = Metrics::from(&val);
        self.state.history.push(EpochRecord {
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            val: metrics,
        });
        self.state.epoch += 1;
        if self.state.best_val_map.map_or(true, |b| metrics.map > b) {
            self.state.best_val_map = Some(metrics.map);
            self.state.best_epoch = epoch;
            self.state.best_params = self.state.model.params.clone();
            self.state.stale = 0;
        } else {
            self.state.stale += 1;
        }
        log::debug!(
            "{} epoch {epoch}: loss {:.5} val mAP {:.4} AUC {:.4}",
            self.config.method,
            total / batches.len().max(1) as f64,
            metrics.map,
            metrics.auc
        );
        if self.state.stale >= self.config.patience || self.state.epoch >= self.config.max_epochs {
            self.state.done = true;
        }
        Ok(())
    }

    /// Runs until early stopping or the epoch budget.
    pub fn run(&mut self) -> Result<()> {
        while !self.state.done {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs at most `epochs` more epochs.
    pub fn run_for(&mut self, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            if self.state.done {
                break;
            }
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Result of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters of the best validation epoch.
    pub best: Model,
    pub val: EvalResult,
    pub test: Option<EvalResult>,
}

/// Trains to completion and evaluates the best checkpoint.
pub fn train(config: &TrainConfig, exp: &Experiment, splits: &[SplitIndices]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), exp, splits)?;
    t.run()?;
    finish(t)
}

pub fn finish(t: Trainer<'_>) -> Result<TrainOutcome> {
    let best = t.state.best_model();
    let (chunk, thr) = (t.config.eval_chunk, t.config.threshold);
    let val = evaluate_split(&best, t.exp, t.splits, Split::Val, chunk, thr)?;
    let test = if split_refs(t.splits, Split::Test).is_empty() {
        None
    } else {
        Some(evaluate_split(&best, t.exp, t.splits, Split::Test, chunk, thr)?)
    };
    Ok(TrainOutcome {
        state: t.state,
        best,
        val,
        test,
    })
}
