//! Command-line front end of the `musedec` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{default_class_names, write_msed, DatasetManifest, Dtype};
use crate::model::{extract_attention, token_rsm, Model, TokenKind, Variant};
use crate::neuro::{split_dataset, synth_generate, Experiment, SplitIndices, SplitSpec, SynthDataConfig, SynthLayout};
use crate::stimfeat::synth_features;
use crate::tensor::Tensor;
use crate::trainer::{
    compare, grid_search, load_model, run_method, score_models, split_refs, subject_subset, threads_from_env,
    CompareConfig, ComparisonReport, GridSpec, Method, Metrics, RunDir, RunResult, Split, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "musedec", version, about = "Multi-subject neural decoding with subject tokens")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-subject dataset with stimulus features.
    GenSynth(GenSynthArgs),
    /// Train one method and write a run directory.
    Train(TrainArgs),
    /// Score a trained run's best checkpoint.
    Eval(EvalArgs),
    /// Train several methods over several seeds and test the differences.
    Compare(CompareArgs),
    /// Train every cell of a loss-weight grid and select on validation mAP.
    GridSearch(GridArgs),
    /// Export last-layer token attention over patches.
    ExportAttn(ExportArgs),
    /// Export cross-subject token similarity matrices.
    ExportRsm(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub subjects: usize,
    /// Samples per subject.
    #[arg(long)]
    pub samples: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub patches: usize,
    #[arg(long = "patch-dim")]
    pub patch_dim: usize,
    #[arg(long)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub d_llv: usize,
    #[arg(long, default_value_t = 16)]
    pub d_hlv: usize,
    /// Stimuli seen by every subject; the rest are private (disjoint layout).
    #[arg(long)]
    pub shared: Option<usize>,
    #[arg(long)]
    pub heterogeneity: Option<f64>,
    #[arg(long)]
    pub semantic_patches: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Hcp,
    Nsd,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training samples per subject for single-subject methods.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, alias = "run")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, required = true)]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Unpaired Welch tests instead of paired tests.
    #[arg(long)]
    pub welch: bool,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Values tried for every weight; defaults to the configured grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory written by `train`.
    #[arg(long, alias = "run")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Training configuration plus the data split, saved as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let train = match preset {
            Preset::Desk => TrainConfig::desk(Method::ClipMused),
            Preset::Hcp => TrainConfig::hcp(Method::ClipMused),
            Preset::Nsd => TrainConfig::nsd(Method::ClipMused),
        };
        Self {
            train,
            split: SplitSpec::fractions(crate::neuro::StimulusMode::SameStimuli, 0.7, 0.15, 0.15, 0),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn load_config(c: &ConfigArgs) -> Result<RunConfig> {
    match &c.config {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::preset(c.preset)),
    }
}

fn load_data(manifest: &Path, split: &SplitSpec) -> Result<(Experiment, Vec<SplitIndices>)> {
    let exp = DatasetManifest::load(manifest)?;
    let spec = SplitSpec { mode: exp.mode, ..*split };
    let splits = split_dataset(&exp.subjects, &spec)?;
    Ok((exp, splits))
}

#[derive(Debug, Serialize)]
struct GroundTruth<'a> {
    synth: &'a SynthDataConfig,
    feature_dims: (usize, usize),
    noise_std: &'a [f64],
    patch_perms: &'a [Vec<usize>],
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    if !a.snr.is_finite() || a.snr <= 0.0 {
        return Err(Error::InvalidArgument(format!("--snr must be a finite value > 0, got {}", a.snr)));
    }
    if a.subjects == 0 || a.samples == 0 || a.classes == 0 || a.patches == 0 || a.patch_dim == 0 {
        return Err(Error::InvalidArgument("sizes must be ≥ 1".into()));
    }
    let mut cfg = SynthDataConfig::new(a.subjects, a.samples, a.patches, a.patch_dim, a.snr, a.seed);
    if let Some(shared) = a.shared {
        if shared > a.samples {
            return Err(Error::InvalidArgument("--shared exceeds --samples".into()));
        }
        cfg.layout = SynthLayout::Disjoint { shared };
    }
    if let Some(h) = a.heterogeneity {
        cfg.heterogeneity = h;
    }
    if let Some(s) = a.semantic_patches {
        cfg.semantic_patches = s;
    }
    let features = synth_features(cfg.stimuli_needed(), a.classes, a.d_llv, a.d_hlv, a.seed)?;
    let ds = synth_generate(&features.set, &cfg)?;
    let exp = ds.experiment("synthetic", features.set)?;
    let manifest = DatasetManifest::write(&a.out, &exp, &default_class_names(a.classes))?;

    let gt = a.out.join("ground_truth");
    fs::create_dir_all(&gt).map_err(|e| Error::io("creating ground_truth", e))?;
    for (s, m) in exp.subjects.iter().zip(&ds.mixing) {
        write_msed(&gt.join(format!("{}_mixing.msed", s.subject_id)), m, Dtype::F64)?;
    }
    write_msed(&gt.join("semantic_map.msed"), &ds.semantic_map, Dtype::F64)?;
    write_msed(&gt.join("style_map.msed"), &ds.style_map, Dtype::F64)?;
    write_msed(&gt.join("prototypes.msed"), &features.prototypes, Dtype::F64)?;
    let record = GroundTruth {
        synth: &cfg,
        feature_dims: (a.d_llv, a.d_hlv),
        noise_std: &ds.noise_std,
        patch_perms: &ds.patch_perms,
    };
    let text = serde_json::to_string_pretty(&record)?;
    fs::write(gt.join("ground_truth.json"), text + "\n").map_err(|e| Error::io("writing ground truth", e))?;
    println!("wrote {} subjects to {}", exp.subjects.len(), manifest.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    method: Method,
    seed: u64,
    val: Metrics,
    test: Option<Metrics>,
    models: &'a [crate::trainer::RunModel],
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}: mAP {:.4}  AUC {:.4}  Hamming {:.4}", m.map, m.auc, m.hamming);
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut rc = load_config(&a.common)?;
    if let Some(m) = a.method {
        rc.train.method = m;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    rc.train.validate()?;
    let (exp, splits) = load_data(&a.common.data, &rc.split)?;
    let dir = RunDir::create(&a.common.out)?;
    dir.write_json("config.json", &rc)?;
    let r = run_method(&rc.train, &exp, &splits, a.train_limit, Some(&dir.join("checkpoint")))?;
    dir.write_runs(std::slice::from_ref(&r))?;
    dir.write_json(
        "report.json",
        &TrainReport {
            method: r.method,
            seed: r.seed,
            val: r.val,
            test: r.test,
            models: &r.models,
        },
    )?;
    print_metrics("val", &r.val);
    if let Some(t) = &r.test {
        print_metrics("test", t);
    }
    Ok(())
}

/// Best-checkpoint models of a run directory, one per subject for
/// single-subject methods.
pub fn load_run_models(run: &Path) -> Result<(RunConfig, Vec<Model>)> {
    let cfg_path = run.join("config.json");
    if !cfg_path.is_file() {
        return Err(Error::MissingCheckpoint(run.to_path_buf()));
    }
    let rc = RunConfig::read(&cfg_path)?;
    let ck = run.join("checkpoint");
    if ck.join("header.json").is_file() {
        return Ok((rc, vec![load_model(&ck)?]));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&ck)
        .map_err(|_| Error::MissingCheckpoint(ck.clone()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("header.json").is_file())
        .collect();
    if dirs.is_empty() {
        return Err(Error::MissingCheckpoint(ck));
    }
    dirs.sort();
    let models = dirs.iter().map(|d| load_model(d)).collect::<Result<Vec<_>>>()?;
    Ok((rc, models))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (rc, models) = load_run_models(&a.checkpoint)?;
    let (exp, splits) = load_data(&a.data, &rc.split)?;
    let val = score_models(&models, &exp, &splits, Split::Val, &rc.train)?
        .ok_or_else(|| Error::Config("val split is empty".into()))?;
    let test = score_models(&models, &exp, &splits, Split::Test, &rc.train)?;
    let r = RunResult {
        method: rc.train.method,
        seed: rc.train.seed,
        val,
        test,
        models: Vec::new(),
        trained: Vec::new(),
    };
    let dir = RunDir::create(&a.out)?;
    dir.write_runs(std::slice::from_ref(&r))?;
    dir.write_json("report.json", &r)?;
    print_metrics("val", &val);
    if let Some(t) = &test {
        print_metrics("test", t);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareSnapshot<'a> {
    run: &'a RunConfig,
    compare: &'a CompareConfig,
}

/// Plain-text table of a comparison report.
pub fn format_report(rep: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>15} {:>15} {:>15}", "method", "mAP↑", "AUC↑", "Hamming↓");
    for m in &rep.summaries {
        let _ = writeln!(
            s,
            "{:<14} {:>15} {:>15} {:>15}",
            m.method.name(),
            format!("{:.3}±{:.3}", m.mean.map, m.std.map),
            format!("{:.3}±{:.3}", m.mean.auc, m.std.auc),
            format!("{:.3}±{:.3}", m.mean.hamming, m.std.hamming),
        );
    }
    if !rep.significance.is_empty() {
        let _ = writeln!(s, "\n{} t-tests, Holm-adjusted", rep.test_mode);
        for t in &rep.significance {
            let _ = writeln!(
                s,
                "{} vs {:<14} {:<8} t={:>8.3} p={:.4} p_holm={:.4}{}",
                t.reference.name(),
                t.baseline.name(),
                t.metric,
                t.test.statistic,
                t.test.p_value,
                t.adjusted_p,
                if t.rejected { " *" } else { "" }
            );
        }
    }
    s
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let rc = load_config(&a.common)?;
    rc.train.validate()?;
    let (exp, splits) = load_data(&a.common.data, &rc.split)?;
    let mut cc = CompareConfig::new(a.methods.clone(), a.seeds.clone());
    cc.paired = !a.welch;
    cc.alpha = a.alpha;
    cc.single_subject_train_limit = a.train_limit;
    cc.threads = threads_from_env();
    let dir = RunDir::create(&a.common.out)?;
    dir.write_json("config.json", &CompareSnapshot { run: &rc, compare: &cc })?;
    let rep = compare(&rc.train, &cc, &exp, &splits)?;
    dir.write_runs(&rep.runs)?;
    dir.write_json("report.json", &rep)?;
    let text = format_report(&rep);
    fs::write(dir.join("report.txt"), &text).map_err(|e| Error::io("writing report.txt", e))?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridRow {
    ortho: f64,
    llv: f64,
    hlv: f64,
    val_map: f64,
    val_auc: f64,
    val_hamming: f64,
    best_epoch: usize,
    selected: bool,
}

fn grid_cmd(a: &GridArgs) -> Result<()> {
    let mut rc = load_config(&a.common)?;
    if let Some(m) = a.method {
        rc.train.method = m;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(g) = &a.grid {
        rc.train.grid = Some(GridSpec::uniform(g));
    }
    rc.train.validate()?;
    let grid = rc
        .train
        .grid
        .clone()
        .ok_or_else(|| Error::Config("no weight grid configured; pass --grid".into()))?;
    let (exp, splits) = load_data(&a.common.data, &rc.split)?;
    let dir = RunDir::create(&a.common.out)?;
    dir.write_json("config.json", &rc)?;
    let rep = grid_search(&rc.train, &grid, &exp, &splits, threads_from_env())?;
    let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
    for (i, c) in rep.cells.iter().enumerate() {
        w.serialize(GridRow {
            ortho: c.weights.ortho,
            llv: c.weights.llv,
            hlv: c.weights.hlv,
            val_map: c.val.map,
            val_auc: c.val.auc,
            val_hamming: c.val.hamming,
            best_epoch: c.best_epoch,
            selected: i == rep.best,
        })?;
    }
    w.flush().map_err(|e| Error::io("writing grid.csv", e))?;
    dir.write_json("report.json", &rep)?;
    let b = rep.best_weights();
    println!(
        "{} cells; best ortho={} llv={} hlv={} val mAP {:.4}",
        rep.cells.len(),
        b.ortho,
        b.llv,
        b.hlv,
        rep.cells[rep.best].val.map
    );
    Ok(())
}

fn exported_tokens(variant: Variant) -> Result<&'static [TokenKind]> {
    match variant {
        Variant::ClipMused => Ok(&[TokenKind::Llv, TokenKind::Hlv]),
        Variant::MsEmb => Ok(&[TokenKind::Emb]),
        v => Err(Error::VariantLacksTokens(v.name().into())),
    }
}

#[derive(Debug, Serialize)]
struct AttnRow {
    subject: String,
    token: &'static str,
    patch: usize,
    roi: String,
    weight: f64,
}

/// Mean last-layer attention of each subject token over that subject's
/// test samples; every (subject, token) row set sums to one.
fn attention_rows(models: &[Model], exp: &Experiment, splits: &[SplitIndices], chunk: usize) -> Result<Vec<AttnRow>> {
    let mut rows = Vec::new();
    let ids = exp.subject_ids();
    for model in models {
        let tokens = exported_tokens(model.config.variant)?;
        for (row, id) in model.subjects.iter().enumerate() {
            let pos = ids
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::Validation(format!("model subject `{id}` not in the data")))?;
            let (sub, sp) = subject_subset(exp, splits, pos)?;
            let refs = split_refs(&sp, Split::Test);
            if refs.is_empty() {
                return Err(Error::Config("test split is empty".into()));
            }
            let m = sub.patch_count();
            let mut sums = vec![vec![0.0; m]; tokens.len()];
            for part in refs.chunks(chunk.max(1)) {
                let batch = sub.batch(part);
                let out = model.forward(&batch.patches, &vec![row; part.len()], true)?;
                let last = out.attention.last().ok_or_else(|| Error::VariantLacksTokens(model.config.variant.name().into()))?;
                for (k, &t) in tokens.iter().enumerate() {
                    let a = extract_attention(last, t)?;
                    for i in 0..part.len() {
                        for (s, v) in sums[k].iter_mut().zip(a.row(i)) {
                            *s += v;
                        }
                    }
                }
            }
            for (k, &t) in tokens.iter().enumerate() {
                for (p, s) in sums[k].iter().enumerate() {
                    rows.push(AttnRow {
                        subject: id.clone(),
                        token: t.name(),
                        patch: p,
                        roi: exp.roi_names.get(p).cloned().unwrap_or_default(),
                        weight: s / refs.len() as f64,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn export_attn(a: &ExportArgs) -> Result<()> {
    let (rc, models) = load_run_models(&a.checkpoint)?;
    for m in &models {
        exported_tokens(m.config.variant)?;
    }
    let (exp, splits) = load_data(&a.data, &rc.split)?;
    let rows = attention_rows(&models, &exp, &splits, rc.train.eval_chunk)?;
    let dir = RunDir::create(&a.out)?;
    let mut w = csv::Writer::from_path(dir.join("attention.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("writing attention.csv", e))?;
    println!("wrote {} attention rows", rows.len());
    Ok(())
}

/// Writes a square matrix with subject ids as header and first column.
pub fn write_matrix_csv(path: &Path, ids: &[String], m: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn export_rsm(a: &ExportArgs) -> Result<()> {
    let (_, models) = load_run_models(&a.checkpoint)?;
    let [model] = models.as_slice() else {
        return Err(Error::VariantLacksTokens("per-subject models share no token table".into()));
    };
    let (llv, hlv) = token_rsm(model)?;
    let exp = DatasetManifest::load(&a.data)?;
    if exp.subject_ids() != model.subjects {
        return Err(Error::Validation("checkpoint subjects differ from the data".into()));
    }
    let dir = RunDir::create(&a.out)?;
    write_matrix_csv(&dir.join("rsm_llv.csv"), &model.subjects, &llv)?;
    write_matrix_csv(&dir.join("rsm_hlv.csv"), &model.subjects, &hlv)?;
    println!("wrote {0}×{0} token RSMs", model.subjects.len());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::GridSearch(a) => grid_cmd(a),
        Command::ExportAttn(a) => export_attn(a),
        Command::ExportRsm(a) => export_rsm(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
