//! Batch commands: synth, train, eval, reduce, search, report.
//!
//! A run directory looks like
//!
//! ```text
//! {out}/config.toml
//! {out}/metrics.json
//! {out}/pr_curve.csv
//! {out}/traces/{trial}.csv
//! {out}/{strategy}/{subject}/{har,pbd}.ckpt
//! {out}/{strategy}/{subject}/{har,pbd}_log.csv
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodygraph::{reduce_sensors, GraphError, NodeId, SensorSet, SensorSetName, SkeletonDef};
use crate::dataset::{
    load_corpus, loso_splits, save_trial, segment_corpus, synth_generate, write_manifest, DatasetError, SegmentOptions,
    SynthConfig, SynthSummary, Trial, WindowSample,
};
use crate::eval::{build_report, pooled_curve, trace, trace_to_csv, EvalError, MetricsReport};
use crate::network::{
    grid, grid_search, log_to_csv, FoldHygiene, GridPoint, GridSearch, ModelSpec, NetworkError, Pipeline, Role,
    Strategy, TrainConfig, TrainedFold, WindowPrediction,
};
use crate::numerics::{checkpoint, NumericsError, SeedStream};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("run directory {run} is missing fold {subject}: {path} not found")]
    MissingFold { run: String, subject: String, path: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::MissingFold { .. } => "missing_fold",
            CliError::Dataset(DatasetError::Config(_)) | CliError::Network(NetworkError::Config(_)) => "config",
            CliError::Graph(GraphError::UnknownSensorSet(_)) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Graph(_) => "graph",
            CliError::Network(_) => "network",
            CliError::Eval(_) => "eval",
            CliError::Numerics(_) => "numerics",
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Grid for `search`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Subjects drawn at random as the hold-out split.
    pub holdout_subjects: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            gammas: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            betas: vec![0.9991, 0.9995, 0.9999],
            lrs: vec![1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
            holdout_subjects: 2,
        }
    }
}

/// Everything a command needs; loaded from TOML, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Manifest of the corpus to train on.
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Skeleton definition; the bundled 22-joint skeleton when absent.
    pub skeleton: Option<PathBuf>,
    pub sensor_set: SensorSetName,
    /// Node ids to drop when `sensor_set = "custom"`.
    pub removed_nodes: Vec<NodeId>,
    /// Subjects left out of the LOSO run, e.g. a search hold-out.
    pub exclude_subjects: Vec<String>,
    pub parallel_folds: usize,
    pub synth: SynthConfig,
    pub segment: SegmentOptions,
    pub train: TrainConfig,
    pub har_model: ModelSpec,
    pub pbd_model: ModelSpec,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: None,
            out: None,
            skeleton: None,
            sensor_set: SensorSetName::Full22,
            removed_nodes: Vec::new(),
            exclude_subjects: Vec::new(),
            parallel_folds: 1,
            synth: SynthConfig::default(),
            segment: SegmentOptions::default(),
            train: TrainConfig::default(),
            har_model: ModelSpec::har(),
            pbd_model: ModelSpec::pbd(),
            search: SearchConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub sensor_set: Option<SensorSetName>,
    pub out: Option<PathBuf>,
    pub parallel_folds: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::from_toml(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in a file resolve against the file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.corpus, &mut cfg.out, &mut cfg.skeleton].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.strategy {
            self.train.strategy = s;
        }
        if let Some(s) = o.sensor_set {
            self.sensor_set = s;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(n) = o.parallel_folds {
            self.parallel_folds = n;
        }
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Config("no output directory (set `out` or pass --out)".into()))
    }

    fn corpus_path(&self) -> Result<&Path, CliError> {
        self.corpus.as_deref().ok_or_else(|| CliError::Config("no corpus manifest (set `corpus`)".into()))
    }

    fn skeleton(&self) -> Result<SkeletonDef, CliError> {
        Ok(match &self.skeleton {
            Some(p) => SkeletonDef::load(p)?,
            None => SkeletonDef::canonical(),
        })
    }

    fn sensors(&self, skeleton: &SkeletonDef) -> Result<SensorSet, CliError> {
        match self.sensor_set {
            SensorSetName::Custom => Ok(SensorSet::custom(self.removed_nodes.clone())),
            name if self.removed_nodes.is_empty() => Ok(SensorSet::preset(name, skeleton)?),
            name => Err(CliError::Config(format!("removed_nodes is only valid with sensor_set = \"custom\", not {name}"))),
        }
    }

    /// Graph and both modules for this configuration.
    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        if self.parallel_folds == 0 {
            return Err(CliError::Config("parallel_folds must be at least 1".into()));
        }
        let skeleton = self.skeleton()?;
        let graph = reduce_sensors(&skeleton.full_graph()?, &self.sensors(&skeleton)?)?;
        Ok(Pipeline::new(graph, self.har_model.clone(), self.pbd_model.clone(), self.train.clone())?)
    }

    /// Windows of the configured corpus, minus excluded subjects.
    pub fn windows(&self) -> Result<(Vec<Trial>, Vec<WindowSample>), CliError> {
        let mut trials = load_corpus(self.corpus_path()?)?;
        trials.retain(|t| !self.exclude_subjects.contains(&t.subject_id));
        let windows = segment_corpus(&trials, &self.segment);
        Ok((trials, windows))
    }
}

/// Written next to the trial files by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub config: SynthConfig,
    pub summary: SynthSummary,
}

/// Generates a corpus: one CSV per trial, `manifest.txt` and `synth.json`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir()?;
    let (trials, summary) = synth_generate(&cfg.synth, cfg.seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = Vec::with_capacity(trials.len());
    for t in &trials {
        let name = PathBuf::from(format!("{}.csv", t.id()));
        save_trial(t, &out.join(&name))?;
        files.push(name);
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &files)?;
    let record = SynthRecord { seed: cfg.seed, config: cfg.synth.clone(), summary };
    write(&out.join("synth.json"), serde_json::to_string_pretty(&record).expect("record serializes") + "\n")?;
    log::info!("wrote {} trials to {}", trials.len(), out.display());
    Ok(manifest)
}

/// What `cmd_train` produced, for callers that want more than the files.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub report: MetricsReport,
    pub hygiene: Vec<(String, FoldHygiene)>,
    pub folds: Vec<TrainedFold>,
}

fn sensor_tag(cfg: &RunConfig) -> String {
    cfg.sensor_set.to_string()
}

fn fold_dir(run: &Path, strategy: Strategy, subject: &str) -> PathBuf {
    run.join(strategy.name()).join(subject)
}

/// Leave-one-subject-out training with the configured strategy.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let pipeline = cfg.pipeline()?;
    let (trials, windows) = cfg.windows()?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let outcomes = pipeline.run_loso(&windows, cfg.parallel_folds, SeedStream::new(cfg.seed))?;

    let strategy = cfg.train.strategy;
    let mut preds = Vec::with_capacity(outcomes.len());
    let mut hygiene = Vec::with_capacity(outcomes.len());
    let mut folds = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let t = &o.trained;
        let dir = fold_dir(&out, strategy, &t.test_subject);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if let Some(h) = &t.har_params {
            checkpoint::save(h, &dir.join("har.ckpt"))?;
        }
        checkpoint::save(&t.pbd_params, &dir.join("pbd.ckpt"))?;
        let har_log = match &t.pretrain {
            Some(p) if t.har_log.is_empty() => &p.log,
            _ => &t.har_log,
        };
        if t.har_params.is_some() {
            write(&dir.join("har_log.csv"), log_to_csv(har_log))?;
        }
        write(&dir.join("pbd_log.csv"), log_to_csv(&t.pbd_log))?;
        hygiene.push((t.test_subject.clone(), o.hygiene));
        preds.push((t.test_subject.clone(), o.predictions));
        folds.push(o.trained);
    }
    let report = write_report(&out, cfg, &pipeline, &trials, &folds, &preds)?;
    Ok(TrainRun { report, hygiene, folds })
}

fn write_report(
    out: &Path,
    cfg: &RunConfig,
    pipeline: &Pipeline,
    trials: &[Trial],
    folds: &[TrainedFold],
    preds: &[(String, Vec<WindowPrediction>)],
) -> Result<MetricsReport, CliError> {
    let report = build_report(cfg.train.strategy.name(), &sensor_tag(cfg), preds)?;
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    write(&out.join("pr_curve.csv"), pooled_curve(preds)?.to_csv())?;
    for fold in folds {
        for t in trials.iter().filter(|t| t.subject_id == fold.test_subject) {
            let rows = trace(t, pipeline, fold, &cfg.segment)?;
            write(&out.join("traces").join(format!("{}.csv", t.id())), trace_to_csv(&rows))?;
        }
    }
    Ok(report)
}

/// Recomputes metrics, the PR curve and traces from a run directory's checkpoints.
pub fn cmd_eval(run: &Path) -> Result<MetricsReport, CliError> {
    let cfg = RunConfig::from_toml(&read(&run.join("config.toml"))?)?;
    let pipeline = cfg.pipeline()?;
    let (trials, windows) = cfg.windows()?;
    let strategy = cfg.train.strategy;
    let uses_har = !cfg.train.pbd_only;
    let mut folds = Vec::new();
    let mut preds = Vec::new();
    for plan in loso_splits(&windows)? {
        let dir = fold_dir(run, strategy, &plan.test_subject);
        let load = |module: &str| {
            let path = dir.join(format!("{module}.ckpt"));
            if !path.exists() {
                return Err(CliError::MissingFold {
                    run: run.display().to_string(),
                    subject: plan.test_subject.clone(),
                    path: path.display().to_string(),
                });
            }
            Ok(checkpoint::load(&path)?)
        };
        let trained = TrainedFold {
            test_subject: plan.test_subject.clone(),
            strategy,
            pbd_only: cfg.train.pbd_only,
            har_params: if uses_har { Some(load("har")?) } else { None },
            pbd_params: load("pbd")?,
            pretrain: None,
            har_log: Vec::new(),
            pbd_log: Vec::new(),
        };
        let test: Vec<&WindowSample> = windows.iter().filter(|w| w.subject_id == plan.test_subject).collect();
        preds.push((plan.test_subject.clone(), pipeline.predict(&trained, &test)?));
        folds.push(trained);
    }
    write_report(run, &cfg, &pipeline, &trials, &folds, &preds)
}

/// `cmd_train` on the graph reduced to `cfg.sensor_set`.
pub fn cmd_reduce(cfg: &RunConfig) -> Result<TrainRun, CliError> {
    if cfg.sensor_set == SensorSetName::Custom && cfg.removed_nodes.is_empty() {
        return Err(CliError::Config("custom sensor set needs removed_nodes".into()));
    }
    cmd_train(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub holdout: Vec<String>,
    pub har: GridSearch,
    pub pbd: GridSearch,
}

/// Grid search on a random subject hold-out. Writes `search.json` and a
/// `tuned.toml` that carries the chosen values and excludes the hold-out subjects.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchOutcome, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let base = cfg.pipeline()?;
    let (_, windows) = cfg.windows()?;
    let subjects: Vec<String> = windows.iter().map(|w| w.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let k = cfg.search.holdout_subjects;
    if k == 0 || k + 2 > subjects.len() {
        return Err(CliError::Config(format!(
            "holdout_subjects = {k} needs at least {} subjects, corpus has {}",
            k + 2,
            subjects.len()
        )));
    }
    let seed = SeedStream::new(cfg.seed).derive("search");
    let mut shuffled = subjects;
    shuffled.shuffle(&mut seed.derive("holdout").rng());
    let mut holdout: Vec<String> = shuffled[..k].to_vec();
    holdout.sort();
    let (hold, train): (Vec<WindowSample>, Vec<WindowSample>) =
        windows.into_iter().partition(|w| holdout.contains(&w.subject_id));
    let points = grid(&cfg.search.gammas, &cfg.search.betas, &cfg.search.lrs);
    let har = grid_search(&base, Role::Har, &train, &hold, &points, seed.derive("har"))?;
    let pbd = grid_search(&base, Role::Pbd, &train, &hold, &points, seed.derive("pbd"))?;

    let mut tuned = cfg.clone();
    let set = |loss: &mut crate::losses::LossConfig, lr: &mut f64, p: &GridPoint| {
        loss.gamma = p.gamma;
        loss.beta = p.beta;
        *lr = p.lr;
    };
    set(&mut tuned.train.har_loss, &mut tuned.train.lr_har, &har.best);
    set(&mut tuned.train.pbd_loss, &mut tuned.train.lr_pbd, &pbd.best);
    tuned.exclude_subjects.extend(holdout.iter().cloned());
    tuned.out = None;
    write(&out.join("tuned.toml"), tuned.to_toml())?;
    let outcome = SearchOutcome { holdout, har, pbd };
    write(&out.join("search.json"), serde_json::to_string_pretty(&outcome).expect("search serializes") + "\n")?;
    Ok(outcome)
}

/// Table of the pooled metrics of several runs, one row per run.
pub fn cmd_report(runs: &[PathBuf]) -> Result<String, CliError> {
    let mut out = String::from("run,strategy,sensor_set,har_acc,har_acc_fold_mean,har_macro_f1,pbd_macro_f1,pr_auc\n");
    for run in runs {
        let text = read(&run.join("metrics.json"))?;
        let r: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", run.join("metrics.json").display())))?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        let label = r.strategy.parse::<Strategy>().map(Strategy::label).unwrap_or(&r.strategy);
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4}\n",
            run.display(),
            label,
            r.sensor_set,
            opt(r.pooled.har.as_ref().map(|h| h.accuracy)),
            opt(r.pooled.har_fold_mean_accuracy),
            opt(r.pooled.har.as_ref().map(|h| h.macro_f1)),
            r.pooled.pbd.macro_f1,
            r.pooled.pr_auc
        ));
    }
    Ok(out)
}
