//! The `rsdbpf` command: generate data, train the learned filters, evaluate
//! all four filters and write the result tables.
//!
//! Every command reads a JSON [`RunConfig`]; command-line flags override the
//! file, and the file overrides the built-in defaults. Outputs go under the
//! output directory:
//!
//! ```text
//! out/dataset.jsonl
//! out/checkpoints/{dbpf,rs-dbpf}.json        selected parameters
//! out/checkpoints/<filter>_eta<η>_*.json     per-run snapshots
//! out/logs/<filter>_eta<η>.csv               epoch, train_loss, val_rmse, lr
//! out/logs/<filter>_selection.csv            learning-rate search
//! out/results/{table.md,table.csv,per_step_mae.csv,per_traj_rmse.csv}
//! out/results/estimates_<filter>.csv
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{Dataset, SplitCounts};
use crate::filters::{self, FilterConfig, FilterOutput, RegimeProposal, ESTIMATES_CSV_HEADER};
use crate::io::write_atomic;
use crate::metrics::{ResultsRow, ResultsTable};
use crate::neural::NeuralRegimeSet;
use crate::seed;
use crate::ssm::{DynamicsKind, ModelSuite};
use crate::training::{self, LearnedFilter, TrainConfig, ETA_GRID};
use crate::{Error, Result};

/// A filter that can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterKind {
    MmPf,
    Dbpf,
    RsDbpf,
    RsPf,
}

impl FilterKind {
    /// Table order.
    pub const ALL: [FilterKind; 4] = [Self::MmPf, Self::Dbpf, Self::RsDbpf, Self::RsPf];

    pub fn label(&self) -> &'static str {
        match self {
            Self::MmPf => "MM-PF",
            Self::Dbpf => "DBPF",
            Self::RsDbpf => "RS-DBPF",
            Self::RsPf => "RS-PF (oracle)",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Self::MmPf => "mm-pf",
            Self::Dbpf => "dbpf",
            Self::RsDbpf => "rs-dbpf",
            Self::RsPf => "rs-pf",
        }
    }

    pub fn learned(&self) -> Option<LearnedFilter> {
        match self {
            Self::Dbpf => Some(LearnedFilter::Dbpf),
            Self::RsDbpf => Some(LearnedFilter::RsDbpf),
            _ => None,
        }
    }

    /// Stream tag for evaluation randomness.
    fn stream_tag(&self) -> u64 {
        match self {
            Self::MmPf => 1,
            Self::Dbpf => 2,
            Self::RsDbpf => 3,
            Self::RsPf => 4,
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown filter {s:?} (expected mm-pf, dbpf, rs-dbpf or rs-pf)")))
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

impl Serialize for FilterKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.slug())
    }
}

impl<'de> Deserialize<'de> for FilterKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Either the full learning-rate grid or one pinned value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EtaSetting {
    #[default]
    Grid,
    Fixed(f64),
}

impl EtaSetting {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Self::Grid => ETA_GRID.to_vec(),
            Self::Fixed(v) => vec![*v],
        }
    }
}

impl std::str::FromStr for EtaSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "grid" {
            return Ok(Self::Grid);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Self::Fixed(v)),
            _ => Err(Error::Config(format!(
                "eta: expected \"grid\" or a non-negative number, got {s:?}"
            ))),
        }
    }
}

impl Serialize for EtaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Grid => s.serialize_str("grid"),
            Self::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for EtaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Value(v) => format!("{v}").parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub particles: usize,
    /// Resampling threshold as a fraction of the particle count.
    pub ess_threshold_ratio: f64,
    pub regime_proposal: RegimeProposal,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            particles: 2000,
            ess_threshold_ratio: 0.5,
            regime_proposal: RegimeProposal::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub particles: usize,
    pub momentum: f64,
    pub lr_halving_period: usize,
    pub regime_proposal: RegimeProposal,
    pub grad_clip: Option<f64>,
    /// Train on the first `n` training trajectories only.
    pub max_train_trajectories: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            particles: d.train_particles,
            momentum: d.momentum,
            lr_halving_period: d.lr_halving_period,
            regime_proposal: d.regime_proposal,
            grad_clip: d.grad_clip,
            max_train_trajectories: d.max_train_trajectories,
        }
    }
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dynamics: DynamicsKind,
    /// Full model suite; defaults to the eight-regime suite for `dynamics`.
    pub suite: Option<ModelSuite>,
    pub counts: SplitCounts,
    /// Master seed for data generation, initialisation, training and evaluation.
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset location; defaults to `<out>/dataset.jsonl`.
    pub dataset: Option<PathBuf>,
    pub filters: Vec<FilterKind>,
    pub eta: EtaSetting,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Checkpoint overrides; default `<out>/checkpoints/<filter>.json`.
    pub checkpoints: BTreeMap<LearnedFilter, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dynamics: DynamicsKind::Markov,
            suite: None,
            counts: SplitCounts::STANDARD,
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            filters: FilterKind::ALL.to_vec(),
            eta: EtaSetting::Grid,
            train: TrainSection::default(),
            eval: EvalSection::default(),
            checkpoints: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        de.end().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, flags: &CommonFlags) -> Result<()> {
        if let Some(d) = flags.dynamics {
            self.dynamics = d;
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        if let Some(f) = &flags.filters {
            self.filters = f.clone();
        }
        if let Some(n) = flags.particles {
            self.eval.particles = n;
        }
        if let Some(e) = flags.eta {
            self.eta = e;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let suite = self.suite();
        suite.validate()?;
        if suite.dynamics.kind() != self.dynamics {
            return Err(Error::Config(format!(
                "suite.dynamics is {} but dynamics is {}",
                suite.dynamics.kind(),
                self.dynamics
            )));
        }
        for (name, n) in [
            ("counts.train", self.counts.train),
            ("counts.val", self.counts.val),
            ("counts.test", self.counts.test),
            ("eval.particles", self.eval.particles),
            ("train.epochs", self.train.epochs),
            ("train.batch_size", self.train.batch_size),
            ("train.particles", self.train.particles),
            ("train.lr_halving_period", self.train.lr_halving_period),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.eval.ess_threshold_ratio > 0.0 && self.eval.ess_threshold_ratio <= 1.0) {
            return Err(Error::Config("eval.ess_threshold_ratio must lie in (0, 1]".into()));
        }
        if self.filters.is_empty() {
            return Err(Error::Config("filters must not be empty".into()));
        }
        if let EtaSetting::Fixed(v) = self.eta {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config("eta must be finite and non-negative".into()));
            }
        }
        let train_n = self
            .train
            .max_train_trajectories
            .map_or(self.counts.train, |m| m.min(self.counts.train));
        self.train_config(0.0).validate(train_n).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("train: {m}")),
            other => other,
        })
    }

    pub fn suite(&self) -> ModelSuite {
        self.suite
            .clone()
            .unwrap_or_else(|| ModelSuite::eight_regime(self.dynamics))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.jsonl"))
    }

    pub fn checkpoint_path(&self, kind: LearnedFilter) -> PathBuf {
        self.checkpoints
            .get(&kind)
            .cloned()
            .unwrap_or_else(|| self.out.join("checkpoints").join(format!("{}.json", kind.slug())))
    }

    pub fn train_config(&self, eta: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: eta,
            momentum: self.train.momentum,
            lr_halving_period: self.train.lr_halving_period,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            train_particles: self.train.particles,
            regime_proposal: self.train.regime_proposal,
            grad_clip: self.train.grad_clip,
            max_train_trajectories: self.train.max_train_trajectories,
            seed: self.seed,
        }
    }

    pub fn eval_filter_config(&self) -> FilterConfig {
        FilterConfig::new(self.eval.particles)
            .with_proposal(self.eval.regime_proposal)
            .with_ess_threshold(self.eval.ess_threshold_ratio * self.eval.particles as f64)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rsdbpf", version, about = "Regime-switching differentiable particle filters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset.
    Generate(CommonFlags),
    /// Train the learned filters on an existing dataset.
    Train(CommonFlags),
    /// Evaluate filters on the test split.
    Evaluate(CommonFlags),
    /// Generate, train and evaluate in one run.
    Reproduce(CommonFlags),
}

#[derive(Debug, Clone, Args)]
pub struct CommonFlags {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of mm-pf, dbpf, rs-dbpf, rs-pf.
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<FilterKind>>,
    /// Evaluation particle count.
    #[arg(long)]
    pub particles: Option<usize>,
    /// `grid` or a single learning rate.
    #[arg(long)]
    pub eta: Option<EtaSetting>,
    #[arg(long)]
    pub dynamics: Option<DynamicsKind>,
}

impl CommonFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(self)?;
        Ok(cfg)
    }
}

/// Parses `args`, runs the command and maps errors to a JSON line on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// `{"error":"<kind>","message":"<display>"}`.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Generate(f) => {
            let cfg = f.resolve()?;
            let ds = cmd_generate(&cfg)?;
            println!("{}", generate_summary(&ds, &cfg.dataset_path()));
        }
        Command::Train(f) => {
            let cfg = f.resolve()?;
            for report in cmd_train(&cfg)? {
                println!("{report}");
            }
        }
        Command::Evaluate(f) => {
            let cfg = f.resolve()?;
            let table = cmd_evaluate(&cfg)?;
            print!("{}", table.to_markdown());
        }
        Command::Reproduce(f) => {
            let cfg = f.resolve()?;
            let table = cmd_reproduce(&cfg)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn generate_summary(ds: &Dataset, path: &Path) -> String {
    format!(
        "wrote {}: {} trajectories (train {}, val {}, test {}), T = {}, dynamics {}, seed {}",
        path.display(),
        ds.trajectories.len(),
        ds.counts.train,
        ds.counts.val,
        ds.counts.test,
        ds.suite.horizon,
        ds.suite.dynamics.kind(),
        ds.master_seed
    )
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::generate(&cfg.suite(), cfg.counts, cfg.seed)?;
    ds.save(&cfg.dataset_path())?;
    Ok(ds)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.dataset_path())?;
    if ds.suite.dynamics.kind() != cfg.dynamics {
        return Err(Error::Config(format!(
            "dataset {} has {} dynamics but the run is configured for {}",
            cfg.dataset_path().display(),
            ds.suite.dynamics.kind(),
            cfg.dynamics
        )));
    }
    Ok(ds)
}

fn eta_tag(eta: f64) -> String {
    format!("eta{eta}")
}

/// Trains every learned filter in `cfg.filters`; returns one report line per filter.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let mut reports = Vec::new();
    let ckpt_dir = cfg.out.join("checkpoints");
    let log_dir = cfg.out.join("logs");
    for kind in cfg.filters.iter().filter_map(|k| k.learned()) {
        let grid = training::train_grid(kind, &ds, &cfg.train_config(0.0), &ds.suite.dynamics, &cfg.eta.values())?;
        for run in &grid.runs {
            let tag = format!("{}_{}", kind.slug(), eta_tag(run.learning_rate));
            write_atomic(&log_dir.join(format!("{tag}.csv")), run.log_csv().as_bytes())?;
            for (epoch, params) in &run.improvements {
                params.save(&ckpt_dir.join(format!("{tag}_epoch{epoch}.json")))?;
            }
            run.last.save(&ckpt_dir.join(format!("{tag}_final.json")))?;
        }
        write_atomic(
            &log_dir.join(format!("{}_selection.csv", kind.slug())),
            grid.report_csv().as_bytes(),
        )?;
        let best = grid.best();
        best.best.save(&cfg.checkpoint_path(kind))?;
        reports.push(format!(
            "{}: selected eta {} (epoch {}, validation RMSE {:.4}), checkpoint {}",
            kind.label(),
            best.learning_rate,
            best.best_epoch,
            best.best_val_rmse(),
            cfg.checkpoint_path(kind).display()
        ));
    }
    Ok(reports)
}

/// Runs one filter on every test trajectory, in parallel; outputs are in test order.
pub fn evaluate_filter(
    kind: FilterKind,
    ds: &Dataset,
    nets: Option<&NeuralRegimeSet>,
    fcfg: &FilterConfig,
    seed: u64,
) -> Result<Vec<FilterOutput>> {
    let test = ds.test();
    let suite = &ds.suite;
    test.par_iter()
        .map(|t| {
            let mut rng = seed::stream(seed, &[seed::TAG_EVALUATE, kind.stream_tag(), t.traj_id]);
            let obs = &t.observations;
            match kind {
                FilterKind::MmPf => filters::run_mm_pf(suite, obs, fcfg, &mut rng),
                FilterKind::RsPf => filters::run_rs_pf(suite, obs, fcfg, &mut rng),
                FilterKind::Dbpf | FilterKind::RsDbpf => {
                    let learned = kind.learned().expect("learned filter");
                    let nets = nets.ok_or_else(|| Error::Config(format!("{} needs a checkpoint", kind.label())))?;
                    training::filter_learned(learned, nets, &suite.dynamics, obs, fcfg, &mut rng)
                }
            }
        })
        .collect()
}

/// Evaluates `cfg.filters` and writes the result files.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<ResultsTable> {
    let ds = load_dataset(cfg)?;
    // load every checkpoint up front so a missing one fails before any filtering
    let mut nets = BTreeMap::new();
    for kind in cfg.filters.iter().filter_map(|k| k.learned()) {
        let params = NeuralRegimeSet::load(&cfg.checkpoint_path(kind))?;
        if params.n_regimes() != kind.n_nets(&ds.suite.dynamics) {
            return Err(Error::Config(format!(
                "checkpoint {} has {} networks, {} needs {}",
                cfg.checkpoint_path(kind).display(),
                params.n_regimes(),
                kind.label(),
                kind.n_nets(&ds.suite.dynamics)
            )));
        }
        nets.insert(kind, params);
    }

    let fcfg = cfg.eval_filter_config();
    let mut kinds = cfg.filters.clone();
    kinds.sort();
    kinds.dedup();
    let test = ds.test();
    let results_dir = cfg.out.join("results");
    let mut table = ResultsTable {
        title: format!(
            "{} dynamics: RMSE over {} test trajectories ({} particles, seed {}, evaluation streams (seed, {:#x}, filter, traj_id))",
            match cfg.dynamics {
                DynamicsKind::Markov => "Markov",
                DynamicsKind::Polya => "Polya",
            },
            test.len(),
            cfg.eval.particles,
            cfg.seed,
            seed::TAG_EVALUATE
        ),
        rows: Vec::new(),
    };
    for kind in kinds {
        let outputs = evaluate_filter(kind, &ds, kind.learned().and_then(|l| nets.get(&l)), &fcfg, cfg.seed)?;
        let runs: Vec<(u64, &[f64], &[f64])> = test
            .iter()
            .zip(&outputs)
            .map(|(t, o)| (t.traj_id, o.estimates.as_slice(), t.truth()))
            .collect();
        table.rows.push(ResultsRow::from_runs(kind.label(), &runs)?);

        let mut csv = format!("{ESTIMATES_CSV_HEADER}\n").into_bytes();
        for (t, o) in test.iter().zip(&outputs) {
            o.write_csv_rows(&mut csv, t.traj_id, t.truth())
                .expect("writing to a Vec cannot fail");
        }
        write_atomic(&results_dir.join(format!("estimates_{}.csv", kind.slug())), &csv)?;
    }
    write_table(&table, &results_dir)?;
    Ok(table)
}

pub fn write_table(table: &ResultsTable, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("table.md"), table.to_markdown().as_bytes())?;
    write_atomic(&dir.join("table.csv"), table.to_csv().as_bytes())?;
    write_atomic(&dir.join("per_step_mae.csv"), table.per_step_mae_csv().as_bytes())?;
    write_atomic(&dir.join("per_traj_rmse.csv"), table.per_traj_rmse_csv().as_bytes())?;
    Ok(())
}

/// Generate, train and evaluate.
pub fn cmd_reproduce(cfg: &RunConfig) -> Result<ResultsTable> {
    let ds = cmd_generate(cfg)?;
    eprintln!("{}", generate_summary(&ds, &cfg.dataset_path()));
    for line in cmd_train(cfg)? {
        eprintln!("{line}");
    }
    cmd_evaluate(cfg)
}
