//! Supervised training of the learned filters.
//!
//! Each minibatch trajectory is filtered on its own tape; the per-trajectory
//! losses and gradients are averaged in batch order and applied with SGD plus
//! classical momentum. After every epoch the validation split is filtered
//! with the training particle count, and the parameters with the lowest mean
//! validation RMSE are kept.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, Tape, Var};
use crate::dataset::Dataset;
use crate::filters::{run_dbpf, run_rs_dbpf, FilterConfig, FilterOutput, FilterRun, RegimeProposal};
use crate::metrics;
use crate::neural::NeuralRegimeSet;
use crate::seed;
use crate::ssm::{RegimeDynamics, Trajectory};
use crate::{Error, Result};

/// The two trainable filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LearnedFilter {
    #[serde(rename = "dbpf")]
    Dbpf,
    #[serde(rename = "rs-dbpf")]
    RsDbpf,
}

impl LearnedFilter {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Dbpf => "DBPF",
            Self::RsDbpf => "RS-DBPF",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Self::Dbpf => "dbpf",
            Self::RsDbpf => "rs-dbpf",
        }
    }

    /// Number of neural regime models the filter carries.
    pub fn n_nets(&self, dynamics: &RegimeDynamics) -> usize {
        match self {
            Self::Dbpf => 1,
            Self::RsDbpf => dynamics.n_regimes(),
        }
    }
}

impl std::fmt::Display for LearnedFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

impl std::str::FromStr for LearnedFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dbpf" => Ok(Self::Dbpf),
            "rs-dbpf" => Ok(Self::RsDbpf),
            other => Err(Error::Config(format!("unknown learned filter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_particles: usize,
    pub regime_proposal: RegimeProposal,
    /// Rescale gradients whose Euclidean norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Use only the first `n` training trajectories.
    pub max_train_trajectories: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            lr_halving_period: 10,
            epochs: 60,
            batch_size: 100,
            train_particles: 200,
            regime_proposal: RegimeProposal::Uniform,
            grad_clip: None,
            max_train_trajectories: None,
            seed: 0,
        }
    }
}

/// Learning rates searched when none is pinned.
pub const ETA_GRID: [f64; 4] = [0.01, 0.02, 0.05, 0.1];

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive")))
            }
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        positive("lr_halving_period", self.lr_halving_period > 0)?;
        positive("epochs", self.epochs > 0)?;
        positive("batch_size", self.batch_size > 0)?;
        positive("train_particles", self.train_particles > 0)?;
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c > 0.0)?;
        }
        if let Some(n) = self.max_train_trajectories {
            positive("max_train_trajectories", n > 0)?;
        }
        if self.batch_size > n_train {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {n_train} training trajectories",
                self.batch_size
            )));
        }
        Ok(())
    }

    fn filter_config(&self, dynamics_known: bool) -> FilterConfig {
        let mut cfg = FilterConfig::new(self.train_particles).with_proposal(self.regime_proposal);
        cfg.regime_dynamics_known = dynamics_known;
        cfg
    }
}

/// Per-parameter momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            velocity: vec![0.0; n_params],
        }
    }
}

/// `(1/T) Σ_t (ŝ_t − s_t)²` on the graph.
pub fn trajectory_loss<G: Graph>(g: &mut G, estimates: &[G::V], truth: &[f64]) -> Result<G::V> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::Validation(format!(
            "estimate/truth length mismatch: {} vs {}",
            estimates.len(),
            truth.len()
        )));
    }
    let sq: Vec<G::V> = estimates
        .iter()
        .zip(truth)
        .map(|(&e, &t)| {
            let t = g.constant(t);
            let r = g.sub(e, t);
            g.square(r)
        })
        .collect();
    let total = g.sum(&sq);
    let inv_t = g.constant(1.0 / truth.len() as f64);
    Ok(g.mul(total, inv_t))
}

/// `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Validation(format!(
            "{} parameters, {} gradient entries, {} velocity entries",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// `η · 0.5^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period).min(i32::MAX as usize) as i32;
    cfg.learning_rate * 0.5f64.powi(halvings)
}

/// Runs a learned filter on any graph backend.
pub fn run_learned<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    kind: LearnedFilter,
    nets: &NeuralRegimeSet<G::V>,
    dynamics: &RegimeDynamics,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun<G::V>> {
    match kind {
        LearnedFilter::Dbpf => {
            if nets.n_regimes() != 1 {
                return Err(Error::Config(format!(
                    "DBPF takes one network, got {}",
                    nets.n_regimes()
                )));
            }
            run_dbpf(g, &nets.nets[0], obs, cfg, rng)
        }
        LearnedFilter::RsDbpf => {
            if nets.n_regimes() != dynamics.n_regimes() {
                return Err(Error::Config(format!(
                    "{} networks for {} regimes",
                    nets.n_regimes(),
                    dynamics.n_regimes()
                )));
            }
            run_rs_dbpf(g, nets, dynamics, obs, cfg, rng)
        }
    }
}

/// Evaluation-only run on plain floats.
pub fn filter_learned<R: Rng + ?Sized>(
    kind: LearnedFilter,
    nets: &NeuralRegimeSet,
    dynamics: &RegimeDynamics,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterOutput> {
    Ok(run_learned(&mut Eval, kind, nets, dynamics, obs, cfg, rng)?.output)
}

/// Loss and gradient of one trajectory, on a private tape.
pub fn trajectory_loss_and_grad<R: Rng + ?Sized>(
    kind: LearnedFilter,
    params: &NeuralRegimeSet,
    dynamics: &RegimeDynamics,
    traj: &Trajectory,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::with_capacity(estimate_nodes(kind, params, cfg.n_particles, traj.horizon()));
    let (bound, leaves) = params.bind(&mut tape);
    let run = run_learned(&mut tape, kind, &bound, dynamics, &traj.observations, cfg, rng)?;
    let loss: Var = trajectory_loss(&mut tape, &run.estimates, traj.truth())?;
    let grad = tape.backward(loss, &leaves)?;
    Ok((loss.value(), grad.into_values()))
}

fn estimate_nodes(kind: LearnedFilter, params: &NeuralRegimeSet, n_particles: usize, horizon: usize) -> usize {
    let per_particle_step = match kind {
        LearnedFilter::Dbpf => 80,
        LearnedFilter::RsDbpf => 90,
    };
    params.n_params() * 2 + per_particle_step * n_particles * horizon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_CSV_HEADER: &str = "epoch,train_loss,val_rmse,lr";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub kind: LearnedFilter,
    pub learning_rate: f64,
    /// Mean validation RMSE of the initial parameters.
    pub initial_val_rmse: f64,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best: NeuralRegimeSet,
    pub last: NeuralRegimeSet,
    /// Parameters after every epoch that improved the validation score.
    pub improvements: Vec<(usize, NeuralRegimeSet)>,
}

impl TrainOutcome {
    pub fn best_val_rmse(&self) -> f64 {
        self.log[self.best_epoch].val_rmse
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_CSV_HEADER}\n");
        for e in &self.log {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_rmse, e.lr));
        }
        s
    }
}

/// Mean RMSE over `trajs`, each filtered with its own `(TAG_VALIDATE, traj_id)` stream.
///
/// The streams do not depend on the epoch, so successive validation scores
/// differ only through the parameters.
pub fn validation_rmse(
    kind: LearnedFilter,
    params: &NeuralRegimeSet,
    dynamics: &RegimeDynamics,
    trajs: &[&Trajectory],
    cfg: &FilterConfig,
    seed: u64,
) -> Result<f64> {
    let rmses = trajs
        .par_iter()
        .map(|t| {
            let mut rng = seed::stream(seed, &[seed::TAG_VALIDATE, t.traj_id]);
            let out = filter_learned(kind, params, dynamics, &t.observations, cfg, &mut rng)?;
            metrics::rmse(&out.estimates, t.truth())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rmses.iter().sum::<f64>() / rmses.len() as f64)
}

/// Trains `kind` on the dataset's training split, selecting by validation RMSE.
pub fn train(
    kind: LearnedFilter,
    dataset: &Dataset,
    cfg: &TrainConfig,
    dynamics: &RegimeDynamics,
) -> Result<TrainOutcome> {
    let init = NeuralRegimeSet::init(cfg.seed, kind.n_nets(dynamics));
    train_from(kind, dataset, cfg, dynamics, init)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    kind: LearnedFilter,
    dataset: &Dataset,
    cfg: &TrainConfig,
    dynamics: &RegimeDynamics,
    init: NeuralRegimeSet,
) -> Result<TrainOutcome> {
    let mut train_set = dataset.train();
    if let Some(n) = cfg.max_train_trajectories {
        train_set.truncate(n);
    }
    let val_set = dataset.val();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    cfg.validate(train_set.len())?;
    if init.n_regimes() != kind.n_nets(dynamics) {
        return Err(Error::Config(format!(
            "{kind} needs {} networks, initial parameters have {}",
            kind.n_nets(dynamics),
            init.n_regimes()
        )));
    }
    let filter_cfg = cfg.filter_config(true);

    let mut params = init.flatten();
    let mut state = OptimizerState::new(params.len());
    let initial_val_rmse = validation_rmse(kind, &init, dynamics, &val_set, &filter_cfg, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, NeuralRegimeSet)> = None;
    let mut improvements = Vec::new();
    let mut current = init;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::stream(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let results = idx
                .par_iter()
                .map(|&i| {
                    let traj = train_set[i];
                    let mut rng = seed::stream(cfg.seed, &[seed::TAG_TRAIN, epoch as u64, batch as u64, traj.traj_id]);
                    trajectory_loss_and_grad(kind, &current, dynamics, traj, &filter_cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;

            // reduce in batch order so the result does not depend on scheduling
            let scale = 1.0 / results.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in &results {
                loss += l;
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
            loss *= scale;
            grad.iter_mut().for_each(|x| *x *= scale);

            if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    param_norm: current.norm(),
                });
            }
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > max_norm {
                    grad.iter_mut().for_each(|x| *x *= max_norm / norm);
                }
            }
            sgd_momentum_step(&mut params, &grad, &mut state, lr, cfg.momentum)?;
            current = current.with_values(&params)?;
            loss_sum += loss;
            n_batches += 1;
        }

        let val_rmse = validation_rmse(kind, &current, dynamics, &val_set, &filter_cfg, cfg.seed)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_rmse,
            lr,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_rmse < *v) {
            best = Some((epoch, val_rmse, current.clone()));
            improvements.push((epoch, current.clone()));
        }
    }

    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        kind,
        learning_rate: cfg.learning_rate,
        initial_val_rmse,
        log,
        best_epoch,
        best,
        last: current,
        improvements,
    })
}

/// Result of a learning-rate search.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<TrainOutcome>,
    /// Learning rates whose run stopped on a non-finite loss, with the diagnostic.
    pub diverged: Vec<(f64, String)>,
    /// Index into `runs` of the lowest best-validation RMSE.
    pub selected: usize,
}

impl GridOutcome {
    pub fn best(&self) -> &TrainOutcome {
        &self.runs[self.selected]
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from("learning_rate,best_epoch,best_val_rmse,selected,status\n");
        for (i, r) in self.runs.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},ok\n",
                r.learning_rate,
                r.best_epoch,
                r.best_val_rmse(),
                i == self.selected
            ));
        }
        for (eta, msg) in &self.diverged {
            s.push_str(&format!("{eta},,,false,\"{}\"\n", msg.replace('"', "'")));
        }
        s
    }
}

/// Trains once per learning rate, serially, and selects by validation RMSE.
/// Ties keep the earlier rate. A rate whose run hits a non-finite loss is
/// reported in `diverged` and skipped; the search fails only if every rate does.
pub fn train_grid(
    kind: LearnedFilter,
    dataset: &Dataset,
    cfg: &TrainConfig,
    dynamics: &RegimeDynamics,
    etas: &[f64],
) -> Result<GridOutcome> {
    if etas.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    let mut runs = Vec::with_capacity(etas.len());
    let mut diverged = Vec::new();
    let mut last_err = None;
    for &eta in etas {
        let run_cfg = TrainConfig {
            learning_rate: eta,
            ..cfg.clone()
        };
        match train(kind, dataset, &run_cfg, dynamics) {
            Ok(run) => runs.push(run),
            Err(e @ Error::NonFiniteLoss { .. }) => {
                diverged.push((eta, e.to_string()));
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    if runs.is_empty() {
        return Err(last_err.expect("every rate diverged"));
    }
    let mut selected = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.best_val_rmse() < runs[selected].best_val_rmse() {
            selected = i;
        }
    }
    Ok(GridOutcome {
        runs,
        diverged,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitCounts;
    use crate::ssm::{DynamicsKind, ModelSuite};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_dataset() -> Dataset {
        let counts = SplitCounts {
            train: 4,
            val: 2,
            test: 1,
        };
        let mut suite = ModelSuite::eight_regime(DynamicsKind::Markov);
        suite.horizon = 6;
        Dataset::generate(&suite, counts, 5).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 2,
            train_particles: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let mut g = Eval;
        assert_eq!(trajectory_loss(&mut g, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(trajectory_loss(&mut g, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(
            trajectory_loss(&mut g, &[2.0, -1.0, 4.0], &[1.0, 0.0, 3.0]).unwrap(),
            1.0
        );
        assert!(trajectory_loss(&mut g, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_gradient_is_twice_residual_over_t() {
        let mut tape = Tape::new();
        let e = [tape.param(1.0), tape.param(2.0)];
        let loss = trajectory_loss(&mut tape, &e, &[0.0, 0.0]).unwrap();
        let g = tape.backward(loss, &e).unwrap();
        assert_eq!(g.values(), vec![1.0, 2.0]);
    }

    #[test]
    fn momentum_examples() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1);
        sgd_momentum_step(&mut p, &[1.0], &mut s, 0.1, 0.9).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        assert_eq!(s.velocity, vec![1.0]);
        sgd_momentum_step(&mut p, &[1.0], &mut s, 0.1, 0.9).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!((s.velocity[0] - 1.9).abs() < 1e-15);

        let mut q = vec![3.0, -2.0];
        let mut s = OptimizerState::new(2);
        sgd_momentum_step(&mut q, &[0.0, 0.0], &mut s, 0.1, 0.9).unwrap();
        assert_eq!(q, vec![3.0, -2.0]);
        assert!(sgd_momentum_step(&mut q, &[0.0], &mut s, 0.1, 0.9).is_err());
    }

    #[test]
    fn lr_examples() {
        let cfg = |eta| TrainConfig {
            learning_rate: eta,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg(0.05)), 0.05);
        assert_eq!(lr_at(25, &cfg(0.05)), 0.0125);
        assert_eq!(lr_at(59, &cfg(0.1)), 0.1 * 0.5f64.powi(5));
        assert!((lr_at(59, &cfg(0.1)) - 0.003125).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let dyns = &ds.suite.dynamics;
        let out = train(LearnedFilter::RsDbpf, &ds, &cfg, dyns).unwrap();
        let init = NeuralRegimeSet::init(cfg.seed, 8);
        assert_eq!(out.last, init);
        assert_eq!(out.best, init);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..tiny_cfg()
        };
        for kind in [LearnedFilter::Dbpf, LearnedFilter::RsDbpf] {
            let a = train(kind, &ds, &cfg, &ds.suite.dynamics).unwrap();
            let b = train(kind, &ds, &cfg, &ds.suite.dynamics).unwrap();
            assert_eq!(a.log_csv(), b.log_csv());
            assert_eq!(a.best, b.best);
            assert_ne!(a.best, NeuralRegimeSet::init(cfg.seed, kind.n_nets(&ds.suite.dynamics)));
        }
    }

    #[test]
    fn best_snapshot_matches_log_minimum() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            ..tiny_cfg()
        };
        let out = train(LearnedFilter::Dbpf, &ds, &cfg, &ds.suite.dynamics).unwrap();
        let min = out.log.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_rmse(), min);
        let filter_cfg = cfg.filter_config(true);
        let recomputed = validation_rmse(
            LearnedFilter::Dbpf,
            &out.best,
            &ds.suite.dynamics,
            &ds.val(),
            &filter_cfg,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(recomputed, min);
        assert_eq!(out.improvements.last().unwrap().0, out.best_epoch);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[2].lr, 0.05);
    }

    #[test]
    fn grid_selects_lowest_validation() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let grid = train_grid(LearnedFilter::Dbpf, &ds, &cfg, &ds.suite.dynamics, &[0.0, 0.05]).unwrap();
        assert_eq!(grid.runs.len(), 2);
        let min = grid
            .runs
            .iter()
            .map(|r| r.best_val_rmse())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(grid.best().best_val_rmse(), min);
        assert_eq!(grid.report_csv().lines().count(), 3);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg();
        let mut init = NeuralRegimeSet::init(cfg.seed, 1);
        init.nets[0].proposer.b2[0] = f64::NAN;
        match train_from(LearnedFilter::Dbpf, &ds, &cfg, &ds.suite.dynamics, init) {
            Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                param_norm,
            }) => assert!(param_norm.is_nan()),
            Err(Error::DegenerateWeights) => {}
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate(4).is_ok());
        assert!(tiny_cfg().validate(1).is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        assert!(bad.validate(4).is_err());
        let bad = TrainConfig {
            momentum: 1.0,
            ..tiny_cfg()
        };
        assert!(bad.validate(4).is_err());
    }

    proptest! {
        #[test]
        fn zero_momentum_is_plain_sgd(
            p in prop::collection::vec(-5.0..5.0f64, 1..6),
            seed in any::<u64>(),
            lr in 0.0..1.0f64,
        ) {
            let mut rng = seed::stream(seed, &[]);
            let g: Vec<f64> = p.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut a = p.clone();
            let mut s = OptimizerState { velocity: p.iter().map(|_| rng.gen_range(-1.0..1.0)).collect() };
            sgd_momentum_step(&mut a, &g, &mut s, lr, 0.0).unwrap();
            for ((x, y), gi) in a.iter().zip(&p).zip(&g) {
                prop_assert_eq!(*x, y - lr * gi);
            }
        }

        #[test]
        fn lr_is_non_increasing(eta in 0.0..1.0f64, e in 0usize..200) {
            let cfg = TrainConfig { learning_rate: eta, ..TrainConfig::default() };
            prop_assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }

        #[test]
        fn loss_is_nonnegative_and_zero_only_at_truth(
            truth in prop::collection::vec(-10.0..10.0f64, 1..20),
            delta in prop::collection::vec(-1.0..1.0f64, 20),
        ) {
            let est: Vec<f64> = truth.iter().zip(&delta).map(|(t, d)| t + d).collect();
            let l = trajectory_loss(&mut Eval, &est, &truth).unwrap();
            prop_assert!(l >= 0.0);
            let any_diff = est.iter().zip(&truth).any(|(a, b)| a != b);
            prop_assert_eq!(l == 0.0, !any_diff);
        }
    }
}
