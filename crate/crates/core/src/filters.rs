//! Particle filters for regime-switching state-space models.
//!
//! All four filters share one propagation loop:
//!
//! 1. draw each particle's regime index (from the regime proposal, from the
//!    frozen initial draw, or not at all for single-model filters),
//! 2. propagate the state through the regime's dynamic model with one
//!    standard-normal draw per particle,
//! 3. multiply the weight by the regime's observation likelihood and, for
//!    switching filters, by `p(m_t | m_{0:t-1}) / q(m_t | m_{0:t-1})`,
//! 4. normalise, record the weighted-mean estimate and the ESS,
//! 5. resample multinomially when the ESS drops below the threshold.
//!
//! Weights live in the log domain throughout. The loop is generic over
//! [`Graph`]: on a [`Tape`](crate::autodiff::Tape) the estimates stay
//! differentiable with respect to the neural parameters, while resampled
//! particles re-enter the graph as constants (gradients are truncated at
//! resampling).

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::neural::{Kernel, NeuralRegimeSet, RegimeNet};
use crate::ssm::{sample_categorical, sample_uniform_index, CandidateModel, ModelSuite, RegimeDynamics};
use crate::{Error, Result};

/// Distribution used to draw particle regime indices, `q(m_t | m_{0:t-1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegimeProposal {
    /// `q = 1 / N_m`.
    #[default]
    Uniform,
    /// `q = p(m_t | m_{0:t-1})`, so the `p / q` ratio cancels.
    Bootstrap,
    /// Round-robin allocation, `N_p / N_m` particles per regime, weighted as uniform.
    Deterministic,
}

impl std::str::FromStr for RegimeProposal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "bootstrap" => Ok(Self::Bootstrap),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::Config(format!("unknown regime proposal {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when the ESS falls strictly below this value.
    pub ess_threshold: f64,
    pub regime_proposal: RegimeProposal,
    /// Whether `p(m_t | m_{0:t-1})` enters the weights of the learned switching filter.
    pub regime_dynamics_known: bool,
    /// Support of the uniform initial particle distribution.
    pub init_support: (f64, f64),
    /// Keep per-step proposal inputs in [`FilterRun::trace`].
    pub record_trace: bool,
}

impl FilterConfig {
    /// Defaults: ESS threshold `N_p / 2`, uniform regime proposal, particles
    /// initialised on `[-0.5, 0.5]`.
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            ess_threshold: 0.5 * n_particles as f64,
            regime_proposal: RegimeProposal::Uniform,
            regime_dynamics_known: true,
            init_support: (-0.5, 0.5),
            record_trace: false,
        }
    }

    pub fn with_proposal(mut self, proposal: RegimeProposal) -> Self {
        self.regime_proposal = proposal;
        self
    }

    pub fn with_ess_threshold(mut self, threshold: f64) -> Self {
        self.ess_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be positive".into()));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= self.n_particles as f64) {
            return Err(Error::Config(format!(
                "ess_threshold must lie in (0, {}], got {}",
                self.n_particles, self.ess_threshold
            )));
        }
        if !(self.init_support.0 < self.init_support.1) {
            return Err(Error::Config("init_support is empty".into()));
        }
        Ok(())
    }
}

/// Per-run filter summary. Rows of `regime_posterior` are weighted regime
/// frequencies at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub estimates: Vec<f64>,
    pub ess_trace: Vec<f64>,
    pub regime_posterior: Vec<Vec<f64>>,
    pub resampled: Vec<bool>,
    /// `ln Σ_i w_{t-1}^{(i)} · (weight increment)^{(i)}`: the per-step log
    /// marginal likelihood estimate.
    pub log_evidence: Vec<f64>,
}

pub const ESTIMATES_CSV_HEADER: &str = "traj_id,t,estimate,truth,abs_error,ess";

impl FilterOutput {
    pub fn horizon(&self) -> usize {
        self.estimates.len()
    }

    /// Appends rows `(traj_id, t, estimate, truth, abs_error, ess)` for `t = 1..=T`.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W, traj_id: u64, truth: &[f64]) -> std::io::Result<()> {
        for (i, ((&est, &tr), &ess)) in self.estimates.iter().zip(truth).zip(&self.ess_trace).enumerate() {
            writeln!(out, "{traj_id},{},{est},{tr},{},{ess}", i + 1, (est - tr).abs())?;
        }
        Ok(())
    }
}

/// Proposal inputs of one step, recorded for gradient diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub prev_states: Vec<f64>,
    pub prev_log_weights: Vec<f64>,
    /// True when the previous states entered the graph as constants
    /// (initial draw or resampling).
    pub prev_detached: bool,
    pub regimes: Vec<usize>,
    pub eps: Vec<f64>,
    pub log_ratio: Vec<f64>,
}

#[derive(Debug)]
pub struct FilterRun<V> {
    pub output: FilterOutput,
    /// The estimates `ŝ_{1:T}` as graph values.
    pub estimates: Vec<V>,
    pub trace: Option<Vec<StepTrace>>,
}

/// Particle states, regime histories and log weights.
///
/// Markov histories are summarised by the current regime; Pólya histories by
/// per-regime occurrence counts (row-major `N_p × N_m`).
#[derive(Debug, Clone)]
pub struct ParticleSystem<V> {
    pub states: Vec<V>,
    pub log_weights: Vec<V>,
    pub regimes: Vec<usize>,
    pub counts: Vec<u32>,
    pub n_regimes: usize,
}

impl<V: Copy> ParticleSystem<V> {
    pub fn n_particles(&self) -> usize {
        self.states.len()
    }

    fn counts_of(&self, i: usize) -> &[u32] {
        &self.counts[i * self.n_regimes..(i + 1) * self.n_regimes]
    }
}

/// Effective sample size `1 / Σ w_i²` of the normalised weights `exp(log_weights)`.
///
/// Computed as `(Σ w̃)² / Σ w̃²` on max-shifted weights, which is invariant to
/// the normalising constant and safe against underflow.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(s1, s2), &lw| {
        let w = (lw - max).exp();
        (s1 + w, s2 + w * w)
    });
    Ok((s1 * s1 / s2).clamp(1.0, log_weights.len() as f64))
}

/// `raw − logsumexp(raw)`.
pub fn normalize_log_weights(raw: &[f64]) -> Result<Vec<f64>> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let lse = max + raw.iter().map(|&r| (r - max).exp()).sum::<f64>().ln();
    Ok(raw.iter().map(|&r| r - lse).collect())
}

/// Normalised log weights and weights on a graph.
#[derive(Debug, Clone)]
pub struct Normalized<V> {
    pub log_weights: Vec<V>,
    pub weights: Vec<V>,
    /// `logsumexp(raw)`.
    pub log_norm: f64,
}

/// Normalises `raw` log weights, recording the operations on `g`.
pub fn normalize_on<G: Graph>(g: &mut G, raw: &[G::V]) -> Result<Normalized<G::V>> {
    let max = raw.iter().map(|&v| g.value(v)).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let shift = g.constant(max);
    let unnorm: Vec<G::V> = raw
        .iter()
        .map(|&r| {
            let d = g.sub(r, shift);
            g.exp(d)
        })
        .collect();
    let total = g.sum(&unnorm);
    // total >= 1 because the max term contributes exp(0)
    let ln_total = g.ln(total)?;
    let lse = g.add(shift, ln_total);
    let log_weights = raw.iter().map(|&r| g.sub(r, lse)).collect();
    let weights = unnorm.iter().map(|&u| g.div(u, total)).collect();
    Ok(Normalized {
        log_weights,
        weights,
        log_norm: g.value(lse),
    })
}

/// `Σ_i w_i s_i`.
pub fn weighted_mean<G: Graph>(g: &mut G, weights: &[G::V], states: &[G::V]) -> G::V {
    let terms: Vec<G::V> = weights.iter().zip(states).map(|(&w, &s)| g.mul(w, s)).collect();
    g.sum(&terms)
}

/// Log of the switching-filter weight update:
/// `w_{t-1} · p(m_t | ·) · g(o_t | s_t) / q(m_t | ·)`.
pub fn rs_weight_update(log_w_prev: f64, log_p_regime: f64, log_q_regime: f64, log_lik: f64) -> Result<f64> {
    if !log_q_regime.is_finite() {
        return Err(Error::ProposalSupport);
    }
    Ok(log_w_prev + log_p_regime + log_lik - log_q_regime)
}

/// Multinomial resampling. Ancestors are drawn i.i.d. from the normalised
/// weights; their states re-enter `g` as constants and all weights are reset
/// to `1 / N_p`. Returns the ancestor indices.
pub fn resample<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    system: &mut ParticleSystem<G::V>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = system.n_particles();
    let lw: Vec<f64> = system.log_weights.iter().map(|&v| g.value(v)).collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &l in &lw {
        acc += (l - max).exp();
        cumulative.push(acc);
    }
    let total = acc;
    // first cumulative weight strictly above u; zero-weight particles are never picked
    let ancestors: Vec<usize> = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            cumulative.partition_point(|&c| c <= u).min(n - 1)
        })
        .collect();

    let states: Vec<f64> = ancestors.iter().map(|&a| g.value(system.states[a])).collect();
    system.states = states.into_iter().map(|s| g.constant(s)).collect();
    let uniform = -(n as f64).ln();
    system.log_weights = (0..n).map(|_| g.constant(uniform)).collect();
    system.regimes = ancestors.iter().map(|&a| system.regimes[a]).collect();
    if !system.counts.is_empty() {
        let k = system.n_regimes;
        let old = std::mem::take(&mut system.counts);
        system.counts = ancestors
            .iter()
            .flat_map(|&a| old[a * k..(a + 1) * k].iter().copied())
            .collect();
    }
    Ok(ancestors)
}

/// How particle regime indices evolve.
enum RegimeScheme<'a> {
    /// Drawn from a proposal each step, weights corrected by `p / q`.
    Switching {
        dynamics: &'a RegimeDynamics,
        proposal: RegimeProposal,
        apply_ratio: bool,
    },
    /// Drawn once at `t = 0` and kept; resampling copies the labels.
    Frozen,
    /// One model, no regime index.
    Single,
}

enum Models<'a, V> {
    Analytic(&'a [CandidateModel]),
    Neural {
        nets: &'a [RegimeNet<V>],
        kernels: Vec<Kernel<V>>,
    },
}

impl<'a, V: Copy> Models<'a, V> {
    fn n_regimes(&self) -> usize {
        match self {
            Models::Analytic(m) => m.len(),
            Models::Neural { nets, .. } => nets.len(),
        }
    }

    fn propagate<G: Graph<V = V>>(&self, g: &mut G, regime: usize, s_prev: V, eps: f64) -> V {
        match self {
            Models::Analytic(m) => {
                let s = m[regime].propagate(g.value(s_prev), eps);
                g.constant(s)
            }
            Models::Neural { nets, .. } => nets[regime].propose(g, s_prev, eps),
        }
    }

    fn log_likelihood<G: Graph<V = V>>(&self, g: &mut G, regime: usize, obs: f64, obs_v: V, s: V) -> V {
        match self {
            Models::Analytic(m) => {
                let ll = m[regime].obs_log_density(obs, g.value(s));
                g.constant(ll)
            }
            Models::Neural { nets, kernels } => nets[regime].log_likelihood_with(g, &kernels[regime], obs_v, s),
        }
    }
}

fn run_engine<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    models: Models<'_, G::V>,
    scheme: RegimeScheme<'_>,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun<G::V>> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(Error::ObservationLength { expected: 1, got: 0 });
    }
    let n = cfg.n_particles;
    let n_regimes = models.n_regimes();
    let polya = matches!(
        scheme,
        RegimeScheme::Switching {
            dynamics: RegimeDynamics::Polya { .. },
            ..
        }
    );
    if let RegimeScheme::Switching { dynamics, proposal, .. } = &scheme {
        if dynamics.n_regimes() != n_regimes {
            return Err(Error::Config(format!(
                "{} models but regime dynamics has {} regimes",
                n_regimes,
                dynamics.n_regimes()
            )));
        }
        if *proposal == RegimeProposal::Deterministic && !n.is_multiple_of(n_regimes) {
            return Err(Error::Config(format!(
                "deterministic regime proposal needs N_p ({n}) divisible by N_m ({n_regimes})"
            )));
        }
    }
    let log_uniform_q = -(n_regimes as f64).ln();

    // t = 0
    let mut regimes = Vec::with_capacity(n);
    let mut init_states = Vec::with_capacity(n);
    let (lo, hi) = cfg.init_support;
    for _ in 0..n {
        let m = match scheme {
            RegimeScheme::Single => 0,
            _ => sample_uniform_index(n_regimes, rng),
        };
        regimes.push(m);
        init_states.push(rng.gen_range(lo..hi));
    }
    let mut counts = Vec::new();
    if polya {
        counts = vec![0u32; n * n_regimes];
        for (i, &m) in regimes.iter().enumerate() {
            counts[i * n_regimes + m] += 1;
        }
    }
    let uniform_lw = -(n as f64).ln();
    let mut system = ParticleSystem {
        states: init_states.iter().map(|&s| g.constant(s)).collect(),
        log_weights: (0..n).map(|_| g.constant(uniform_lw)).collect(),
        regimes,
        counts,
        n_regimes,
    };
    let mut detached = true;

    let t_max = obs.len();
    let mut output = FilterOutput {
        estimates: Vec::with_capacity(t_max),
        ess_trace: Vec::with_capacity(t_max),
        regime_posterior: Vec::with_capacity(t_max),
        resampled: Vec::with_capacity(t_max),
        log_evidence: Vec::with_capacity(t_max),
    };
    let mut estimates = Vec::with_capacity(t_max);
    let mut trace = cfg.record_trace.then(Vec::new);

    let mut log_ratio = vec![0.0_f64; n];
    let mut eps = vec![0.0_f64; n];
    let mut raw = Vec::with_capacity(n);
    let mut new_states = Vec::with_capacity(n);

    for &o in obs {
        // regime indices and proposal noise
        for i in 0..n {
            if let RegimeScheme::Switching {
                dynamics,
                proposal,
                apply_ratio,
            } = &scheme
            {
                let prev = system.regimes[i];
                let p_of = |k: usize| match dynamics {
                    RegimeDynamics::Markov { .. } => dynamics.prob_from_last(prev, k),
                    RegimeDynamics::Polya { .. } => dynamics.prob_from_counts(system.counts_of(i), k),
                };
                let (m, log_q) = match proposal {
                    RegimeProposal::Uniform => (sample_uniform_index(n_regimes, rng), log_uniform_q),
                    RegimeProposal::Deterministic => (i % n_regimes, log_uniform_q),
                    RegimeProposal::Bootstrap => {
                        let m = sample_categorical(n_regimes, p_of, rng);
                        (m, p_of(m).ln())
                    }
                };
                log_ratio[i] = if *apply_ratio {
                    rs_weight_update(0.0, p_of(m).ln(), log_q, 0.0)?
                } else {
                    0.0
                };
                system.regimes[i] = m;
                if polya {
                    system.counts[i * n_regimes + m] += 1;
                }
            }
            eps[i] = rng.sample(StandardNormal);
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(StepTrace {
                prev_states: system.states.iter().map(|&s| g.value(s)).collect(),
                prev_log_weights: system.log_weights.iter().map(|&s| g.value(s)).collect(),
                prev_detached: detached,
                regimes: system.regimes.clone(),
                eps: eps.clone(),
                log_ratio: log_ratio.clone(),
            });
        }

        // propagate and weight
        let obs_v = g.constant(o);
        new_states.clear();
        raw.clear();
        for i in 0..n {
            let m = system.regimes[i];
            let s = models.propagate(g, m, system.states[i], eps[i]);
            let ll = models.log_likelihood(g, m, o, obs_v, s);
            let mut lw = g.add(system.log_weights[i], ll);
            if log_ratio[i] != 0.0 {
                let r = g.constant(log_ratio[i]);
                lw = g.add(lw, r);
            }
            new_states.push(s);
            raw.push(lw);
        }
        std::mem::swap(&mut system.states, &mut new_states);
        let Normalized {
            log_weights: log_w,
            weights: w,
            log_norm,
        } = normalize_on(g, &raw)?;
        output.log_evidence.push(log_norm);
        system.log_weights = log_w;
        detached = false;

        let est = weighted_mean(g, &w, &system.states);
        estimates.push(est);
        output.estimates.push(g.value(est));

        let lw_values: Vec<f64> = system.log_weights.iter().map(|&v| g.value(v)).collect();
        let ess_t = ess(&lw_values)?;
        output.ess_trace.push(ess_t);
        let mut post = vec![0.0; n_regimes];
        for (&m, &v) in system.regimes.iter().zip(&w) {
            post[m] += g.value(v);
        }
        let total: f64 = post.iter().sum();
        post.iter_mut().for_each(|p| *p /= total);
        output.regime_posterior.push(post);

        let resampled = ess_t < cfg.ess_threshold;
        if resampled {
            resample(g, &mut system, rng)?;
            detached = true;
        }
        output.resampled.push(resampled);
    }

    Ok(FilterRun {
        output,
        estimates,
        trace,
    })
}

fn check_horizon(suite: &ModelSuite, obs: &[f64]) -> Result<()> {
    if obs.len() != suite.horizon {
        return Err(Error::ObservationLength {
            expected: suite.horizon,
            got: obs.len(),
        });
    }
    Ok(())
}

/// Regime-switching particle filter with the true candidate models and
/// switching law (the oracle).
pub fn run_rs_pf<R: Rng + ?Sized>(
    suite: &ModelSuite,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterOutput> {
    check_horizon(suite, obs)?;
    if !cfg.regime_dynamics_known {
        return Err(Error::Config("the oracle filter requires known regime dynamics".into()));
    }
    let scheme = RegimeScheme::Switching {
        dynamics: &suite.dynamics,
        proposal: cfg.regime_proposal,
        apply_ratio: true,
    };
    let run = run_engine(
        &mut crate::autodiff::Eval,
        Models::Analytic(&suite.candidates),
        scheme,
        obs,
        cfg,
        rng,
    )?;
    Ok(run.output)
}

/// Multi-model baseline that assumes no regime switching.
///
/// Each particle draws a regime index from `π(m_0)` at `t = 0` and keeps it;
/// propagation and weighting use that particle's candidate model. Resampling
/// copies regime labels, so the regime mix adapts only through resampling.
pub fn run_mm_pf<R: Rng + ?Sized>(
    suite: &ModelSuite,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterOutput> {
    check_horizon(suite, obs)?;
    let run = run_engine(
        &mut crate::autodiff::Eval,
        Models::Analytic(&suite.candidates),
        RegimeScheme::Frozen,
        obs,
        cfg,
        rng,
    )?;
    Ok(run.output)
}

/// Alternative multi-model baseline: a bank of bootstrap filters, one per candidate
/// model, each assuming its model holds for the whole trajectory.
///
/// The `N_p` particles are split evenly across the bank. Sub-filter estimates
/// are fused with the model posterior `P(j | o_{1:t}) ∝ π(j) Π_τ p_j(o_τ | o_{1:τ-1})`,
/// which is also reported as the regime posterior. The ESS trace is the sum
/// of the sub-filters' ESS values.
pub fn run_mm_pf_bank<R: Rng + ?Sized>(
    suite: &ModelSuite,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterOutput> {
    check_horizon(suite, obs)?;
    cfg.validate()?;
    let n_models = suite.n_regimes();
    if cfg.n_particles < n_models {
        return Err(Error::Config(format!(
            "the multi-model filter needs at least one particle per model ({n_models})"
        )));
    }
    let ratio = cfg.ess_threshold / cfg.n_particles as f64;
    let mut bank = Vec::with_capacity(n_models);
    for (j, model) in suite.candidates.iter().enumerate() {
        let share = cfg.n_particles / n_models + usize::from(j < cfg.n_particles % n_models);
        let sub_cfg = FilterConfig {
            n_particles: share,
            ess_threshold: (ratio * share as f64).max(f64::MIN_POSITIVE),
            record_trace: false,
            ..cfg.clone()
        };
        bank.push(run_bpf(model, obs, &sub_cfg, rng)?);
    }

    let t_max = obs.len();
    let mut output = FilterOutput {
        estimates: Vec::with_capacity(t_max),
        ess_trace: Vec::with_capacity(t_max),
        regime_posterior: Vec::with_capacity(t_max),
        resampled: Vec::with_capacity(t_max),
        log_evidence: Vec::with_capacity(t_max),
    };
    let mut log_post: Vec<f64> = (0..n_models).map(|j| suite.init_regime_prob(j).ln()).collect();
    for t in 0..t_max {
        let mut joint = Vec::with_capacity(n_models);
        for (lp, run) in log_post.iter_mut().zip(&bank) {
            *lp += run.log_evidence[t];
            joint.push(*lp);
        }
        let normalized = normalize_log_weights(&joint)?;
        // log_post sums to one before the update, so the normaliser is the evidence
        output.log_evidence.push(joint[0] - normalized[0]);
        let post: Vec<f64> = normalized.iter().map(|l| l.exp()).collect();
        log_post = normalized;
        output
            .estimates
            .push(post.iter().zip(&bank).map(|(p, run)| p * run.estimates[t]).sum());
        output.ess_trace.push(bank.iter().map(|run| run.ess_trace[t]).sum());
        output.resampled.push(bank.iter().any(|run| run.resampled[t]));
        output.regime_posterior.push(post);
    }
    Ok(output)
}

/// Plain bootstrap particle filter on one analytic model.
pub fn run_bpf<R: Rng + ?Sized>(
    model: &CandidateModel,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterOutput> {
    let models = std::slice::from_ref(model);
    let run = run_engine(
        &mut crate::autodiff::Eval,
        Models::Analytic(models),
        RegimeScheme::Single,
        obs,
        cfg,
        rng,
    )?;
    Ok(run.output)
}

/// Regime-switching differentiable bootstrap particle filter.
///
/// `nets` are usually bound to a tape with [`NeuralRegimeSet::bind`]; the
/// returned estimates are then differentiable with respect to every
/// parameter.
pub fn run_rs_dbpf<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    nets: &NeuralRegimeSet<G::V>,
    dynamics: &RegimeDynamics,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun<G::V>> {
    let kernels = nets.nets.iter().map(|n| n.kernel(g)).collect();
    let models = Models::Neural {
        nets: &nets.nets,
        kernels,
    };
    let scheme = RegimeScheme::Switching {
        dynamics,
        proposal: cfg.regime_proposal,
        apply_ratio: cfg.regime_dynamics_known,
    };
    run_engine(g, models, scheme, obs, cfg, rng)
}

/// Differentiable bootstrap particle filter with a single learned model.
pub fn run_dbpf<G: Graph, R: Rng + ?Sized>(
    g: &mut G,
    net: &RegimeNet<G::V>,
    obs: &[f64],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun<G::V>> {
    let kernels = vec![net.kernel(g)];
    let models = Models::Neural {
        nets: std::slice::from_ref(net),
        kernels,
    };
    run_engine(g, models, RegimeScheme::Single, obs, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eval, Tape};
    use crate::seed;
    use crate::ssm::DynamicsKind;

    fn rng(k: u64) -> seed::StreamRng {
        seed::stream(1234, &[k])
    }

    #[test]
    fn ess_examples() {
        let uniform = vec![-(200f64).ln(); 200];
        assert!((ess(&uniform).unwrap() - 200.0).abs() < 1e-9);
        let mut degenerate = vec![f64::NEG_INFINITY; 5];
        degenerate[2] = 0.0;
        assert_eq!(ess(&degenerate).unwrap(), 1.0);
        let w = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        assert!((ess(&w).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!(matches!(ess(&[f64::NEG_INFINITY; 3]), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_log_weights(&[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|&l| (l - 0.5f64.ln()).abs() < 1e-15));
        let out = normalize_log_weights(&[2f64.ln(), 6f64.ln()]).unwrap();
        assert!((out[0] - 0.25f64.ln()).abs() < 1e-15);
        assert!((out[1] - 0.75f64.ln()).abs() < 1e-15);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn weight_update_examples() {
        // bootstrap proposal: ratio cancels
        let lp = 0.3f64.ln();
        assert_eq!(rs_weight_update(-1.0, lp, lp, -2.0).unwrap(), -1.0 + lp + -2.0 - lp);
        let w = rs_weight_update((1.0f64 / 200.0).ln(), 0.8f64.ln(), (1.0f64 / 8.0).ln(), 0.5f64.ln()).unwrap();
        assert!((w.exp() - 0.016).abs() < 1e-15);
        assert_eq!(rs_weight_update(-3.0, lp, lp, 0.0).unwrap(), -3.0);
        assert!(matches!(
            rs_weight_update(0.0, 0.0, f64::NEG_INFINITY, 0.0),
            Err(Error::ProposalSupport)
        ));
    }

    fn system(log_w: &[f64]) -> ParticleSystem<f64> {
        let n = log_w.len();
        ParticleSystem {
            states: (0..n).map(|i| i as f64 * 10.0).collect(),
            log_weights: log_w.to_vec(),
            regimes: (0..n).map(|i| i % 3).collect(),
            counts: (0..n * 3).map(|i| i as u32).collect(),
            n_regimes: 3,
        }
    }

    #[test]
    fn resample_degenerate_weights_copy_single_ancestor() {
        let mut lw = vec![f64::NEG_INFINITY; 6];
        lw[0] = 0.0;
        let mut sys = system(&lw);
        let ancestors = resample(&mut Eval, &mut sys, &mut rng(1)).unwrap();
        assert!(ancestors.iter().all(|&a| a == 0));
        assert!(sys.states.iter().all(|&s| s == 0.0));
        assert!(sys.regimes.iter().all(|&m| m == 0));
        assert_eq!(&sys.counts[3..6], &[0, 1, 2]);
        let uniform = -(6f64).ln();
        assert!(sys.log_weights.iter().all(|&l| l == uniform));
    }

    #[test]
    fn resample_degenerate_on_last_particle() {
        let mut lw = vec![f64::NEG_INFINITY; 4];
        lw[3] = -2.0;
        let mut sys = system(&lw);
        let ancestors = resample(&mut Eval, &mut sys, &mut rng(2)).unwrap();
        assert!(ancestors.iter().all(|&a| a == 3));
    }

    fn run_eight_regime<F>(kind: DynamicsKind, traj: u64, f: F) -> (Vec<f64>, FilterOutput)
    where
        F: Fn(&ModelSuite, &[f64], &mut seed::StreamRng) -> FilterOutput,
    {
        let suite = ModelSuite::eight_regime(kind);
        let t = suite.simulate(99, traj);
        let out = f(&suite, &t.observations, &mut rng(traj));
        (t.truth().to_vec(), out)
    }

    #[test]
    fn filter_outputs_satisfy_invariants() {
        for kind in [DynamicsKind::Markov, DynamicsKind::Polya] {
            for proposal in [
                RegimeProposal::Uniform,
                RegimeProposal::Bootstrap,
                RegimeProposal::Deterministic,
            ] {
                let cfg = FilterConfig::new(200).with_proposal(proposal);
                let (_, out) = run_eight_regime(kind, 1, |s, o, r| run_rs_pf(s, o, &cfg, r).unwrap());
                for (ess, post) in out.ess_trace.iter().zip(&out.regime_posterior) {
                    assert!((1.0..=200.0).contains(ess));
                    assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            let cfg = FilterConfig::new(200);
            for mm in [run_mm_pf::<seed::StreamRng>, run_mm_pf_bank::<seed::StreamRng>] {
                let (_, out) = run_eight_regime(kind, 2, |s, o, r| mm(s, o, &cfg, r).unwrap());
                assert_eq!(out.horizon(), 50);
                for (ess, post) in out.ess_trace.iter().zip(&out.regime_posterior) {
                    assert!((1.0..=200.0).contains(ess));
                    assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_proposal_needs_divisible_particle_count() {
        let cfg = FilterConfig::new(201).with_proposal(RegimeProposal::Deterministic);
        let suite = ModelSuite::eight_regime(DynamicsKind::Markov);
        let t = suite.simulate(1, 0);
        assert!(matches!(
            run_rs_pf(&suite, &t.observations, &cfg, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_proposal_allocates_equally() {
        let mut cfg = FilterConfig::new(80).with_proposal(RegimeProposal::Deterministic);
        cfg.record_trace = true;
        let suite = ModelSuite::eight_regime(DynamicsKind::Polya);
        let t = suite.simulate(3, 0);
        let nets = NeuralRegimeSet::init(1, 8);
        let run = run_rs_dbpf(&mut Eval, &nets, &suite.dynamics, &t.observations, &cfg, &mut rng(5)).unwrap();
        for step in run.trace.unwrap() {
            let mut c = [0usize; 8];
            step.regimes.iter().for_each(|&m| c[m] += 1);
            assert!(c.iter().all(|&k| k == 10));
        }
    }

    #[test]
    fn bootstrap_proposal_ratio_cancels() {
        let mut cfg = FilterConfig::new(100).with_proposal(RegimeProposal::Bootstrap);
        cfg.record_trace = true;
        for kind in [DynamicsKind::Markov, DynamicsKind::Polya] {
            let suite = ModelSuite::eight_regime(kind);
            let t = suite.simulate(4, 0);
            let nets = NeuralRegimeSet::init(2, 8);
            let run = run_rs_dbpf(&mut Eval, &nets, &suite.dynamics, &t.observations, &cfg, &mut rng(6)).unwrap();
            for step in run.trace.unwrap() {
                assert!(step.log_ratio.iter().all(|r| r.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let cfg = FilterConfig::new(150);
        let a = run_eight_regime(DynamicsKind::Polya, 3, |s, o, r| run_rs_pf(s, o, &cfg, r).unwrap()).1;
        let b = run_eight_regime(DynamicsKind::Polya, 3, |s, o, r| run_rs_pf(s, o, &cfg, r).unwrap()).1;
        assert_eq!(a, b);
    }

    #[test]
    fn single_regime_rs_pf_equals_bpf() {
        let mut suite = ModelSuite::eight_regime(DynamicsKind::Markov);
        suite.candidates.truncate(1);
        suite.candidates[0] = ModelSuite::eight_regime(DynamicsKind::Markov).candidates[5];
        suite.dynamics = RegimeDynamics::markov(vec![vec![1.0]]).unwrap();
        let t = suite.simulate(8, 0);
        let cfg = FilterConfig::new(300);
        let a = run_rs_pf(&suite, &t.observations, &cfg, &mut rng(7)).unwrap();
        let b = run_bpf(&suite.candidates[0], &t.observations, &cfg, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_networks_estimate_zero() {
        let suite = ModelSuite::eight_regime(DynamicsKind::Markov);
        let t = suite.simulate(5, 0);
        let cfg = FilterConfig::new(50);
        let nets = NeuralRegimeSet::zeros(8);
        let run = run_rs_dbpf(&mut Eval, &nets, &suite.dynamics, &t.observations, &cfg, &mut rng(1)).unwrap();
        assert!(run.output.estimates.iter().all(|&e| e == 0.0));
        let run = run_dbpf(&mut Eval, &nets.nets[0], &t.observations, &cfg, &mut rng(1)).unwrap();
        assert!(run.output.estimates.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn tape_and_eval_agree_bitwise() {
        let suite = ModelSuite::eight_regime(DynamicsKind::Polya);
        let t = suite.simulate(6, 0);
        let cfg = FilterConfig::new(40);
        let nets = NeuralRegimeSet::init(9, 8);
        let plain = run_rs_dbpf(&mut Eval, &nets, &suite.dynamics, &t.observations, &cfg, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let (bound, _) = nets.bind(&mut tape);
        let taped = run_rs_dbpf(&mut tape, &bound, &suite.dynamics, &t.observations, &cfg, &mut rng(3)).unwrap();
        assert_eq!(plain.output, taped.output);
    }

    #[test]
    fn wrong_observation_length_rejected() {
        let suite = ModelSuite::eight_regime(DynamicsKind::Markov);
        let cfg = FilterConfig::new(10);
        assert!(matches!(
            run_rs_pf(&suite, &[0.0; 49], &cfg, &mut rng(0)),
            Err(Error::ObservationLength { expected: 50, got: 49 })
        ));
        assert!(run_mm_pf(&suite, &[0.0; 51], &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(FilterConfig::new(0).validate().is_err());
        assert!(FilterConfig::new(10).with_ess_threshold(11.0).validate().is_err());
        assert!(FilterConfig::new(10).with_ess_threshold(0.0).validate().is_err());
        assert!(FilterConfig::new(10).with_ess_threshold(10.0).validate().is_ok());
    }

    #[test]
    fn csv_rows() {
        let out = FilterOutput {
            estimates: vec![1.0, 2.0],
            ess_trace: vec![5.0, 4.0],
            regime_posterior: vec![vec![1.0], vec![1.0]],
            resampled: vec![false, true],
            log_evidence: vec![],
        };
        let mut buf = Vec::new();
        out.write_csv_rows(&mut buf, 7, &[0.5, 2.5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "7,1,1,0.5,0.5,5\n7,2,2,2.5,0.5,4\n");
    }
}
