//! Ground-truth regime-switching state-space model.
//!
//! Regime indices are 0-based inside the crate. File formats and the CLI
//! convert to 1-based indices at the boundary.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::{self, StreamRng};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One candidate (dynamic, measurement) pair:
/// `s_t = a s_{t-1} + b + u_t`, `o_t = c sqrt|s_t| + d + v_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub dyn_noise_var: f64,
    pub obs_noise_var: f64,
}

impl CandidateModel {
    pub fn step_state(&self, s_prev: f64, u: f64) -> f64 {
        self.a * s_prev + self.b + u
    }

    pub fn emit_observation(&self, s: f64, v: f64) -> f64 {
        self.c * s.abs().sqrt() + self.d + v
    }

    /// Propagates with standard-normal noise `eps` scaled to the dynamic noise.
    pub fn propagate(&self, s_prev: f64, eps: f64) -> f64 {
        self.step_state(s_prev, self.dyn_noise_var.sqrt() * eps)
    }

    /// `ln g(o | s)` for the Gaussian measurement noise.
    pub fn obs_log_density(&self, obs: f64, s: f64) -> f64 {
        let r = obs - self.emit_observation(s, 0.0);
        -0.5 * (LN_2PI + self.obs_noise_var.ln()) - r * r / (2.0 * self.obs_noise_var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    Markov,
    Polya,
}

impl std::fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DynamicsKind::Markov => "markov",
            DynamicsKind::Polya => "polya",
        })
    }
}

impl std::str::FromStr for DynamicsKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markov" => Ok(DynamicsKind::Markov),
            "polya" | "pólya" => Ok(DynamicsKind::Polya),
            other => Err(Error::Config(format!(
                "dynamics: expected markov or polya, got {other:?}"
            ))),
        }
    }
}

/// Law of the regime index process `p(m_t | m_{0:t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RegimeDynamics {
    /// `transition[j][k] = p(m_t = k | m_{t-1} = j)`.
    Markov { transition: Vec<Vec<f64>> },
    /// Urn with pseudo-counts `beta`.
    Polya { beta: Vec<f64> },
}

impl RegimeDynamics {
    pub fn markov(transition: Vec<Vec<f64>>) -> Result<Self> {
        let d = RegimeDynamics::Markov { transition };
        d.validate()?;
        Ok(d)
    }

    pub fn polya(beta: Vec<f64>) -> Result<Self> {
        let d = RegimeDynamics::Polya { beta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RegimeDynamics::Markov { transition } => {
                let n = transition.len();
                if n == 0 {
                    return Err(Error::Validation("transition matrix is empty".into()));
                }
                for (j, row) in transition.iter().enumerate() {
                    if row.len() != n {
                        return Err(Error::Validation(format!(
                            "transition row {} has {} entries, expected {n}",
                            j + 1,
                            row.len()
                        )));
                    }
                    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                        return Err(Error::Validation(format!(
                            "transition row {} has a negative or non-finite entry",
                            j + 1
                        )));
                    }
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > 1e-12 {
                        return Err(Error::Validation(format!("transition row {} sums to {total}", j + 1)));
                    }
                }
                Ok(())
            }
            RegimeDynamics::Polya { beta } => {
                if beta.is_empty() {
                    return Err(Error::Validation("beta is empty".into()));
                }
                if beta.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
                    return Err(Error::Validation("all beta must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> DynamicsKind {
        match self {
            RegimeDynamics::Markov { .. } => DynamicsKind::Markov,
            RegimeDynamics::Polya { .. } => DynamicsKind::Polya,
        }
    }

    pub fn n_regimes(&self) -> usize {
        match self {
            RegimeDynamics::Markov { transition } => transition.len(),
            RegimeDynamics::Polya { beta } => beta.len(),
        }
    }

    /// `p(m_t = k | m_{0:t-1} = history)`.
    pub fn regime_prob(&self, history: &[usize], k: usize) -> Result<f64> {
        let n = self.n_regimes();
        if history.is_empty() {
            return Err(Error::Validation("regime history is empty".into()));
        }
        if let Some(&bad) = history.iter().chain(std::iter::once(&k)).find(|&&m| m >= n) {
            return Err(Error::IndexOutOfRange { index: bad + 1, n });
        }
        Ok(match self {
            RegimeDynamics::Markov { transition } => transition[history[history.len() - 1]][k],
            RegimeDynamics::Polya { .. } => {
                let mut counts = vec![0u32; n];
                for &m in history {
                    counts[m] += 1;
                }
                self.prob_from_counts(&counts, k)
            }
        })
    }

    /// Markov transition probability from `last` to `k`. Panics for Pólya.
    #[inline]
    pub fn prob_from_last(&self, last: usize, k: usize) -> f64 {
        match self {
            RegimeDynamics::Markov { transition } => transition[last][k],
            RegimeDynamics::Polya { .. } => panic!("prob_from_last on Pólya dynamics"),
        }
    }

    /// Pólya urn probability given per-regime occurrence counts.
    #[inline]
    pub fn prob_from_counts(&self, counts: &[u32], k: usize) -> f64 {
        match self {
            RegimeDynamics::Polya { beta } => {
                let total: f64 = counts.iter().zip(beta).map(|(&c, &b)| c as f64 + b).sum();
                (counts[k] as f64 + beta[k]) / total
            }
            RegimeDynamics::Markov { .. } => panic!("prob_from_counts on Markov dynamics"),
        }
    }
}

/// Draws an index from probabilities `prob(0..n)` summing to 1.
/// A single category is returned without consuming randomness.
pub fn sample_categorical<R: Rng + ?Sized>(n: usize, mut prob: impl FnMut(usize) -> f64, rng: &mut R) -> usize {
    if n == 1 {
        return 0;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for k in 0..n {
        acc += prob(k);
        if u < acc {
            return k;
        }
    }
    // rounding left u above the final cumulative sum
    (0..n).rev().find(|&k| prob(k) > 0.0).unwrap_or(n - 1)
}

/// Uniform draw from `{0, .., n-1}`; no randomness consumed when `n == 1`.
pub fn sample_uniform_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    if n == 1 {
        0
    } else {
        rng.gen_range(0..n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSuite {
    pub candidates: Vec<CandidateModel>,
    pub dynamics: RegimeDynamics,
    /// Support of the uniform initial state distribution.
    pub init_state_low: f64,
    pub init_state_high: f64,
    /// Number of filtering steps `T`; trajectories hold `T + 1` states.
    pub horizon: usize,
}

const COEFFS_AB: [(f64, f64); 8] = [
    (-0.1, 0.0),
    (-0.3, -2.0),
    (-0.5, 2.0),
    (-0.9, -4.0),
    (0.1, 0.0),
    (0.3, 2.0),
    (0.5, -2.0),
    (0.9, 4.0),
];

/// Self-transition and next-regime (cyclic) probabilities of the eight-regime
/// Markov chain; the remaining mass is spread evenly.
const MARKOV_STAY: f64 = 0.80;
const MARKOV_NEXT: f64 = 0.15;
const MARKOV_OTHER: f64 = 1.0 / 120.0;

impl ModelSuite {
    pub fn new(
        candidates: Vec<CandidateModel>,
        dynamics: RegimeDynamics,
        init_state_low: f64,
        init_state_high: f64,
        horizon: usize,
    ) -> Result<Self> {
        let suite = Self {
            candidates,
            dynamics,
            init_state_low,
            init_state_high,
            horizon,
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        if self.candidates.len() != self.dynamics.n_regimes() {
            return Err(Error::Validation(format!(
                "{} candidate models but dynamics has {} regimes",
                self.candidates.len(),
                self.dynamics.n_regimes()
            )));
        }
        for (j, m) in self.candidates.iter().enumerate() {
            if !(m.dyn_noise_var >= 0.0) || !(m.obs_noise_var >= 0.0) {
                return Err(Error::Validation(format!(
                    "candidate {} has a negative noise variance",
                    j + 1
                )));
            }
        }
        if !(self.init_state_low < self.init_state_high) {
            return Err(Error::Validation("initial state support is empty".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be positive".into()));
        }
        Ok(())
    }

    /// The eight-regime benchmark: `a = c`, `b = d`, noise variances 0.1, `T = 50`.
    pub fn eight_regime(kind: DynamicsKind) -> Self {
        let candidates = COEFFS_AB
            .iter()
            .map(|&(a, b)| CandidateModel {
                a,
                b,
                c: a,
                d: b,
                dyn_noise_var: 0.1,
                obs_noise_var: 0.1,
            })
            .collect::<Vec<_>>();
        let n = candidates.len();
        let dynamics = match kind {
            DynamicsKind::Markov => {
                let transition = (0..n)
                    .map(|j| {
                        (0..n)
                            .map(|k| {
                                if k == j {
                                    MARKOV_STAY
                                } else if k == (j + 1) % n {
                                    MARKOV_NEXT
                                } else {
                                    MARKOV_OTHER
                                }
                            })
                            .collect()
                    })
                    .collect();
                RegimeDynamics::Markov { transition }
            }
            DynamicsKind::Polya => RegimeDynamics::Polya { beta: vec![1.0; n] },
        };
        Self {
            candidates,
            dynamics,
            init_state_low: -0.5,
            init_state_high: 0.5,
            horizon: 50,
        }
    }

    pub fn n_regimes(&self) -> usize {
        self.candidates.len()
    }

    pub fn sample_init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.init_state_low..self.init_state_high)
    }

    pub fn sample_init_regime<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_uniform_index(self.n_regimes(), rng)
    }

    /// `π(m_0 = k)`, uniform over regimes.
    pub fn init_regime_prob(&self, _k: usize) -> f64 {
        1.0 / self.n_regimes() as f64
    }

    /// Simulates one trajectory from the stream addressed by `seed`.
    pub fn simulate(&self, seed: u64, traj_id: u64) -> Trajectory {
        let mut rng = seed::stream(seed, &[seed::TAG_SIMULATE, traj_id]);
        self.simulate_with(&mut rng, traj_id)
    }

    pub fn simulate_with(&self, rng: &mut StreamRng, traj_id: u64) -> Trajectory {
        let t_max = self.horizon;
        let n = self.n_regimes();
        let mut states = Vec::with_capacity(t_max + 1);
        let mut regimes = Vec::with_capacity(t_max + 1);
        let mut observations = Vec::with_capacity(t_max);
        let mut counts = vec![0u32; n];

        let m0 = self.sample_init_regime(rng);
        let s0 = self.sample_init_state(rng);
        regimes.push(m0);
        states.push(s0);
        counts[m0] += 1;

        for _ in 1..=t_max {
            let last = *regimes.last().unwrap();
            let m = match &self.dynamics {
                RegimeDynamics::Markov { transition } => sample_categorical(n, |k| transition[last][k], rng),
                RegimeDynamics::Polya { .. } => {
                    sample_categorical(n, |k| self.dynamics.prob_from_counts(&counts, k), rng)
                }
            };
            counts[m] += 1;
            let model = &self.candidates[m];
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            let s = model.step_state(*states.last().unwrap(), model.dyn_noise_var.sqrt() * u);
            let o = model.emit_observation(s, model.obs_noise_var.sqrt() * v);
            regimes.push(m);
            states.push(s);
            observations.push(o);
        }

        Trajectory {
            traj_id,
            states,
            regimes,
            observations,
        }
    }
}

/// Ground truth of one simulated run. `states` and `regimes` include `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub traj_id: u64,
    pub states: Vec<f64>,
    /// 0-based regime indices.
    pub regimes: Vec<usize>,
    pub observations: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    /// States `s_{1:T}`, aligned with the observations.
    pub fn truth(&self) -> &[f64] {
        &self.states[1..]
    }

    pub fn validate(&self, n_regimes: usize, horizon: usize) -> Result<()> {
        let id = self.traj_id;
        if self.observations.len() != horizon {
            return Err(Error::Validation(format!(
                "trajectory {id}: {} observations, expected {horizon}",
                self.observations.len()
            )));
        }
        if self.states.len() != horizon + 1 || self.regimes.len() != horizon + 1 {
            return Err(Error::Validation(format!(
                "trajectory {id}: states/regimes must have length {}",
                horizon + 1
            )));
        }
        if let Some(&m) = self.regimes.iter().find(|&&m| m >= n_regimes) {
            return Err(Error::Validation(format!(
                "trajectory {id}: regime index {} outside 1..={n_regimes}",
                m + 1
            )));
        }
        if self.states.iter().chain(&self.observations).any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("trajectory {id}: non-finite value")));
        }
        Ok(())
    }
}
