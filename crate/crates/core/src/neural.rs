//! Learnable candidate models.
//!
//! Each regime owns a particle proposer `s_t = k(s_{t-1}, ε)` and a Gaussian
//! kernel likelihood that compares the observation with an embedding of the
//! state. Parameter containers are generic over the scalar type so the same
//! structure holds plain `f64` values or graph handles bound to a tape.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::seed;
use crate::{Error, Result};

pub const HIDDEN: usize = 8;
pub const CHECKPOINT_FORMAT: &str = "rsdbpf-checkpoint/1";
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Two-layer perceptron: tanh hidden layer, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<P = f64> {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    /// Row-major `n_hidden × n_in`.
    pub w1: Vec<P>,
    pub b1: Vec<P>,
    /// Row-major `n_out × n_hidden`.
    pub w2: Vec<P>,
    pub b2: Vec<P>,
}

impl<P: Copy> Mlp<P> {
    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn map<Q>(&self, f: &mut impl FnMut(P) -> Q) -> Mlp<Q> {
        Mlp {
            n_in: self.n_in,
            n_hidden: self.n_hidden,
            n_out: self.n_out,
            w1: self.w1.iter().map(|&x| f(x)).collect(),
            b1: self.b1.iter().map(|&x| f(x)).collect(),
            w2: self.w2.iter().map(|&x| f(x)).collect(),
            b2: self.b2.iter().map(|&x| f(x)).collect(),
        }
    }

    fn arrays(&self) -> [(&'static str, [usize; 2], &[P]); 4] {
        [
            ("w1", [self.n_hidden, self.n_in], &self.w1),
            ("b1", [self.n_hidden, 1], &self.b1),
            ("w2", [self.n_out, self.n_hidden], &self.w2),
            ("b2", [self.n_out, 1], &self.b2),
        ]
    }

    pub fn forward<G: Graph<V = P>>(&self, g: &mut G, x: &[P]) -> Vec<P> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut terms = Vec::with_capacity(self.n_in.max(self.n_hidden) + 1);
        let hidden: Vec<P> = (0..self.n_hidden)
            .map(|j| {
                terms.clear();
                let row = &self.w1[j * self.n_in..(j + 1) * self.n_in];
                for (&w, &xi) in row.iter().zip(x) {
                    terms.push(g.mul(w, xi));
                }
                terms.push(self.b1[j]);
                let pre = g.sum(&terms);
                g.tanh(pre)
            })
            .collect();
        (0..self.n_out)
            .map(|o| {
                terms.clear();
                let row = &self.w2[o * self.n_hidden..(o + 1) * self.n_hidden];
                for (&w, &h) in row.iter().zip(&hidden) {
                    terms.push(g.mul(w, h));
                }
                terms.push(self.b2[o]);
                g.sum(&terms)
            })
            .collect()
    }
}

impl Mlp<f64> {
    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            w1: vec![0.0; n_hidden * n_in],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_out * n_hidden],
            b2: vec![0.0; n_out],
        }
    }

    /// Weights uniform on `±sqrt(1/fan_in)`, biases zero.
    fn init<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_in, n_hidden, n_out);
        let b_in = (1.0 / n_in as f64).sqrt();
        for w in &mut m.w1 {
            *w = rng.gen_range(-b_in..b_in);
        }
        let b_hidden = (1.0 / n_hidden as f64).sqrt();
        for w in &mut m.w2 {
            *w = rng.gen_range(-b_hidden..b_hidden);
        }
        m
    }
}

/// Parameter set of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeNet<P = f64> {
    /// Input `[s_{t-1}, ε]`, output `s_t`.
    pub proposer: Mlp<P>,
    /// Input `s_t`, output the embedding compared against the observation.
    pub embedder: Mlp<P>,
    /// Kernel bandwidth is `exp(log_bandwidth)`.
    pub log_bandwidth: P,
}

impl<P: Copy> RegimeNet<P> {
    pub fn n_params(&self) -> usize {
        self.proposer.n_params() + self.embedder.n_params() + 1
    }

    fn map<Q>(&self, f: &mut impl FnMut(P) -> Q) -> RegimeNet<Q> {
        RegimeNet {
            proposer: self.proposer.map(f),
            embedder: self.embedder.map(f),
            log_bandwidth: f(self.log_bandwidth),
        }
    }

    /// `k(s_prev, ε)`.
    pub fn propose<G: Graph<V = P>>(&self, g: &mut G, s_prev: P, eps: f64) -> P {
        let eps = g.constant(eps);
        self.proposer.forward(g, &[s_prev, eps])[0]
    }

    /// Precomputes the regime's kernel constants on `g`.
    pub fn kernel<G: Graph<V = P>>(&self, g: &mut G) -> Kernel<P> {
        // ln(1/(σ sqrt(2π))) and 1/(2σ²) with σ = exp(log_bandwidth)
        let half_ln_2pi = g.constant(HALF_LN_2PI);
        let neg_lb = g.neg(self.log_bandwidth);
        let log_norm = g.sub(neg_lb, half_ln_2pi);
        let two_neg_lb = g.add(neg_lb, neg_lb);
        let precision = g.exp(two_neg_lb);
        let half = g.constant(0.5);
        let half_precision = g.mul(half, precision);
        Kernel {
            log_norm,
            half_precision,
        }
    }

    /// `ln l(obs, s)`, a normalised Gaussian density of `obs` around the state embedding.
    pub fn log_likelihood<G: Graph<V = P>>(&self, g: &mut G, obs: f64, s: P) -> P {
        let kernel = self.kernel(g);
        let obs = g.constant(obs);
        self.log_likelihood_with(g, &kernel, obs, s)
    }

    pub fn log_likelihood_with<G: Graph<V = P>>(&self, g: &mut G, kernel: &Kernel<P>, obs: P, s: P) -> P {
        let e = self.embedder.forward(g, &[s])[0];
        let r = g.sub(obs, e);
        let r2 = g.square(r);
        let q = g.mul(r2, kernel.half_precision);
        g.sub(kernel.log_norm, q)
    }

    /// `l(obs, s)`; always positive for finite inputs.
    pub fn likelihood<G: Graph<V = P>>(&self, g: &mut G, obs: f64, s: P) -> P {
        let ll = self.log_likelihood(g, obs, s);
        g.exp(ll)
    }
}

/// Parameter-only terms of a regime's Gaussian kernel.
#[derive(Debug, Clone, Copy)]
pub struct Kernel<P> {
    pub log_norm: P,
    pub half_precision: P,
}

impl RegimeNet<f64> {
    pub fn zeros() -> Self {
        Self {
            proposer: Mlp::zeros(2, HIDDEN, 1),
            embedder: Mlp::zeros(1, HIDDEN, 1),
            log_bandwidth: 0.0,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.log_bandwidth.exp()
    }
}

/// The union of all regimes' parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralRegimeSet<P = f64> {
    pub nets: Vec<RegimeNet<P>>,
}

impl<P: Copy> NeuralRegimeSet<P> {
    pub fn n_regimes(&self) -> usize {
        self.nets.len()
    }

    pub fn n_params(&self) -> usize {
        self.nets.iter().map(RegimeNet::n_params).sum()
    }

    pub fn map<Q>(&self, mut f: impl FnMut(P) -> Q) -> NeuralRegimeSet<Q> {
        NeuralRegimeSet {
            nets: self.nets.iter().map(|n| n.map(&mut f)).collect(),
        }
    }

    /// Canonical parameter order: per regime, proposer then embedder (each
    /// `w1, b1, w2, b2`), then the log bandwidth.
    pub fn named_arrays(&self) -> Vec<(String, [usize; 2], Vec<P>)> {
        let mut out = Vec::with_capacity(self.nets.len() * 9);
        for (j, net) in self.nets.iter().enumerate() {
            for (part, mlp) in [("proposer", &net.proposer), ("embedder", &net.embedder)] {
                for (name, shape, vals) in mlp.arrays() {
                    out.push((format!("regime{}.{part}.{name}", j + 1), shape, vals.to_vec()));
                }
            }
            out.push((
                format!("regime{}.log_bandwidth", j + 1),
                [1, 1],
                vec![net.log_bandwidth],
            ));
        }
        out
    }

    pub fn flatten(&self) -> Vec<P> {
        self.named_arrays().into_iter().flat_map(|(_, _, v)| v).collect()
    }

    /// Rebuilds a set with this set's shapes from values in canonical order.
    pub fn with_values<Q: Copy>(&self, values: &[Q]) -> Result<NeuralRegimeSet<Q>> {
        if values.len() != self.n_params() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        Ok(self.map(|_| it.next().unwrap()))
    }
}

impl NeuralRegimeSet<f64> {
    /// Deterministic initialisation from `seed`.
    pub fn init(seed: u64, n_regimes: usize) -> Self {
        assert!(n_regimes >= 1, "need at least one regime");
        let mut rng = seed::stream(seed, &[seed::TAG_INIT]);
        let nets = (0..n_regimes)
            .map(|_| RegimeNet {
                proposer: Mlp::init(2, HIDDEN, 1, &mut rng),
                embedder: Mlp::init(1, HIDDEN, 1, &mut rng),
                log_bandwidth: 0.0,
            })
            .collect();
        Self { nets }
    }

    pub fn zeros(n_regimes: usize) -> Self {
        Self {
            nets: vec![RegimeNet::zeros(); n_regimes],
        }
    }

    /// Registers every parameter as a differentiable input of `g`, returning
    /// the bound set and the inputs in canonical order.
    pub fn bind<G: Graph>(&self, g: &mut G) -> (NeuralRegimeSet<G::V>, Vec<G::V>) {
        let leaves: Vec<G::V> = self.flatten().into_iter().map(|x| g.param(x)).collect();
        let bound = self.with_values(&leaves).expect("leaf count matches by construction");
        (bound, leaves)
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            n_regimes: self.n_regimes(),
            params: self
                .named_arrays()
                .into_iter()
                .map(|(name, shape, values)| NamedArray { name, shape, values })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Version {
                expected: CHECKPOINT_FORMAT.into(),
                found: ckpt.format.clone(),
            });
        }
        if ckpt.n_regimes == 0 {
            return Err(Error::Validation("checkpoint has zero regimes".into()));
        }
        let template = Self::zeros(ckpt.n_regimes);
        let expected = template.named_arrays();
        if expected.len() != ckpt.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} arrays, expected {}",
                ckpt.params.len(),
                expected.len()
            )));
        }
        let mut flat = Vec::with_capacity(template.n_params());
        for ((name, shape, _), arr) in expected.iter().zip(&ckpt.params) {
            if &arr.name != name || arr.shape != *shape || arr.values.len() != shape[0] * shape[1] {
                return Err(Error::Validation(format!(
                    "checkpoint array {:?} does not match expected {name:?} {shape:?}",
                    arr.name
                )));
            }
            if arr.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite value in {name}")));
            }
            flat.extend_from_slice(&arr.values);
        }
        template.with_values(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// On-disk parameter file: named arrays in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub n_regimes: usize,
    pub params: Vec<NamedArray>,
}
