//! C ABI for `rsdbpf`.
//!
//! Objects are opaque handles created by `rsdbpf_*_new`/`_load`/`_generate`
//! and released with the matching `_free`. Every fallible function returns an
//! [`RsdbpfStatus`]; on failure [`rsdbpf_last_error`] holds a message for the
//! calling thread. Output arrays are caller-allocated: pass the buffer and its
//! length, and the call fails with `RSDBPF_STATUS_BUFFER_TOO_SMALL` if it
//! does not fit.

#![allow(clippy::missing_safety_doc, clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rsdbpf::dataset::{Dataset, Split, SplitCounts};
use rsdbpf::filters::{self, FilterConfig, FilterOutput, RegimeProposal};
use rsdbpf::neural::NeuralRegimeSet;
use rsdbpf::seed;
use rsdbpf::ssm::{DynamicsKind, ModelSuite};
use rsdbpf::training::{filter_learned, LearnedFilter};
use rsdbpf::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsdbpfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    DegenerateWeights = 4,
    ObservationLength = 5,
    Parse = 6,
    Version = 7,
    NonFiniteLoss = 8,
    Io = 9,
    Autodiff = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsdbpfDynamics {
    Markov = 0,
    Polya = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsdbpfProposal {
    Uniform = 0,
    Bootstrap = 1,
    Deterministic = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsdbpfSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// Filter settings. `ess_threshold <= 0` selects `n_particles / 2`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RsdbpfFilterOptions {
    pub n_particles: usize,
    pub ess_threshold: f64,
    pub proposal: RsdbpfProposal,
    pub seed: u64,
}

/// A model suite: candidate models, regime dynamics, horizon.
pub struct RsdbpfSuite(ModelSuite);

/// A generated or loaded trajectory dataset.
pub struct RsdbpfDataset(Dataset);

/// Neural regime models (one per regime; one for DBPF).
pub struct RsdbpfNets(NeuralRegimeSet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RsdbpfStatus {
    match e {
        Error::Config(_) => RsdbpfStatus::InvalidArgument,
        Error::Validation(_) | Error::IndexOutOfRange { .. } => RsdbpfStatus::Validation,
        Error::DegenerateWeights | Error::ProposalSupport => RsdbpfStatus::DegenerateWeights,
        Error::ObservationLength { .. } => RsdbpfStatus::ObservationLength,
        Error::Parse { .. } | Error::Json(_) => RsdbpfStatus::Parse,
        Error::Version { .. } => RsdbpfStatus::Version,
        Error::NonFiniteLoss { .. } => RsdbpfStatus::NonFiniteLoss,
        Error::Io { .. } => RsdbpfStatus::Io,
        Error::Autodiff(_) => RsdbpfStatus::Autodiff,
    }
}

/// Internal failure carrying the status to report.
struct Fail(RsdbpfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RsdbpfStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RsdbpfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsdbpfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            RsdbpfStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RsdbpfStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T: Copy>(src: &[T], dst: *mut T, len: usize, what: &str) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(null(what));
    }
    if len < src.len() {
        return Err(Fail(
            RsdbpfStatus::BufferTooSmall,
            format!("{what} needs {} entries, buffer holds {len}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn dynamics_kind(d: RsdbpfDynamics) -> DynamicsKind {
    match d {
        RsdbpfDynamics::Markov => DynamicsKind::Markov,
        RsdbpfDynamics::Polya => DynamicsKind::Polya,
    }
}

fn filter_config(opts: &RsdbpfFilterOptions) -> FilterConfig {
    let proposal = match opts.proposal {
        RsdbpfProposal::Uniform => RegimeProposal::Uniform,
        RsdbpfProposal::Bootstrap => RegimeProposal::Bootstrap,
        RsdbpfProposal::Deterministic => RegimeProposal::Deterministic,
    };
    let cfg = FilterConfig::new(opts.n_particles).with_proposal(proposal);
    if opts.ess_threshold > 0.0 {
        cfg.with_ess_threshold(opts.ess_threshold)
    } else {
        cfg
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rsdbpf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rsdbpf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- suites ------------------------------------------------------------

/// The eight-regime suite with Markov or Pólya switching.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_suite_new(dynamics: RsdbpfDynamics, out: *mut *mut RsdbpfSuite) -> RsdbpfStatus {
    guard(|| store(out, RsdbpfSuite(ModelSuite::eight_regime(dynamics_kind(dynamics)))))
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_suite_free(suite: *mut RsdbpfSuite) {
    if !suite.is_null() {
        drop(Box::from_raw(suite));
    }
}

/// Number of observations `T` per trajectory; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_suite_horizon(suite: *const RsdbpfSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.0.horizon)
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_suite_n_regimes(suite: *const RsdbpfSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.0.n_regimes())
}

/// Simulates trajectory `traj_id` of `seed`. `states` and `regimes` need
/// `T + 1` entries, `observations` needs `T`. Regimes are 1-based.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_suite_simulate(
    suite: *const RsdbpfSuite,
    seed: u64,
    traj_id: u64,
    states: *mut f64,
    states_len: usize,
    regimes: *mut u32,
    regimes_len: usize,
    observations: *mut f64,
    observations_len: usize,
) -> RsdbpfStatus {
    guard(|| {
        let suite = as_ref(suite, "suite")?;
        let t = suite.0.simulate(seed, traj_id);
        let m: Vec<u32> = t.regimes.iter().map(|&m| m as u32 + 1).collect();
        write_out(&t.states, states, states_len, "states")?;
        write_out(&m, regimes, regimes_len, "regimes")?;
        write_out(&t.observations, observations, observations_len, "observations")
    })
}

// ---- datasets ----------------------------------------------------------

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_generate(
    suite: *const RsdbpfSuite,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    out: *mut *mut RsdbpfDataset,
) -> RsdbpfStatus {
    guard(|| {
        let suite = as_ref(suite, "suite")?;
        let counts = SplitCounts {
            train: n_train,
            val: n_val,
            test: n_test,
        };
        store(out, RsdbpfDataset(Dataset::generate(&suite.0, counts, seed)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_load(path: *const c_char, out: *mut *mut RsdbpfDataset) -> RsdbpfStatus {
    guard(|| {
        let path = path_arg(path)?;
        store(out, RsdbpfDataset(Dataset::load(&path)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_save(dataset: *const RsdbpfDataset, path: *const c_char) -> RsdbpfStatus {
    guard(|| {
        let ds = as_ref(dataset, "dataset")?;
        Ok(ds.0.save(&path_arg(path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_free(dataset: *mut RsdbpfDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of trajectories; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_len(dataset: *const RsdbpfDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.trajectories.len())
}

/// Copies a new handle to the dataset's model suite.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_suite(
    dataset: *const RsdbpfDataset,
    out: *mut *mut RsdbpfSuite,
) -> RsdbpfStatus {
    guard(|| {
        let ds = as_ref(dataset, "dataset")?;
        store(out, RsdbpfSuite(ds.0.suite.clone()))
    })
}

/// Id, split, observations (`T`) and true states `s_1..s_T` (`T`) of trajectory `index`.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_dataset_trajectory(
    dataset: *const RsdbpfDataset,
    index: usize,
    traj_id: *mut u64,
    split: *mut RsdbpfSplit,
    observations: *mut f64,
    observations_len: usize,
    truth: *mut f64,
    truth_len: usize,
) -> RsdbpfStatus {
    guard(|| {
        let ds = as_ref(dataset, "dataset")?;
        let n = ds.0.trajectories.len();
        let t = ds.0.trajectories.get(index).ok_or_else(|| {
            Fail(
                RsdbpfStatus::InvalidArgument,
                format!("index {index} out of range (dataset has {n})"),
            )
        })?;
        if traj_id.is_null() || split.is_null() {
            return Err(null("traj_id/split"));
        }
        *traj_id = t.traj_id;
        *split = match ds.0.splits[index] {
            Split::Train => RsdbpfSplit::Train,
            Split::Val => RsdbpfSplit::Val,
            Split::Test => RsdbpfSplit::Test,
        };
        write_out(&t.observations, observations, observations_len, "observations")?;
        write_out(t.truth(), truth, truth_len, "truth")
    })
}

// ---- neural models -----------------------------------------------------

/// Seeded initialisation of `n_regimes` networks (1 for DBPF).
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_new(seed: u64, n_regimes: usize, out: *mut *mut RsdbpfNets) -> RsdbpfStatus {
    guard(|| {
        if n_regimes == 0 {
            return Err(Fail(RsdbpfStatus::InvalidArgument, "n_regimes must be positive".into()));
        }
        store(out, RsdbpfNets(NeuralRegimeSet::init(seed, n_regimes)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_load(path: *const c_char, out: *mut *mut RsdbpfNets) -> RsdbpfStatus {
    guard(|| {
        let path = path_arg(path)?;
        store(out, RsdbpfNets(NeuralRegimeSet::load(&path)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_save(nets: *const RsdbpfNets, path: *const c_char) -> RsdbpfStatus {
    guard(|| {
        let nets = as_ref(nets, "nets")?;
        Ok(nets.0.save(&path_arg(path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_free(nets: *mut RsdbpfNets) {
    if !nets.is_null() {
        drop(Box::from_raw(nets));
    }
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_n_regimes(nets: *const RsdbpfNets) -> usize {
    nets.as_ref().map_or(0, |n| n.0.n_regimes())
}

#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_n_params(nets: *const RsdbpfNets) -> usize {
    nets.as_ref().map_or(0, |n| n.0.n_params())
}

/// Copies the parameters, in checkpoint order, into `params`.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_get_params(nets: *const RsdbpfNets, params: *mut f64, len: usize) -> RsdbpfStatus {
    guard(|| {
        let nets = as_ref(nets, "nets")?;
        write_out(&nets.0.flatten(), params, len, "params")
    })
}

/// Overwrites every parameter; `len` must equal the parameter count.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_nets_set_params(nets: *mut RsdbpfNets, params: *const f64, len: usize) -> RsdbpfStatus {
    guard(|| {
        let nets = nets.as_mut().ok_or_else(|| null("nets"))?;
        let values = slice_arg(params, len, "params")?;
        nets.0 = nets.0.with_values(values)?;
        Ok(())
    })
}

// ---- filters -----------------------------------------------------------

unsafe fn run_filter(
    opts: *const RsdbpfFilterOptions,
    observations: *const f64,
    n_obs: usize,
    estimates: *mut f64,
    estimates_len: usize,
    ess: *mut f64,
    ess_len: usize,
    f: impl FnOnce(&[f64], &FilterConfig, &mut seed::StreamRng) -> rsdbpf::Result<FilterOutput>,
) -> RsdbpfStatus {
    guard(|| {
        let opts = as_ref(opts, "options")?;
        let obs = slice_arg(observations, n_obs, "observations")?;
        let cfg = filter_config(opts);
        let mut rng = seed::stream(opts.seed, &[]);
        let out = f(obs, &cfg, &mut rng)?;
        write_out(&out.estimates, estimates, estimates_len, "estimates")?;
        if !ess.is_null() {
            write_out(&out.ess_trace, ess, ess_len, "ess")?;
        }
        Ok(())
    })
}

/// Oracle regime-switching particle filter. `ess` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_run_rs_pf(
    suite: *const RsdbpfSuite,
    opts: *const RsdbpfFilterOptions,
    observations: *const f64,
    n_obs: usize,
    estimates: *mut f64,
    estimates_len: usize,
    ess: *mut f64,
    ess_len: usize,
) -> RsdbpfStatus {
    let Some(suite) = suite.as_ref() else {
        return guard(|| Err(null("suite")));
    };
    run_filter(
        opts,
        observations,
        n_obs,
        estimates,
        estimates_len,
        ess,
        ess_len,
        |o, c, r| filters::run_rs_pf(&suite.0, o, c, r),
    )
}

/// Multi-model baseline (no switching). `ess` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_run_mm_pf(
    suite: *const RsdbpfSuite,
    opts: *const RsdbpfFilterOptions,
    observations: *const f64,
    n_obs: usize,
    estimates: *mut f64,
    estimates_len: usize,
    ess: *mut f64,
    ess_len: usize,
) -> RsdbpfStatus {
    let Some(suite) = suite.as_ref() else {
        return guard(|| Err(null("suite")));
    };
    run_filter(
        opts,
        observations,
        n_obs,
        estimates,
        estimates_len,
        ess,
        ess_len,
        |o, c, r| filters::run_mm_pf(&suite.0, o, c, r),
    )
}

/// Learned regime-switching filter; `nets` needs one network per regime of
/// `suite`, whose switching law is used. `ess` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_run_rs_dbpf(
    nets: *const RsdbpfNets,
    suite: *const RsdbpfSuite,
    opts: *const RsdbpfFilterOptions,
    observations: *const f64,
    n_obs: usize,
    estimates: *mut f64,
    estimates_len: usize,
    ess: *mut f64,
    ess_len: usize,
) -> RsdbpfStatus {
    let (Some(nets), Some(suite)) = (nets.as_ref(), suite.as_ref()) else {
        return guard(|| Err(null("nets/suite")));
    };
    run_filter(
        opts,
        observations,
        n_obs,
        estimates,
        estimates_len,
        ess,
        ess_len,
        |o, c, r| filter_learned(LearnedFilter::RsDbpf, &nets.0, &suite.0.dynamics, o, c, r),
    )
}

/// Learned single-model filter; `nets` must hold exactly one network. `ess` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_run_dbpf(
    nets: *const RsdbpfNets,
    opts: *const RsdbpfFilterOptions,
    observations: *const f64,
    n_obs: usize,
    estimates: *mut f64,
    estimates_len: usize,
    ess: *mut f64,
    ess_len: usize,
) -> RsdbpfStatus {
    let Some(nets) = nets.as_ref() else {
        return guard(|| Err(null("nets")));
    };
    let dynamics = ModelSuite::eight_regime(DynamicsKind::Markov).dynamics;
    run_filter(
        opts,
        observations,
        n_obs,
        estimates,
        estimates_len,
        ess,
        ess_len,
        |o, c, r| filter_learned(LearnedFilter::Dbpf, &nets.0, &dynamics, o, c, r),
    )
}

/// Root mean squared error of `n` estimates against `truth`.
#[no_mangle]
pub unsafe extern "C" fn rsdbpf_rmse(
    estimates: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> RsdbpfStatus {
    guard(|| {
        let e = slice_arg(estimates, n, "estimates")?;
        let t = slice_arg(truth, n, "truth")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = rsdbpf::metrics::rmse(e, t)?;
        Ok(())
    })
}
