use std::ffi::{CStr, CString};
use std::ptr;

use rsdbpf::filters::{run_mm_pf, run_rs_pf, FilterConfig, RegimeProposal};
use rsdbpf::neural::NeuralRegimeSet;
use rsdbpf::seed::stream;
use rsdbpf::ssm::{DynamicsKind, ModelSuite};
use rsdbpf::training::{filter_learned, LearnedFilter};
use rsdbpf_ffi::*;

const T: usize = 50;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rsdbpf_last_error()) }
        .to_str()
        .unwrap()
        .to_owned()
}

fn suite(d: RsdbpfDynamics) -> *mut RsdbpfSuite {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_suite_new(d, &mut s) }, RsdbpfStatus::Ok);
    s
}

fn opts(n: usize, seed: u64) -> RsdbpfFilterOptions {
    RsdbpfFilterOptions {
        n_particles: n,
        ess_threshold: 0.0,
        proposal: RsdbpfProposal::Uniform,
        seed,
    }
}

#[test]
fn simulate_matches_the_library() {
    let s = suite(RsdbpfDynamics::Polya);
    let (mut states, mut regimes, mut obs) = ([0.0; T + 1], [0u32; T + 1], [0.0; T]);
    let st = unsafe {
        rsdbpf_suite_simulate(
            s,
            7,
            3,
            states.as_mut_ptr(),
            T + 1,
            regimes.as_mut_ptr(),
            T + 1,
            obs.as_mut_ptr(),
            T,
        )
    };
    assert_eq!(st, RsdbpfStatus::Ok);
    let want = ModelSuite::eight_regime(DynamicsKind::Polya).simulate(7, 3);
    assert_eq!(states.to_vec(), want.states);
    assert_eq!(obs.to_vec(), want.observations);
    let want_m: Vec<u32> = want.regimes.iter().map(|&m| m as u32 + 1).collect();
    assert_eq!(regimes.to_vec(), want_m);
    unsafe {
        assert_eq!(rsdbpf_suite_horizon(s), T);
        assert_eq!(rsdbpf_suite_n_regimes(s), 8);
        rsdbpf_suite_free(s);
    }
}

#[test]
fn errors_set_status_and_message() {
    assert_eq!(
        unsafe {
            rsdbpf_suite_simulate(
                ptr::null(),
                0,
                0,
                ptr::null_mut(),
                0,
                ptr::null_mut(),
                0,
                ptr::null_mut(),
                0,
            )
        },
        RsdbpfStatus::NullPointer
    );
    assert!(last_error().contains("suite"));

    let su = suite(RsdbpfDynamics::Markov);
    let mut small = [0.0; 10];
    let mut m = [0u32; T + 1];
    let mut obs = [0.0; T];
    let st = unsafe {
        rsdbpf_suite_simulate(
            su,
            0,
            0,
            small.as_mut_ptr(),
            10,
            m.as_mut_ptr(),
            T + 1,
            obs.as_mut_ptr(),
            T,
        )
    };
    assert_eq!(st, RsdbpfStatus::BufferTooSmall);
    assert!(last_error().contains("states needs 51"));

    let missing = CString::new("/nonexistent/dataset.jsonl").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { rsdbpf_dataset_load(missing.as_ptr(), &mut ds) },
        RsdbpfStatus::Io
    );
    assert!(ds.is_null());
    let mut nets = ptr::null_mut();
    assert_eq!(
        unsafe { rsdbpf_nets_new(0, 0, &mut nets) },
        RsdbpfStatus::InvalidArgument
    );

    // a wrong observation count is reported, not silently filtered
    let mut est = [0.0; T];
    let o = opts(50, 1);
    let st = unsafe { rsdbpf_run_rs_pf(su, &o, obs.as_ptr(), 7, est.as_mut_ptr(), T, ptr::null_mut(), 0) };
    assert_eq!(st, RsdbpfStatus::ObservationLength);
    unsafe { rsdbpf_suite_free(su) };
}

#[test]
fn last_error_is_thread_local() {
    let mut ds = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.jsonl").unwrap();
    assert_ne!(
        unsafe { rsdbpf_dataset_load(missing.as_ptr(), &mut ds) },
        RsdbpfStatus::Ok
    );
    let other = std::thread::spawn(last_error).join().unwrap();
    assert_eq!(other, "");
    assert!(last_error().contains("x.jsonl"));
}

#[test]
fn analytic_filters_match_the_library_bitwise() {
    let s = suite(RsdbpfDynamics::Markov);
    let lib = ModelSuite::eight_regime(DynamicsKind::Markov);
    let t = lib.simulate(11, 0);
    let mut o = opts(300, 42);
    o.proposal = RsdbpfProposal::Bootstrap;
    let cfg = FilterConfig::new(300).with_proposal(RegimeProposal::Bootstrap);

    let (mut est, mut ess) = ([0.0; T], [0.0; T]);
    let st = unsafe {
        rsdbpf_run_rs_pf(
            s,
            &o,
            t.observations.as_ptr(),
            T,
            est.as_mut_ptr(),
            T,
            ess.as_mut_ptr(),
            T,
        )
    };
    assert_eq!(st, RsdbpfStatus::Ok);
    let want = run_rs_pf(&lib, &t.observations, &cfg, &mut stream(42, &[])).unwrap();
    assert_eq!(est.to_vec(), want.estimates);
    assert_eq!(ess.to_vec(), want.ess_trace);

    let st = unsafe {
        rsdbpf_run_mm_pf(
            s,
            &o,
            t.observations.as_ptr(),
            T,
            est.as_mut_ptr(),
            T,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, RsdbpfStatus::Ok);
    let want = run_mm_pf(&lib, &t.observations, &cfg, &mut stream(42, &[])).unwrap();
    assert_eq!(est.to_vec(), want.estimates);

    let mut r = 0.0;
    assert_eq!(
        unsafe { rsdbpf_rmse(est.as_ptr(), t.truth().as_ptr(), T, &mut r) },
        RsdbpfStatus::Ok
    );
    assert_eq!(r, rsdbpf::metrics::rmse(&want.estimates, t.truth()).unwrap());
    unsafe { rsdbpf_suite_free(s) };
}

#[test]
fn learned_filters_match_the_library_bitwise() {
    let s = suite(RsdbpfDynamics::Polya);
    let lib = ModelSuite::eight_regime(DynamicsKind::Polya);
    let t = lib.simulate(5, 2);
    let cfg = FilterConfig::new(100);
    let o = opts(100, 9);
    let mut est = [0.0; T];

    let mut rs = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_nets_new(3, 8, &mut rs) }, RsdbpfStatus::Ok);
    let st = unsafe {
        rsdbpf_run_rs_dbpf(
            rs,
            s,
            &o,
            t.observations.as_ptr(),
            T,
            est.as_mut_ptr(),
            T,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, RsdbpfStatus::Ok);
    let nets = NeuralRegimeSet::init(3, 8);
    let want = filter_learned(
        LearnedFilter::RsDbpf,
        &nets,
        &lib.dynamics,
        &t.observations,
        &cfg,
        &mut stream(9, &[]),
    )
    .unwrap();
    assert_eq!(est.to_vec(), want.estimates);

    let mut single = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_nets_new(4, 1, &mut single) }, RsdbpfStatus::Ok);
    let st = unsafe {
        rsdbpf_run_dbpf(
            single,
            &o,
            t.observations.as_ptr(),
            T,
            est.as_mut_ptr(),
            T,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, RsdbpfStatus::Ok);
    let nets = NeuralRegimeSet::init(4, 1);
    let want = filter_learned(
        LearnedFilter::Dbpf,
        &nets,
        &lib.dynamics,
        &t.observations,
        &cfg,
        &mut stream(9, &[]),
    )
    .unwrap();
    assert_eq!(est.to_vec(), want.estimates);

    // eight networks are not a single-model filter
    let st = unsafe {
        rsdbpf_run_dbpf(
            rs,
            &o,
            t.observations.as_ptr(),
            T,
            est.as_mut_ptr(),
            T,
            ptr::null_mut(),
            0,
        )
    };
    assert_ne!(st, RsdbpfStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe {
        rsdbpf_nets_free(rs);
        rsdbpf_nets_free(single);
        rsdbpf_suite_free(s);
    }
}

#[test]
fn params_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("nets.json").to_str().unwrap()).unwrap();
    let mut nets = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_nets_new(1, 8, &mut nets) }, RsdbpfStatus::Ok);
    let n = unsafe { rsdbpf_nets_n_params(nets) };
    assert_eq!(n, NeuralRegimeSet::init(1, 8).n_params());
    let mut p = vec![0.0; n];
    assert_eq!(
        unsafe { rsdbpf_nets_get_params(nets, p.as_mut_ptr(), n) },
        RsdbpfStatus::Ok
    );
    for (i, v) in p.iter_mut().enumerate() {
        *v = (i as f64 * 0.37).sin() * 0.1;
    }
    assert_eq!(unsafe { rsdbpf_nets_set_params(nets, p.as_ptr(), n) }, RsdbpfStatus::Ok);
    assert_ne!(
        unsafe { rsdbpf_nets_set_params(nets, p.as_ptr(), n - 1) },
        RsdbpfStatus::Ok
    );
    assert_eq!(unsafe { rsdbpf_nets_save(nets, path.as_ptr()) }, RsdbpfStatus::Ok);

    let mut back = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_nets_load(path.as_ptr(), &mut back) }, RsdbpfStatus::Ok);
    let mut q = vec![0.0; n];
    assert_eq!(
        unsafe { rsdbpf_nets_get_params(back, q.as_mut_ptr(), n) },
        RsdbpfStatus::Ok
    );
    assert_eq!(p, q);
    assert_eq!(unsafe { rsdbpf_nets_n_regimes(back) }, 8);
    unsafe {
        rsdbpf_nets_free(nets);
        rsdbpf_nets_free(back);
    }
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ds.jsonl");
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let s = suite(RsdbpfDynamics::Markov);
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { rsdbpf_dataset_generate(s, 3, 2, 1, 17, &mut ds) },
        RsdbpfStatus::Ok
    );
    assert_eq!(unsafe { rsdbpf_dataset_len(ds) }, 6);
    assert_eq!(unsafe { rsdbpf_dataset_save(ds, path.as_ptr()) }, RsdbpfStatus::Ok);

    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { rsdbpf_dataset_load(path.as_ptr(), &mut back) },
        RsdbpfStatus::Ok
    );
    let (mut id, mut split) = (0u64, RsdbpfSplit::Train);
    let (mut obs, mut truth) = ([0.0; T], [0.0; T]);
    let st =
        unsafe { rsdbpf_dataset_trajectory(back, 4, &mut id, &mut split, obs.as_mut_ptr(), T, truth.as_mut_ptr(), T) };
    assert_eq!(st, RsdbpfStatus::Ok);
    assert_eq!((id, split), (4, RsdbpfSplit::Val));
    let want = ModelSuite::eight_regime(DynamicsKind::Markov).simulate(17, 4);
    assert_eq!(obs.to_vec(), want.observations);
    assert_eq!(truth.to_vec(), want.truth());
    let st =
        unsafe { rsdbpf_dataset_trajectory(back, 6, &mut id, &mut split, obs.as_mut_ptr(), T, truth.as_mut_ptr(), T) };
    assert_eq!(st, RsdbpfStatus::InvalidArgument);

    let mut from_ds = ptr::null_mut();
    assert_eq!(unsafe { rsdbpf_dataset_suite(back, &mut from_ds) }, RsdbpfStatus::Ok);
    assert_eq!(unsafe { rsdbpf_suite_horizon(from_ds) }, T);

    std::fs::write(&file, "{\"format\":\"rsdbpf-dataset/9\"}\n").unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(
        unsafe { rsdbpf_dataset_load(path.as_ptr(), &mut bad) },
        RsdbpfStatus::Version
    );
    std::fs::write(&file, "not json\n").unwrap();
    assert_eq!(
        unsafe { rsdbpf_dataset_load(path.as_ptr(), &mut bad) },
        RsdbpfStatus::Parse
    );
    unsafe {
        rsdbpf_dataset_free(ds);
        rsdbpf_dataset_free(back);
        rsdbpf_suite_free(from_ds);
        rsdbpf_suite_free(s);
        rsdbpf_dataset_free(ptr::null_mut());
    }
}
