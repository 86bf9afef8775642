use std::ffi::{CStr, CString};
use std::ptr;

use dsoba_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsoba_last_error_message()) }.to_string_lossy().into_owned()
}

fn topology(kind: DsobaTopologyKind, n: usize) -> *mut DsobaTopology {
    let spec = DsobaTopologySpec { kind, n, self_weight: 0.5, neighbor_weight: 0.25, rows: 3, cols: 3 };
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dsoba_topology_new(&spec, &mut out) }, DsobaStatus::Ok);
    out
}

fn quadratic(seed: u64, n: usize, noise: f64) -> *mut DsobaProblem {
    let spec = DsobaQuadraticSpec { n_nodes: n, dim_x: 2, dim_y: 3, conditioning: 4.0, heterogeneity: 0.5, noise };
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dsoba_problem_quadratic_new(seed, &spec, &mut out) }, DsobaStatus::Ok);
    out
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(dsoba_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn topology_round_trip() {
    let t = topology(DsobaTopologyKind::Torus, 9);
    let mut rho = -1.0;
    unsafe {
        assert_eq!(dsoba_topology_n(t), 9);
        assert_eq!(dsoba_topology_rho(t, &mut rho), DsobaStatus::Ok);
        assert!((rho - 0.4).abs() < 1e-12);
        let mut w = vec![0.0; 81];
        assert_eq!(dsoba_topology_weights(t, w.as_mut_ptr(), 81), DsobaStatus::Ok);
        let mut copy = ptr::null_mut();
        assert_eq!(dsoba_topology_from_weights(9, w.as_ptr(), &mut copy), DsobaStatus::Ok);
        let mut rho2 = 0.0;
        dsoba_topology_rho(copy, &mut rho2);
        assert_eq!(rho, rho2);
        assert_eq!(dsoba_topology_weights(t, w.as_mut_ptr(), 80), DsobaStatus::DimensionMismatch);
        dsoba_topology_free(copy);
        dsoba_topology_free(t);
    }
}

#[test]
fn error_codes_and_messages() {
    let spec = DsobaTopologySpec { kind: DsobaTopologyKind::Torus, n: 10, self_weight: 0.0, neighbor_weight: 0.0, rows: 3, cols: 3 };
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dsoba_topology_new(&spec, &mut out) }, DsobaStatus::IncompatibleSize);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { dsoba_topology_new(ptr::null(), &mut out) }, DsobaStatus::NullPointer);
    assert!(last_error().contains("spec"));

    let w = [0.9, 0.2, 0.1, 0.8];
    assert_eq!(unsafe { dsoba_topology_from_weights(2, w.as_ptr(), &mut out) }, DsobaStatus::NonStochasticWeights);

    let t = topology(DsobaTopologyKind::FullyConnected, 4);
    assert!(last_error().is_empty());
    let p = quadratic(1, 5, 0.0);
    let hyper = dsoba_hyper_default(DsobaVariant::So);
    let mut record = ptr::null_mut();
    assert_eq!(unsafe { dsoba_run(p, t, &hyper, 10, 5, 0, false, &mut record) }, DsobaStatus::ConfigMismatch);
    assert!(record.is_null());
    unsafe {
        dsoba_topology_free(t);
        dsoba_problem_free(p);
        dsoba_topology_free(ptr::null_mut());
    }
}

#[test]
fn hypergradient_through_the_boundary() {
    let p = quadratic(2, 3, 0.0);
    let (mut n, mut d, mut q) = (0, 0, 0);
    unsafe {
        assert_eq!(dsoba_problem_dims(p, &mut n, &mut d, &mut q), DsobaStatus::Ok);
        assert_eq!((n, d, q), (3, 2, 3));
        let x = [0.3, -0.2];
        let mut g = [0.0; 2];
        assert_eq!(dsoba_problem_hypergradient(p, x.as_ptr(), 2, g.as_mut_ptr()), DsobaStatus::Ok);
        assert!(g.iter().all(|v| v.is_finite()));
        let mut short = [0.0; 1];
        assert_eq!(dsoba_problem_hypergradient(p, x.as_ptr(), 1, short.as_mut_ptr()), DsobaStatus::DimensionMismatch);
        dsoba_problem_free(p);
    }
}

#[test]
fn runs_are_deterministic_and_divergence_keeps_partial_record() {
    let t = topology(DsobaTopologyKind::Ring, 4);
    let p = quadratic(3, 4, 0.2);
    let hyper = dsoba_hyper_default(DsobaVariant::Fo);
    let probes = |seed| unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(dsoba_run(p, t, &hyper, 50, 10, seed, false, &mut r), DsobaStatus::Ok);
        let out: Vec<(u64, f64)> = (0..dsoba_record_len(r))
            .map(|k| {
                let mut probe = std::mem::zeroed::<DsobaProbe>();
                assert_eq!(dsoba_record_probe(r, k, &mut probe), DsobaStatus::Ok);
                (probe.t, probe.upper_loss)
            })
            .collect();
        dsoba_record_free(r);
        out
    };
    let a = probes(5);
    assert_eq!(a.len(), 6);
    assert_eq!(a, probes(5));
    assert_ne!(a, probes(6));

    let mut wild = hyper;
    wild.alpha0 = 100.0;
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(dsoba_run(p, t, &wild, 1000, 1, 0, false, &mut r), DsobaStatus::NumericalDivergence);
        assert!(!r.is_null());
        assert!(dsoba_record_len(r) >= 1);
        let mut probe = std::mem::zeroed::<DsobaProbe>();
        assert_eq!(dsoba_record_probe(r, 10_000, &mut probe), DsobaStatus::InvalidArgument);
        dsoba_record_free(r);
        dsoba_topology_free(t);
        dsoba_problem_free(p);
    }
}

#[test]
fn transient_and_csv() {
    let ring = topology(DsobaTopologyKind::AdjustedRing, 9);
    let full = topology(DsobaTopologyKind::FullyConnected, 9);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { dsoba_problem_ridge_new(1, 9, 10, 0.5, &mut p) }, DsobaStatus::Ok);
    let mut hyper = dsoba_hyper_default(DsobaVariant::So);
    hyper.theta = 0.2;
    let mut cen_hyper = hyper;
    cen_hyper.variant = DsobaVariant::Centralized;
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let (mut dec, mut cen) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(dsoba_run(p, ring, &hyper, 200, 10, 1, false, &mut dec), DsobaStatus::Ok);
        assert_eq!(dsoba_run(p, full, &cen_hyper, 200, 10, 1, false, &mut cen), DsobaStatus::Ok);
        let mut est = DsobaTransient::default();
        assert_eq!(dsoba_transient_cutoff(cen, cen, 0.2, 5, DsobaMetric::UpperLoss, &mut est), DsobaStatus::Ok);
        assert!(est.matched);
        assert_eq!(est.cutoff_iteration, 0);
        assert_eq!(dsoba_transient_cutoff(dec, cen, 0.2, 5, DsobaMetric::UpperLoss, &mut est), DsobaStatus::Ok);
        assert!(est.cutoff_iteration <= 201);

        let path = CString::new(dir.path().join("ring.csv").to_str().unwrap()).unwrap();
        assert_eq!(dsoba_record_write_csv(dec, path.as_ptr()), DsobaStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("ring.csv")).unwrap();
        assert!(text.starts_with("t,grad_sq_norm,phi_gap,consensus_error,upper_loss,alpha\n"));
        assert_eq!(text.lines().count(), 22);
        let bad = CString::new("/nonexistent-dir/x.csv").unwrap();
        assert_eq!(dsoba_record_write_csv(dec, bad.as_ptr()), DsobaStatus::Io);

        dsoba_record_free(dec);
        dsoba_record_free(cen);
        dsoba_problem_free(p);
        dsoba_topology_free(ring);
        dsoba_topology_free(full);
    }
}
