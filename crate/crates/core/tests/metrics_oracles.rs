mod common;

use ccnn_core::bootstrap::{self, interval_report, intervals, read_interval_csv, write_interval_csv, PredictionCube};
use ccnn_core::data_io::NoiseKind;
use ccnn_core::metrics::{
    avg_interval_length, avg_log_likelihood, consistency_check, ks_distance, standard_error, ConsistencyConfig,
    EvalSummary,
};
use ccnn_core::trainer::{Regularization, TrainerConfig};
use ccnn_core::ChainMode;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn random_cube(b: usize, n: usize, d: usize, seed: u64) -> PredictionCube {
    let mut r = rng(seed);
    let values = (0..b * n)
        .flat_map(|_| {
            let raw: Vec<f64> = (0..d).map(|_| r.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(move |v| v / s)
        })
        .collect();
    PredictionCube::new(b, n, d, values).unwrap()
}

#[test]
fn log_likelihood_matches_double_loop() {
    let cube = random_cube(30, 12, 4, 91);
    let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 4).collect();
    let mut total = 0.0;
    for b in 0..30 {
        for (i, &y) in labels.iter().enumerate() {
            total += cube.values()[(b * 12 + i) * 4 + y].max(1e-12).ln();
        }
    }
    assert!((avg_log_likelihood(&cube, &labels).unwrap() - total / 30.0).abs() < 1e-10);
    assert!(avg_log_likelihood(&cube, &labels).unwrap() <= 0.0);
}

#[test]
fn interval_length_matches_csv_recompute() {
    let cube = random_cube(50, 6, 3, 92);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let table = intervals(&cube, 0.05).unwrap();
    let report = interval_report(&cube, &table, &labels).unwrap();
    let mut buf = Vec::new();
    write_interval_csv(&report, &table, &mut buf).unwrap();
    let (alpha, rows) = read_interval_csv(buf.as_slice()).unwrap();
    assert_eq!(alpha, Some(0.05));
    assert_eq!(rows.len(), 18);
    let from_csv = rows.iter().map(|r| r.upper - r.lower).sum::<f64>() / rows.len() as f64;
    assert!((avg_interval_length(&table) - from_csv).abs() < 1e-12);
}

#[test]
fn standard_error_matches_textbook_formula() {
    let mut r = rng(93);
    for _ in 0..100 {
        let n = r.random_range(2..40);
        let v = gaussian_vec(n, &mut r);
        let nf = n as f64;
        let mean = v.iter().sum::<f64>() / nf;
        let sum_sq: f64 = v.iter().map(|x| x * x).sum();
        let textbook = ((sum_sq - nf * mean * mean) / (nf * (nf - 1.0))).sqrt();
        assert!((standard_error(&v).unwrap() - textbook).abs() < 1e-12);
    }
}

#[test]
fn summary_recomputes_from_persisted_artifacts() {
    let cube = random_cube(40, 5, 3, 94);
    let labels = vec![2, 0, 1, 1, 0];
    let table = intervals(&cube, 0.1).unwrap();
    let summary = EvalSummary::single(&cube, &table, &labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cube.write(dir.path().join("cube.ccnp")).unwrap();
    let report = interval_report(&cube, &table, &labels).unwrap();
    write_interval_csv(&report, &table, std::fs::File::create(dir.path().join("iv.csv")).unwrap()).unwrap();
    std::fs::write(dir.path().join("s.json"), serde_json::to_vec(&summary).unwrap()).unwrap();

    let cube2 = PredictionCube::read(dir.path().join("cube.ccnp")).unwrap();
    let (_, rows) = read_interval_csv(std::fs::File::open(dir.path().join("iv.csv")).unwrap()).unwrap();
    let mut labels2 = vec![0; 5];
    for r in &rows {
        labels2[r.sample_index] = r.true_label;
    }
    let ll = avg_log_likelihood(&cube2, &labels2).unwrap();
    let len = rows.iter().map(|r| r.width).sum::<f64>() / rows.len() as f64;
    let stored: EvalSummary = serde_json::from_slice(&std::fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    assert!((stored.avg_log_likelihood - ll).abs() < 1e-9);
    assert!((stored.avg_interval_length - len).abs() < 1e-9);
}

/// KS distance by evaluating both CDFs at every sample point.
fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |v: &[f64], z: f64| v.iter().filter(|&&x| x <= z).count() as f64 / v.len() as f64;
    a.iter().chain(b).map(|&z| (cdf(a, z) - cdf(b, z)).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn ks_is_symmetric_bounded_and_exact(
        a in proptest::collection::vec(-5i32..5, 1..40),
        b in proptest::collection::vec(-5i32..5, 1..40),
    ) {
        // small integer support forces ties
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let d = ks_distance(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
        prop_assert!((d - brute_ks(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_nonpositive(seed in any::<u64>(), b in 1usize..5, n in 1usize..5, d in 2usize..5) {
        let cube = random_cube(b, n, d, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % d).collect();
        prop_assert!(avg_log_likelihood(&cube, &labels).unwrap() <= 0.0);
    }
}

fn small_harness(seed: u64) -> ConsistencyConfig {
    ConsistencyConfig {
        spec: logistic_spec(vec![1.0, -1.0], 0),
        n_grid: vec![40, 80],
        mc_reps: 50,
        bootstraps: 100,
        trainer: TrainerConfig {
            regularization: Regularization::Penalized { lambda: 0.05, mu: 0.1 },
            step_size: 0.5,
            batch_size: 1_000_000,
            epochs: 40,
            seed: 0,
            step_decay: 1.0,
            max_steps: None,
        },
        reference_trainer: None,
        probe: vec![0.5, 0.5],
        reference_factor: 50,
        chain: ChainMode::ParallelFromBase,
        seed,
    }
}

#[test]
fn consistency_harness_is_deterministic() {
    let a = consistency_check(&small_harness(3)).unwrap();
    let b = consistency_check(&small_harness(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![40, 80]);
    for (row, detail) in a.rows.iter().zip(&a.details) {
        assert_eq!((detail.sampling.len(), detail.bootstrap.len()), (50, 100));
        assert_eq!(row.ks_distance, ks_distance(&detail.sampling, &detail.bootstrap).unwrap());
        assert_eq!(row.seed, 3);
    }
}

#[test]
fn harness_rejects_margin_specs_with_bad_probe() {
    let mut cfg = small_harness(1);
    cfg.spec.noise = NoiseKind::SeparableMargin;
    cfg.probe = vec![1.0];
    assert_eq!(consistency_check(&cfg).unwrap_err().kind(), "invalid-config");
    let _ = bootstrap::quantile_sorted(&[0.0, 1.0], 0.5);
}
