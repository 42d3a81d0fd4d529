//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 3`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ccnn_core::bootstrap::{
    interval_report, intervals, quantile_sorted, read_interval_csv, run_bootstrap, write_histogram_csv,
    write_interval_csv, BootstrapConfig, ChainMode, PredictionCube, ReplicateBudget,
};
use ccnn_core::data_io::{generate_synthetic, load_idx, NoiseKind, SourceKind, SyntheticSpec};
use ccnn_core::extractor::{accuracy, forward, perturb, Layer, PerturbSpec, WeightBundle};
use ccnn_core::kernel::{build_feature_map, featurize_dataset, rbf, KernelConfig};
use ccnn_core::metrics::{consistency_check, ConsistencyConfig};
use ccnn_core::patching::{PatchConfig, PatchedDataset};
use ccnn_core::spectral::{nuclear_norm, project_nuclear_ball, smoothed_nuclear_norm, smoothed_nuclear_norm_grad};
use ccnn_core::trainer::{fit, smoothness_bound, warm_vs_cold_check, Regularization, TrainerConfig};
use ccnn_core::{Dataset, Sample};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn penalized(lambda: f64, mu: f64, step_size: f64, batch_size: usize, epochs: usize) -> TrainerConfig {
    TrainerConfig {
        regularization: Regularization::Penalized { lambda, mu },
        step_size,
        batch_size,
        epochs,
        seed: 0,
        step_decay: 1.0,
        max_steps: None,
    }
}

fn warm_start_suite() -> Outcome {
    // (n, side, channels, classes, patch, stride): q = patch^2 * channels, P = positions^2
    let shapes =
        [(300, 6, 1, 3, 2, 2), (500, 6, 1, 2, 3, 3), (200, 6, 3, 3, 2, 2), (400, 4, 1, 3, 2, 1), (150, 9, 1, 2, 3, 3)];
    let mut worst: f64 = 0.0;
    for (t, &(n, side, ch, classes, size, stride)) in shapes.iter().enumerate() {
        let pc = PatchConfig::new(size, stride).unwrap();
        let data = PatchedDataset::from_dataset(&random_images(n, side, ch, classes, 100 + t as u64), &pc).unwrap();
        ensure(data.dim() <= 20 && data.patch_count() <= 9 && data.num_classes() <= 3, || "instance too large".into())?;
        let mut cfg = penalized(0.05, 0.1, 1.0, n, 4000);
        cfg.step_size = 1.0 / smoothness_bound(&data, &cfg);
        let report = warm_vs_cold_check(&data, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(report.objective_gap);
    }
    ensure(worst <= 1e-4, || format!("worst objective gap {worst:.2e}"))?;
    Ok(format!("worst objective gap {worst:.2e} over {} instances", shapes.len()))
}

fn spectral_suite() -> Outcome {
    let mut r = rng(1);
    for _ in 0..50 {
        let (rows, cols) = (1 + r.random_range(0..6), 1 + r.random_range(0..6));
        let a = gaussian_matrix(rows, cols, &mut r) * 2.0;
        let c = 0.1 + 3.0 * r.random::<f64>();
        let p = project_nuclear_ball(&a, c).unwrap();
        ensure(nuclear_norm(&p).unwrap() <= c * (1.0 + 1e-9), || "projection infeasible".into())?;
        let again = project_nuclear_ball(&p, c).unwrap();
        ensure((again - &p).abs().max() < 1e-9, || "projection not idempotent".into())?;
    }

    let h = 1e-6;
    let mut worst_fd: f64 = 0.0;
    for i in 0..150 {
        let (rows, cols) = (2 + i % 5, 2 + (i / 5) % 4);
        let a = gaussian_matrix(rows, cols, &mut r);
        let mut d = gaussian_matrix(rows, cols, &mut r);
        d /= d.norm();
        let mu = [1.0, 0.5, 0.1][i % 3];
        let analytic = smoothed_nuclear_norm_grad(&a, mu).unwrap().dot(&d);
        let plus = smoothed_nuclear_norm(&(&a + &d * h), mu).unwrap();
        let minus = smoothed_nuclear_norm(&(&a - &d * h), mu).unwrap();
        worst_fd = worst_fd.max(((plus - minus) / (2.0 * h) - analytic).abs() / analytic.abs().max(1e-3));
    }
    ensure(worst_fd <= 1e-5, || format!("gradient relative error {worst_fd:.2e}"))?;

    for mu in [1.0, 0.1, 0.01] {
        for _ in 0..30 {
            let a = gaussian_matrix(5, 3, &mut r) * 0.5;
            let gap = (nuclear_norm(&a).unwrap() - smoothed_nuclear_norm(&a, mu).unwrap()).abs();
            ensure(gap <= mu * 3.0 / 2.0 + 1e-12, || format!("smoothing gap {gap} at mu {mu}"))?;
        }
    }

    let mut worst_qp: f64 = 0.0;
    for _ in 0..20 {
        let a = gaussian_matrix(5, 5, &mut r);
        let svd = jacobi_svd(&a);
        let oracle = compose(&svd, &l1_projection_bisection(&svd.s, 1.0));
        worst_qp = worst_qp.max((project_nuclear_ball(&a, 1.0).unwrap() - oracle).norm());
    }
    ensure(worst_qp < 1e-6, || format!("projection vs QP oracle {worst_qp:.2e}"))?;
    Ok(format!("fd error {worst_fd:.1e}, qp error {worst_qp:.1e}"))
}

fn algorithm_fidelity() -> Outcome {
    let logistic_patches =
        |n, seed| vector_patches(&generate_synthetic(&logistic_spec(vec![1.0, -0.7, 0.4], seed), n).unwrap());
    let train = logistic_patches(60, 11);
    let test = logistic_patches(10, 12);
    let mut cfg = BootstrapConfig {
        replicates: 2,
        alpha: 0.05,
        chain: ChainMode::WarmChain,
        trainer: penalized(0.05, 0.1, 0.5, 60, 50),
        budget: Some(ReplicateBudget::Epochs(0)),
        seed: 13,
    };
    let run = run_bootstrap(&train, &test, &cfg).map_err(|e| e.to_string())?;
    for i in 0..test.len() {
        let base = run.base.params.predict_proba(&test.patches()[i]).unwrap();
        ensure(run.cube.slice(0, i) == base.as_slice() && run.cube.slice(1, i) == base.as_slice(), || {
            "zero-epoch replicates differ from the base fit".into()
        })?;
    }

    cfg.replicates = 8;
    cfg.budget = Some(ReplicateBudget::Epochs(3));
    cfg.trainer.batch_size = 16;
    for chain in [ChainMode::WarmChain, ChainMode::ParallelFromBase] {
        cfg.chain = chain;
        let a = run_bootstrap(&train, &test, &cfg).map_err(|e| e.to_string())?;
        let b = run_bootstrap(&train, &test, &cfg).map_err(|e| e.to_string())?;
        ensure(a.cube.to_bytes() == b.cube.to_bytes(), || format!("{chain:?} cubes differ between runs"))?;
        let (wide, narrow) = (intervals(&a.cube, 0.05).unwrap(), intervals(&a.cube, 0.95).unwrap());
        for i in 0..test.len() {
            for k in 0..2 {
                ensure(wide.lower(i, k) <= narrow.lower(i, k) && narrow.upper(i, k) <= wide.upper(i, k), || {
                    "intervals do not nest".into()
                })?;
            }
        }
    }

    let grid: Vec<f64> = (0..100).map(|v| v as f64 / 100.0).collect();
    let cube = PredictionCube::new(100, 1, 1, grid.clone()).unwrap();
    let t = intervals(&cube, 0.10).unwrap();
    let (lo, hi) = (t.lower(0, 0), t.upper(0, 0));
    ensure((lo - 0.0495).abs() < 1e-12 && (hi - 0.9405).abs() < 1e-12, || format!("grid interval [{lo}, {hi}]"))?;
    ensure(quantile_sorted(&grid, 0.05) == lo, || "quantile rule mismatch".into())?;
    let constant = PredictionCube::new(5, 1, 1, vec![0.7; 5]).unwrap();
    let c = intervals(&constant, 0.05).unwrap();
    ensure(c.lower(0, 0) == 0.7 && c.upper(0, 0) == 0.7, || "constant column interval".into())?;

    let mut onehot = [0.0; 4];
    onehot[3] = 1.0;
    let certain = PredictionCube::new(3, 1, 4, onehot.repeat(3)).unwrap();
    let ct = intervals(&certain, 0.05).unwrap();
    let rep = interval_report(&certain, &ct, &[3]).unwrap();
    ensure(rep[0].predicted_class == 3 && rep[0].widths[3] == 0.0, || "one-hot report".into())?;
    Ok("degenerate chain, determinism, nesting and quantile examples hold".into())
}

fn consistency_suite() -> Outcome {
    // Twenty whitened inputs: the softmax Hessian is bounded by half the
    // input covariance, so a step of 0.8 is safe for every n in the grid.
    let q = 20;
    let sign = |j: usize| if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    let trainer = penalized(0.01, 0.1, 0.8, usize::MAX, 200);
    let base = ConsistencyConfig {
        spec: SyntheticSpec {
            input_dim: q,
            true_coefficients: (0..q).map(|j| 0.4 * sign(j)).collect(),
            noise: NoiseKind::Logistic,
            margin_width: 0.0,
            seed: 0,
        },
        n_grid: vec![100, 400, 1600],
        mc_reps: 100,
        bootstraps: 200,
        reference_trainer: Some(trainer.with_epochs(600)),
        trainer,
        probe: (0..q).map(|j| 0.2 * sign(j)).collect(),
        reference_factor: 50,
        chain: ChainMode::ParallelFromBase,
        seed: 0,
    };
    let mut per_n = vec![Vec::new(); 3];
    for seed in 0..5 {
        let report = consistency_check(&base.with_seed(seed)).map_err(|e| e.to_string())?;
        for (g, row) in report.rows.iter().enumerate() {
            per_n[g].push(row.ks_distance);
        }
    }
    let medians: Vec<f64> = per_n
        .iter_mut()
        .map(|v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let shown = format!("median KS {:.3} / {:.3} / {:.3} at n = 100 / 400 / 1600", medians[0], medians[1], medians[2]);
    ensure(medians.windows(2).all(|w| w[1] <= w[0]), || format!("{shown}: not non-increasing"))?;
    ensure(medians[2] <= 0.15, || format!("{shown}: final above 0.15"))?;
    Ok(shown)
}

fn coverage_suite() -> Outcome {
    let q = 5;
    let spec = SyntheticSpec {
        input_dim: q,
        true_coefficients: (0..q).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        noise: NoiseKind::SeparableMargin,
        margin_width: 0.5,
        seed: 0,
    };
    let (n, probes) = (200, 100);
    let trainer = penalized(0.05, 0.1, 0.8, usize::MAX, 200);
    let reference_data = vector_patches(&generate_synthetic(&spec.with_seed(999), 50 * n).unwrap());
    let reference = fit(&reference_data, &trainer.with_epochs(2000), None).map_err(|e| e.to_string())?.params;
    // probe points follow the input distribution, margin or not
    let probe_spec = SyntheticSpec { noise: NoiseKind::Logistic, ..spec.with_seed(777) };
    let probe_set = vector_patches(&generate_synthetic(&probe_spec, probes).unwrap());

    // every probe gets its own training draw, so hits are independent
    let mut hits = 0;
    for j in 0..probes {
        let train = vector_patches(&generate_synthetic(&spec.with_seed(j as u64 + 1), n).unwrap());
        let test = probe_set.select(&[j]);
        let cfg = BootstrapConfig {
            replicates: 200,
            alpha: 0.05,
            chain: ChainMode::ParallelFromBase,
            trainer: trainer.clone(),
            budget: None,
            seed: 5000 + j as u64,
        };
        let run = run_bootstrap(&train, &test, &cfg).map_err(|e| e.to_string())?;
        let table = intervals(&run.cube, 0.05).unwrap();
        let truth = reference.predict_proba(&test.patches()[0]).unwrap()[1];
        if table.lower(0, 1) <= truth && truth <= table.upper(0, 1) {
            hits += 1;
        }
    }
    let coverage = hits as f64 / probes as f64;
    ensure(coverage >= 0.85, || format!("coverage {coverage:.2}"))?;
    Ok(format!("coverage {coverage:.2} of nominal 0.95 over {probes} probes"))
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn mnist_suite() -> Outcome {
    let dir = mnist_dir();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
        .map_err(|e| e.to_string())?;
    let test =
        load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")).map_err(|e| e.to_string())?;
    ensure(train.len() == 1000 && test.len() == 100, || "unexpected subset sizes".into())?;
    let pc = PatchConfig::new(4, 4).unwrap();
    let train = PatchedDataset::from_dataset(&train, &pc).unwrap();
    let test = PatchedDataset::from_dataset(&test, &pc).unwrap();
    let map = build_feature_map(&train, &pc, &KernelConfig::rbf(0.5, 100), 1).map_err(|e| e.to_string())?;
    let train = featurize_dataset(&map, &train).map_err(|e| e.to_string())?;
    let test = featurize_dataset(&map, &test).map_err(|e| e.to_string())?;
    let cfg = BootstrapConfig {
        replicates: 200,
        alpha: 0.05,
        chain: ChainMode::WarmChain,
        trainer: TrainerConfig { seed: 3, ..penalized(1e-4, 0.1, 0.5, 50, 200) },
        budget: Some(ReplicateBudget::Epochs(5)),
        seed: 11,
    };
    let run = run_bootstrap(&train, &test, &cfg).map_err(|e| e.to_string())?;
    let table = intervals(&run.cube, cfg.alpha).unwrap();
    let report = interval_report(&run.cube, &table, test.labels()).unwrap();

    // judge the property from the written artifacts
    let out = tempfile::tempdir().unwrap();
    write_interval_csv(&report, &table, std::fs::File::create(out.path().join("intervals.csv")).unwrap()).unwrap();
    for i in 0..test.len() {
        let f = std::fs::File::create(out.path().join(format!("sample_{i}.csv"))).unwrap();
        write_histogram_csv(&run.cube, i, f).unwrap();
    }
    let (_, rows) = read_interval_csv(std::fs::File::open(out.path().join("intervals.csv")).unwrap()).unwrap();
    let mut correct = 0;
    let mut overlapping = Vec::new();
    for i in 0..test.len() {
        let mine: Vec<_> = rows.iter().filter(|r| r.sample_index == i).collect();
        let first = mine[0];
        if first.predicted_class != first.true_label {
            continue;
        }
        correct += 1;
        let right = mine.iter().find(|r| r.class == first.true_label).unwrap();
        let clear = mine.iter().filter(|r| r.class != first.true_label).all(|r| right.lower > r.upper);
        if !clear {
            overlapping.push(i);
        }
        let hist = std::fs::read_to_string(out.path().join(format!("sample_{i}.csv"))).unwrap();
        ensure(hist.lines().count() == cfg.replicates + 1, || format!("histogram {i} row count"))?;
    }
    let acc = correct as f64 / test.len() as f64;
    let shown = format!("accuracy {acc:.2}, {} correct digits with overlapping intervals", overlapping.len());
    ensure(acc >= 0.80, || shown.clone())?;
    ensure(overlapping.is_empty(), || format!("{shown}: samples {overlapping:?}"))?;
    Ok(shown)
}

fn xor_set(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| {
            let (sx, sy) = (if i % 2 == 0 { 1.0 } else { -1.0 }, if (i / 2) % 2 == 0 { 1.0 } else { -1.0 });
            let noise = gaussian_vec(2, &mut r);
            Sample::vector(vec![sx + 0.2 * noise[0], sy + 0.2 * noise[1]], usize::from(sx * sy < 0.0))
        })
        .collect();
    Dataset::new(samples, 2, SourceKind::Synthetic).unwrap()
}

fn kernel_suite() -> Outcome {
    let mut r = rng(51);
    let points: Vec<Sample> = (0..50).map(|_| Sample::vector(gaussian_vec(4, &mut r), 0)).collect();
    let data = vector_patches(&Dataset::new(points, 1, SourceKind::Synthetic).unwrap());
    let pc = PatchConfig::new(1, 1).unwrap();
    let map = build_feature_map(&data, &pc, &KernelConfig::rbf(0.5, 50), 7).map_err(|e| e.to_string())?;
    let feats: Vec<Vec<f64>> = data.patches().iter().map(|p| map.feature(p.row(0)).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        for j in 0..50 {
            let approx: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((approx - rbf(data.patches()[i].row(0), data.patches()[j].row(0), 0.5)).abs());
        }
    }
    ensure(worst < 1e-6, || format!("Gram error {worst:.2e}"))?;

    let raw = vector_patches(&xor_set(200, 52));
    let map = build_feature_map(&raw, &pc, &KernelConfig::rbf(1.0, 40), 3).map_err(|e| e.to_string())?;
    let lifted = featurize_dataset(&map, &raw).unwrap();
    let loss = |d: &PatchedDataset| {
        let mut cfg = TrainerConfig {
            regularization: Regularization::Constrained { radius: 100.0 },
            ..penalized(0.0, 1.0, 1.0, d.len(), 3000)
        };
        cfg.step_size = 1.0 / smoothness_bound(d, &cfg);
        fit(d, &cfg, None).map(|f| f.final_objective).map_err(|e| e.to_string())
    };
    let (linear, kernel) = (loss(&raw)?, loss(&lifted)?);
    ensure(kernel < 0.1, || format!("kernel training loss {kernel:.3}"))?;
    Ok(format!("Gram error {worst:.1e}; XOR loss {linear:.3} raw vs {kernel:.3} lifted"))
}

fn extractor_suite() -> Outcome {
    let mut r = rng(81);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let stride = 1 + trial % 2;
        let (k1, b1) = (gaussian_vec(3 * 3 * 2 * 3, &mut r), gaussian_vec(3, &mut r));
        let (k2, b2) = (gaussian_vec(2 * 2 * 3 * 4, &mut r), gaussian_vec(4, &mut r));
        let layers = vec![
            Layer::Conv { kh: 3, kw: 3, in_c: 2, out_c: 3, stride, kernel: k1.clone(), bias: b1.clone() },
            Layer::Conv { kh: 2, kw: 2, in_c: 3, out_c: 4, stride: 1, kernel: k2.clone(), bias: b2.clone() },
        ];
        let bundle = WeightBundle::new((9, 9, 2), layers).unwrap();
        let x = gaussian_vec(9 * 9 * 2, &mut r);
        let (h1, s1) = naive_conv(&x, (9, 9, 2), &k1, &b1, (3, 3, 3, stride));
        let (h2, _) = naive_conv(&h1, s1, &k2, &b2, (2, 2, 4, 1));
        let lib = forward(&bundle, &Sample::new(9, 9, 2, x, 0).unwrap()).unwrap();
        worst = lib.iter().zip(&h2).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-10, || format!("forward error {worst:.2e}"))?;

    let (bundle, data) = template_task(200, 83);
    let before = accuracy(&bundle, &data).unwrap();
    let target = 1.0 / 10.0 + 0.05;
    let out = perturb(&bundle, &PerturbSpec::chance_level(0.05, 0.05, data.clone(), 5)).map_err(|e| e.to_string())?;
    let after = accuracy(&out.bundle, &data).unwrap();
    ensure(after <= target, || format!("accuracy after perturbation {after:.3}"))?;
    Ok(format!("forward error {worst:.1e}; accuracy {before:.2} -> {after:.2} at sigma {:.3}", out.sigma))
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    ("warm/cold convexity", warm_start_suite),
    ("spectral operators", spectral_suite),
    ("bootstrap algorithm fidelity", algorithm_fidelity),
    ("bootstrap consistency (KS)", consistency_suite),
    ("interval coverage", coverage_suite),
    ("MNIST subset intervals", mnist_suite),
    ("kernel features", kernel_suite),
    ("feature extractor", extractor_suite),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // failures are reported on the summary line instead
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (idx, (name, run)) in CRITERIA.iter().enumerate() {
        let number = idx + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = secs(start.elapsed());
        match result {
            Ok(detail) => println!("[PASS] {number}. {name}: {detail} ({took})"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {number}. {name}: {detail} ({took})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
