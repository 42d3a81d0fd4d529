use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ccnn_core::bootstrap::{self, BootstrapConfig};
use ccnn_core::data_io::{self, Dataset};
use ccnn_core::extractor::{self, PerturbSpec, WeightBundle};
use ccnn_core::kernel::{self, KernelConfig, KernelFeatureMap};
use ccnn_core::metrics::{self, EvalSummary};
use ccnn_core::seeding::derive_seed;
use ccnn_core::trainer::{self, TrainerConfig};
use ccnn_core::{PatchConfig, PatchedDataset};
use serde::Serialize;

use crate::config::{require_files, resolve, DataSource, ExperimentConfig, NetworkSource};
use crate::error::CliError;

/// Paths written by a command, relative to the output directory.
pub type Artifacts = Vec<PathBuf>;

pub struct Context {
    pub cfg: ExperimentConfig,
    /// Directory of the config file.
    pub base: PathBuf,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, base: PathBuf) -> Self {
        let out = resolve(&base, &cfg.output_dir);
        Context { cfg, base, out }
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    fn create(&self, rel: impl AsRef<Path>) -> Result<BufWriter<File>, CliError> {
        let path = self.out.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io("output", dir, e))?;
        }
        File::create(&path).map(BufWriter::new).map_err(|e| CliError::io("output", &path, e))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T, artifacts: &mut Artifacts) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
        text.push('\n');
        let path = self.out.join(rel);
        fs::write(&path, text).map_err(|e| CliError::io("output", &path, e))?;
        artifacts.push(rel.into());
        Ok(())
    }

    fn load_source(&self, src: &DataSource) -> Result<Dataset, CliError> {
        match src {
            DataSource::Idx { images, labels, limit } => {
                let (images, labels) = (self.path(images), self.path(labels));
                require_files("data", &[images.clone(), labels.clone()])?;
                let data = data_io::load_idx(&images, &labels).map_err(|e| CliError::invalid("data", e))?;
                truncate(data, *limit)
            }
            DataSource::Features { path, limit } => {
                let path = self.path(path);
                require_files("data", std::slice::from_ref(&path))?;
                truncate(data_io::load_features(&path).map_err(|e| CliError::invalid("data", e))?, *limit)
            }
            DataSource::Synthetic { size, spec } => {
                data_io::generate_synthetic(spec, *size).map_err(|e| CliError::invalid("data", e))
            }
        }
    }

    fn load_network(&self, src: &NetworkSource) -> Result<WeightBundle, CliError> {
        let (path, manifest) = match src {
            NetworkSource::Ccnw(p) => (self.path(p), false),
            NetworkSource::Manifest(p) => (self.path(p), true),
        };
        require_files("extract", std::slice::from_ref(&path))?;
        let loaded = if manifest { extractor::load_manifest(&path) } else { WeightBundle::read(&path) };
        loaded.map_err(|e| CliError::invalid("extract", e))
    }

    fn trainer(&self) -> Result<TrainerConfig, CliError> {
        let t = ExperimentConfig::require(&self.cfg.trainer, "trainer")?.clone();
        t.validate().map_err(|e| CliError::invalid("train", e))?;
        Ok(t)
    }
}

fn truncate(data: Dataset, limit: Option<usize>) -> Result<Dataset, CliError> {
    match limit {
        Some(n) => data.take(n).map_err(|e| CliError::invalid("data", e)),
        None => Ok(data),
    }
}

/// Training and optional test data, patched and (optionally) lifted through
/// the kernel map.
struct Prepared {
    train: PatchedDataset,
    test: Option<PatchedDataset>,
    kernel: Option<KernelFeatureMap>,
}

struct Inputs {
    train: Dataset,
    test: Option<Dataset>,
    patch: PatchConfig,
    secondary: Option<Dataset>,
}

fn load_inputs(ctx: &Context) -> Result<Inputs, CliError> {
    let data = ExperimentConfig::require(&ctx.cfg.data, "data")?;
    let p = ExperimentConfig::require(&ctx.cfg.patch, "patch")?;
    let patch = PatchConfig::new(p.size, p.stride).map_err(|e| CliError::invalid("patching", e))?;
    let mut train = ctx.load_source(&data.train)?;
    let mut test = data.test.as_ref().map(|t| ctx.load_source(t)).transpose()?;
    // a small test subset may not contain every class
    if let Some(t) = test.take() {
        let classes = train.num_classes().max(t.num_classes());
        train = train.with_num_classes(classes).map_err(|e| CliError::invalid("data", e))?;
        test = Some(t.with_num_classes(classes).map_err(|e| CliError::invalid("data", e))?);
    }
    let secondary = match &ctx.cfg.kernel {
        Some(k) => k.secondary.as_ref().map(|s| ctx.load_source(s)).transpose()?,
        None => None,
    };
    Ok(Inputs { train, test, patch, secondary })
}

fn prepare(ctx: &Context, inputs: Inputs) -> Result<Prepared, CliError> {
    let patched =
        |d: &Dataset| PatchedDataset::from_dataset(d, &inputs.patch).map_err(|e| CliError::invalid("patching", e));
    let mut train = patched(&inputs.train)?;
    let mut test = inputs.test.as_ref().map(patched).transpose()?;
    let mut map = None;
    if let Some(k) = &ctx.cfg.kernel {
        let mut kc = KernelConfig::rbf(k.gamma, k.anchors);
        if let Some(s) = inputs.secondary {
            kc = kc.with_secondary(s);
        }
        let m = kernel::build_feature_map(&train, &inputs.patch, &kc, k.seed)
            .map_err(|e| CliError::runtime("kernel", e))?;
        train = kernel::featurize_dataset(&m, &train).map_err(|e| CliError::runtime("kernel", e))?;
        test =
            test.map(|t| kernel::featurize_dataset(&m, &t)).transpose().map_err(|e| CliError::runtime("kernel", e))?;
        map = Some(m);
    }
    Ok(Prepared { train, test, kernel: map })
}

fn write_kernel(ctx: &Context, map: &Option<KernelFeatureMap>, artifacts: &mut Artifacts) -> Result<(), CliError> {
    if let Some(m) = map {
        let path = ctx.out.join("kernel.ccnk");
        m.write(&path).map_err(|e| CliError::runtime("output", e))?;
        artifacts.push("kernel.ccnk".into());
    }
    Ok(())
}

fn classify_accuracy(params: &ccnn_core::CcnnParams, data: &PatchedDataset) -> f64 {
    let hits = data
        .patches()
        .iter()
        .zip(data.labels())
        .filter(|(z, &y)| {
            let p = params.predict_proba(z).expect("shapes validated by training");
            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            best == y
        })
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct FitSummary {
    final_objective: f64,
    iterations: usize,
    train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
}

pub fn train(ctx: &Context) -> Result<Artifacts, CliError> {
    let trainer = ctx.trainer()?;
    let inputs = load_inputs(ctx)?;
    let prepared = prepare(ctx, inputs)?;
    let mut artifacts = Vec::new();
    ensure_dir(&ctx.out)?;
    write_kernel(ctx, &prepared.kernel, &mut artifacts)?;

    let fit = trainer::fit(&prepared.train, &trainer, None).map_err(|e| CliError::runtime("train", e))?;
    fit.params.write(ctx.out.join("params.ccna")).map_err(|e| CliError::runtime("output", e))?;
    artifacts.push("params.ccna".into());
    trainer::write_trace_csv(&fit.trace, ctx.create("trace.csv")?).map_err(|e| CliError::runtime("output", e))?;
    artifacts.push("trace.csv".into());
    let summary = FitSummary {
        final_objective: fit.final_objective,
        iterations: fit.iterations,
        train_accuracy: classify_accuracy(&fit.params, &prepared.train),
        test_accuracy: prepared.test.as_ref().map(|t| classify_accuracy(&fit.params, t)),
    };
    ctx.write_json("fit.json", &summary, &mut artifacts)?;
    Ok(artifacts)
}

pub fn bootstrap(ctx: &Context) -> Result<Artifacts, CliError> {
    let trainer = ctx.trainer()?;
    let section = ExperimentConfig::require(&ctx.cfg.bootstrap, "bootstrap")?.clone();
    if section.repetitions == 0 {
        return Err(CliError::usage("config", "invalid-config", "repetitions must be at least 1".into()));
    }
    let base_cfg = BootstrapConfig {
        replicates: section.replicates,
        alpha: section.alpha,
        chain: section.chain,
        trainer,
        budget: section.budget,
        seed: section.seed,
    };
    base_cfg.validate().map_err(|e| CliError::invalid("bootstrap", e))?;
    let inputs = load_inputs(ctx)?;
    if inputs.test.is_none() {
        return Err(CliError::usage("config", "invalid-config", "bootstrap needs [data.test]".into()));
    }
    let prepared = prepare(ctx, inputs)?;
    let test = prepared.test.as_ref().expect("checked above");
    let mut artifacts = Vec::new();
    ensure_dir(&ctx.out)?;
    write_kernel(ctx, &prepared.kernel, &mut artifacts)?;

    let (mut lls, mut lens) = (Vec::new(), Vec::new());
    for r in 0..section.repetitions {
        // repetition 0 uses the configured seeds as given
        let cfg = if r == 0 {
            base_cfg.clone()
        } else {
            BootstrapConfig {
                seed: derive_seed(section.seed, r as u64),
                trainer: base_cfg.trainer.with_seed(derive_seed(base_cfg.trainer.seed, r as u64)),
                ..base_cfg.clone()
            }
        };
        let dir = if section.repetitions == 1 { PathBuf::new() } else { PathBuf::from(format!("rep_{r}")) };
        let run =
            bootstrap::run_bootstrap(&prepared.train, test, &cfg).map_err(|e| CliError::runtime("bootstrap", e))?;
        let table = bootstrap::intervals(&run.cube, cfg.alpha).map_err(|e| CliError::runtime("bootstrap", e))?;
        let report = bootstrap::interval_report(&run.cube, &table, test.labels())
            .map_err(|e| CliError::runtime("bootstrap", e))?;

        ensure_dir(&ctx.out.join(&dir))?;
        let rel = |name: &str| dir.join(name);
        run.base.params.write(ctx.out.join(rel("base.ccna"))).map_err(|e| CliError::runtime("output", e))?;
        run.cube.write(ctx.out.join(rel("cube.ccnp"))).map_err(|e| CliError::runtime("output", e))?;
        bootstrap::write_interval_csv(&report, &table, ctx.create(rel("intervals.csv"))?)
            .map_err(|e| CliError::runtime("output", e))?;
        artifacts.extend([rel("base.ccna"), rel("cube.ccnp"), rel("intervals.csv")]);
        if section.histograms {
            for i in 0..test.len() {
                let hist = dir.join("histograms").join(format!("sample_{i}.csv"));
                bootstrap::write_histogram_csv(&run.cube, i, ctx.create(&hist)?)
                    .map_err(|e| CliError::runtime("output", e))?;
                artifacts.push(hist);
            }
        }
        lls.push(metrics::avg_log_likelihood(&run.cube, test.labels()).map_err(|e| CliError::runtime("metrics", e))?);
        lens.push(metrics::avg_interval_length(&table));
    }
    let summary = EvalSummary::from_runs(&lls, &lens).map_err(|e| CliError::runtime("metrics", e))?;
    ctx.write_json("summary.json", &summary, &mut artifacts)?;
    Ok(artifacts)
}

pub fn extract(ctx: &Context) -> Result<Artifacts, CliError> {
    let section = ExperimentConfig::require(&ctx.cfg.extract, "extract")?;
    let bundle = ctx.load_network(&section.network)?;
    bundle.feature_layer().map_err(|e| CliError::invalid("extract", e))?;
    let data = ctx.load_source(&section.data)?;
    if data.shape() != bundle.input_shape() {
        return Err(CliError::usage(
            "extract",
            "shape-mismatch",
            format!("data shape {:?} does not match network input {:?}", data.shape(), bundle.input_shape()),
        ));
    }
    let features = extractor::extract_features(&bundle, &data).map_err(|e| CliError::runtime("extract", e))?;
    ensure_dir(&ctx.out)?;
    let path = ctx.out.join(&section.output);
    data_io::write_features(&features, &path).map_err(|e| CliError::runtime("output", e))?;
    Ok(vec![section.output.clone().into()])
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PerturbSummary {
    sigma: f64,
    accuracy: f64,
    target_accuracy: f64,
    attempts: usize,
}

pub fn perturb(ctx: &Context) -> Result<Artifacts, CliError> {
    let section = ExperimentConfig::require(&ctx.cfg.perturb, "perturb")?;
    let bundle = ctx.load_network(&section.network)?;
    let calibration = ctx.load_source(&section.calibration)?;
    if calibration.shape() != bundle.input_shape() {
        return Err(CliError::usage(
            "perturb",
            "shape-mismatch",
            "calibration data does not match network input".into(),
        ));
    }
    let mut spec = PerturbSpec::chance_level(section.sigma, section.slack, calibration, section.seed);
    if let Some(t) = section.target_accuracy {
        spec.target_accuracy = t;
    }
    let outcome = extractor::perturb(&bundle, &spec).map_err(|e| {
        let mut err = CliError::runtime("perturb", e);
        if err.kind != "calibration-failed" {
            err.exit_code = crate::error::EXIT_USAGE;
        }
        err
    })?;
    ensure_dir(&ctx.out)?;
    let mut artifacts = Vec::new();
    outcome.bundle.write(ctx.out.join("perturbed.ccnw")).map_err(|e| CliError::runtime("output", e))?;
    artifacts.push("perturbed.ccnw".into());
    let mut log = csv::Writer::from_writer(ctx.create("perturb_log.csv")?);
    log.write_record(["attempt", "sigma", "accuracy"])
        .map_err(|e| CliError::io("output", Path::new("perturb_log.csv"), e))?;
    for (i, a) in outcome.attempts.iter().enumerate() {
        log.write_record([i.to_string(), a.sigma.to_string(), a.accuracy.to_string()])
            .map_err(|e| CliError::io("output", Path::new("perturb_log.csv"), e))?;
    }
    log.flush().map_err(|e| CliError::io("output", Path::new("perturb_log.csv"), e))?;
    artifacts.push("perturb_log.csv".into());
    let summary = PerturbSummary {
        sigma: outcome.sigma,
        accuracy: outcome.accuracy,
        target_accuracy: spec.target_accuracy,
        attempts: outcome.attempts.len(),
    };
    ctx.write_json("perturb.json", &summary, &mut artifacts)?;
    Ok(artifacts)
}

pub fn consistency(ctx: &Context) -> Result<Artifacts, CliError> {
    let section = ExperimentConfig::require(&ctx.cfg.consistency, "consistency")?;
    section.harness.validate().map_err(|e| CliError::invalid("consistency", e))?;
    let seeds = if section.seeds.is_empty() { vec![section.harness.seed] } else { section.seeds.clone() };
    let mut rows = Vec::new();
    for seed in seeds {
        let report = metrics::consistency_check(&section.harness.with_seed(seed))
            .map_err(|e| CliError::runtime("consistency", e))?;
        rows.extend(report.rows);
    }
    ensure_dir(&ctx.out)?;
    metrics::write_consistency_csv(&rows, ctx.create("ks.csv")?).map_err(|e| CliError::runtime("output", e))?;
    Ok(vec!["ks.csv".into()])
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io("output", dir, e))
}
