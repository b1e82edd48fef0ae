//! End-to-end runs: load data, prepare the evaluator, build the kernel, solve, score, and
//! write a JSON report plus a prediction CSV.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, RawDataset, SplitSizes, Subset};
use crate::error::{Error, Result};
use crate::expectation::{Evaluator, EvaluatorKind};
use crate::gp::{self, Metrics, PosteriorPrediction};
use crate::kernel::{build_kernel_matrix, NetworkHyperparams};
use crate::lookup::GridSpec;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { path: PathBuf },
    Csv { path: PathBuf },
}

impl DatasetSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSource::Idx { images, labels } => vec![images, labels],
            DatasetSource::Cifar { path } | DatasetSource::Csv { path } => vec![path],
        }
    }

    pub fn load(&self) -> Result<RawDataset> {
        match self {
            DatasetSource::Idx { images, labels } => data::load_mnist_idx(images, labels),
            DatasetSource::Cifar { path } => data::load_cifar10_binary(path),
            DatasetSource::Csv { path } => data::load_csv(path),
        }
    }

    /// Resolves relative paths against `base`.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Cifar { path } | DatasetSource::Csv { path } => fix(path),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Stage timings go to their own file so the report stays reproducible byte for byte.
    #[serde(default)]
    pub timings: Option<PathBuf>,
}

fn default_classes() -> usize {
    data::NUM_CLASSES
}

fn default_bin() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: SplitSizes,
    /// Use only the first `n` points of the shuffled training split.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub hyperparams: NetworkHyperparams,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    #[serde(default = "default_bin")]
    pub calibration_bin: usize,
    #[serde(default)]
    pub outputs: OutputPaths,
}

impl RunConfig {
    /// Parses a JSON config; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.dataset.rebase(base);
        for p in [
            &mut config.outputs.report,
            &mut config.outputs.predictions,
            &mut config.outputs.calibration,
            &mut config.outputs.timings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.grid.build()?;
        for p in self.dataset.paths() {
            if !p.exists() {
                return Err(Error::Parameter(format!("{} does not exist", p.display())));
            }
        }
        if self.split.train == 0 || self.split.test == 0 {
            return Err(Error::Parameter("train and test splits must be non-empty".into()));
        }
        if self.train_subset == Some(0) {
            return Err(Error::Parameter("train_subset >= 1 violated".into()));
        }
        if self.calibration_bin == 0 {
            return Err(Error::Parameter("calibration_bin >= 1 violated".into()));
        }
        if self.classes < 2 {
            return Err(Error::Parameter("classes >= 2 violated".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub load: f64,
    pub evaluator: f64,
    pub kernel: f64,
    pub posterior: f64,
    pub evaluate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub model: String,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub mse: f64,
    pub noise_used: f64,
    pub clamped_variances: usize,
    /// Pearson correlation of binned predicted variance against realized MSE; absent when
    /// there are fewer than two bins or a bin column is constant.
    pub calibration_correlation: Option<f64>,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Everything produced by a run, for callers that want more than the report.
pub struct RunOutcome {
    pub report: Report,
    pub test: Subset,
    pub prediction: PosteriorPrediction,
    pub calibration: Vec<gp::CalibrationBin>,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed().as_secs_f64();
    out
}

/// Loads and preprocesses the configured dataset.
pub fn prepare_dataset(config: &RunConfig) -> Result<Dataset> {
    let raw = config.dataset.load()?;
    data::preprocess(&raw, config.classes, config.split, config.seed)
}

/// Fits on the (optionally truncated) training split and predicts the test split.
pub fn run_on_dataset(
    config: &RunConfig,
    dataset: &Dataset,
    evaluator: &Evaluator,
) -> Result<RunOutcome> {
    let mut timings = StageTimings::default();
    let mut train = dataset.train();
    if let Some(n) = config.train_subset {
        train = train.head(n);
    }
    let test = dataset.test();
    let hp = &config.hyperparams;
    let k = timed(&mut timings.kernel, || {
        build_kernel_matrix(&train.inputs, &test.inputs, hp, evaluator)?
            .with_ids(train.ids.clone(), test.ids.clone())
    })
    .map_err(Error::at_stage("kernel"))?;
    let prediction = timed(&mut timings.posterior, || gp::posterior(&k, &train.targets, hp.noise))
        .map_err(Error::at_stage("posterior"))?;
    let (metrics, calibration): (Metrics, _) = timed(&mut timings.evaluate, || {
        Ok((
            gp::evaluate(&prediction.mean, &test.targets)?,
            gp::calibration_bins(&prediction, &test.targets, config.calibration_bin)?,
        ))
    })
    .map_err(Error::at_stage("evaluate"))?;
    let calibration_correlation = gp::calibration_correlation(&calibration).ok();
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        model: hp.label(),
        n_train: train.len(),
        n_test: test.len(),
        accuracy: metrics.accuracy,
        mse: metrics.mse,
        noise_used: prediction.noise_used,
        clamped_variances: prediction.clamped,
        calibration_correlation,
        timings,
    };
    Ok(RunOutcome {
        report,
        test,
        prediction,
        calibration,
    })
}

/// Full pipeline from a config, writing whichever outputs are configured.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let mut load_time = 0.0;
    let mut evaluator_time = 0.0;
    let dataset = timed(&mut load_time, || prepare_dataset(config)).map_err(Error::at_stage("load"))?;
    let evaluator = timed(&mut evaluator_time, || {
        Evaluator::build(config.hyperparams.phi, config.evaluator, &config.grid)
    })
    .map_err(Error::at_stage("evaluator"))?;
    let mut outcome = run_on_dataset(config, &dataset, &evaluator)?;
    outcome.report.timings.load = load_time;
    outcome.report.timings.evaluator = evaluator_time;
    log::info!("stage timings: {:?}", outcome.report.timings);

    let out = &config.outputs;
    let write = || -> Result<()> {
        if let Some(path) = &out.report {
            write_json(path, &outcome.report)?;
        }
        if let Some(path) = &out.timings {
            write_json(path, &outcome.report.timings)?;
        }
        if let Some(path) = &out.predictions {
            write_predictions(create(path)?, &outcome.test.ids, &outcome.prediction)?;
        }
        if let Some(path) = &out.calibration {
            write_calibration(create(path)?, &outcome.calibration)?;
        }
        Ok(())
    };
    write().map_err(Error::at_stage("write"))?;
    Ok(outcome)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    Ok(())
}

/// Columns: `id`, `mean_0..mean_{d-1}`, `variance`.
pub fn write_predictions<W: Write>(out: W, ids: &[usize], pred: &PosteriorPrediction) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((0..pred.mean.ncols()).map(|j| format!("mean_{j}")));
    header.push("variance".into());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(pred.mean.row(i).iter().map(|v| v.to_string()));
        row.push(pred.variance[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `predicted`, `realized`.
pub fn write_calibration<W: Write>(out: W, bins: &[gp::CalibrationBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["predicted", "realized"])?;
    for b in bins {
        w.write_record([b.predicted.to_string(), b.realized.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
