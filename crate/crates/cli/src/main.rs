use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use nngp::data::{self, RawDataset, SplitSizes, Subset};
use nngp::experiment::{self, RunConfig};
use nngp::kernel::{self, NetworkHyperparams};
use nngp::lookup::{self, cache};
use nngp::mc::{self, Sampler};
use nngp::phase;
use nngp::{gp, Evaluator, EvaluatorKind, GridSpec, Nonlinearity};

#[derive(Parser)]
#[command(name = "nngp", version, about = "Infinite-width network kernels and exact GP regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lookup-table management.
    Table {
        #[command(subcommand)]
        action: TableAction,
    },
    /// Write the angular kernel profile K^l(theta) for every layer as CSV.
    Kernel(KernelArgs),
    /// Fit the GP on one labelled file and predict another.
    Regress(RegressArgs),
    /// Mean-field diagnostics (q*, c*, chi1, xi, phase) over a hyperparameter grid.
    Phase(PhaseArgs),
    /// Validation accuracy over a (sigma_w2, sigma_b2) grid.
    Sweep(SweepArgs),
    /// Compare sampled finite-width networks with the kernel.
    Verify(VerifyArgs),
    /// Run a full experiment from a JSON config.
    Run {
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum TableAction {
    /// Populate a table and store it in the cache (or at --out).
    Build {
        #[arg(long)]
        phi: Nonlinearity,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = GridSpec::DEFAULT_N_G)]
    ng: usize,
    #[arg(long, default_value_t = GridSpec::DEFAULT_N_V)]
    nv: usize,
    #[arg(long, default_value_t = GridSpec::DEFAULT_N_C)]
    nc: usize,
    #[arg(long, default_value_t = GridSpec::DEFAULT_S_MAX)]
    smax: f64,
    /// Pre-activation range; defaults to sqrt(2 * smax).
    #[arg(long)]
    umax: Option<f64>,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        let spec = GridSpec::new(self.ng, self.nv, self.nc, self.smax);
        match self.umax {
            Some(u) => spec.with_u_max(u),
            None => spec,
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    phi: Nonlinearity,
    #[arg(long)]
    depth: usize,
    #[arg(long, allow_negative_numbers = true)]
    sw2: f64,
    #[arg(long, allow_negative_numbers = true)]
    sb2: f64,
    #[arg(long, default_value_t = kernel::DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = EvaluatorArg::Table)]
    evaluator: EvaluatorArg,
    #[command(flatten)]
    grid: GridArgs,
}

impl ModelArgs {
    fn hyperparams(&self) -> Result<NetworkHyperparams> {
        Ok(NetworkHyperparams::new(self.depth, self.sw2, self.sb2, self.phi)?.with_noise(self.noise)?)
    }

    fn evaluator(&self) -> Result<Evaluator> {
        Ok(Evaluator::build(self.phi, self.evaluator.into(), &self.grid.spec())?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    Table,
    Direct,
}

impl From<EvaluatorArg> for EvaluatorKind {
    fn from(e: EvaluatorArg) -> Self {
        match e {
            EvaluatorArg::Table => EvaluatorKind::Table,
            EvaluatorArg::Direct => EvaluatorKind::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Idx,
    Cifar,
    Csv,
}

fn load_raw(format: FormatArg, path: &Path, labels: Option<&Path>) -> Result<RawDataset> {
    let loaded = match format {
        FormatArg::Idx => {
            let labels = labels.context("--format idx needs a label file")?;
            data::load_mnist_idx(path, labels)
        }
        FormatArg::Cifar => data::load_cifar10_binary(path),
        FormatArg::Csv => data::load_csv(path),
    };
    loaded.with_context(|| format!("loading {}", path.display()))
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of evenly spaced angles in [0, pi].
    #[arg(long, default_value_t = 181)]
    angles: usize,
    #[arg(long)]
    profile_out: PathBuf,
    /// Also write closed-form ReLU columns.
    #[arg(long)]
    analytic: bool,
}

#[derive(Args)]
struct RegressArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Keep only the first n training points.
    #[arg(long)]
    n_train: Option<usize>,
    /// Keep only the first n test points.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = data::NUM_CLASSES)]
    classes: usize,
    #[arg(long)]
    pred_out: Option<PathBuf>,
    #[arg(long)]
    calib_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    bin_size: usize,
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long)]
    phi: Nonlinearity,
    #[arg(long, default_value_t = 0.1)]
    sw2_min: f64,
    #[arg(long, default_value_t = 5.0)]
    sw2_max: f64,
    #[arg(long, default_value_t = 0.0)]
    sb2_min: f64,
    #[arg(long, default_value_t = 2.0)]
    sb2_max: f64,
    #[arg(long, default_value_t = 30)]
    cells: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also bisect the critical line over the sigma_b2 grid and write it here.
    #[arg(long)]
    critical_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    phi: Nonlinearity,
    #[arg(long)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
    format: FormatArg,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_valid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    sw2_min: f64,
    #[arg(long, default_value_t = 5.0)]
    sw2_max: f64,
    #[arg(long, default_value_t = 0.0)]
    sb2_min: f64,
    #[arg(long, default_value_t = 2.0)]
    sb2_max: f64,
    #[arg(long, default_value_t = 10)]
    cells: usize,
    #[arg(long, default_value_t = kernel::DEFAULT_NOISE)]
    noise: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    phi: Nonlinearity,
    #[arg(long)]
    depth: usize,
    #[arg(long, allow_negative_numbers = true)]
    sw2: f64,
    #[arg(long, allow_negative_numbers = true)]
    sb2: f64,
    /// Hidden width, used for every layer.
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 10_000)]
    networks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random constant-norm input points.
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Marginal)]
    sampler: SamplerArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Marginal,
    Explicit,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table_build(phi: Nonlinearity, grid: &GridArgs, out: Option<PathBuf>) -> Result<()> {
    let spec = grid.spec();
    let start = Instant::now();
    let path = match out {
        Some(path) => {
            let table = lookup::populate(&spec.build()?, phi)?;
            cache::save(&table, &path)?;
            path
        }
        None => {
            cache::load_or_build(phi, &spec)?;
            cache::cache_dir().join(cache::cache_file_name(phi, &spec))
        }
    };
    println!(
        "{} table ready at {} ({:.1} s)",
        phi,
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn kernel_profile(args: &KernelArgs) -> Result<()> {
    let hp = args.model.hyperparams()?;
    let evaluator = args.model.evaluator()?;
    let thetas = kernel::degree_grid(args.angles);
    let profile = kernel::angular_profile(&thetas, &hp, &evaluator)?;
    let analytic = if args.analytic {
        if hp.phi != Nonlinearity::Relu {
            bail!("--analytic is only available for relu");
        }
        Some(kernel::analytic_relu_profile(&thetas, &hp)?)
    } else {
        None
    };
    let mut out = create(&args.profile_out)?;
    let mut header = vec!["theta".to_string()];
    header.extend((0..=hp.depth).map(|l| format!("k{l}")));
    if analytic.is_some() {
        header.extend((0..=hp.depth).map(|l| format!("analytic_k{l}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for (k, theta) in thetas.iter().enumerate() {
        let mut row = vec![theta.to_string()];
        row.extend(profile.values.iter().map(|layer| layer[k].to_string()));
        if let Some(a) = &analytic {
            row.extend(a.values.iter().map(|layer| layer[k].to_string()));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn regress(args: &RegressArgs) -> Result<()> {
    let hp = args.model.hyperparams()?;
    let train_raw = load_raw(args.format, &args.train, args.train_labels.as_deref())?;
    let test_raw = load_raw(args.format, &args.test, args.test_labels.as_deref())?;
    let mut train = Subset::from_raw(&train_raw, args.classes)?;
    let mut test = Subset::from_raw(&test_raw, args.classes)?;
    if let Some(n) = args.n_train {
        train = train.head(n);
    }
    if let Some(n) = args.n_test {
        test = test.head(n);
    }
    let evaluator = args.model.evaluator()?;
    let k = kernel::build_kernel_matrix(&train.inputs, &test.inputs, &hp, &evaluator)?;
    let pred = gp::posterior(&k, &train.targets, hp.noise)?;
    let metrics = gp::evaluate(&pred.mean, &test.targets)?;
    let bins = gp::calibration_bins(&pred, &test.targets, args.bin_size)?;
    if let Some(path) = &args.pred_out {
        experiment::write_predictions(create(path)?, &test.ids, &pred)?;
    }
    if let Some(path) = &args.calib_out {
        experiment::write_calibration(create(path)?, &bins)?;
    }
    let summary = json!({
        "model": hp.label(),
        "n_train": train.len(),
        "n_test": test.len(),
        "accuracy": metrics.accuracy,
        "mse": metrics.mse,
        "noise_used": pred.noise_used,
        "calibration_correlation": gp::calibration_correlation(&bins).ok(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn phase_cmd(args: &PhaseArgs) -> Result<()> {
    let evaluator = Evaluator::direct(args.phi);
    let sw2 = phase::linspace(args.sw2_min, args.sw2_max, args.cells);
    let sb2 = phase::linspace(args.sb2_min, args.sb2_max, args.cells);
    let cells = phase::phase_grid(&sw2, &sb2, &evaluator)?;
    let mut out = create(&args.out)?;
    writeln!(out, "sigma_w2,sigma_b2,q_star,c_star,chi1,chi_c_star,xi,phase")?;
    for d in &cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.sigma_w2,
            d.sigma_b2,
            fmt_opt(d.q_star),
            fmt_opt(d.c_star),
            d.chi1,
            fmt_opt(d.chi_c_star),
            d.xi,
            d.phase.name()
        )?;
    }
    out.flush()?;
    if let Some(path) = &args.critical_out {
        let line = phase::critical_line(&sb2, (0.05, 10.0), &evaluator)?;
        let mut out = create(path)?;
        writeln!(out, "sigma_b2,sigma_w2_critical")?;
        for p in &line {
            writeln!(out, "{},{}", p.sigma_b2, fmt_opt(p.sigma_w2))?;
        }
        out.flush()?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let raw = load_raw(args.format, &args.dataset, args.labels.as_deref())?;
    let ds = data::preprocess(
        &raw,
        data::NUM_CLASSES,
        SplitSizes::new(args.n_train, args.n_valid, 0),
        args.seed,
    )?;
    let evaluator = Evaluator::build(args.phi, EvaluatorKind::Table, &args.grid.spec())?;
    let sw2 = phase::linspace(args.sw2_min, args.sw2_max, args.cells);
    let sb2 = phase::linspace(args.sb2_min, args.sb2_max, args.cells);
    let result = phase::heatmap_sweep(
        &ds.train(),
        &ds.validation(),
        args.depth,
        args.noise,
        &sw2,
        &sb2,
        &evaluator,
    )?;
    let direct = Evaluator::direct(args.phi);
    let mut out = create(&args.out)?;
    writeln!(out, "sigma_w2,sigma_b2,accuracy,mse,chi1")?;
    for cell in &result.cells {
        let hp = NetworkHyperparams::new(1, cell.sigma_w2, cell.sigma_b2, args.phi)?;
        let chi1 = phase::diagnose(&hp, &direct)?.chi1;
        writeln!(
            out,
            "{},{},{},{},{}",
            cell.sigma_w2,
            cell.sigma_b2,
            fmt_opt(cell.accuracy),
            fmt_opt(cell.mse),
            chi1
        )?;
    }
    out.flush()?;
    if let Some(best) = result.argmax() {
        println!(
            "best cell sigma_w2={} sigma_b2={} accuracy={}",
            best.sigma_w2,
            best.sigma_b2,
            best.accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!(m
        .row_iter()
        .map(|r| r.iter().copied().collect::<Vec<f64>>())
        .collect::<Vec<_>>())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let hp = NetworkHyperparams::new(args.depth, args.sw2, args.sb2, args.phi)?;
    let points = data::random_constant_norm_points(args.points, args.dim, args.seed)?;
    let direct = Evaluator::direct(args.phi);
    let empty = points.rows(0, 0).into_owned();
    let theory = kernel::build_kernel_matrix(&points, &empty, &hp, &direct)?;
    let sampler = match args.sampler {
        SamplerArg::Marginal => Sampler::Marginal,
        SamplerArg::Explicit => Sampler::Explicit,
    };
    let sample = mc::sample_empirical_kernel(
        &points,
        &hp,
        &[args.width],
        args.networks,
        args.seed,
        sampler,
    )?;
    let estimate = |e: &mc::KernelEstimate| {
        json!({
            "mean": matrix_json(&e.mean),
            "std_error": matrix_json(&e.std_error),
            "max_abs_deviation": mc::max_abs_deviation(&e.mean, theory.train()),
        })
    };
    let report = json!({
        "model": hp.label(),
        "width": args.width,
        "networks": args.networks,
        "seed": args.seed,
        "theory": matrix_json(theory.train()),
        "output_product": estimate(&sample.output_product),
        "conditional": estimate(&sample.conditional),
        "normality": sample.normality,
    });
    let mut out = create(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    println!(
        "max |empirical - theory|: output product {:.3e}, conditional {:.3e}",
        mc::max_abs_deviation(&sample.output_product.mean, theory.train()),
        mc::max_abs_deviation(&sample.conditional.mean, theory.train())
    );
    Ok(())
}

fn run(config: &Path) -> Result<()> {
    let config = RunConfig::load(config)?;
    let outcome = experiment::run_experiment(&config)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Table {
            action: TableAction::Build { phi, grid, out },
        } => table_build(phi, &grid, out),
        Command::Kernel(args) => kernel_profile(&args),
        Command::Regress(args) => regress(&args),
        Command::Phase(args) => phase_cmd(&args),
        Command::Sweep(args) => sweep(&args),
        Command::Verify(args) => verify(&args),
        Command::Run { config } => run(&config),
    }
}
