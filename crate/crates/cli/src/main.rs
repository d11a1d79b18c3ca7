mod plots;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use radarflow::data::{Dataset, DatasetConfig};
use radarflow::experiment::{
    checkpoint_uncertainty, evaluate_checkpoint, reconstruct_checkpoint, vvp_reconstructions, Experiment, ExperimentConfig, Precision,
    RunSpec,
};
use radarflow::harness::{aggregate, format_table, write_metrics, Method, MetricsRow, UncertaintyCurves};
use radarflow::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_reconstructions, ModelKind};
use radarflow::objective::ObjectiveConfig;
use radarflow::optim::AdamConfig;
use radarflow::radar::RadarRange;

#[derive(Parser)]
#[command(name = "radarflow", version, about = "Reconstruct animal velocity and density fields from simulated Doppler radar")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "RADARFLOW_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as a container directory.
    Generate(GenerateArgs),
    /// Train the state-space model on one radar range.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set of a dataset.
    Evaluate(EvaluateArgs),
    /// Run a baseline (VVP, or train and evaluate the VAE).
    Baseline(BaselineArgs),
    /// Train and evaluate every combination of methods, ranges, sizes and seeds.
    Sweep(SweepArgs),
    /// Render SVG figures from metrics CSVs and dataset containers.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Container directory; defaults to `<out-dir>/dataset`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    radars: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Cells per side.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Observation noise standard deviation in normalized units.
    #[arg(long, default_value_t = 0.001)]
    noise: f64,
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Sequences per step for the state-space model, frames per step for the VAE.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Latent dimension of the state and of the encoder output.
    #[arg(long, default_value_t = 128)]
    latent: usize,
    /// Train on the reconstruction loss alone.
    #[arg(long)]
    no_physics: bool,
    #[arg(long, default_value_t = 1.0)]
    lambda_physics: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset container directory.
    #[arg(long)]
    data: PathBuf,
    /// Radar range: a positive number or `inf`.
    #[arg(long, default_value = "2", value_parser = parse_range)]
    d: RadarRange,
    /// Use only the first N training sequences; defaults to all.
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container whose test sequences are evaluated.
    #[arg(long)]
    test_set: PathBuf,
    /// Radar range; defaults to the training range of the checkpoint.
    #[arg(long, value_parser = parse_range)]
    d: Option<RadarRange>,
    /// Report CSV; defaults to `<out-dir>/<run-id>.report.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the reconstructed test sequences to this file.
    #[arg(long)]
    reconstructions: Option<PathBuf>,
    /// Also write per-time posterior uncertainty curves to this CSV.
    #[arg(long)]
    uncertainty: Option<PathBuf>,
    /// Posterior samples per frame for the uncertainty curves.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Seed of the posterior samples.
    #[arg(long, default_value_t = 1)]
    sample_seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BaselineMethod {
    Vvp,
    Vae,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "2", value_parser = parse_range)]
    d: RadarRange,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum MethodArg {
    Ours,
    Vvp,
    Vae,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Vvp => Method::Vvp,
            MethodArg::Vae => Method::Vae,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ours,vvp,vae")]
    methods: Vec<MethodArg>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,inf", value_parser = parse_range)]
    d: Vec<RadarRange>,
    /// Training-set sizes; defaults to the full training set.
    #[arg(long, value_delimiter = ',')]
    n_train: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Reuse checkpoints of identical runs found in `<out-dir>/checkpoints`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct PlotArgs {
    #[command(subcommand)]
    figure: Figure,
}

#[derive(Subcommand)]
enum Figure {
    /// Loss and RMSE per epoch from a training metrics CSV.
    Training {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMSE against training-set size from a sweep CSV, one panel per range.
    Sweep {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior standard deviation and RMSE per time step.
    Uncertainty {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heat maps of one frame: ground truth and optionally a reconstruction.
    Fields {
        #[arg(long)]
        data: PathBuf,
        /// Dataset sequence id.
        #[arg(long)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        reconstructions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> std::result::Result<RadarRange, String> {
    RadarRange::parse(s).map_err(|e| e.to_string())
}

impl TrainingArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let train = radarflow::harness::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            patience: (self.patience > 0).then_some(self.patience),
            validation_fraction: self.validation_fraction,
            ..cfg.train.clone()
        };
        cfg.train = train.clone();
        cfg.vae_train = train;
        cfg.model.objective = if self.no_physics {
            ObjectiveConfig::reconstruction_only()
        } else {
            ObjectiveConfig { physics: true, lambda_physics: self.lambda_physics }
        };
        cfg.precision = match self.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }

    fn config(&self, ds: &Dataset) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_dataset(ds, self.latent);
        self.apply(&mut cfg);
        cfg
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_rows(rows: &[MetricsRow], path: &Path) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics(rows, file)?;
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let mut config = DatasetConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        radars: a.radars,
        noise_std: a.noise,
        master_seed: a.seed,
        ..DatasetConfig::default()
    };
    config.simulation.frames = a.frames;
    config.simulation.grid = a.grid;
    let ds = Dataset::generate(config)?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("dataset"));
    let hash = save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("{} sequences written to {} ({hash})", ds.sequences.len(), out.display());
    Ok(())
}

fn train_one(cli: &Cli, method: Method, data: &Path, d: RadarRange, n_train: Option<usize>, seed: u64, t: &TrainingArgs) -> Result<()> {
    let ds = load(data)?;
    let exp = Experiment::new(&ds, t.config(&ds))?;
    let spec = RunSpec { method, range: d, n_train: n_train.unwrap_or(ds.n_train()), seed };
    let (ckpt, rows) = exp.train(&spec)?;
    let id = spec.id();
    let ckpt_path = cli.out_dir.join(format!("{id}.ckpt"));
    create_parent(&ckpt_path)?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_rows(&rows, &cli.out_dir.join(format!("{id}.metrics.csv")))?;
    println!("{id}: kept epoch {} of {}, checkpoint {}", ckpt.info.epoch, rows.last().map_or(0, |r| r.epoch), ckpt_path.display());
    Ok(())
}

fn write_uncertainty(curves: &UncertaintyCurves, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "std_v", "std_q", "rmse_v", "rmse_q"])?;
    for t in 0..curves.std_v.len() {
        w.write_record([
            (t + 1).to_string(),
            curves.std_v[t].to_string(),
            curves.std_q[t].to_string(),
            curves.rmse_v[t].to_string(),
            curves.rmse_q[t].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load(&a.test_set)?;
    let range = a.d.unwrap_or(ckpt.info.range);
    let summary = evaluate_checkpoint(&ckpt, &ds, range)?;
    let method = match ckpt.model {
        ModelKind::Ours { .. } => Method::Ours,
        ModelKind::Vae { .. } => Method::Vae,
    };
    let row = radarflow::harness::summary_row(method, range, ckpt.info.n_train, ckpt.info.seed, ckpt.info.epoch, &summary);
    let report = a.report.clone().unwrap_or_else(|| cli.out_dir.join(format!("{}.report.csv", ckpt.info.run_id)));
    write_rows(std::slice::from_ref(&row), &report)?;
    if let Some(p) = &a.reconstructions {
        create_parent(p)?;
        save_reconstructions(&reconstruct_checkpoint(&ckpt, &ds, range)?, p)?;
    }
    if let Some(p) = &a.uncertainty {
        let curves = checkpoint_uncertainty(&ckpt, &ds, range, ds.n_test(), a.samples, a.sample_seed)?;
        write_uncertainty(&curves, p)?;
    }
    print_summary(&row);
    Ok(())
}

fn print_summary(row: &MetricsRow) {
    let q = row.rmse_q.map_or("--".to_string(), |q| format!("{q:.4}"));
    println!("{}: RMSE_v {:.4}  RMSE_q {q}", row.run_id, row.rmse_v);
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let n_train = a.n_train.unwrap_or(ds.n_train());
    let (row, recon) = match a.method {
        BaselineMethod::Vvp => {
            let exp = Experiment::new(&ds, a.training.config(&ds))?;
            let spec = RunSpec { method: Method::Vvp, range: a.d, n_train, seed: a.seed };
            (exp.run(&spec, None, false)?.row(), vvp_reconstructions(&ds, a.d)?)
        }
        BaselineMethod::Vae => {
            let exp = Experiment::new(&ds, a.training.config(&ds))?;
            let spec = RunSpec { method: Method::Vae, range: a.d, n_train, seed: a.seed };
            let (ckpt, rows) = exp.train(&spec)?;
            let ckpt_path = cli.out_dir.join(format!("{}.ckpt", spec.id()));
            create_parent(&ckpt_path)?;
            save_checkpoint(&ckpt, &ckpt_path)?;
            write_rows(&rows, &cli.out_dir.join(format!("{}.metrics.csv", spec.id())))?;
            let summary = evaluate_checkpoint(&ckpt, &ds, a.d)?;
            let row = radarflow::harness::summary_row(Method::Vae, a.d, n_train, a.seed, ckpt.info.epoch, &summary);
            (row, reconstruct_checkpoint(&ckpt, &ds, a.d)?)
        }
    };
    write_rows(std::slice::from_ref(&row), &cli.out_dir.join(format!("{}.report.csv", row.run_id)))?;
    let recon_path = cli.out_dir.join(format!("{}.recon", row.run_id));
    create_parent(&recon_path)?;
    save_reconstructions(&recon, &recon_path)?;
    print_summary(&row);
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let exp = Experiment::new(&ds, a.training.config(&ds))?;
    let sizes = if a.n_train.is_empty() { vec![ds.n_train()] } else { a.n_train.clone() };
    if let Some(n) = sizes.iter().find(|n| **n == 0 || **n > ds.n_train()) {
        bail!("training size {n} is outside 1..={}", ds.n_train());
    }
    let mut methods = a.methods.clone();
    methods.sort();
    methods.dedup();
    let ckpt_dir = cli.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut rows = Vec::new();
    for &method in &methods {
        for &d in &a.d {
            for &n_train in &sizes {
                for &seed in &a.seeds {
                    let spec = RunSpec { method: method.into(), range: d, n_train, seed };
                    let result = exp.run(&spec, Some(&ckpt_dir), a.resume)?;
                    if !result.rows.is_empty() {
                        write_rows(&result.rows, &cli.out_dir.join(format!("{}.metrics.csv", spec.id())))?;
                    }
                    print_summary(&result.row());
                    rows.push(result.row());
                }
            }
        }
    }
    write_rows(&rows, &cli.out_dir.join("sweep.csv"))?;
    let methods: Vec<Method> = methods.into_iter().map(Method::from).collect();
    let table = format_table(&aggregate(&rows), &methods, &a.d);
    fs::write(cli.out_dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Train(a) => train_one(cli, Method::Ours, &a.data, a.d, a.n_train, a.seed, &a.training),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Baseline(a) => baseline(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Plot(a) => plots::run(&cli.out_dir, &a.figure),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
