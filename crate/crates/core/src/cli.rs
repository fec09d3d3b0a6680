//! Command-line front end: synthetic data generation, training, sweeps over
//! `(N, m)` and benchmark solves. Every command writes into
//! `<out>/<command>/<config-hash>/` and leaves a `manifest.json` that is
//! enough to rerun it.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_instance, estimate_stability, performance, reports_to_csv, InstanceAnalysis};
use crate::benchmark::{solve, solve_all, LiftedSolution, OptConfig, Variant};
use crate::data::{build_forecast_targets, gen_synthetic_splits, make_plan, read_columns, ColumnTransform, TimeSeriesDataset};
use crate::error::Error;
use crate::linalg::Vector;
use crate::rnn::{Activation, CellSpec, HiddenState};
use crate::training::{config_hash, full_batch_objective, train, OptimizerKind, TrainConfig, TrainLog, TrainMode};

pub const ENV_RUNS_DIR: &str = "TBPTT_RUNS_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(Error),
    #[error(transparent)]
    Other(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Other(_) => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::OutOfRange { .. }
            | Error::Data { .. }
            | Error::NonNumeric { .. } => CliError::Usage(e.to_string()),
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NoConvergence { .. } => {
                CliError::Numeric(e)
            }
            other => CliError::Other(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tbptt", version, about = "Train recurrent networks with truncated backpropagation through time and measure the effect of the burn-in phase")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = ENV_RUNS_DIR, default_value = "runs")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the noisy two-pole synthetic system and write train/val/test CSVs.
    Synth(SynthArgs),
    /// Train one network with truncated backpropagation through time.
    Train(TrainArgs),
    /// Train over the cross product of window lengths and burn-in phases.
    Sweep(SweepArgs),
    /// Solve the full-sequence benchmark problems and report regret.
    Benchmark(BenchmarkArgs),
    /// Repeat a previous run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Training length.
    #[arg(long = "T", default_value_t = 100)]
    pub t_len: usize,
    /// Validation length, taken after the training part.
    #[arg(long = "val", default_value_t = 0)]
    pub t_val: usize,
    /// Test length, taken after the validation part.
    #[arg(long = "test", default_value_t = 0)]
    pub t_test: usize,
    /// Standard deviation of the additive output noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Where the data comes from. Without `--data` the synthetic system is
/// simulated in memory.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Training CSV (headed). Columns are min-max normalized to [-1, 1].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test CSV, normalized with the training statistics.
    #[arg(long = "test-data")]
    pub test_data: Option<PathBuf>,
    /// Use only the first this many rows of the data file.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Keep the last this many rows of the data file as the test slice.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Input columns.
    #[arg(long, value_delimiter = ',', default_value = "u")]
    pub inputs: Vec<String>,
    /// Target columns.
    #[arg(long, value_delimiter = ',', default_value = "y")]
    pub targets: Vec<String>,
    /// Forecast the next F values of `--column` from its current value
    /// instead of mapping inputs to targets.
    #[arg(long)]
    pub forecast: Option<usize>,
    /// Series used with `--forecast`.
    #[arg(long, default_value = "y")]
    pub column: String,
    /// Synthetic training length.
    #[arg(long = "T", default_value_t = 100)]
    pub t_len: usize,
    /// Synthetic test length.
    #[arg(long = "T-test", default_value_t = 0)]
    pub t_test: usize,
    /// Synthetic output noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Seed of the synthetic data.
    #[arg(long = "data-seed", default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellArg {
    Linear,
    Elman,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationArg {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    /// Zero initial state for every segment, shuffled batches.
    Zero,
    /// Segments in order, each started from its predecessor's state.
    Stateful,
    /// One segment spanning the whole training sequence.
    Bptt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Tbptt,
    Coupled,
    Unconstrained,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tbptt => Variant::Tbptt,
            VariantArg::Coupled => Variant::Coupled,
            VariantArg::Unconstrained => Variant::Unconstrained,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "linear")]
    pub cell: CellArg,
    /// Hidden dimension.
    #[arg(long, default_value_t = 1)]
    pub hidden: usize,
    /// Activation of the Elman cell.
    #[arg(long, value_enum, default_value = "tanh")]
    pub activation: ActivationArg,
}

impl ModelArgs {
    fn spec(&self, d_x: usize, d_y: usize) -> CellSpec {
        match self.cell {
            CellArg::Linear => CellSpec::linear(d_x, self.hidden, d_y),
            CellArg::Lstm => CellSpec::lstm(d_x, self.hidden, d_y),
            CellArg::Elman => CellSpec::elman(
                d_x,
                self.hidden,
                d_y,
                match self.activation {
                    ActivationArg::Tanh => Activation::Tanh,
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Identity => Activation::Identity,
                },
            ),
        }
    }
}

/// Optimizer and schedule settings shared by `train` and `sweep`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Offset between consecutive segment starts.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Segments per mini-batch (default: min(16, number of segments)).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    pub opt: OptArg,
    /// Step size.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bound on the spectral norm of the recurrent matrix, enforced by
    /// projection after every step.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum, default_value = "zero")]
    pub mode: ModeArg,
    /// Stop when the objective has not improved for 20 epochs.
    #[arg(long)]
    pub early_stop: bool,
    /// Initial-state pairs used for the stability estimate.
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Window length (ignored with `--mode bptt`).
    #[arg(long = "N", default_value_t = 21)]
    pub window: usize,
    /// Burn-in phase: outputs excluded from the loss at the start of each segment.
    #[arg(long = "m", default_value_t = 0)]
    pub burn_in: usize,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Window lengths, comma separated.
    #[arg(long = "N", value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
    /// Burn-in phases, comma separated.
    #[arg(long = "m", value_delimiter = ',', required = true)]
    pub burn_ins: Vec<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Cells trained concurrently (default: logical cores).
    #[arg(long)]
    #[serde(skip)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Window length.
    #[arg(long = "N", default_value_t = 21)]
    pub window: usize,
    /// Burn-in phases, comma separated.
    #[arg(long = "m", value_delimiter = ',', default_value = "0")]
    pub burn_ins: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Problems to solve, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "tbptt,coupled,unconstrained")]
    pub variants: Vec<VariantArg>,
    /// Random starts per problem.
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    /// Iteration budget of the projected-gradient phase per start.
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    /// Spectral-norm bound on the recurrent matrix; 0 disables it.
    #[arg(long, default_value_t = 0.999)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial-state pairs used for the stability estimate.
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
}

/// Written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    /// Arguments that reproduce the run, without the output root.
    pub args: Vec<String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Result of a command that produced its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub output_dir: PathBuf,
    /// Some results are flagged (failed sweep cells, unconverged solves).
    pub flagged: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.flagged {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(outcome) => {
            println!("{}", outcome.output_dir.display());
            if outcome.flagged {
                eprintln!("some results are flagged; see the report");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs an already parsed command line.
pub fn run(cli: Cli) -> CliResult<Outcome> {
    let Cli { out, command } = cli;
    match command {
        Command::Synth(a) => cmd_synth(&out, &a),
        Command::Train(mut a) => {
            a.data = a.data.resolved();
            cmd_train(&out, &a)
        }
        Command::Sweep(mut a) => {
            a.data = a.data.resolved();
            cmd_sweep(&out, &a)
        }
        Command::Benchmark(mut a) => {
            a.data = a.data.resolved();
            cmd_benchmark(&out, &a)
        }
        Command::Rerun(a) => {
            let manifest = RunManifest::load(&a.manifest)?;
            let root = manifest
                .output_dir
                .parent()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .unwrap_or(out);
            let mut args = vec!["tbptt".to_string(), "--out".into(), root.display().to_string()];
            args.extend(manifest.args);
            let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
            if matches!(cli.command, Command::Rerun(_)) {
                return Err(CliError::Usage("a manifest cannot point to another rerun".into()));
            }
            run(cli)
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Output directory and manifest bookkeeping for one command.
struct RunDir {
    manifest: RunManifest,
}

impl RunDir {
    fn create<C: Serialize>(root: &Path, command: &str, config: &C, seed: u64, inputs: Vec<PathBuf>, args: Vec<String>) -> CliResult<Self> {
        let hash = config_hash(config);
        let dir = root.join(command).join(&hash);
        fs::create_dir_all(&dir)?;
        Ok(RunDir {
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: hash,
                seed,
                inputs,
                output_dir: dir,
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix_s: unix_now(),
                finished_unix_s: 0,
                args,
                config: serde_json::to_value(config)?,
            },
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.manifest.output_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn finish(mut self, flagged: bool) -> CliResult<Outcome> {
        self.manifest.finished_unix_s = unix_now();
        self.write(MANIFEST_FILE, &serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(Outcome {
            output_dir: self.manifest.output_dir,
            flagged,
        })
    }
}

fn push_opt<T: ToString>(args: &mut Vec<String>, flag: &str, value: &Option<T>) {
    if let Some(v) = value {
        args.push(flag.into());
        args.push(v.to_string());
    }
}

fn push<T: ToString>(args: &mut Vec<String>, flag: &str, value: T) {
    args.push(flag.into());
    args.push(value.to_string());
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn value_name<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

impl DataArgs {
    fn to_args(&self, args: &mut Vec<String>) {
        push_opt(args, "--data", &self.data.as_ref().map(|p| p.display().to_string()));
        push_opt(args, "--test-data", &self.test_data.as_ref().map(|p| p.display().to_string()));
        push_opt(args, "--rows", &self.rows);
        push(args, "--holdout", self.holdout);
        push(args, "--inputs", self.inputs.join(","));
        push(args, "--targets", self.targets.join(","));
        push_opt(args, "--forecast", &self.forecast);
        push(args, "--column", &self.column);
        push(args, "--T", self.t_len);
        push(args, "--T-test", self.t_test);
        push(args, "--noise", self.noise);
        push(args, "--data-seed", self.data_seed);
    }

    /// Copy with data paths made absolute, so manifests work from any
    /// directory.
    fn resolved(&self) -> Self {
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()));
        DataArgs {
            data: abs(&self.data),
            test_data: abs(&self.test_data),
            ..self.clone()
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.data.iter().chain(&self.test_data).cloned().collect()
    }

    /// Training data and optional test slice, both in the training
    /// normalization.
    fn load(&self) -> CliResult<(TimeSeriesDataset, Option<TimeSeriesDataset>)> {
        let Some(path) = &self.data else {
            let splits = gen_synthetic_splits(self.data_seed, self.t_len, 0, self.t_test, self.noise)?;
            return Ok((splits.train, splits.test));
        };
        let mut full = self.load_raw(path)?;
        if let Some(rows) = self.rows {
            full = full.slice(0..rows.min(full.len()))?;
        }
        let (train_raw, holdout) = if self.holdout > 0 {
            if self.holdout >= full.len() {
                return Err(CliError::Usage(format!(
                    "holdout of {} rows leaves no training data ({} rows)",
                    self.holdout,
                    full.len()
                )));
            }
            let cut = full.len() - self.holdout;
            (full.slice(0..cut)?, Some(full.slice(cut..full.len())?))
        } else {
            (full, None)
        };
        let train = train_raw.normalized();
        let test_raw = match &self.test_data {
            Some(p) => Some(self.load_raw(p)?),
            None => holdout,
        };
        let test = test_raw.map(|t| t.with_transforms(train.input_transforms.clone(), train.target_transforms.clone()));
        Ok((train, test))
    }

    fn load_raw(&self, path: &Path) -> CliResult<TimeSeriesDataset> {
        if let Some(horizon) = self.forecast {
            let series = read_columns(path, &[self.column.as_str()])?.swap_remove(0);
            let mut ds = build_forecast_targets(&series, horizon)?;
            ds.input_transforms = vec![ColumnTransform::identity(self.column.clone())];
            return Ok(ds);
        }
        let names: Vec<&str> = self.inputs.iter().chain(&self.targets).map(String::as_str).collect();
        let cols = read_columns(path, &names)?;
        let n_in = self.inputs.len();
        let rows = |r: std::ops::Range<usize>| -> Vec<Vector> {
            (0..cols[0].len())
                .map(|t| Vector::new(cols[r.clone()].iter().map(|c| c[t]).collect()))
                .collect()
        };
        let mut ds = TimeSeriesDataset::new(
            path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
            rows(0..n_in),
            rows(n_in..names.len()),
        )?;
        ds.input_transforms = self.inputs.iter().map(|c| ColumnTransform::identity(c.clone())).collect();
        ds.target_transforms = self.targets.iter().map(|c| ColumnTransform::identity(c.clone())).collect();
        Ok(ds)
    }
}

impl ModelArgs {
    fn to_args(&self, args: &mut Vec<String>) {
        push(args, "--cell", value_name(&self.cell));
        push(args, "--hidden", self.hidden);
        push(args, "--activation", value_name(&self.activation));
    }
}

impl FitArgs {
    fn to_args(&self, args: &mut Vec<String>) {
        push(args, "--stride", self.stride);
        push_opt(args, "--batch", &self.batch);
        push(args, "--opt", value_name(&self.opt));
        push(args, "--lr", self.lr);
        push(args, "--epochs", self.epochs);
        push(args, "--seed", self.seed);
        push_opt(args, "--rho", &self.rho);
        push(args, "--mode", value_name(&self.mode));
        push(args, "--pairs", self.pairs);
        if self.early_stop {
            args.push("--early-stop".into());
        }
    }

    /// Training configuration for one `(N, m)` cell. With `bptt` the window
    /// is the full length so that the configuration (and its hash) does not
    /// depend on the ignored `--N`.
    fn config(&self, spec: CellSpec, t_len: usize, window: usize, burn_in: usize) -> CliResult<TrainConfig> {
        let mode = match self.mode {
            ModeArg::Zero => TrainMode::ZeroInit,
            ModeArg::Stateful => TrainMode::Stateful,
            ModeArg::Bptt => TrainMode::FullBptt,
        };
        let (window, stride) = match mode {
            TrainMode::FullBptt => (t_len, 1),
            _ => (window, self.stride),
        };
        if window == 0 || burn_in >= window {
            return Err(CliError::Usage(format!(
                "burn-in m = {burn_in} must satisfy m <= N - 1 (N = {window})"
            )));
        }
        let segments = make_plan(t_len, window, stride)?.count();
        let optimizer = match self.opt {
            OptArg::Sgd => OptimizerKind::sgd(self.lr),
            OptArg::Adam => OptimizerKind::adam(self.lr),
        };
        let config = TrainConfig {
            cell: spec,
            window,
            burn_in,
            stride,
            batch_size: self.batch.unwrap_or(16.min(segments)),
            optimizer,
            epochs: self.epochs,
            seed: self.seed,
            spectral_bound: self.rho,
            mode,
            early_stop: self.early_stop,
        };
        config.plan(t_len)?;
        Ok(config)
    }
}

/// One row of the train and sweep reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    #[serde(rename = "N")]
    pub window: usize,
    pub m: usize,
    pub status: String,
    /// Mean masked segment loss (the training objective).
    pub objective: Option<f64>,
    /// Full-sequence MSE on the training data from a zero state.
    pub train_mse: Option<f64>,
    /// Full-sequence MSE on the test slice from a zero state.
    pub test_mse: Option<f64>,
    /// Full-sequence MSE on the training data after the first m steps.
    pub performance: Option<f64>,
    pub lambda: Option<f64>,
    pub stability_passed: Option<bool>,
    pub wall_time_s: f64,
}

impl CellReport {
    fn failed(window: usize, m: usize, status: String, wall_time_s: f64) -> Self {
        CellReport {
            window,
            m,
            status,
            objective: None,
            train_mse: None,
            test_mse: None,
            performance: None,
            lambda: None,
            stability_passed: None,
            wall_time_s,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn write_csv_rows<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Trains one cell and evaluates it.
fn fit_cell(
    train_ds: &TimeSeriesDataset,
    test_ds: Option<&TimeSeriesDataset>,
    config: &TrainConfig,
    pairs: usize,
) -> crate::Result<(TrainLog, CellReport)> {
    let started = Instant::now();
    let log = train(train_ds, config)?;
    let plan = config.plan(train_ds.len())?;
    let zero = HiddenState::zeros(config.cell.state_dim());
    let params = &log.params;
    let stability = estimate_stability(params, train_ds, pairs, config.seed)?;
    let report = CellReport {
        window: plan.window,
        m: config.burn_in,
        status: "ok".into(),
        objective: Some(full_batch_objective(params, train_ds, &plan, config.burn_in)?),
        train_mse: Some(performance(params, &zero, train_ds, 0)?),
        test_mse: test_ds.map(|t| performance(params, &zero, t, 0)).transpose()?,
        performance: Some(performance(params, &zero, train_ds, config.burn_in)?),
        lambda: Some(stability.lambda),
        stability_passed: Some(stability.passed),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((log, report))
}

pub fn cmd_synth(root: &Path, a: &SynthArgs) -> CliResult<Outcome> {
    let mut args = vec!["synth".to_string()];
    push(&mut args, "--T", a.t_len);
    push(&mut args, "--val", a.t_val);
    push(&mut args, "--test", a.t_test);
    push(&mut args, "--noise", a.noise);
    push(&mut args, "--seed", a.seed);
    let dir = RunDir::create(root, "synth", a, a.seed, Vec::new(), args)?;
    let splits = gen_synthetic_splits(a.seed, a.t_len, a.t_val, a.t_test, a.noise)?;
    splits.train.write_csv(&dir.path("train.csv"))?;
    if let Some(v) = &splits.validation {
        v.write_csv(&dir.path("val.csv"))?;
    }
    if let Some(t) = &splits.test {
        t.write_csv(&dir.path("test.csv"))?;
    }
    #[derive(Serialize)]
    struct Generator<'a> {
        seed: u64,
        t_train: usize,
        t_val: usize,
        t_test: usize,
        system: &'a crate::data::SyntheticSystem,
        input_transforms: &'a [ColumnTransform],
        target_transforms: &'a [ColumnTransform],
    }
    let generator = Generator {
        seed: a.seed,
        t_train: a.t_len,
        t_val: a.t_val,
        t_test: a.t_test,
        system: &splits.system,
        input_transforms: &splits.train.input_transforms,
        target_transforms: &splits.train.target_transforms,
    };
    dir.write("generator.json", &serde_json::to_string_pretty(&generator)?)?;
    dir.finish(false)
}

pub fn cmd_train(root: &Path, a: &TrainArgs) -> CliResult<Outcome> {
    let (train_ds, test_ds) = a.data.load()?;
    let spec = a.model.spec(train_ds.d_x(), train_ds.d_y());
    let config = a.fit.config(spec, train_ds.len(), a.window, a.burn_in)?;
    let mut args = vec!["train".to_string()];
    a.data.to_args(&mut args);
    a.model.to_args(&mut args);
    push(&mut args, "--N", a.window);
    push(&mut args, "--m", a.burn_in);
    a.fit.to_args(&mut args);
    #[derive(Serialize)]
    struct Key<'a> {
        data: &'a DataArgs,
        train: &'a TrainConfig,
        pairs: usize,
    }
    let key = Key {
        data: &a.data,
        train: &config,
        pairs: a.fit.pairs,
    };
    let dir = RunDir::create(root, "train", &key, config.seed, a.data.inputs(), args)?;
    let (log, report) = fit_cell(&train_ds, test_ds.as_ref(), &config, a.fit.pairs)?;
    dir.write("params.json", &log.params.to_json()?)?;
    dir.write("log.jsonl", &log.to_jsonl()?)?;
    dir.write("report.csv", &write_csv_rows(&[report])?)?;
    dir.finish(false)
}

pub fn cmd_sweep(root: &Path, a: &SweepArgs) -> CliResult<Outcome> {
    let (train_ds, test_ds) = a.data.load()?;
    let spec = a.model.spec(train_ds.d_x(), train_ds.d_y());
    let mut args = vec!["sweep".to_string()];
    a.data.to_args(&mut args);
    a.model.to_args(&mut args);
    push(&mut args, "--N", join(&a.windows));
    push(&mut args, "--m", join(&a.burn_ins));
    a.fit.to_args(&mut args);
    let dir = RunDir::create(root, "sweep", a, a.fit.seed, a.data.inputs(), args)?;

    let cells: Vec<(usize, usize)> = a
        .windows
        .iter()
        .flat_map(|&n| a.burn_ins.iter().map(move |&m| (n, m)))
        .collect();
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let cell_root = dir.path("cells");
    let results: Vec<CellReport> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(n, m)| {
                let started = Instant::now();
                let config = match a.fit.config(spec, train_ds.len(), n, m) {
                    Ok(c) => c,
                    Err(e) => return CellReport::failed(n, m, format!("invalid: {e}"), 0.0),
                };
                let fitted = fit_cell(&train_ds, test_ds.as_ref(), &config, a.fit.pairs).and_then(|(log, report)| {
                    let cell_dir = cell_root.join(format!("N{n}_m{m}"));
                    fs::create_dir_all(&cell_dir)?;
                    fs::write(cell_dir.join("params.json"), log.params.to_json()?)?;
                    fs::write(cell_dir.join("log.jsonl"), log.to_jsonl()?)?;
                    Ok(report)
                });
                fitted.unwrap_or_else(|e| {
                    CellReport::failed(n, m, format!("failed: {e}"), started.elapsed().as_secs_f64())
                })
            })
            .collect()
    });
    dir.write("report.csv", &write_csv_rows(&results)?)?;
    let flagged = results.iter().any(|r| !r.is_ok());
    dir.finish(flagged)
}

/// Summary row of a single solved problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub variant: String,
    pub m: usize,
    pub objective: f64,
    pub converged: bool,
    pub bounded: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub restart: usize,
}

impl SolutionRow {
    fn new(s: &LiftedSolution) -> Self {
        SolutionRow {
            variant: s.variant.name().into(),
            m: s.burn_in,
            objective: s.objective,
            converged: s.converged,
            bounded: s.bounded,
            grad_norm: s.grad_norm,
            iterations: s.iterations,
            restart: s.restart,
        }
    }
}

/// One point of an `e_j` curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnpikeRow {
    pub m: usize,
    pub pair: String,
    pub j: usize,
    pub e: f64,
}

fn turnpike_rows(m: usize, analysis: &InstanceAnalysis) -> Vec<TurnpikeRow> {
    [
        ("tbptt_vs_coupled", &analysis.star_vs_bench),
        ("tbptt_vs_unconstrained", &analysis.star_vs_inf),
        ("coupled_vs_unconstrained", &analysis.bench_vs_inf),
    ]
    .into_iter()
    .flat_map(|(pair, rep)| {
        rep.e.iter().enumerate().map(move |(k, e)| TurnpikeRow {
            m,
            pair: pair.into(),
            j: m + 1 + k,
            e: *e,
        })
    })
    .collect()
}

pub fn cmd_benchmark(root: &Path, a: &BenchmarkArgs) -> CliResult<Outcome> {
    let (ds, _) = a.data.load()?;
    let spec = a.model.spec(ds.d_x(), ds.d_y());
    let plan = make_plan(ds.len(), a.window, a.stride)?;
    if let Some(&m) = a.burn_ins.iter().find(|&&m| m >= a.window) {
        return Err(CliError::Usage(format!(
            "burn-in m = {m} must satisfy m <= N - 1 (N = {})",
            a.window
        )));
    }
    let mut variants: Vec<Variant> = a.variants.iter().map(|v| (*v).into()).collect();
    variants.sort_by_key(|v| Variant::ALL.iter().position(|w| w == v));
    variants.dedup();
    let cfg = OptConfig {
        restarts: a.restarts,
        max_iters: a.max_iters,
        spectral_bound: (a.rho > 0.0).then_some(a.rho),
        seed: a.seed,
        ..OptConfig::default()
    };
    let mut args = vec!["benchmark".to_string()];
    a.data.to_args(&mut args);
    a.model.to_args(&mut args);
    push(&mut args, "--N", a.window);
    push(&mut args, "--m", join(&a.burn_ins));
    push(&mut args, "--stride", a.stride);
    push(&mut args, "--variants", variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","));
    push(&mut args, "--restarts", a.restarts);
    push(&mut args, "--max-iters", a.max_iters);
    push(&mut args, "--rho", a.rho);
    push(&mut args, "--seed", a.seed);
    push(&mut args, "--pairs", a.pairs);
    let dir = RunDir::create(root, "benchmark", a, a.seed, a.data.inputs(), args)?;
    fs::create_dir_all(dir.path("solutions"))?;

    let full = variants.len() == Variant::ALL.len();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut turnpike = Vec::new();
    for &m in &a.burn_ins {
        let solutions = if full {
            let solved = solve_all(&ds, &plan, m, &spec, &cfg)?;
            let analysis = analyze_instance(&solved, &ds, &plan, m, a.pairs, a.seed)?;
            turnpike.extend(turnpike_rows(m, &analysis));
            reports.push(analysis.regret);
            vec![solved.tbptt, solved.coupled, solved.unconstrained]
        } else {
            variants
                .iter()
                .map(|&v| solve(v, &ds, &plan, m, &spec, &cfg, &[]))
                .collect::<crate::Result<Vec<_>>>()?
        };
        for s in &solutions {
            dir.write(&format!("solutions/{}_m{m}.json", s.variant.name()), &s.to_json()?)?;
            rows.push(SolutionRow::new(s));
        }
    }
    dir.write("solutions.csv", &write_csv_rows(&rows)?)?;
    if full {
        dir.write("report.csv", &reports_to_csv(&reports)?)?;
        dir.write("turnpike.csv", &write_csv_rows(&turnpike)?)?;
    }
    let flagged = rows.iter().any(|r| !r.converged || !r.bounded);
    dir.finish(flagged)
}
