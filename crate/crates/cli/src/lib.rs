//! The `dtgp` command line: toy data generation, training, evaluation,
//! benchmark grids, plot data and timing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dtgp::ad::Tensor;
use dtgp::data::{
    gen_toy_step, load_csv, make_split_with_fraction, write_csv, write_results, Dataset, NormStats, ResultRow,
    SplitPlan, TargetColumn, DEFAULT_TOY_NOISE, DEFAULT_TOY_POINTS, TEST_FRACTION,
};
use dtgp::flows::FlowSpec;
use dtgp::train::{eval_noise, evaluate, fit, time_iterations, write_metrics, Evaluation};
use dtgp::{Checkpoint, ModelConfig, PreparedSplit, TrainConfig};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dtgp::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "dtgp", version, about = "Deep transformed Gaussian processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the step-function toy dataset as CSV.
    GenToy(GenToyArgs),
    /// Train one model on one split.
    Train(TrainArgs),
    /// Score a checkpoint on a test split.
    Eval(EvalArgs),
    /// Train every (layers, seed) cell of a grid and write result rows.
    Benchmark(BenchmarkArgs),
    /// Predictive mean and ±2 std bands on a 1-D grid.
    PlotData(PlotDataArgs),
    /// CPU time of a fixed number of training iterations.
    Time(TimeArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = DEFAULT_TOY_POINTS)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_TOY_NOISE, allow_negative_numbers = true)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column as a header name or zero-based index; defaults to the last column.
    #[arg(long)]
    pub target: Option<TargetColumn>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        Ok(load_csv(&self.data, &self.target.clone().unwrap_or_default())?)
    }

    fn name(&self) -> String {
        self.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2, allow_negative_numbers = true)]
    pub layers: usize,
    /// `identity`, `arcsinh[:K]` or `steptanh[:J[:K]]`, optionally with `+id` or `+bayes`.
    #[arg(long, default_value = "arcsinh")]
    pub flow: FlowSpec,
    /// Inducing points per layer.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    /// Output width of every hidden layer.
    #[arg(long, default_value_t = 1)]
    pub width: usize,
}

impl ModelArgs {
    fn config(&self, layers: usize) -> Result<ModelConfig> {
        if layers == 0 {
            return Err(CliError::Invalid("--layers must be at least 1".into()));
        }
        let mut c = ModelConfig::new(layers, self.flow, self.m);
        for w in c.widths.iter_mut().take(layers - 1) {
            *w = self.width;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 200)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 80_000)]
    pub iters: usize,
    /// Iterations between metrics rows.
    #[arg(long, default_value_t = 1000)]
    pub log_every: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let c = TrainConfig {
            iterations: self.iters,
            batch_size: self.batch,
            learning_rate: self.lr,
            seed,
            log_every: self.log_every,
            ..TrainConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seeds the split, the initialization and the minibatch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TEST_FRACTION, allow_negative_numbers = true)]
    pub test_frac: f64,
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    /// JSON-lines training curve.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to the split stored in the checkpoint.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = TEST_FRACTION, allow_negative_numbers = true)]
    pub test_frac: f64,
    /// Defaults to the model's test sample count.
    #[arg(long)]
    pub s_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated layer counts.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub layers_list: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Number of split seeds, `0..seeds`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value = "results.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 200)]
    pub grid_n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TimeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    pub batch: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split_seed: u64,
    samples: usize,
    nll: f64,
    rmse: f64,
}

#[derive(Debug, Serialize)]
struct TimeReport {
    model_tag: String,
    flow: String,
    iterations: usize,
    cpu_s: f64,
    per_iteration_s: f64,
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) && f > 0.0 {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("--test-frac must lie in (0, 1), got {f}")))
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn gen_toy(a: &GenToyArgs) -> Result<()> {
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Invalid(format!(
            "--noise must be a finite non-negative number, got {}",
            a.noise
        )));
    }
    let data = gen_toy_step(a.n, a.noise, a.seed)?;
    write_csv(&data, &a.out)?;
    info!("wrote {} points to {}", data.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    check_fraction(a.test_frac)?;
    let model_config = a.model.config(a.model.layers)?;
    let config = a.optim.config(a.seed)?;
    let data = a.data.load()?;
    let plan = make_split_with_fraction(data.len(), a.seed, a.test_frac)?;
    let split = PreparedSplit::new(&data, &plan);
    info!(
        "training {} with {} on {} rows",
        model_config.tag(),
        a.model.flow,
        split.n_train()
    );
    let out = fit(&model_config, &config, &split)?;
    if let Some(path) = &a.metrics {
        write_metrics(&out.metrics, BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = &a.out_checkpoint {
        Checkpoint::new(out.model, Some(split.norm), Some(plan)).save(path)?;
    }
    print_json(out.metrics.last().expect("fit records at least one row"))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = a.data.load()?;
    if data.dim() != ck.model.input_dim {
        return Err(CliError::Invalid(format!(
            "checkpoint expects {} inputs, data has {}",
            ck.model.input_dim,
            data.dim()
        )));
    }
    let plan = match (a.split_seed, &ck.split) {
        (None, Some(plan)) => plan.clone(),
        (seed, _) => {
            check_fraction(a.test_frac)?;
            make_split_with_fraction(data.len(), seed.unwrap_or(0), a.test_frac)?
        }
    };
    if plan.train_idx.iter().chain(&plan.test_idx).any(|&i| i >= data.len()) {
        return Err(CliError::Invalid("stored split does not match the data file".into()));
    }
    let samples = a.s_test.unwrap_or(ck.model.config.test_samples);
    if samples == 0 {
        return Err(CliError::Invalid("--s-test must be positive".into()));
    }
    let norm = ck
        .norm
        .clone()
        .unwrap_or_else(|| NormStats::fit(&data, &plan.train_idx));
    let test = data.select(&plan.test_idx);
    let Evaluation { nll, rmse } = evaluate(
        &ck.model,
        &norm.standardize_x(&test.x),
        &test.y,
        &norm,
        samples,
        &eval_noise(plan.seed),
    )?;
    print_json(&EvalReport {
        split_seed: plan.seed,
        samples,
        nll,
        rmse,
    })
}

fn benchmark_cell(a: &BenchmarkArgs, data: &Dataset, layers: usize, seed: u64) -> Result<ResultRow> {
    let model_config = a.model.config(layers)?;
    let config = a.optim.config(seed)?;
    let plan: SplitPlan = make_split_with_fraction(data.len(), seed, TEST_FRACTION)?;
    let split = PreparedSplit::new(data, &plan);
    let out = fit(&model_config, &config, &split)?;
    let last = out.metrics.last().expect("fit records at least one row");
    info!(
        "{} seed {seed}: nll {:.4} rmse {:.4}",
        model_config.tag(),
        last.test_nll,
        last.test_rmse
    );
    Ok(ResultRow {
        dataset: a.data.name(),
        split_seed: seed,
        model_tag: model_config.tag(),
        flow: a.model.flow.to_string(),
        layers,
        m_inducing: a.model.m,
        iterations: a.optim.iters,
        nll: last.test_nll,
        rmse: last.test_rmse,
        elapsed_s: last.elapsed_seconds,
    })
}

fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    if a.layers_list.is_empty() || a.seeds == 0 {
        return Err(CliError::Invalid("--layers-list and --seeds must be nonempty".into()));
    }
    for &l in &a.layers_list {
        a.model.config(l)?;
    }
    a.optim.config(0)?;
    let data = a.data.load()?;
    let cells: Vec<(usize, u64)> = a
        .layers_list
        .iter()
        .flat_map(|&l| (0..a.seeds).map(move |s| (l, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(l, s)| benchmark_cell(a, &data, l, s))
        .collect::<Result<Vec<_>>>()?;
    let summary = write_results(&rows, &a.out)?;
    info!(
        "wrote {} rows to {} and {}",
        rows.len(),
        a.out.display(),
        summary.display()
    );
    Ok(())
}

fn plot_data(a: &PlotDataArgs) -> Result<()> {
    if a.grid_n < 2 || !(a.grid_min < a.grid_max) {
        return Err(CliError::Invalid(
            "need --grid-n ≥ 2 and --grid-min < --grid-max".into(),
        ));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.model.input_dim != 1 {
        return Err(CliError::Invalid(format!(
            "plot data needs a 1-D model, got {} inputs",
            ck.model.input_dim
        )));
    }
    let norm = ck.norm.clone().unwrap_or(NormStats {
        mean_x: vec![0.0],
        std_x: vec![1.0],
        mean_y: 0.0,
        std_y: 1.0,
    });
    let step = (a.grid_max - a.grid_min) / (a.grid_n - 1) as f64;
    let grid: Vec<f64> = (0..a.grid_n).map(|i| a.grid_min + step * i as f64).collect();
    let seed = ck.split.as_ref().map_or(0, |p| p.seed);
    let mix = ck.model.predict(
        &norm.standardize_x(&Tensor::column(grid.clone())),
        ck.model.config.test_samples,
        &eval_noise(seed),
    )?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    writeln!(out, "x mean lower upper")?;
    for ((x, m), v) in grid.iter().zip(mix.mean()).zip(mix.variance()) {
        let (m, sd) = (norm.unstandardize_y(m), v.sqrt() * norm.std_y);
        writeln!(out, "{x} {m} {} {}", m - 2.0 * sd, m + 2.0 * sd)?;
    }
    out.flush()?;
    Ok(())
}

fn time(a: &TimeArgs) -> Result<()> {
    let model_config = a.model.config(a.model.layers)?;
    let config = TrainConfig {
        batch_size: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = a.data.load()?;
    let split = PreparedSplit::new(&data, &make_split_with_fraction(data.len(), a.seed, TEST_FRACTION)?);
    let cpu_s = time_iterations(&model_config, &config, &split, a.iters)?;
    print_json(&TimeReport {
        model_tag: model_config.tag(),
        flow: a.model.flow.to_string(),
        iterations: a.iters,
        cpu_s,
        per_iteration_s: cpu_s / a.iters.max(1) as f64,
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Benchmark(a) => benchmark(a),
        Command::PlotData(a) => plot_data(a),
        Command::Time(a) => time(a),
    }
}

/// Parses `argv` and runs it, returning the process exit code: 0 on
/// success, 2 on a usage error and 1 on any other failure.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
