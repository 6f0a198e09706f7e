//! Command-line harness: train, evaluate, export and desk-scale experiments.
//!
//! Exit codes: 0 success, 1 error, 2 limit reached without a feasible
//! network, 3 infeasible model.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{gaussian_blobs, load_csv, load_csv_with_classes, minmax_scale, split, synthetic_random, Dataset, SplitSpec};
use crate::datasplit::{train_datasplit, DatasplitConfig};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::localsearch::{local_search, LocalSearchConfig};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{build_exact, build_partitioned, build_robust, BuildOptions, Formulation};
use crate::network::{BdnnParams, NetworkSpec, SavedModel, ThresholdMode, WeightDomain};
use crate::robust::{robust_eval, write_accuracy_grid, Norm, UncertaintySpec};
use crate::solver::{export_mps, solve, solve_with_start, NodeSelection, SolveResult, SolverConfig, Status};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NO_INCUMBENT: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "bdnn", version, about = "Train binarized neural networks by mixed-integer programming")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write params.json, run.jsonl and the data splits.
    Train(TrainArgs),
    /// Score saved parameters on a CSV, optionally under random attacks.
    Eval(EvalArgs),
    /// Write a training model as MPS without solving it.
    Export(ExportArgs),
    /// Run a named desk-scale experiment and write plot-ready CSVs.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Ls,
    Ds,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two uniform boxes plus a noisy third with random labels.
    Random,
    /// Two Gaussian clusters.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainArg {
    Box,
    Ternary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdArg {
    Learned,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::Linf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionArg {
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulationArg {
    Exact,
    Partitioned,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    /// Test accuracy and run time against the number of training points.
    SyntheticCurve,
    /// Accuracy under attack for several defense radii.
    RobustGrid,
}

fn existing_file(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false, id = "source")]
pub struct SourceArgs {
    /// CSV file with numeric features and one label column.
    #[arg(long, value_parser = existing_file)]
    pub data: Option<PathBuf>,
    /// Generate the dataset instead of reading it.
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticKind>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Zero-based label column; defaults to the last one.
    #[arg(long)]
    pub label_column: Option<usize>,
    /// The CSV starts with a header row.
    #[arg(long)]
    pub header: bool,
    /// Number of generated samples.
    #[arg(long, default_value_t = 60)]
    pub samples: usize,
    /// Dimension of generated samples.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Distance between the generated Gaussian centers.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Min-max scale every attribute to [0, 1].
    #[arg(long)]
    pub scale: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NetArgs {
    /// Hidden layer widths, comma separated; `0` for none.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = DomainArg::Ternary)]
    pub domain: DomainArg,
    /// Learn a bias vector per layer.
    #[arg(long)]
    pub bias: bool,
    #[arg(long, value_enum, default_value_t = ThresholdArg::Learned)]
    pub threshold: ThresholdArg,
    /// Margin replacing strict inequalities.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
}

impl NetArgs {
    fn spec(&self, input_dim: usize, classes: usize) -> Result<NetworkSpec> {
        let mut widths = vec![input_dim];
        widths.extend(self.hidden.iter().copied().filter(|&w| w > 0));
        widths.push(classes);
        NetworkSpec::new(
            widths,
            match self.domain {
                DomainArg::Box => WeightDomain::BoxContinuous,
                DomainArg::Ternary => WeightDomain::Ternary,
            },
            self.bias,
            match self.threshold {
                ThresholdArg::Learned => ThresholdMode::Learned,
                ThresholdArg::Zero => ThresholdMode::FixedZero,
            },
        )
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions {
            epsilon_strict: self.epsilon,
            ..BuildOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    /// Wall-clock limit per solve in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Stop at this relative gap, in percent.
    #[arg(long, default_value_t = 0.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Cap on branch-and-bound nodes per solve.
    #[arg(long)]
    pub node_limit: Option<u64>,
    #[arg(long, value_enum, default_value_t = SelectionArg::BestBound)]
    pub node_selection: SelectionArg,
}

impl SolverArgs {
    fn config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            time_limit: self.time_limit,
            gap_tolerance: self.gap,
            threads: self.threads,
            node_limit: self.node_limit,
            node_selection: match self.node_selection {
                SelectionArg::BestBound => NodeSelection::BestBound,
                SelectionArg::DepthFirst => NodeSelection::DepthFirst,
            },
            seed,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Method::Exact)]
    pub method: Method,
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out test CSV; when given, the split only produces train and validation.
    #[arg(long, value_parser = existing_file)]
    pub test_data: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25,0.25")]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data-splitting epochs.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Data-splitting batch size.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Cap on local-search rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    pub norm: NormArg,
    /// Defense radius around every training point.
    #[arg(long, default_value_t = 0.0)]
    pub defense: f64,
    #[arg(long, default_value = "bdnn-run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Parameters written by `train`.
    #[arg(long, value_parser = existing_file)]
    pub params: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub data: PathBuf,
    #[arg(long)]
    pub label_column: Option<usize>,
    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Attack levels for random sign perturbations.
    #[arg(long, value_delimiter = ',')]
    pub attack: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defense level the model was trained with, used as the grid column label.
    #[arg(long, default_value_t = 0.0)]
    pub defense: f64,
    /// Where to write the attack accuracy grid.
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long, value_enum, default_value_t = FormulationArg::Exact)]
    pub formulation: FormulationArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    /// Number of k-means cells for the partitioned model.
    #[arg(long, default_value_t = 1)]
    pub cells: usize,
    /// Sampled batch for the partitioned model; all points when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    pub norm: NormArg,
    #[arg(long, default_value_t = 0.0)]
    pub defense: f64,
    #[arg(long, default_value = "model.mps")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: ExperimentName,
    /// Training set sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "exact,ls,ds")]
    pub methods: Vec<Method>,
    /// Number of seeds per setting.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub test_size: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defense radii for the robust grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05])]
    pub defense: Vec<f64>,
    /// Attack levels for the robust grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05])]
    pub attack: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// Branch-and-bound node cap per solve; keeps reruns reproducible.
    #[arg(long, default_value_t = 1000)]
    pub node_limit: u64,
    /// Optional wall-clock limit per solve; results then depend on machine speed.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "bdnn-experiment")]
    pub out: PathBuf,
}

/// Exit code for an error that escaped a command.
pub fn error_exit_code(err: &Error) -> u8 {
    match err {
        Error::NoIncumbent => EXIT_NO_INCUMBENT,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_ERROR,
    }
}

/// Runs one command and returns its exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Experiment(a) => cmd_experiment(&a),
    }
}

/// Line-delimited JSON log; every record is flushed as it is written.
pub struct RunLog {
    writer: BufWriter<File>,
    path: PathBuf,
    start: Instant,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, event: &str, payload: Value) -> Result<()> {
        let mut line = json!({
            "event": event,
            "elapsed": self.start.elapsed().as_secs_f64(),
            "unix_time": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
        });
        if let (Value::Object(map), Value::Object(extra)) = (&mut line, payload) {
            map.extend(extra);
        }
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    match (&args.source.data, args.source.synthetic) {
        (Some(path), _) => load_csv(path, args.label_column, args.header),
        (None, Some(SyntheticKind::Random)) => synthetic_random(args.samples, args.dim, args.data_seed),
        (None, Some(SyntheticKind::Blobs)) => gaussian_blobs(args.samples, args.dim, args.separation, args.data_seed),
        (None, None) => Err(Error::InvalidArgument("give --data or --synthetic".into())),
    }
}

fn accuracy_metrics(params: &BdnnParams, data: &Dataset) -> Result<Metrics> {
    let predictions = data
        .samples()
        .iter()
        .map(|x| params.predict(x))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&predictions, data.labels())
}

fn solve_summary(r: &SolveResult) -> Value {
    json!({
        "status": r.status,
        "objective": r.objective,
        "best_bound": r.best_bound,
        "gap": r.gap,
        "nodes": r.nodes,
        "lp_iterations": r.lp_iterations,
        "wall_time": r.wall_time,
        "events": r.events.len(),
    })
}

fn model_summary(f: &Formulation) -> Value {
    let m = f.model();
    json!({
        "variables": m.num_vars(),
        "constraints": m.num_constraints(),
        "integer_variables": m.num_integer(),
        "activation_variables": m.num_activation_vars(),
        "cones": m.cones.len(),
    })
}

fn warn_if_large(n: usize, m: usize, spec: &NetworkSpec) {
    let widest = spec.widths[1..spec.widths.len() - 1].iter().copied().max().unwrap_or(0);
    if n > 20 || m > 60 || widest > 8 {
        log::warn!(
            "n = {n}, m = {m}, widest hidden layer {widest}: beyond desk scale, exact solves may take very long"
        );
    }
}

/// Outcome of one trainer: a network, or the exit code explaining its absence.
enum Trained {
    Network(BdnnParams),
    Missing(u8),
}

/// Solves from the zero network, which every training model admits.
fn solve_from_zero(formulation: &Formulation, data: &Dataset, config: &SolverConfig) -> Result<SolveResult> {
    match formulation.encode(&BdnnParams::zeros(formulation.spec()), data)? {
        Some(x) => solve_with_start(formulation.model(), config, &x),
        None => solve(formulation.model(), config),
    }
}

fn solve_and_decode(formulation: &Formulation, data: &Dataset, config: &SolverConfig, log: &mut RunLog) -> Result<Trained> {
    log.record("model", model_summary(formulation))?;
    let result = solve_from_zero(formulation, data, config)?;
    log.record("solve", solve_summary(&result))?;
    Ok(match (result.status, &result.incumbent) {
        (Status::Optimal | Status::Feasible, Some(x)) => {
            let mccormick = formulation.mccormick_error(x);
            if mccormick > 1e-6 {
                log::warn!("linearization error {mccormick} in the incumbent");
            }
            Trained::Network(formulation.decode_params(x))
        }
        (Status::Infeasible, _) => Trained::Missing(EXIT_INFEASIBLE),
        (Status::Unbounded, _) => return Err(Error::Numerical("training model reported unbounded".into())),
        _ => Trained::Missing(EXIT_NO_INCUMBENT),
    })
}

fn train_method(
    args: &TrainArgs,
    train: &Dataset,
    val: Option<&Dataset>,
    spec: &NetworkSpec,
    log: &mut RunLog,
) -> Result<Trained> {
    let build = args.net.build_options();
    let mut solver = args.solver.config(args.seed);
    match args.method {
        Method::Exact => {
            solver.log_path = Some(args.out.join("solver.jsonl"));
            solve_and_decode(&build_exact(train, spec, &build)?, train, &solver, log)
        }
        Method::Robust => {
            solver.log_path = Some(args.out.join("solver.jsonl"));
            let options = BuildOptions {
                robust: Some(UncertaintySpec::uniform(args.norm.into(), args.defense)?),
                ..build
            };
            solve_and_decode(&build_robust(train, spec, &options)?, train, &solver, log)
        }
        Method::Ls => {
            let config = LocalSearchConfig {
                seed: args.seed,
                solver,
                build,
                max_rounds: args.rounds,
                ..LocalSearchConfig::default()
            };
            match local_search(train, spec, &config) {
                Ok(r) => {
                    for step in &r.trace {
                        log.record("round", serde_json::to_value(step)?)?;
                    }
                    log.record(
                        "local_search",
                        json!({ "objective": r.objective, "rounds": r.rounds, "redraws": r.redraws }),
                    )?;
                    Ok(Trained::Network(r.params))
                }
                Err(e @ (Error::Infeasible(_) | Error::NoIncumbent)) => {
                    log.record("failure", json!({ "error": e.to_string() }))?;
                    Ok(Trained::Missing(error_exit_code(&e)))
                }
                Err(e) => Err(e),
            }
        }
        Method::Ds => {
            let config = DatasplitConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed: args.seed,
                solver,
                build,
                kmeans: KMeansConfig {
                    seed: args.seed,
                    ..KMeansConfig::default()
                },
                log_path: None,
            };
            match train_datasplit(train, val, spec, &config) {
                Ok(r) => {
                    for rec in &r.epochs {
                        log.record("epoch", serde_json::to_value(rec)?)?;
                    }
                    log.record(
                        "datasplit",
                        json!({
                            "best_epoch": r.best_epoch,
                            "best_validation_accuracy": r.best_validation_accuracy,
                            "cells": r.partition.len(),
                        }),
                    )?;
                    Ok(Trained::Network(r.params))
                }
                Err(failure) => {
                    for rec in &failure.epochs {
                        log.record("epoch", serde_json::to_value(rec)?)?;
                    }
                    match failure.error {
                        e @ (Error::Infeasible(_) | Error::NoIncumbent) => {
                            log.record("failure", json!({ "error": e.to_string() }))?;
                            Ok(Trained::Missing(error_exit_code(&e)))
                        }
                        e => Err(e),
                    }
                }
            }
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<u8> {
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut log = RunLog::create(&args.out.join("run.jsonl"))?;
    log.record("config", json!({ "command": "train", "args": args }))?;

    let mut data = load_data(&args.data)?;
    let mut held_out = match &args.test_data {
        Some(path) => Some(load_csv_with_classes(path, args.data.label_column, args.data.header, data.classes())?),
        None => None,
    };
    if args.data.scale {
        let (scaled, scaler) = minmax_scale(&data)?;
        held_out = held_out.map(|t| scaler.transform(&t)).transpose()?;
        data = scaled;
    }
    let &[f_train, f_val, f_test] = args.split.as_slice() else {
        return Err(Error::InvalidArgument(format!(
            "--split takes three fractions, got {}",
            args.split.len()
        )));
    };
    let fractions = if held_out.is_some() && f_test > 0.0 {
        let rest = f_train + f_val;
        if rest <= 0.0 {
            return Err(Error::InvalidArgument("split leaves no training data".into()));
        }
        SplitSpec::new(f_train / rest, f_val / rest, 0.0, args.split_seed)?
    } else {
        SplitSpec::new(f_train, f_val, f_test, args.split_seed)?
    };
    let (train, val, split_test) = split(&data, &fractions)?;
    let test = held_out.or(split_test);

    let mut artifacts = serde_json::Map::new();
    for (name, part) in [("train", Some(&train)), ("val", val.as_ref()), ("test", test.as_ref())] {
        if let Some(part) = part {
            let path = args.out.join(format!("{name}.csv"));
            part.write_csv(&path)?;
            artifacts.insert(name.into(), json!(path));
        }
    }
    let spec = args.net.spec(train.dim(), train.num_classes())?;
    warn_if_large(train.dim(), train.len(), &spec);
    log.record(
        "data",
        json!({
            "train": train.len(),
            "val": val.as_ref().map(Dataset::len),
            "test": test.as_ref().map(Dataset::len),
            "dim": train.dim(),
            "classes": train.classes(),
            "norm_bound": train.norm_bound(),
            "widths": spec.widths,
        }),
    )?;

    let params = match train_method(args, &train, val.as_ref(), &spec, &mut log)? {
        Trained::Network(p) => p,
        Trained::Missing(code) => {
            log.record("end", json!({ "exit_code": code, "artifacts": artifacts }))?;
            log::error!("training produced no network (exit code {code})");
            return Ok(code);
        }
    };
    let params_path = args.out.join("params.json");
    SavedModel::from_params(&params, Some(train.classes().to_vec())).save(&params_path)?;
    artifacts.insert("params".into(), json!(params_path));

    let mut metrics = serde_json::Map::new();
    for (name, part) in [("train", Some(&train)), ("val", val.as_ref()), ("test", test.as_ref())] {
        if let Some(part) = part {
            let m = accuracy_metrics(&params, part)?;
            log.record("metrics", json!({ "split": name, "metrics": m }))?;
            metrics.insert(name.into(), serde_json::to_value(m)?);
        }
    }
    log.record(
        "end",
        json!({
            "exit_code": EXIT_OK,
            "train_loss": params.total_loss(train.samples(), train.labels())?,
            "artifacts": artifacts,
        }),
    )?;
    emit(&serde_json::to_string_pretty(&Value::Object(metrics))?)?;
    Ok(EXIT_OK)
}

/// Prints a report line; a closed pipe (`bdnn ... | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let saved = SavedModel::load(&args.params)?;
    let params = saved.to_params()?;
    let data = match &saved.classes {
        Some(classes) => load_csv_with_classes(&args.data, args.label_column, !args.no_header, classes)?,
        None => load_csv(&args.data, args.label_column, !args.no_header)?,
    };
    if data.is_empty() {
        return Err(Error::InvalidDataset("evaluation set is empty".into()));
    }
    if data.dim() != params.spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.spec.input_dim(),
            got: data.dim(),
        });
    }
    let metrics = accuracy_metrics(&params, &data)?;
    let mut report = json!({ "metrics": metrics });
    if !args.attack.is_empty() {
        let table = robust_eval(&params, &data, &args.attack, args.repetitions, args.seed)?;
        if let Some(path) = &args.grid_out {
            let grid: Vec<Vec<f64>> = table.iter().map(|a| vec![a.accuracy]).collect();
            write_accuracy_grid(path, &args.attack, &[args.defense], &grid)?;
        }
        report["attacks"] = serde_json::to_value(&table)?;
    }
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    emit(&text)?;
    Ok(EXIT_OK)
}

/// Cells of a `k`-means partition of all points, ordered by smallest member.
fn kmeans_cells(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let cfg = KMeansConfig {
        seed,
        ..KMeansConfig::default()
    };
    let mut cells = kmeans(data.samples(), k.min(data.len()), &cfg)?.clusters();
    cells.sort();
    Ok(cells)
}

fn cmd_export(args: &ExportArgs) -> Result<u8> {
    let mut data = load_data(&args.data)?;
    if args.data.scale {
        data = minmax_scale(&data)?.0;
    }
    let spec = args.net.spec(data.dim(), data.num_classes())?;
    warn_if_large(data.dim(), data.len(), &spec);
    let build = args.net.build_options();
    let formulation = match args.formulation {
        FormulationArg::Exact => build_exact(&data, &spec, &build)?,
        FormulationArg::Robust => {
            let options = BuildOptions {
                robust: Some(UncertaintySpec::uniform(args.norm.into(), args.defense)?),
                allow_cones: true,
                ..build
            };
            build_robust(&data, &spec, &options)?
        }
        FormulationArg::Partitioned => {
            if args.cells == 0 {
                return Err(Error::InvalidArgument("at least one cell is needed".into()));
            }
            let batch = match args.batch_size {
                Some(b) => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
                    let mut idx = rand::seq::index::sample(&mut rng, data.len(), b.min(data.len())).into_vec();
                    idx.sort_unstable();
                    Some(idx)
                }
                None => None,
            };
            let options = BuildOptions {
                partition: Some(kmeans_cells(&data, args.cells, args.seed)?),
                batch,
                ..build
            };
            build_partitioned(&data, &spec, &options)?
        }
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    export_mps(formulation.model(), &args.out)?;
    emit(&serde_json::to_string_pretty(&model_summary(&formulation))?)?;
    Ok(EXIT_OK)
}

/// Mean, minimum and maximum of the finite values, or NaNs when there are none.
fn summarize(values: &[f64]) -> (usize, f64, f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (0, f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (finite.len(), mean, min, max)
}

/// Runs `job` for every seed on up to `jobs` threads, keeping seed order.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, job: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, seeds.len().max(1));
    let mut out: Vec<Option<T>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let job = &job;
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                s.spawn(move || {
                    (w..seeds.len())
                        .step_by(jobs)
                        .map(|i| (i, job(seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("experiment worker panicked") {
                out[i] = Some(v);
            }
        }
    });
    out.into_iter().map(|v| v.expect("every seed ran")).collect()
}

fn experiment_solver(args: &ExperimentArgs, seed: u64) -> SolverConfig {
    SolverConfig {
        time_limit: args.time_limit,
        node_limit: Some(args.node_limit),
        // finds incumbents early, which matters under a node cap
        node_selection: NodeSelection::DepthFirst,
        seed,
        ..SolverConfig::default()
    }
}

fn experiment_spec(args: &ExperimentArgs, n: usize) -> Result<NetworkSpec> {
    let mut widths = vec![n];
    widths.extend(args.hidden.iter().copied().filter(|&w| w > 0));
    widths.push(2);
    NetworkSpec::new(widths, WeightDomain::Ternary, false, ThresholdMode::Learned)
}

/// Test accuracy and seconds for one trainer on one seed; NaN accuracy when
/// no network was found.
fn curve_run(args: &ExperimentArgs, method: Method, m: usize, seed: u64) -> Result<(f64, f64)> {
    let train = synthetic_random(m, args.dim, 2 * seed)?;
    let test = synthetic_random(args.test_size, args.dim, 2 * seed + 1)?;
    let spec = experiment_spec(args, args.dim)?;
    let solver = experiment_solver(args, seed);
    let build = BuildOptions::default();
    let start = Instant::now();
    let params = match method {
        Method::Exact | Method::Robust => {
            let f = build_exact(&train, &spec, &build)?;
            let r = solve_from_zero(&f, &train, &solver)?;
            r.incumbent.as_ref().map(|x| f.decode_params(x))
        }
        Method::Ls => {
            let cfg = LocalSearchConfig {
                seed,
                solver,
                build,
                ..LocalSearchConfig::default()
            };
            match local_search(&train, &spec, &cfg) {
                Ok(r) => Some(r.params),
                Err(Error::Infeasible(_) | Error::NoIncumbent) => None,
                Err(e) => return Err(e),
            }
        }
        Method::Ds => {
            let cfg = DatasplitConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed,
                solver,
                build,
                kmeans: KMeansConfig {
                    seed,
                    ..KMeansConfig::default()
                },
                log_path: None,
            };
            match train_datasplit(&train, None, &spec, &cfg) {
                Ok(r) => Some(r.params),
                Err(f) if matches!(f.error, Error::Infeasible(_) | Error::NoIncumbent) => None,
                Err(f) => return Err(f.error),
            }
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let accuracy = match params {
        Some(p) => accuracy_metrics(&p, &test)?.accuracy,
        None => f64::NAN,
    };
    Ok((accuracy, seconds))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn synthetic_curve(args: &ExperimentArgs, seeds: &[u64], log: &mut RunLog) -> Result<Vec<PathBuf>> {
    let mut accuracy_rows = Vec::new();
    let mut time_rows = Vec::new();
    for &method in &args.methods {
        if method == Method::Robust {
            return Err(Error::InvalidArgument("synthetic-curve compares exact, ls and ds".into()));
        }
        for &m in &args.sizes {
            if let Ok(spec) = experiment_spec(args, args.dim) {
                warn_if_large(args.dim, m, &spec);
            }
            let runs = per_seed(seeds, args.jobs, |seed| curve_run(args, method, m, seed))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let accs: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let times: Vec<f64> = runs.iter().map(|r| r.1).collect();
            log.record("curve_point", json!({ "method": method, "m": m, "accuracy": accs, "seconds": times }))?;
            let name = serde_json::to_value(method)?.as_str().unwrap_or_default().to_string();
            for (rows, values) in [(&mut accuracy_rows, &accs), (&mut time_rows, &times)] {
                let (n, mean, min, max) = summarize(values);
                rows.push(vec![
                    name.clone(),
                    m.to_string(),
                    n.to_string(),
                    mean.to_string(),
                    min.to_string(),
                    max.to_string(),
                ]);
            }
        }
    }
    let header = ["method", "m", "runs", "mean", "min", "max"];
    let accuracy = args.out.join("synthetic_curve_accuracy.csv");
    let runtime = args.out.join("synthetic_curve_runtime.csv");
    write_rows(&accuracy, &header, &accuracy_rows)?;
    write_rows(&runtime, &header, &time_rows)?;
    Ok(vec![accuracy, runtime])
}

fn robust_grid(args: &ExperimentArgs, seeds: &[u64], log: &mut RunLog) -> Result<Vec<PathBuf>> {
    let m = args.sizes.first().copied().unwrap_or(12);
    let mut grid = vec![vec![0.0; args.defense.len()]; args.attack.len()];
    for (d, &defense) in args.defense.iter().enumerate() {
        let runs = per_seed(seeds, args.jobs, |seed| -> Result<Option<Vec<f64>>> {
            let (all, _) = minmax_scale(&synthetic_random(m + args.test_size, args.dim, seed)?)?;
            let test_fraction = args.test_size as f64 / all.len() as f64;
            let (train, _, test) = split(&all, &SplitSpec::new(1.0 - test_fraction, 0.0, test_fraction, seed)?)?;
            let test = test.ok_or_else(|| Error::InvalidArgument("robust grid needs a test set".into()))?;
            let spec = experiment_spec(args, args.dim)?;
            let options = BuildOptions {
                robust: Some(UncertaintySpec::uniform(Norm::Linf, defense)?),
                ..BuildOptions::default()
            };
            let f = build_robust(&train, &spec, &options)?;
            let r = solve_from_zero(&f, &train, &experiment_solver(args, seed))?;
            let Some(x) = r.incumbent.as_ref() else {
                return Ok(None);
            };
            let table = robust_eval(&f.decode_params(x), &test, &args.attack, args.repetitions, seed)?;
            Ok(Some(table.iter().map(|a| a.accuracy).collect()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (a, row) in grid.iter_mut().enumerate() {
            let values: Vec<f64> = runs.iter().map(|r| r.as_ref().map_or(f64::NAN, |v| v[a])).collect();
            row[d] = summarize(&values).1;
        }
        log.record("defense_level", json!({ "defense": defense, "runs": runs }))?;
    }
    let path = args.out.join("robust_grid.csv");
    write_accuracy_grid(&path, &args.attack, &args.defense, &grid)?;
    Ok(vec![path])
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<u8> {
    if args.seeds == 0 {
        return Err(Error::InvalidArgument("at least one seed is needed".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut log = RunLog::create(&args.out.join("run.jsonl"))?;
    log.record("config", json!({ "command": "experiment", "args": args }))?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let files = match args.name {
        ExperimentName::SyntheticCurve => synthetic_curve(args, &seeds, &mut log)?,
        ExperimentName::RobustGrid => robust_grid(args, &seeds, &mut log)?,
    };
    log.record("end", json!({ "exit_code": EXIT_OK, "artifacts": files }))?;
    let listing: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
    emit(&listing.join("\n"))?;
    Ok(EXIT_OK)
}
