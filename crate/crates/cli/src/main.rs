//! `netcart` command-line front end. Reports go out as JSON, data as CSV.
//! Failures print `{"error": kind, "message": ...}` on stderr and exit 1.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use netcart::covmodel::{simulate_trace, DelayTrace, MatrixSpec, ModelParams, SimulationConfig, SlotSelector};
use netcart::estimation::{training_phase, TrainingConfig};
use netcart::harness::{
    export_delay_map, read_rows, run_experiment, sweep_s, write_rows, ExperimentConfig, Policy, PredictionRow,
    Predictor,
};
use netcart::baseline::{run_network_kriging, KrigingConfig};
use netcart::kkf::{run_filter, FilterState};
use netcart::selection::{greedy_select, Constraint, GreedyOptions, SelectionProblem};
use netcart::topology::{random_network, Network};
use netcart::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "netcart", version, about = "Track and predict network path delays from partial measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random topology with shortest-path routing.
    GenTopology(GenTopologyArgs),
    /// Draw a delay trace from the model.
    Simulate(SimulateArgs),
    /// Estimate model parameters from the measured entries of a trace.
    Train(TrainArgs),
    /// Run a predictor over a trace using the trace's own measured flags.
    Track(TrackArgs),
    /// Choose which paths to measure in the next slot.
    Select(SelectArgs),
    /// Train, then predict the rest of the trace under a selection policy.
    Evaluate(EvaluateArgs),
    /// Evaluate once per value of S.
    Sweep(SweepArgs),
    /// Turn a prediction CSV into paths x slots delay maps.
    ExportMap(ExportMapArgs),
}

#[derive(Args)]
struct GenTopologyArgs {
    #[arg(long, default_value_t = 9)]
    end_nodes: usize,
    #[arg(long, default_value_t = 12)]
    routers: usize,
    #[arg(long, default_value_t = 40)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorKind {
    All,
    Random,
    None,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which paths the trace marks as measured.
    #[arg(long, value_enum, default_value_t = SelectorKind::All)]
    selector: SelectorKind,
    /// Paths per slot for `--selector random`.
    #[arg(long, default_value_t = 10)]
    s: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long = "t-l", default_value_t = 1000)]
    t_l: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long, default_value_t = 1e-3)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    damping_b: f64,
    /// Where to write the estimated parameters.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, value_enum, default_value_t = PredictorArg::Kkf)]
    predictor: PredictorArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Kkf,
    NetworkKriging,
}

impl From<PredictorArg> for Predictor {
    fn from(p: PredictorArg) -> Self {
        match p {
            PredictorArg::Kkf => Predictor::Kkf,
            PredictorArg::NetworkKriging => Predictor::NetworkKriging,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyArg {
    Random,
    Greedy,
    NodeBudget,
    Matroid,
    Fixed,
}

#[derive(Args)]
struct PolicyOpts {
    #[arg(long, value_enum, default_value_t = PolicyArg::Random)]
    policy: PolicyArg,
    /// Paths measured per slot.
    #[arg(long, default_value_t = 10)]
    s: usize,
    /// End nodes for `--policy node-budget`.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    /// Paths per end node for `--policy matroid`.
    #[arg(long, default_value_t = 1)]
    cap: usize,
    /// Comma-separated path ids for `--policy fixed`.
    #[arg(long, value_delimiter = ',')]
    paths: Vec<usize>,
    /// Lazy greedy evaluation.
    #[arg(long)]
    lazy: bool,
}

impl PolicyOpts {
    fn policy(&self) -> Policy {
        match self.policy {
            PolicyArg::Random => Policy::Random,
            PolicyArg::Greedy => Policy::Greedy,
            PolicyArg::NodeBudget => Policy::NodeBudget { nodes: self.nodes },
            PolicyArg::Matroid => Policy::Matroid { cap: self.cap },
            PolicyArg::Fixed => Policy::Fixed {
                paths: self.paths.clone(),
            },
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    topology: PathBuf,
    /// Model parameters; Φ is built from the filter state they imply.
    #[arg(long, required_unless_present = "phi")]
    params: Option<PathBuf>,
    /// Run the filter over this trace first and select for the slot after it.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// A JSON matrix used as Φ directly.
    #[arg(long, conflicts_with_all = ["params", "trace"])]
    phi: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Known parameters; training is skipped when given.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorArg::Kkf)]
    predictor: PredictorArg,
    #[command(flatten)]
    policy: PolicyOpts,
    #[arg(long = "t-l", default_value_t = 1000)]
    t_l: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long)]
    train_paths: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    damping_b: f64,
    #[arg(long)]
    retrain_every: Option<usize>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<(Network, DelayTrace, ExperimentConfig)> {
        let network = Network::load(&self.topology)?;
        let trace = DelayTrace::load(&self.trace)?;
        let known_params = match &self.params {
            Some(path) => Some(ModelParams::load(path, &network.gramian())?),
            None => None,
        };
        let config = ExperimentConfig {
            predictor: self.predictor.into(),
            policy: self.policy.policy(),
            s: self.policy.s,
            t_l: self.t_l,
            burn_in: self.burn_in,
            train_paths: self.train_paths,
            seed: self.seed,
            sigma2: self.sigma2,
            damping_b: self.damping_b,
            known_params,
            retrain_every: self.retrain_every,
            lazy: self.policy.lazy,
            ..ExperimentConfig::default()
        };
        Ok((network, trace, config))
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the per-slot prediction CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Drop the per-slot error and scatter arrays from the report.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Comma-separated S values.
    #[arg(long, value_delimiter = ',', required = true)]
    s_values: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMapArgs {
    /// Prediction CSV from `track` or `evaluate`.
    #[arg(long)]
    predictions: PathBuf,
    /// Keep only paths never measured in the window.
    #[arg(long)]
    unmeasured_only: bool,
    /// Output directory; receives `true.csv` and `predicted.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenTopology(a) => gen_topology(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Select(a) => select(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::ExportMap(a) => export_map(a),
    }
}

/// A file, or stdout when no path is given.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn gen_topology(a: GenTopologyArgs) -> Result<()> {
    let network = random_network(a.end_nodes, a.routers, a.paths, a.seed)?;
    write_json(&network.to_document(), a.out.as_deref())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let network = Network::load(&a.topology)?;
    let params = ModelParams::load(&a.params, &network.gramian())?;
    let selector = match a.selector {
        SelectorKind::All => SlotSelector::All,
        SelectorKind::Random => SlotSelector::Random { count: a.s },
        SelectorKind::None => SlotSelector::Empty,
    };
    let trace = simulate_trace(&params, &SimulationConfig::new(a.horizon, a.seed).selector(selector))?;
    let mut w = sink(a.out.as_deref())?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    gamma: f64,
    sigma2: f64,
    b: f64,
    c_eta_diagonal: Vec<f64>,
    params_file: Option<PathBuf>,
}

fn train(a: TrainArgs) -> Result<()> {
    let network = Network::load(&a.topology)?;
    let trace = DelayTrace::load(&a.trace)?;
    let gramian = network.gramian();
    let config = TrainingConfig {
        t_l: a.t_l,
        burn_in: a.burn_in,
        sigma2: a.sigma2,
        damping_b: a.damping_b,
        ..TrainingConfig::default()
    };
    let estimate = training_phase(&gramian, &trace, &config)?;
    let params = estimate.into_model_params(&gramian, a.sigma2, a.damping_b)?;
    match &a.out {
        Some(path) => {
            params.save(path, Some(&gramian))?;
            let report = TrainReport {
                gamma: params.gamma,
                sigma2: params.sigma2,
                b: params.damping_b,
                c_eta_diagonal: params.c_eta.diagonal().iter().copied().collect(),
                params_file: Some(path.clone()),
            };
            write_json(&report, None)
        }
        None => write_json(&params.to_file(Some(&gramian)), None),
    }
}

fn track(a: TrackArgs) -> Result<()> {
    let network = Network::load(&a.topology)?;
    let trace = DelayTrace::load(&a.trace)?;
    let params = ModelParams::load(&a.params, &network.gramian())?;
    let p = network.path_count();
    let mut rows = Vec::with_capacity(trace.horizon() * p);
    let mut emit = |t: usize, unmeasured: &[usize], predicted: &DVector<f64>| {
        let truth = trace.delays(t);
        let mut out = truth.clone();
        let mut measured = vec![1u8; p];
        for (i, &path) in unmeasured.iter().enumerate() {
            out[path] = predicted[i];
            measured[path] = 0;
        }
        for path in 0..p {
            rows.push(PredictionRow {
                t: trace.timestamps()[t],
                path_id: path,
                predicted: out[path],
                true_value: truth[path],
                measured_flag: measured[path],
            });
        }
    };
    match a.predictor {
        PredictorArg::Kkf => {
            let run = run_filter(&network, &params, &trace, FilterState::diffuse(&params, &trace))?;
            for slot in &run.slots {
                emit(slot.slot, &slot.prediction.unmeasured, &slot.prediction.predicted);
            }
        }
        PredictorArg::NetworkKriging => {
            let preds = run_network_kriging(&KrigingConfig::from_params(&params)?, &trace)?;
            for (t, pred) in preds.iter().enumerate() {
                emit(t, &pred.unmeasured, &pred.predicted);
            }
        }
    }
    let mut w = sink(a.out.as_deref())?;
    write_rows(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SelectReport {
    chosen: Vec<usize>,
    pick_order: Vec<usize>,
    chosen_nodes: Vec<String>,
    objective_trace: Vec<f64>,
}

fn read_matrix(path: &Path, p: usize) -> Result<DMatrix<f64>> {
    let spec: MatrixSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    spec.to_matrix(p, "phi")
}

fn select(a: SelectArgs) -> Result<()> {
    let network = Network::load(&a.topology)?;
    let p = network.path_count();
    let constraint = match a.policy.policy() {
        Policy::Greedy => Constraint::Cardinality(a.policy.s),
        Policy::NodeBudget { nodes } => Constraint::NodeBudget {
            nodes,
            groups: network.origin_groups(),
        },
        Policy::Matroid { cap } => {
            let groups = network.origin_groups();
            let caps = vec![cap; groups.len()];
            Constraint::PartitionMatroid { groups, caps }
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "select needs greedy, node-budget or matroid, got {}",
                other.name()
            )))
        }
    };
    let problem = match (&a.phi, &a.params) {
        (Some(path), _) => SelectionProblem::new(read_matrix(path, p)?, constraint)?,
        (None, Some(params_path)) => {
            let params = ModelParams::load(params_path, &network.gramian())?;
            let m = match &a.trace {
                Some(trace_path) => {
                    let trace = DelayTrace::load(trace_path)?;
                    run_filter(&network, &params, &trace, FilterState::diffuse(&params, &trace))?
                        .final_state
                        .m
                }
                None => DMatrix::zeros(p, p),
            };
            SelectionProblem::from_filter(&m, &params, constraint)?
        }
        (None, None) => unreachable!("clap requires --params or --phi"),
    };
    let result = greedy_select(&problem, GreedyOptions { lazy: a.policy.lazy })?;
    let names = network.end_node_names();
    let report = SelectReport {
        chosen: result.sorted(),
        pick_order: result.chosen.clone(),
        chosen_nodes: result.chosen_nodes.iter().map(|&v| names[v].clone()).collect(),
        objective_trace: result.objective_trace,
    };
    write_json(&report, a.out.as_deref())
}

/// Report without the bulky per-slot arrays.
#[derive(Serialize)]
struct SummaryReport<'a> {
    predictor: &'a str,
    policy: &'a str,
    seed: u64,
    paths: usize,
    s: usize,
    t_l: usize,
    t_p: usize,
    nmspe: f64,
    total_squared_error: f64,
    predicted_entries: usize,
    gamma: f64,
    retrainings: usize,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (network, trace, config) = a.experiment.load()?;
    let outcome = run_experiment(&network, &trace, &config)?;
    if let Some(path) = &a.predictions {
        let mut w = BufWriter::new(File::create(path)?);
        write_rows(&outcome.rows, &mut w)?;
        w.flush()?;
    }
    let r = &outcome.report;
    if a.summary {
        let summary = SummaryReport {
            predictor: &r.predictor,
            policy: &r.policy,
            seed: r.seed,
            paths: r.paths,
            s: r.s,
            t_l: r.t_l,
            t_p: r.t_p,
            nmspe: r.nmspe,
            total_squared_error: r.total_squared_error,
            predicted_entries: r.predicted_entries,
            gamma: r.gamma,
            retrainings: r.retrainings,
        };
        write_json(&summary, a.out.as_deref())
    } else {
        write_json(r, a.out.as_deref())
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (network, trace, config) = a.experiment.load()?;
    let table = sweep_s(&network, &trace, &config, &a.s_values);
    write_json(&table, a.out.as_deref())
}

fn export_map(a: ExportMapArgs) -> Result<()> {
    let rows = read_rows(BufReader::new(File::open(&a.predictions)?))?;
    let map = export_delay_map(&rows, a.unmeasured_only)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, matrix) in [("true.csv", &map.true_values), ("predicted.csv", &map.predicted)] {
        let mut w = BufWriter::new(File::create(a.out.join(name))?);
        map.write_csv(matrix, &mut w)?;
        w.flush()?;
    }
    Ok(())
}
