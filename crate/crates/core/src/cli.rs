//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, ExecutionMode, PipelineConfig};
use crate::predictor::{
    evaluate_accuracy, predict_batch, train_predictor, HashBuilder, OracleHashBuilder, SruParams,
    TrainConfig, DEFAULT_SRU_LAYERS,
};
use crate::report::{
    format_table, load_metrics_csv, plot_series, save_metrics_csv, summarize, write_summary_csv,
    write_xy_csv,
};
use crate::placement::TransferKind;
use crate::simulator::{CostModel, Metrics, SimConfig, Strategy};
use crate::simulator::BatchOutcome;
use crate::workload::{read_trace, write_trace, ModelShape, RoutingTrace, Scenario, TraceBuilder, DEFAULT_NOISE};

#[derive(Debug, Parser)]
#[command(name = "moe-replica-sim", version, about = "Replica placement simulator for mixture-of-experts inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic routing trace.
    GenTrace(GenTraceArgs),
    /// Train the routing predictor on a trace.
    Train(TrainArgs),
    /// Run one placement strategy over a trace.
    Simulate(SimulateArgs),
    /// Run every strategy over a trace and tabulate the results.
    Compare(CompareArgs),
    /// Summarize metrics files written by earlier runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Zipf,
    TwoHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    ResidentAll,
    Distinct,
    Replicated,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::ResidentAll => Strategy::ResidentAll,
            StrategyArg::Distinct => Strategy::DistinctOnly,
            StrategyArg::Replicated => Strategy::Replicated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sim,
    Concurrent,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, default_value_t = ModelShape::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1.2)]
    pub skew: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Zipf)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `trace.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_SRU_LAYERS)]
    pub sru_layers: usize,
    /// Trailing fraction of batches held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `params.json` and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Trained predictor; without it the ground-truth routing is used.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Slots per layer; defaults to the batch size.
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub queue_capacity: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sim)]
    pub mode: ModeArg,
    /// Simulated time to build one hash table.
    #[arg(long, default_value_t = 1.0)]
    pub build_cost: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t_compute: f64,
    #[arg(long, default_value_t = 10.0)]
    pub t_load: f64,
    #[arg(long, default_value_t = 2.0)]
    pub t_replicate: f64,
    #[arg(long, default_value_t = 5.0)]
    pub t_offload: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Replicated)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSV files; each must hold a single model configuration.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Directory for `summary.csv` and `summary.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTrace(args) => gen_trace(&args),
        Command::Train(args) => train(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Compare(args) => compare(&args),
        Command::Report(args) => report(&args),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn gen_trace(args: &GenTraceArgs) -> Result<()> {
    let shape = ModelShape::new(args.layers, args.experts, args.d_model).with_batch_size(args.batch_size);
    let scenario = match args.scenario {
        ScenarioArg::Zipf => Scenario::Zipf,
        ScenarioArg::TwoHot => Scenario::TwoHot,
    };
    let trace = TraceBuilder::new(shape, args.batches, args.seed)
        .skew(args.skew)
        .noise(args.noise)
        .scenario(scenario)
        .build()?;
    out_dir(&args.out)?;
    let path = args.out.join("trace.jsonl");
    write_trace(&trace, &path)?;
    println!(
        "wrote {} batches x {} tokens to {}",
        trace.batches.len(),
        shape.batch_size,
        path.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(Error::Config(format!(
            "holdout must be in [0, 1), got {}",
            args.holdout
        )));
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", args.lr)));
    }
    let trace = read_trace(&args.trace)?;
    let n = trace.batches.len();
    let held = ((n as f64) * args.holdout).round() as usize;
    let (train_set, test_set) = trace.split_at(n - held.min(n - 1));
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        num_sru_layers: args.sru_layers,
    };
    let trained = train_predictor(&train_set, &config)?;
    out_dir(&args.out)?;
    trained.params.save(args.out.join("params.json"))?;
    trained.write_loss_csv(args.out.join("loss.csv"))?;
    if let Some((epoch, loss)) = trained.loss_curve.last() {
        println!("epoch {epoch}: loss {loss:.6}");
    }
    if !test_set.batches.is_empty() {
        println!(
            "held-out accuracy over {} batches: {:.4}",
            test_set.batches.len(),
            held_out_accuracy(&test_set, &trained.params)?
        );
    }
    Ok(())
}

/// Token-weighted accuracy over every batch of `trace`.
pub fn held_out_accuracy(trace: &RoutingTrace, params: &SruParams) -> Result<f64> {
    let mut total = 0.0;
    for batch in &trace.batches {
        let table = predict_batch(batch, params)?;
        total += evaluate_accuracy(&table, &batch.oracle_routing)?;
    }
    Ok(total / trace.batches.len() as f64)
}

struct Inputs {
    trace: RoutingTrace,
    predictor: Box<dyn HashBuilder>,
    capacity: usize,
    cost: CostModel,
    pipeline: PipelineConfig,
}

fn load_inputs(args: &RunArgs) -> Result<Inputs> {
    let cost = CostModel {
        t_compute: args.t_compute,
        t_load: args.t_load,
        t_replicate: args.t_replicate,
        t_offload: args.t_offload,
    };
    cost.validate()?;
    let pipeline = PipelineConfig {
        queue_capacity: args.queue_capacity,
        mode: match args.mode {
            ModeArg::Sim => ExecutionMode::SimulatedTime,
            ModeArg::Concurrent => ExecutionMode::Concurrent,
        },
        hash_build_cost: args.build_cost,
    };
    pipeline.validate()?;
    let trace = read_trace(&args.trace)?;
    let predictor: Box<dyn HashBuilder> = match &args.params {
        Some(path) => {
            let params = SruParams::load(path)?;
            if params.d_model() != trace.shape.d_model
                || params.num_experts() != trace.shape.experts_per_layer
                || params.num_moe_layers() != trace.shape.num_layers
            {
                return Err(Error::Config(format!(
                    "predictor in {} does not match the trace shape",
                    path.display()
                )));
            }
            Box::new(params)
        }
        None => Box::new(OracleHashBuilder {
            num_experts: trace.shape.experts_per_layer,
        }),
    };
    let capacity = args.capacity.unwrap_or(trace.shape.batch_size);
    Ok(Inputs {
        trace,
        predictor,
        capacity,
        cost,
        pipeline,
    })
}

#[derive(Serialize)]
struct TransferRow {
    batch: usize,
    event: TransferKind,
    layer: usize,
    expert: Option<usize>,
    ordinal: Option<usize>,
    seq: usize,
}

fn save_transfers(outcomes: &[BatchOutcome], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for o in outcomes {
        for e in &o.log.events {
            writer.serialize(TransferRow {
                batch: o.metrics.batch,
                event: e.kind,
                layer: e.layer,
                expert: e.expert,
                ordinal: e.ordinal,
                seq: e.seq,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn run_strategy(inputs: &Inputs, strategy: Strategy, out: &Path) -> Result<Vec<Metrics>> {
    let sim = SimConfig {
        strategy,
        capacity: inputs.capacity,
        cost: inputs.cost,
    };
    let metrics_path = out.join(format!("metrics_{strategy}.csv"));
    match run_pipeline(&inputs.trace, inputs.predictor.as_ref(), sim, &inputs.pipeline) {
        Ok(run) => {
            save_metrics_csv(&run.metrics, &metrics_path)?;
            save_transfers(&run.outcomes, &out.join(format!("transfers_{strategy}.csv")))?;
            Ok(run.metrics)
        }
        Err(failure) => {
            // keep what completed before the failing batch
            save_metrics_csv(&failure.partial, &metrics_path)?;
            Err(failure.into())
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let inputs = load_inputs(&args.run)?;
    out_dir(&args.run.out)?;
    let metrics = run_strategy(&inputs, args.strategy.into(), &args.run.out)?;
    print!("{}", format_table(&summarize(&[metrics])?));
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let inputs = load_inputs(&args.run)?;
    let out = &args.run.out;
    out_dir(out)?;
    let mut all = Vec::new();
    for strategy in Strategy::ALL {
        all.extend(run_strategy(&inputs, strategy, out)?);
    }
    save_metrics_csv(&all, out.join("compare.csv"))?;

    let plots = out.join("plots");
    out_dir(&plots)?;
    for (name, series) in [
        ("latency", plot_series(&all, |m| m.latency + m.stall)),
        ("utilization", plot_series(&all, |m| m.utilization)),
    ] {
        for (strategy, points) in series {
            let file = fs::File::create(plots.join(format!("{name}_{strategy}.csv")))?;
            write_xy_csv(&points, file)?;
        }
    }

    write_summary(&[all], Some(out))
}

fn report(args: &ReportArgs) -> Result<()> {
    let streams = args
        .metrics
        .iter()
        .map(load_metrics_csv)
        .collect::<Result<Vec<_>>>()?;
    write_summary(&streams, args.out.as_deref())
}

fn write_summary(streams: &[Vec<Metrics>], out: Option<&Path>) -> Result<()> {
    let rows = summarize(streams)?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(out) = out {
        out_dir(out)?;
        write_summary_csv(&rows, fs::File::create(out.join("summary.csv"))?)?;
        let mut file = fs::File::create(out.join("summary.txt"))?;
        file.write_all(table.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("moe-replica-sim").chain(args.iter().copied()))
    }

    #[test]
    fn defaults() {
        let cli = parse(&["simulate", "--trace", "t.jsonl", "--out", "o"]).unwrap();
        let Command::Simulate(args) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(args.strategy, StrategyArg::Replicated);
        assert_eq!(args.run.capacity, None);
        assert_eq!(args.run.queue_capacity, 2);
        assert_eq!(args.run.mode, ModeArg::Sim);

        let cli = parse(&["gen-trace", "--out", "o"]).unwrap();
        let Command::GenTrace(args) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(args.batch_size, 64);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["moe-replica-sim", "simulate", "--strategy", "bogus"]), 1);
        assert_eq!(main_with_args(["moe-replica-sim", "frobnicate"]), 1);
    }

    #[test]
    fn missing_trace_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.jsonl");
        let code = main_with_args([
            "moe-replica-sim".as_ref(),
            "simulate".as_ref(),
            "--trace".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            dir.path().as_os_str(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn strategy_names_match() {
        for (arg, s) in [
            (StrategyArg::ResidentAll, Strategy::ResidentAll),
            (StrategyArg::Distinct, Strategy::DistinctOnly),
            (StrategyArg::Replicated, Strategy::Replicated),
        ] {
            assert_eq!(arg.to_possible_value().unwrap().get_name(), s.name());
        }
    }
}
