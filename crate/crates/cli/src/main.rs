use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dnnpart::evaluator::PartitionScheme;
use dnnpart::run::{parse_objectives, parse_weights, run, Mode, RunConfig, RunOutcome};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Explore,
    Exhaustive,
    EvaluateOne,
}

/// Explore layer-wise partitionings of a DNN over a chain of accelerators.
#[derive(Debug, Parser)]
#[command(name = "dnnpart", version)]
struct Args {
    /// Graph JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Platform JSON, repeated in chain order.
    #[arg(long = "platform", required = true)]
    platforms: Vec<PathBuf>,
    /// Link JSON, one per adjacent platform pair.
    #[arg(long = "link")]
    links: Vec<PathBuf>,
    /// Accuracy model JSON. Without it top-1 is a constant 1.
    #[arg(long)]
    accuracy: Option<PathBuf>,
    /// Objective document with constraints, weights and references.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Weighted-sum coefficients, e.g. `latency=1,energy=0.5`.
    #[arg(long)]
    weights: Option<String>,
    /// Pareto objectives.
    #[arg(long, default_value = "latency,energy")]
    objectives: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Population size (default derived from the layer count).
    #[arg(long)]
    pop: Option<usize>,
    /// Generations (default derived from the layer count).
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "explore")]
    mode: ModeArg,
    /// Cut positions for evaluate-one, e.g. `2` or `2,5`.
    #[arg(long)]
    cuts: Option<PartitionScheme>,
    /// Caps the evaluation threads.
    #[arg(long, env = "DNNPART_THREADS", hide_env_values = true)]
    threads: Option<usize>,
}

fn config(args: Args) -> Result<RunConfig, String> {
    let mut c = RunConfig::new(args.graph, args.out);
    c.platform_paths = args.platforms;
    c.link_paths = args.links;
    c.accuracy_path = args.accuracy;
    c.constraints_path = args.constraints;
    c.weights = args
        .weights
        .as_deref()
        .map(parse_weights)
        .transpose()
        .map_err(|e| e.to_string())?;
    c.objectives = parse_objectives(&args.objectives).map_err(|e| e.to_string())?;
    c.population = args.pop;
    c.generations = args.gens;
    c.seed = args.seed;
    c.cuts = args.cuts;
    c.mode = match args.mode {
        ModeArg::Explore => Mode::Explore,
        ModeArg::Exhaustive => Mode::Exhaustive,
        ModeArg::EvaluateOne => Mode::EvaluateOne,
    };
    Ok(c)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = args.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("cannot cap threads at {n}: {e}");
        }
    }
    let config = match config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&config) {
        Ok(RunOutcome::Evaluated(rec)) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&rec).expect("records serialize")
            );
            ExitCode::SUCCESS
        }
        Ok(RunOutcome::Selected { front, selected }) => {
            println!(
                "selected cuts [{}]: latency {} s, energy {} J, throughput {} fps ({} front members, {} evaluations)",
                selected.scheme,
                selected.latency_s,
                selected.energy_j,
                selected.throughput_fps,
                front.members.len(),
                front.evaluations
            );
            ExitCode::SUCCESS
        }
        Ok(RunOutcome::NoFeasible { front }) => {
            for d in &front.diagnostics {
                eprintln!("{d}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
