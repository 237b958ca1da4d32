//! The end-to-end pipeline behind the command-line driver: load inputs,
//! linearize the graph, search, select and write the output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::cost::{AccuracyModel, LinkModel, ModelError, PlatformModel};
use crate::evaluator::{
    EvalError, EvaluationRecord, Metric, ObjectiveFile, PartitionScheme, SystemSpec,
};
use crate::graph::{parse_graph, GraphError};
use crate::memory::{schedule_order, DEFAULT_ORDER_LIMIT};
use crate::optimizer::{
    exhaustive_pareto, nsga2, select_final, GaParams, OptimizeError, ParetoFront,
};
use crate::report::{memory_profile, write_memory_profile, write_records};

pub const EVALUATIONS_CSV: &str = "evaluations.csv";
pub const PARETO_CSV: &str = "pareto.csv";
pub const SELECTED_JSON: &str = "selected.json";
pub const MEMORY_PROFILE_CSV: &str = "memory_profile.csv";
pub const MANIFEST_JSON: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Explore,
    Exhaustive,
    EvaluateOne,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Explore => "explore",
            Mode::Exhaustive => "exhaustive",
            Mode::EvaluateOne => "evaluate-one",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("{path}: {source}")]
    Objectives { path: PathBuf, source: EvalError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("{0}")]
    Config(String),
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Write {
            path: PathBuf::from("<csv>"),
            source: std::io::Error::other(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub graph_path: PathBuf,
    /// Platforms in chain order, first to last.
    pub platform_paths: Vec<PathBuf>,
    pub link_paths: Vec<PathBuf>,
    pub accuracy_path: Option<PathBuf>,
    /// Objective document with constraints, weights and references.
    pub constraints_path: Option<PathBuf>,
    /// Overrides the weights of the objective document.
    pub weights: Option<Vec<(Metric, f64)>>,
    pub objectives: Vec<Metric>,
    pub population: Option<usize>,
    pub generations: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub cuts: Option<PartitionScheme>,
    pub order_limit: usize,
}

impl RunConfig {
    pub fn new(graph_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            graph_path: graph_path.into(),
            platform_paths: Vec::new(),
            link_paths: Vec::new(),
            accuracy_path: None,
            constraints_path: None,
            weights: None,
            objectives: vec![Metric::Latency, Metric::Energy],
            population: None,
            generations: None,
            seed: 0,
            output_dir: output_dir.into(),
            mode: Mode::Explore,
            cuts: None,
            order_limit: DEFAULT_ORDER_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.platform_paths.is_empty() {
            return Err(RunError::Config("at least one platform is required".into()));
        }
        if self.link_paths.len() + 1 != self.platform_paths.len() {
            return Err(RunError::Config(format!(
                "{} links given for {} platforms (expected {})",
                self.link_paths.len(),
                self.platform_paths.len(),
                self.platform_paths.len() - 1
            )));
        }
        if self.objectives.is_empty() {
            return Err(RunError::Config(
                "at least one objective is required".into(),
            ));
        }
        if self.mode == Mode::EvaluateOne && self.cuts.is_none() {
            return Err(RunError::Config("evaluate-one mode needs cuts".into()));
        }
        Ok(())
    }
}

/// Parses `latency=1,energy=0.5`.
pub fn parse_weights(text: &str) -> Result<Vec<(Metric, f64)>, RunError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (m, c) = item
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("weight {item:?} is not metric=value")))?;
            let metric: Metric = m.trim().parse()?;
            let c: f64 = c.trim().parse().map_err(|_| {
                RunError::Config(format!("weight {item:?} has a non-numeric value"))
            })?;
            Ok((metric, c))
        })
        .collect()
}

/// Parses `latency,energy`.
pub fn parse_objectives(text: &str) -> Result<Vec<Metric>, RunError> {
    let metrics = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<Metric>().map_err(RunError::from))
        .collect::<Result<Vec<_>, _>>()?;
    if metrics.is_empty() {
        return Err(RunError::Config("no objectives given".into()));
    }
    Ok(metrics)
}

fn read(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(|source| RunError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(|source| RunError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn model<T>(path: &Path, parse: impl Fn(&str) -> Result<T, ModelError>) -> Result<T, RunError> {
    parse(&read(path)?).map_err(|source| RunError::Model {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every input file and builds the system, linearizing the graph
/// with the memory-aware schedule.
pub fn load_system(config: &RunConfig) -> Result<SystemSpec<f64>, RunError> {
    config.validate()?;
    let graph = parse_graph(&read(&config.graph_path)?).map_err(|source| RunError::Graph {
        path: config.graph_path.clone(),
        source,
    })?;
    let platforms = config
        .platform_paths
        .iter()
        .map(|p| model(p, PlatformModel::from_json))
        .collect::<Result<Vec<_>, _>>()?;
    let links = config
        .link_paths
        .iter()
        .map(|p| model(p, LinkModel::from_json))
        .collect::<Result<Vec<_>, _>>()?;
    let accuracy = match &config.accuracy_path {
        Some(p) => model(p, AccuracyModel::from_json)?,
        None => AccuracyModel::Constant { top1: 1.0 },
    };
    let objective_file = match &config.constraints_path {
        Some(p) => ObjectiveFile::from_json(&read(p)?).map_err(|source| RunError::Objectives {
            path: p.clone(),
            source,
        })?,
        None => ObjectiveFile::default(),
    };
    let mut weights = objective_file.weights();
    if let Some(w) = &config.weights {
        weights.entries = w.clone();
    }
    if weights.entries.is_empty() {
        weights.entries = config.objectives.iter().map(|&m| (m, 1.0)).collect();
    }
    let order = schedule_order(&graph, config.seed, config.order_limit).order;
    let mut sys = SystemSpec::new(
        graph,
        order,
        platforms,
        links,
        accuracy,
        objective_file.constraints,
        weights,
    )?;
    sys.resolve_references()?;
    Ok(sys)
}

/// What a run produced.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    /// A front was found and a scheme selected.
    Selected {
        front: ParetoFront<f64>,
        selected: EvaluationRecord<f64>,
    },
    /// Every evaluated scheme violated a constraint.
    NoFeasible {
        front: ParetoFront<f64>,
    },
    Evaluated(EvaluationRecord<f64>),
}

impl RunOutcome {
    /// 0 on success, 2 when no scheme is feasible.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunOutcome::NoFeasible { .. } => 2,
            _ => 0,
        }
    }
}

fn platform_names(sys: &SystemSpec<f64>) -> Vec<String> {
    sys.platforms.iter().map(|p| p.name.clone()).collect()
}

fn write_csv(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>,
) -> Result<(), RunError> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write(path, &buf)
}

/// Runs the configured mode and writes its outputs into `output_dir`.
///
/// Explore and exhaustive modes write `evaluations.csv`, `pareto.csv`,
/// `selected.json`, `memory_profile.csv` and `run_manifest.json`;
/// evaluate-one writes a one-row `evaluations.csv`.
pub fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let started = Instant::now();
    let sys = load_system(config)?;
    fs::create_dir_all(&config.output_dir).map_err(|source| RunError::Write {
        path: config.output_dir.clone(),
        source,
    })?;
    let out = |name: &str| config.output_dir.join(name);
    let names = platform_names(&sys);

    if config.mode == Mode::EvaluateOne {
        let scheme = config.cuts.clone().expect("validated");
        let rec = sys.evaluate_scheme(&scheme)?;
        write_csv(&out(EVALUATIONS_CSV), |b| {
            write_records(b, &names, std::slice::from_ref(&rec))
        })?;
        return Ok(RunOutcome::Evaluated(rec));
    }

    let mut params = GaParams::for_system(
        sys.layer_count(),
        sys.platform_count(),
        config.seed,
        config.objectives.clone(),
    );
    if let Some(p) = config.population {
        params.population = p;
    }
    if let Some(g) = config.generations {
        params.generations = g;
    }
    let front = match config.mode {
        Mode::Exhaustive => exhaustive_pareto(&sys, &config.objectives)?,
        _ => nsga2(&sys, &params)?,
    };
    let selected = if front.is_empty() {
        None
    } else {
        Some(select_final(&front, &sys.weights)?)
    };
    log::info!(
        "{} schemes evaluated, {} on the front",
        front.evaluations,
        front.members.len()
    );

    write_csv(&out(EVALUATIONS_CSV), |b| {
        write_records(b, &names, &front.evaluated)
    })?;
    write_csv(&out(PARETO_CSV), |b| {
        write_records(b, &names, &front.members)
    })?;
    let selected_doc = json!({
        "front": front.members,
        "selected": selected,
        "evaluations": front.evaluations,
        "generations_run": front.generations_run,
        "diagnostics": front.diagnostics,
    });
    write(&out(SELECTED_JSON), pretty(&selected_doc).as_bytes())?;
    let profile = memory_profile(&sys);
    write_csv(&out(MEMORY_PROFILE_CSV), |b| {
        write_memory_profile(b, &names[0], &names[names.len() - 1], &profile)
    })?;

    let path_list = |ps: &[PathBuf]| {
        ps.iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
    };
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "mode": config.mode.name(),
        "seed": config.seed,
        "inputs": {
            "graph": config.graph_path.display().to_string(),
            "platforms": path_list(&config.platform_paths),
            "links": path_list(&config.link_paths),
            "accuracy": config.accuracy_path.as_ref().map(|p| p.display().to_string()),
            "constraints": config.constraints_path.as_ref().map(|p| p.display().to_string()),
        },
        "graph": sys.graph.name(),
        "layers": sys.layer_count(),
        "layer_order": sys.order.ids(&sys.graph),
        "objectives": config.objectives,
        "weights": sys.weights.entries,
        "references": sys.weights.references,
        "ga": if config.mode == Mode::Explore { Some(&params) } else { None },
        "evaluations": front.evaluations,
        "front_size": front.members.len(),
        "threads": rayon::current_num_threads(),
        "elapsed_s": started.elapsed().as_secs_f64(),
    });
    write(&out(MANIFEST_JSON), pretty(&manifest).as_bytes())?;

    Ok(match selected {
        Some(selected) => RunOutcome::Selected { front, selected },
        None => RunOutcome::NoFeasible { front },
    })
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}
