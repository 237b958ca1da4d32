//! Design-space exploration for layer-wise DNN inference partitioning.
//!
//! A network graph is linearized into a layer order, and a chain of
//! accelerator platforms connected by links receives contiguous segments
//! of that order. Each partitioning is scored on latency, energy,
//! throughput, link traffic, memory footprint and accuracy, and the
//! Pareto-optimal schemes are found with NSGA-II (or exhaustively for
//! small spaces).
//!
//! The numeric layers are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! file formats and the command-line driver use.

pub mod cost;
pub mod evaluator;
pub mod graph;
pub mod memory;
pub mod optimizer;
pub mod report;
pub mod run;
pub mod scalar;

pub use graph::{parse_graph, DnnGraph, GraphError, LayerNode, LayerOrder};
pub use scalar::Scalar;

pub type CostEntry = cost::CostEntry<f64>;
pub type PlatformModel = cost::PlatformModel<f64>;
pub type LinkModel = cost::LinkModel<f64>;
pub type AccuracyModel = cost::AccuracyModel<f64>;
pub type Constraints = evaluator::Constraints<f64>;
pub type ObjectiveWeights = evaluator::ObjectiveWeights<f64>;
pub type EvaluationRecord = evaluator::EvaluationRecord<f64>;
pub type SystemSpec = evaluator::SystemSpec<f64>;
pub type ParetoFront = optimizer::ParetoFront<f64>;
pub type GaParams = optimizer::GaParams;
