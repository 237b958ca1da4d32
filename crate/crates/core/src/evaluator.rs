//! Scoring of one partitioning scheme against a platform chain.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{AccuracyModel, LinkModel, ModelError, PlatformModel};
use crate::graph::{
    branch_regions, crossing_producers, BranchRegion, DnnGraph, GraphError, LayerOrder,
};
use crate::memory::{memory_check, MemoryReport};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("system needs at least one platform")]
    NoPlatforms,
    #[error("{links} links for {platforms} platforms (expected {expected})", expected = .platforms.saturating_sub(1))]
    LinkCount { platforms: usize, links: usize },
    #[error("duplicate platform name {0}")]
    DuplicatePlatform(String),
    #[error("invalid scheme {cuts:?}: {reason}")]
    InvalidScheme { cuts: Vec<usize>, reason: String },
    #[error("constraint {0} must be finite and positive")]
    BadConstraint(&'static str),
    #[error("invalid objective weights: {0}")]
    BadWeights(String),
    #[error("degenerate benefit metric {0}")]
    DegenerateBenefit(Metric),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("malformed objective file: {0}")]
    Malformed(String),
}

/// Cut positions in the layer order, one per link.
///
/// Platform `k` runs `order[cuts[k-1]..cuts[k])`, with an implicit `0`
/// before the first cut and `L` after the last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub cuts: Vec<usize>,
}

impl PartitionScheme {
    pub fn new(cuts: Vec<usize>) -> Self {
        Self { cuts }
    }

    /// Checks monotonicity and range for a chain of `platforms` over `len`
    /// layers.
    pub fn validate(&self, platforms: usize, len: usize) -> Result<(), EvalError> {
        let fail = |reason: String| {
            Err(EvalError::InvalidScheme {
                cuts: self.cuts.clone(),
                reason,
            })
        };
        if self.cuts.len() + 1 != platforms {
            return fail(format!(
                "{} cuts for {platforms} platforms",
                self.cuts.len()
            ));
        }
        if self.cuts.windows(2).any(|w| w[0] > w[1]) {
            return fail("cuts must be non-decreasing".into());
        }
        if self.cuts.last().is_some_and(|&c| c > len) {
            return fail(format!("cut beyond {len} layers"));
        }
        Ok(())
    }

    /// `[lo, hi)` range of platform `k`.
    pub fn segment(&self, k: usize, len: usize) -> (usize, usize) {
        let lo = if k == 0 { 0 } else { self.cuts[k - 1] };
        let hi = self.cuts.get(k).copied().unwrap_or(len);
        (lo, hi)
    }

    /// Number of platforms that receive at least one layer.
    pub fn partition_count(&self, len: usize) -> usize {
        (0..=self.cuts.len())
            .filter(|&k| {
                let (lo, hi) = self.segment(k, len);
                hi > lo
            })
            .count()
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.cuts.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PartitionScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad cut {p:?}: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PartitionScheme::new)
    }
}

/// Optimization metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Latency,
    Energy,
    Throughput,
    Bandwidth,
    Accuracy,
    Memory,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Latency,
        Metric::Energy,
        Metric::Throughput,
        Metric::Bandwidth,
        Metric::Accuracy,
        Metric::Memory,
    ];

    /// Higher is better.
    pub fn is_benefit(self) -> bool {
        matches!(self, Metric::Throughput | Metric::Accuracy)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Latency => "latency",
            Metric::Energy => "energy",
            Metric::Throughput => "throughput",
            Metric::Bandwidth => "bandwidth",
            Metric::Accuracy => "accuracy",
            Metric::Memory => "memory",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| EvalError::UnknownMetric(s.to_string()))
    }
}

/// Optional bounds on the evaluated metrics. Memory caps live in the
/// platform models.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Constraints<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_s: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_energy_j: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_throughput_fps: Option<T>,
    /// Applies to every link individually.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_link_bits: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_top1: Option<T>,
}

impl<T: Scalar> Constraints<T> {
    pub fn validate(&self) -> Result<(), EvalError> {
        let positive = |v: Option<T>, name| match v {
            Some(x) if !(x.is_finite() && x > T::zero()) => Err(EvalError::BadConstraint(name)),
            _ => Ok(()),
        };
        positive(self.max_latency_s, "max_latency_s")?;
        positive(self.max_energy_j, "max_energy_j")?;
        positive(self.min_throughput_fps, "min_throughput_fps")?;
        positive(self.min_top1, "min_top1")?;
        if self.max_link_bits == Some(0) {
            return Err(EvalError::BadConstraint("max_link_bits"));
        }
        Ok(())
    }

    /// Inclusive comparison of every present bound. Returns feasibility,
    /// the names of the violated bounds and the summed relative violation.
    pub fn check(&self, rec: &EvaluationRecord<T>) -> (bool, Vec<String>, T) {
        let mut violated = Vec::new();
        let mut total = T::zero();
        let mut upper = |name: &str, value: T, bound: Option<T>| {
            if let Some(b) = bound {
                if value > b {
                    violated.push(name.to_string());
                    total = total + (value - b) / b;
                }
            }
        };
        upper("max_latency_s", rec.latency_s, self.max_latency_s);
        upper("max_energy_j", rec.energy_j, self.max_energy_j);
        let worst_link = rec.link_bits.iter().copied().max().unwrap_or(0);
        upper(
            "max_link_bits",
            T::from_u64_lossy(worst_link),
            self.max_link_bits.map(T::from_u64_lossy),
        );
        let mut lower = |name: &str, value: T, bound: Option<T>| {
            if let Some(b) = bound {
                if value < b {
                    violated.push(name.to_string());
                    total = total + (b - value) / b;
                }
            }
        };
        lower(
            "min_throughput_fps",
            rec.throughput_fps,
            self.min_throughput_fps,
        );
        lower("min_top1", rec.top1, self.min_top1);
        (violated.is_empty(), violated, total)
    }
}

/// Free-function form of [`Constraints::check`].
pub fn check_constraints<T: Scalar>(
    rec: &EvaluationRecord<T>,
    constraints: &Constraints<T>,
) -> (bool, Vec<String>) {
    let (ok, violated, _) = constraints.check(rec);
    (ok, violated)
}

/// Coefficients of the weighted-sum scalarization and the per-metric
/// reference values used to normalize them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveWeights<T> {
    pub entries: Vec<(Metric, T)>,
    /// Explicit references; missing metrics are filled from the
    /// all-on-last-platform scheme by [`SystemSpec::resolve_references`].
    pub references: BTreeMap<Metric, T>,
}

impl<T: Scalar> ObjectiveWeights<T> {
    pub fn single(metric: Metric) -> Self {
        Self {
            entries: vec![(metric, T::one())],
            references: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if let Some((m, c)) = self
            .entries
            .iter()
            .find(|(_, c)| !(c.is_finite() && *c >= T::zero()))
        {
            return Err(EvalError::BadWeights(format!("coefficient {c} for {m}")));
        }
        if !self.entries.iter().any(|(_, c)| *c > T::zero()) {
            return Err(EvalError::BadWeights("all coefficients are zero".into()));
        }
        Ok(())
    }

    pub fn coefficient(&self, metric: Metric) -> T {
        self.entries
            .iter()
            .filter(|(m, _)| *m == metric)
            .map(|(_, c)| *c)
            .fold(T::zero(), |a, b| a + b)
    }
}

/// The objective/constraint document:
/// `{"constraints":{..},"weights":{"latency":1.0,..},"references":"auto"|{..}}`.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveFile {
    #[serde(default)]
    pub constraints: Constraints<f64>,
    #[serde(default)]
    pub weights: BTreeMap<Metric, f64>,
    #[serde(default)]
    pub references: References,
}

/// Reference values for normalization: `"auto"` or an explicit map.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(try_from = "RawReferences", into = "RawReferences")]
pub enum References {
    #[default]
    Auto,
    Explicit(BTreeMap<Metric, f64>),
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RawReferences {
    Tag(String),
    Map(BTreeMap<Metric, f64>),
}

impl TryFrom<RawReferences> for References {
    type Error = String;

    fn try_from(raw: RawReferences) -> Result<Self, Self::Error> {
        match raw {
            RawReferences::Tag(t) if t == "auto" => Ok(References::Auto),
            RawReferences::Tag(t) => Err(format!("expected \"auto\" or a metric map, got {t:?}")),
            RawReferences::Map(m) => Ok(References::Explicit(m)),
        }
    }
}

impl From<References> for RawReferences {
    fn from(r: References) -> Self {
        match r {
            References::Auto => RawReferences::Tag("auto".into()),
            References::Explicit(m) => RawReferences::Map(m),
        }
    }
}

impl ObjectiveFile {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))
    }

    pub fn weights(&self) -> ObjectiveWeights<f64> {
        ObjectiveWeights {
            entries: self.weights.iter().map(|(m, c)| (*m, *c)).collect(),
            references: match &self.references {
                References::Auto => BTreeMap::new(),
                References::Explicit(r) => r.clone(),
            },
        }
    }
}

/// All metrics of one scheme.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct EvaluationRecord<T> {
    pub scheme: PartitionScheme,
    pub partition_count: usize,
    pub latency_s: T,
    pub energy_j: T,
    /// `+inf` when every stage and link latency is zero.
    pub throughput_fps: T,
    pub stage_latency_s: Vec<T>,
    pub stage_energy_j: Vec<T>,
    pub link_latency_s: Vec<T>,
    pub link_energy_j: Vec<T>,
    pub link_bits: Vec<u64>,
    pub mem_bytes: Vec<(String, u64)>,
    pub top1: T,
    pub feasible: bool,
    pub violated: Vec<String>,
    /// Summed relative constraint violation; zero when feasible.
    pub violation: T,
}

impl<T: Scalar> EvaluationRecord<T> {
    pub fn link_bits_total(&self) -> u64 {
        self.link_bits.iter().sum()
    }

    pub fn max_mem_bytes(&self) -> u64 {
        self.mem_bytes.iter().map(|(_, b)| *b).max().unwrap_or(0)
    }

    /// Raw value of `metric`.
    pub fn metric(&self, metric: Metric) -> T {
        match metric {
            Metric::Latency => self.latency_s,
            Metric::Energy => self.energy_j,
            Metric::Throughput => self.throughput_fps,
            Metric::Bandwidth => T::from_u64_lossy(self.link_bits_total()),
            Metric::Accuracy => self.top1,
            Metric::Memory => T::from_u64_lossy(self.max_mem_bytes()),
        }
    }

    /// Value to minimize for `metric` (benefit metrics negated).
    pub fn objective(&self, metric: Metric) -> T {
        let v = self.metric(metric);
        if metric.is_benefit() {
            -v
        } else {
            v
        }
    }
}

/// Steady-state frames per second of a pipelined chain: the inverse of the
/// slowest stage or link. Zero latencies (empty stages, idle links) are
/// ignored; if nothing remains the throughput is unbounded (`+inf`).
pub fn throughput<T: Scalar>(stage_latencies: &[T], link_latencies: &[T]) -> T {
    let slowest = stage_latencies
        .iter()
        .chain(link_latencies)
        .copied()
        .filter(|&d| d > T::zero())
        .fold(T::zero(), T::max);
    if slowest > T::zero() {
        T::one() / slowest
    } else {
        T::infinity()
    }
}

/// Weighted sum of normalized metrics; lower is better.
///
/// Cost metrics contribute `value / reference`, benefit metrics
/// `reference / value`. References must be present for every weighted
/// metric (see [`SystemSpec::resolve_references`]).
pub fn weighted_cost<T: Scalar>(
    rec: &EvaluationRecord<T>,
    w: &ObjectiveWeights<T>,
) -> Result<T, EvalError> {
    let mut total = T::zero();
    for &(metric, c) in &w.entries {
        if c == T::zero() {
            continue;
        }
        let reference = usable_reference(w.references.get(&metric).copied());
        let value = rec.metric(metric);
        let normalized = if metric.is_benefit() {
            if value == T::zero() {
                return Err(EvalError::DegenerateBenefit(metric));
            }
            reference / value
        } else {
            value / reference
        };
        total = total + c * normalized;
    }
    Ok(total)
}

fn usable_reference<T: Scalar>(r: Option<T>) -> T {
    match r {
        Some(v) if v.is_finite() && v > T::zero() => v,
        _ => T::one(),
    }
}

/// Everything needed to evaluate schemes: the graph with its order, the
/// platform chain and the objectives.
#[derive(Debug, Clone)]
pub struct SystemSpec<T> {
    pub graph: DnnGraph,
    pub order: LayerOrder,
    pub platforms: Vec<PlatformModel<T>>,
    pub links: Vec<LinkModel<T>>,
    pub accuracy: AccuracyModel<T>,
    pub constraints: Constraints<T>,
    pub weights: ObjectiveWeights<T>,
    positions: Vec<usize>,
    /// `costs[k][step]`: cost of the layer at `step` on platform `k`.
    costs: Vec<Vec<crate::cost::CostEntry<T>>>,
    /// Summed output elements of the tensors crossing each cut position.
    crossing_elems: Vec<u64>,
    regions: Vec<BranchRegion>,
}

impl<T: Scalar> SystemSpec<T> {
    /// Validates the chain and precomputes per-layer costs. Fails on an
    /// uncosted layer.
    pub fn new(
        graph: DnnGraph,
        order: LayerOrder,
        platforms: Vec<PlatformModel<T>>,
        links: Vec<LinkModel<T>>,
        accuracy: AccuracyModel<T>,
        constraints: Constraints<T>,
        weights: ObjectiveWeights<T>,
    ) -> Result<Self, EvalError> {
        if platforms.is_empty() {
            return Err(EvalError::NoPlatforms);
        }
        if links.len() + 1 != platforms.len() {
            return Err(EvalError::LinkCount {
                platforms: platforms.len(),
                links: links.len(),
            });
        }
        for (i, p) in platforms.iter().enumerate() {
            p.validate()?;
            if platforms[..i].iter().any(|q| q.name == p.name) {
                return Err(EvalError::DuplicatePlatform(p.name.clone()));
            }
        }
        links.iter().try_for_each(LinkModel::validate)?;
        accuracy.validate()?;
        constraints.validate()?;
        weights.validate()?;
        order.check(&graph)?;

        let costs = platforms
            .iter()
            .map(|p| {
                order
                    .order
                    .iter()
                    .map(|&v| p.layer_cost(&graph.layer(v).id))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let crossing_elems = (0..=graph.len())
            .map(|c| {
                crossing_producers(&graph, &order, c)
                    .map(|ps| ps.iter().map(|&p| graph.layer(p).out_elems).sum())
            })
            .collect::<Result<Vec<u64>, _>>()?;
        let positions = order.positions();
        let regions = branch_regions(&graph);
        Ok(Self {
            graph,
            order,
            platforms,
            links,
            accuracy,
            constraints,
            weights,
            positions,
            costs,
            crossing_elems,
            regions,
        })
    }

    /// Number of layers.
    pub fn layer_count(&self) -> usize {
        self.graph.len()
    }

    pub fn platform_count(&self) -> usize {
        self.platforms.len()
    }

    pub fn platform_bits(&self) -> Vec<u32> {
        self.platforms.iter().map(|p| p.bits).collect()
    }

    /// Scheme placing every layer on the last platform.
    pub fn all_on_last(&self) -> PartitionScheme {
        PartitionScheme::new(vec![0; self.platforms.len() - 1])
    }

    /// Scheme placing every layer on platform `k`.
    pub fn all_on(&self, k: usize) -> PartitionScheme {
        let n = self.layer_count();
        PartitionScheme::new(
            (0..self.platforms.len() - 1)
                .map(|i| if i < k { 0 } else { n })
                .collect(),
        )
    }

    /// Fills missing weight references from the all-on-last-platform
    /// scheme.
    pub fn resolve_references(&mut self) -> Result<(), EvalError> {
        let reference = self.evaluate_scheme(&self.all_on_last())?;
        for m in Metric::ALL {
            self.weights
                .references
                .entry(m)
                .or_insert_with(|| reference.metric(m));
        }
        Ok(())
    }

    /// Bits sent over each link. A link whose cut coincides with the
    /// previous one carries nothing: the tensors already crossed.
    pub fn link_bits(&self, scheme: &PartitionScheme) -> Vec<u64> {
        scheme
            .cuts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                if k > 0 && scheme.cuts[k - 1] == c {
                    0
                } else {
                    self.crossing_elems[c] * u64::from(self.platforms[k].bits)
                }
            })
            .collect()
    }

    /// Memory of each platform's segment.
    pub fn memory(&self, scheme: &PartitionScheme) -> (bool, MemoryReport) {
        let (ok, mut report) = memory_check(
            &self.graph,
            &self.order.order,
            &self.positions,
            scheme,
            &self.platforms,
        );
        report.schedule_used = self
            .regions
            .iter()
            .map(|r| {
                let mut nodes = r.nodes.clone();
                nodes.sort_by_key(|&v| self.positions[v]);
                LayerOrder::new(nodes, self.order.seed)
            })
            .collect();
        (ok, report)
    }

    /// Full evaluation of `scheme`.
    pub fn evaluate_scheme(
        &self,
        scheme: &PartitionScheme,
    ) -> Result<EvaluationRecord<T>, EvalError> {
        let n = self.layer_count();
        scheme.validate(self.platforms.len(), n)?;

        let mut stage_latency_s = Vec::with_capacity(self.platforms.len());
        let mut stage_energy_j = Vec::with_capacity(self.platforms.len());
        for k in 0..self.platforms.len() {
            let (lo, hi) = scheme.segment(k, n);
            let seg = &self.costs[k][lo..hi];
            stage_latency_s.push(seg.iter().map(|c| c.latency_s).sum::<T>());
            stage_energy_j.push(seg.iter().map(|c| c.energy_j).sum::<T>());
        }

        let link_bits = self.link_bits(scheme);
        let (link_latency_s, link_energy_j): (Vec<T>, Vec<T>) = link_bits
            .iter()
            .zip(&self.links)
            .map(|(&bits, link)| {
                if bits == 0 {
                    (T::zero(), T::zero())
                } else {
                    let c = link.link_transfer(bits);
                    (c.latency_s, c.energy_j)
                }
            })
            .unzip();

        let latency_s = stage_latency_s
            .iter()
            .chain(&link_latency_s)
            .copied()
            .sum::<T>();
        let energy_j = stage_energy_j
            .iter()
            .chain(&link_energy_j)
            .copied()
            .sum::<T>();
        let throughput_fps = throughput(&stage_latency_s, &link_latency_s);

        let (mem_ok, mem) = memory_check(
            &self.graph,
            &self.order.order,
            &self.positions,
            scheme,
            &self.platforms,
        );
        let top1 =
            self.accuracy
                .accuracy_eval(&self.graph, &self.order, scheme, &self.platform_bits())?;

        let mut rec = EvaluationRecord {
            scheme: scheme.clone(),
            partition_count: scheme.partition_count(n),
            latency_s,
            energy_j,
            throughput_fps,
            stage_latency_s,
            stage_energy_j,
            link_latency_s,
            link_energy_j,
            link_bits,
            mem_bytes: mem.per_platform_bytes,
            top1,
            feasible: true,
            violated: Vec::new(),
            violation: T::zero(),
        };
        let (ok, mut violated, mut violation) = self.constraints.check(&rec);
        for (p, (name, bytes)) in self.platforms.iter().zip(&rec.mem_bytes) {
            if *bytes > p.mem_capacity_bytes {
                violated.push(format!("mem_capacity_bytes[{name}]"));
                let cap = T::from_u64_lossy(p.mem_capacity_bytes);
                violation = violation + (T::from_u64_lossy(*bytes) - cap) / cap;
            }
        }
        rec.feasible = ok && mem_ok;
        rec.violated = violated;
        rec.violation = violation;
        Ok(rec)
    }

    pub fn weighted_cost(&self, rec: &EvaluationRecord<T>) -> Result<T, EvalError> {
        weighted_cost(rec, &self.weights)
    }
}

/// Free-function form of [`SystemSpec::evaluate_scheme`].
pub fn evaluate_scheme<T: Scalar>(
    scheme: &PartitionScheme,
    sys: &SystemSpec<T>,
) -> Result<EvaluationRecord<T>, EvalError> {
    sys.evaluate_scheme(scheme)
}
