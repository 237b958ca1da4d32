//! Memory footprint of a platform segment, memory-minimizing branch
//! schedules, and capacity filtering.
//!
//! A segment's footprint is its parameters plus the peak number of live
//! feature-map elements, scaled by the platform bit width. A tensor is live
//! from the step that produces it (or from the segment start if it arrives
//! from an earlier platform) until its last consumer inside the segment has
//! run; tensors leaving the segment, and network outputs, stay live until
//! the segment ends. On a branch-free segment this reduces to the largest
//! `in_elems + out_elems` of any layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost::PlatformModel;
use crate::evaluator::PartitionScheme;
use crate::graph::{branch_regions, topo_order, BranchRegion, DnnGraph, LayerOrder};
use crate::scalar::Scalar;

/// Orders enumerated exhaustively before falling back to the greedy
/// schedule.
pub const DEFAULT_ORDER_LIMIT: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("invalid segment {lo}..{hi} for {len} layers")]
    InvalidRange { lo: usize, hi: usize, len: usize },
}

/// Bytes needed for `elems` elements at `bits` bits each, rounded up.
pub fn elems_to_bytes(elems: u64, bits: u32) -> u64 {
    (elems * u64::from(bits)).div_ceil(8)
}

/// Peak live feature-map elements while executing `order[lo..hi)`.
pub fn segment_peak_elems(
    graph: &DnnGraph,
    order: &LayerOrder,
    lo: usize,
    hi: usize,
) -> Result<u64, MemoryError> {
    check_range(graph, lo, hi)?;
    Ok(live_peak(graph, &order.order, &order.positions(), lo, hi))
}

/// Bytes required on a platform of `bits` precision to execute
/// `order[lo..hi)`. An empty segment needs nothing.
pub fn segment_memory(
    graph: &DnnGraph,
    order: &LayerOrder,
    lo: usize,
    hi: usize,
    bits: u32,
) -> Result<u64, MemoryError> {
    check_range(graph, lo, hi)?;
    Ok(segment_bytes(
        graph,
        &order.order,
        &order.positions(),
        lo,
        hi,
        bits,
    ))
}

fn check_range(graph: &DnnGraph, lo: usize, hi: usize) -> Result<(), MemoryError> {
    if lo > hi || hi > graph.len() {
        return Err(MemoryError::InvalidRange {
            lo,
            hi,
            len: graph.len(),
        });
    }
    Ok(())
}

pub(crate) fn segment_bytes(
    graph: &DnnGraph,
    order: &[usize],
    pos: &[usize],
    lo: usize,
    hi: usize,
    bits: u32,
) -> u64 {
    if lo == hi {
        return 0;
    }
    let params: u64 = order[lo..hi]
        .iter()
        .map(|&v| graph.layer(v).param_count)
        .sum();
    elems_to_bytes(params + live_peak(graph, order, pos, lo, hi), bits)
}

fn live_peak(graph: &DnnGraph, order: &[usize], pos: &[usize], lo: usize, hi: usize) -> u64 {
    if lo == hi {
        return 0;
    }
    let steps = hi - lo;
    // delta[i] is applied when entering step lo + i
    let mut delta = vec![0i128; steps + 1];
    let mut add = |start: usize, end: usize, size: u64| {
        delta[start - lo] += i128::from(size);
        delta[end - lo + 1] -= i128::from(size);
    };
    for p in 0..graph.len() {
        let pp = pos[p];
        if pp >= hi {
            continue;
        }
        let succs = graph.succs(p);
        let leaves = succs.is_empty() || succs.iter().any(|&w| pos[w] >= hi);
        let last_inside = succs
            .iter()
            .map(|&w| pos[w])
            .filter(|&q| q >= lo && q < hi)
            .max();
        let size = graph.layer(p).out_elems;
        if pp >= lo {
            let end = if leaves {
                hi - 1
            } else {
                last_inside.unwrap_or(pp)
            };
            add(pp, end, size);
        } else if leaves && succs.iter().any(|&w| pos[w] >= lo) {
            add(lo, hi - 1, size);
        } else if let Some(end) = last_inside {
            add(lo, end, size);
        }
    }
    for &v in &order[lo..hi] {
        let ext = graph.external_input_elems(v);
        if ext > 0 {
            add(lo, pos[v], ext);
        }
    }
    let mut live = 0i128;
    let mut peak = 0i128;
    for d in &delta[..steps] {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}

/// A schedule for a fork/join region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryOrder {
    pub order: LayerOrder,
    pub peak_elems: u64,
    /// `true` if found by exhaustive enumeration, `false` for the greedy
    /// fallback.
    pub exact: bool,
}

struct Liveness<'g> {
    graph: &'g DnnGraph,
    ext: Vec<u64>,
}

impl<'g> Liveness<'g> {
    fn new(graph: &'g DnnGraph) -> Self {
        let ext = (0..graph.len())
            .map(|v| graph.external_input_elems(v))
            .collect();
        Self { graph, ext }
    }

    fn still_needed(&self, p: usize, done: &[bool]) -> bool {
        let succs = self.graph.succs(p);
        succs.is_empty() || succs.iter().any(|&w| !done[w])
    }

    /// Live elements while `v` executes after the layers in `done`.
    fn during(&self, done: &[bool], v: usize) -> u64 {
        let mut live = self.graph.layer(v).out_elems;
        for u in 0..self.graph.len() {
            if done[u] {
                if self.still_needed(u, done) {
                    live += self.graph.layer(u).out_elems;
                }
            } else {
                live += self.ext[u];
            }
        }
        live
    }

    /// Live elements right after `v` completes.
    fn after(&self, done: &mut [bool], v: usize) -> u64 {
        done[v] = true;
        let mut live = 0;
        for u in 0..self.graph.len() {
            if done[u] {
                if self.still_needed(u, done) {
                    live += self.graph.layer(u).out_elems;
                }
            } else {
                live += self.ext[u];
            }
        }
        done[v] = false;
        live
    }
}

fn ready_nodes(graph: &DnnGraph, indeg: &[usize], done: &[bool]) -> Vec<usize> {
    (0..graph.len())
        .filter(|&v| !done[v] && indeg[v] == 0)
        .collect()
}

fn count_orders(
    graph: &DnnGraph,
    indeg: &mut [usize],
    done: &mut [bool],
    left: usize,
    cap: usize,
) -> usize {
    if left == 0 {
        return 1;
    }
    let mut total = 0;
    for v in ready_nodes(graph, indeg, done) {
        done[v] = true;
        graph.succs(v).iter().for_each(|&w| indeg[w] -= 1);
        total += count_orders(graph, indeg, done, left - 1, cap - total);
        graph.succs(v).iter().for_each(|&w| indeg[w] += 1);
        done[v] = false;
        if total > cap {
            break;
        }
    }
    total
}

/// Number of topological orders of `graph`, saturating just above `cap`.
pub fn count_topological_orders(graph: &DnnGraph, cap: usize) -> usize {
    let mut indeg: Vec<usize> = (0..graph.len()).map(|v| graph.preds(v).len()).collect();
    let mut done = vec![false; graph.len()];
    count_orders(graph, &mut indeg, &mut done, graph.len(), cap)
}

struct Search<'a> {
    live: Liveness<'a>,
    indeg: Vec<usize>,
    done: Vec<bool>,
    path: Vec<usize>,
    best: Option<(u64, Vec<usize>)>,
}

impl Search<'_> {
    fn run(&mut self, peak: u64) {
        if let Some((b, _)) = &self.best {
            if peak >= *b {
                return;
            }
        }
        let graph = self.live.graph;
        if self.path.len() == graph.len() {
            self.best = Some((peak, self.path.clone()));
            return;
        }
        for v in ready_nodes(graph, &self.indeg, &self.done) {
            let step = self.live.during(&self.done, v);
            self.done[v] = true;
            self.path.push(v);
            graph.succs(v).iter().for_each(|&w| self.indeg[w] -= 1);
            self.run(peak.max(step));
            graph.succs(v).iter().for_each(|&w| self.indeg[w] += 1);
            self.path.pop();
            self.done[v] = false;
        }
    }
}

/// Schedule of `region` with the smallest peak of live elements.
///
/// Regions with at most `limit` topological orders are searched
/// exhaustively (with branch-and-bound pruning); larger ones get a greedy
/// schedule that always runs the ready layer leaving the smallest live set,
/// breaking ties by smaller output and then by id.
pub fn min_memory_order(region: &DnnGraph, limit: usize) -> MemoryOrder {
    if region.is_empty() {
        return MemoryOrder {
            order: LayerOrder::new(Vec::new(), 0),
            peak_elems: 0,
            exact: true,
        };
    }
    if count_topological_orders(region, limit) <= limit {
        let mut search = Search {
            live: Liveness::new(region),
            indeg: (0..region.len()).map(|v| region.preds(v).len()).collect(),
            done: vec![false; region.len()],
            path: Vec::with_capacity(region.len()),
            best: None,
        };
        search.run(0);
        let (peak, order) = search.best.expect("a DAG has at least one order");
        return MemoryOrder {
            order: LayerOrder::new(order, 0),
            peak_elems: peak,
            exact: true,
        };
    }
    greedy_order(region)
}

/// Greedy fallback of [`min_memory_order`].
pub fn greedy_order(region: &DnnGraph) -> MemoryOrder {
    let live = Liveness::new(region);
    let mut indeg: Vec<usize> = (0..region.len()).map(|v| region.preds(v).len()).collect();
    let mut done = vec![false; region.len()];
    let mut order = Vec::with_capacity(region.len());
    let mut peak = 0;
    while order.len() < region.len() {
        let v = ready_nodes(region, &indeg, &done)
            .into_iter()
            .min_by(|&a, &b| {
                let (la, lb) = (live.after(&mut done, a), live.after(&mut done, b));
                let (la_, lb_) = (region.layer(a), region.layer(b));
                la.cmp(&lb)
                    .then(la_.out_elems.cmp(&lb_.out_elems))
                    .then(la_.id.cmp(&lb_.id))
            })
            .expect("DAG always has a ready layer");
        peak = peak.max(live.during(&done, v));
        done[v] = true;
        region.succs(v).iter().for_each(|&w| indeg[w] -= 1);
        order.push(v);
    }
    MemoryOrder {
        order: LayerOrder::new(order, 0),
        peak_elems: peak,
        exact: false,
    }
}

/// A network order in which every fork/join region runs its
/// memory-minimizing schedule as one contiguous block.
#[derive(Debug, Clone)]
pub struct ScheduledOrder {
    pub order: LayerOrder,
    pub regions: Vec<(BranchRegion, MemoryOrder)>,
}

/// Seeded topological order where fork/join regions are scheduled with
/// [`min_memory_order`] and placed as blocks. Independent layers and blocks
/// are interleaved with the same seeded tie-breaking as
/// [`topo_order`](crate::graph::topo_order).
pub fn schedule_order(graph: &DnnGraph, seed: u64, limit: usize) -> ScheduledOrder {
    let regions: Vec<(BranchRegion, MemoryOrder)> = branch_regions(graph)
        .into_iter()
        .map(|r| {
            let sub = graph.induced_subgraph("region", &r.nodes);
            let mut best = min_memory_order(&sub, limit);
            best.order.order = best.order.order.iter().map(|&i| r.nodes[i]).collect();
            best.order.seed = seed;
            (r, best)
        })
        .collect();

    let mut item_of = vec![usize::MAX; graph.len()];
    let mut items: Vec<Vec<usize>> = Vec::new();
    for (_, sched) in &regions {
        let unit: Vec<usize> = sched
            .order
            .order
            .iter()
            .copied()
            .filter(|&v| item_of[v] == usize::MAX)
            .collect();
        for &v in &unit {
            item_of[v] = items.len();
        }
        items.push(unit);
    }
    for (v, slot) in item_of.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = items.len();
            items.push(vec![v]);
        }
    }
    let order =
        kahn_blocks(graph, &items, &item_of, seed).unwrap_or_else(|| topo_order(graph, seed).order);
    ScheduledOrder {
        order: LayerOrder::new(order, seed),
        regions,
    }
}

fn kahn_blocks(
    graph: &DnnGraph,
    items: &[Vec<usize>],
    item_of: &[usize],
    seed: u64,
) -> Option<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocking = vec![0usize; items.len()];
    for &(p, c) in graph.edge_indices() {
        if item_of[p] != item_of[c] {
            blocking[item_of[c]] += 1;
        }
    }
    let first_layer = |i: usize| items[i].iter().copied().min().unwrap_or(usize::MAX);
    let mut ready: Vec<usize> = (0..items.len()).filter(|&i| blocking[i] == 0).collect();
    ready.sort_by_key(|&i| first_layer(i));
    let mut out = Vec::with_capacity(graph.len());
    let mut emitted = 0;
    while !ready.is_empty() {
        let item = ready.remove(rng.gen_range(0..ready.len()));
        emitted += 1;
        for &v in &items[item] {
            out.push(v);
            for &w in graph.succs(v) {
                let target = item_of[w];
                if target != item {
                    blocking[target] -= 1;
                    if blocking[target] == 0 {
                        let key = first_layer(target);
                        let at = ready.partition_point(|&r| first_layer(r) < key);
                        ready.insert(at, target);
                    }
                }
            }
        }
    }
    (emitted == items.len()).then_some(out)
}

/// Per-platform memory of one partitioning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub per_platform_bytes: Vec<(String, u64)>,
    pub peak_live_elems: Vec<u64>,
    /// The layer order restricted to each fork/join region.
    pub schedule_used: Vec<LayerOrder>,
}

/// Checks every platform's segment against its capacity (inclusive).
pub fn memory_feasible<T: Scalar>(
    graph: &DnnGraph,
    order: &LayerOrder,
    scheme: &PartitionScheme,
    platforms: &[PlatformModel<T>],
) -> (bool, MemoryReport) {
    let regions = branch_regions(graph);
    let pos = order.positions();
    let (feasible, mut report) = memory_check(graph, &order.order, &pos, scheme, platforms);
    report.schedule_used = regions
        .iter()
        .map(|r| {
            let mut nodes = r.nodes.clone();
            nodes.sort_by_key(|&v| pos[v]);
            LayerOrder::new(nodes, order.seed)
        })
        .collect();
    (feasible, report)
}

pub(crate) fn memory_check<T: Scalar>(
    graph: &DnnGraph,
    order: &[usize],
    pos: &[usize],
    scheme: &PartitionScheme,
    platforms: &[PlatformModel<T>],
) -> (bool, MemoryReport) {
    let mut feasible = true;
    let mut per_platform_bytes = Vec::with_capacity(platforms.len());
    let mut peak_live_elems = Vec::with_capacity(platforms.len());
    for (k, p) in platforms.iter().enumerate() {
        let (lo, hi) = scheme.segment(k, graph.len());
        let peak = live_peak(graph, order, pos, lo, hi);
        let bytes = segment_bytes(graph, order, pos, lo, hi, p.bits);
        feasible &= bytes <= p.mem_capacity_bytes;
        per_platform_bytes.push((p.name.clone(), bytes));
        peak_live_elems.push(peak);
    }
    (
        feasible,
        MemoryReport {
            per_platform_bytes,
            peak_live_elems,
            schedule_used: Vec::new(),
        },
    )
}
