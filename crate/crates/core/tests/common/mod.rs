#![allow(dead_code)]

use std::collections::BTreeMap;

use dnnpart::cost::{AccuracyModel, CostEntry, LinkModel, PlatformModel};
use dnnpart::evaluator::{Constraints, Metric, ObjectiveWeights, SystemSpec};
use dnnpart::graph::{topo_order, DnnGraph, LayerNode};
use rand::Rng;

pub fn chain(rng: &mut impl Rng, len: usize) -> DnnGraph {
    let mut layers = Vec::with_capacity(len);
    let mut prev_out = rng.gen_range(1..5_000u64);
    for i in 0..len {
        let out = rng.gen_range(1..5_000u64);
        let params = if rng.gen_bool(0.3) {
            0
        } else {
            rng.gen_range(0..20_000u64)
        };
        layers.push(LayerNode::new(format!("l{i}"), "Op", params, prev_out, out));
        prev_out = out;
    }
    let names: Vec<String> = (0..len).map(|i| format!("l{i}")).collect();
    let edges: Vec<(&str, &str)> = names
        .windows(2)
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    DnnGraph::new("chain", layers, &edges).unwrap()
}

/// Builds a graph from index edges, deriving `in_elems` from the
/// producers plus a random external input for sources.
pub fn from_edges(
    rng: &mut impl Rng,
    n: usize,
    edges: &[(usize, usize)],
    prefix: &str,
) -> DnnGraph {
    let outs: Vec<u64> = (0..n).map(|_| rng.gen_range(1..1_000u64)).collect();
    let layers = (0..n)
        .map(|v| {
            let from_preds: u64 = edges.iter().filter(|e| e.1 == v).map(|e| outs[e.0]).sum();
            let input = if from_preds == 0 {
                rng.gen_range(1..1_000u64)
            } else {
                from_preds
            };
            LayerNode::new(
                format!("{prefix}{v}"),
                "Op",
                rng.gen_range(0..500u64),
                input,
                outs[v],
            )
        })
        .collect();
    let names: Vec<String> = (0..n).map(|v| format!("{prefix}{v}")).collect();
    let e: Vec<(&str, &str)> = edges
        .iter()
        .map(|&(a, b)| (names[a].as_str(), names[b].as_str()))
        .collect();
    DnnGraph::new("dag", layers, &e).unwrap()
}

/// Random single-entry single-exit DAG on `n >= 3` nodes: node 0 forks,
/// node `n-1` joins, every inner node has a producer before it and a
/// consumer after it.
pub fn fork_join_edges(rng: &mut impl Rng, n: usize, offset: usize) -> Vec<(usize, usize)> {
    let mut edges = std::collections::BTreeSet::new();
    for j in 1..n - 1 {
        edges.insert((rng.gen_range(0..j), j));
        edges.insert((j, rng.gen_range(j + 1..n)));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.15) {
                edges.insert((a, b));
            }
        }
    }
    edges
        .into_iter()
        .map(|(a, b)| (a + offset, b + offset))
        .collect()
}

/// A chain stub, then one or two random fork/join blocks in sequence,
/// then another stub.
pub fn branchy_graph(rng: &mut impl Rng) -> DnnGraph {
    let mut edges = Vec::new();
    let mut next = 0usize;
    let stub = rng.gen_range(0..3usize);
    for _ in 0..stub {
        edges.push((next, next + 1));
        next += 1;
    }
    for _ in 0..rng.gen_range(1..=2) {
        let size = rng.gen_range(3..=8usize);
        edges.extend(fork_join_edges(rng, size, next));
        next += size - 1;
        if rng.gen_bool(0.5) {
            edges.push((next, next + 1));
            next += 1;
        }
    }
    from_edges(rng, next + 1, &edges, "n")
}

pub fn platform(
    name: &str,
    bits: u32,
    capacity: u64,
    graph: &DnnGraph,
    rng: &mut impl Rng,
) -> PlatformModel<f64> {
    let cost_table: BTreeMap<String, CostEntry<f64>> = graph
        .layers()
        .iter()
        .map(|l| {
            (
                l.id.clone(),
                CostEntry::new(rng.gen_range(1e-4..5e-3), rng.gen_range(1e-5..5e-3)),
            )
        })
        .collect();
    PlatformModel {
        name: name.to_string(),
        bits,
        mem_capacity_bytes: capacity,
        default_cost: None,
        cost_table,
    }
}

pub fn link(name: &str, rng: &mut impl Rng) -> LinkModel<f64> {
    LinkModel {
        name: name.to_string(),
        bandwidth_bps: rng.gen_range(1e6..1e9),
        fixed_latency_s: rng.gen_range(0.0..1e-3),
        energy_per_bit_j: rng.gen_range(0.0..1e-8),
        fixed_energy_j: rng.gen_range(0.0..1e-4),
    }
}

/// Random chain system with `platforms` accelerators of random precision.
pub fn random_system(rng: &mut impl Rng, layers: usize, platforms: usize) -> SystemSpec<f64> {
    let graph = chain(rng, layers);
    let order = topo_order(&graph, 0);
    let total_bytes = graph.total_params() * 4 + 40_000;
    let ps = (0..platforms)
        .map(|k| {
            let bits = [4, 8, 16, 32][rng.gen_range(0..4)];
            platform(
                &format!("P{k}"),
                bits,
                rng.gen_range(total_bytes / 4..total_bytes * 2),
                &graph,
                rng,
            )
        })
        .collect();
    let ls = (1..platforms)
        .map(|k| link(&format!("L{k}"), rng))
        .collect();
    SystemSpec::new(
        graph,
        order,
        ps,
        ls,
        AccuracyModel::Constant { top1: 0.9 },
        Constraints::default(),
        ObjectiveWeights::single(Metric::Latency),
    )
    .unwrap()
}

/// Reads a `;` CSV into a header and rows.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap()
        .split(';')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(';').map(str::to_string).collect())
        .collect();
    (header, rows)
}

/// Peak live elements of one full-graph order, simulated directly.
pub fn simulate_peak(g: &DnnGraph, order: &[usize]) -> u64 {
    let n = order.len();
    let mut pos = vec![0; n];
    for (t, &v) in order.iter().enumerate() {
        pos[v] = t;
    }
    let ext: Vec<u64> = (0..n)
        .map(|v| {
            g.layer(v).in_elems
                - g.preds(v)
                    .iter()
                    .map(|&p| g.layer(p).out_elems)
                    .sum::<u64>()
        })
        .collect();
    let end: Vec<usize> = (0..n)
        .map(|v| g.succs(v).iter().map(|&s| pos[s]).max().unwrap_or(n - 1))
        .collect();
    (0..n)
        .map(|t| {
            let produced: u64 = (0..n)
                .filter(|&u| pos[u] <= t && t <= end[u])
                .map(|u| g.layer(u).out_elems)
                .sum();
            let external: u64 = (0..n).filter(|&w| t <= pos[w]).map(|w| ext[w]).sum();
            produced + external
        })
        .max()
        .unwrap_or(0)
}

pub fn all_orders(
    g: &DnnGraph,
    prefix: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    if prefix.len() == g.len() {
        out.push(prefix.clone());
        return;
    }
    for v in 0..g.len() {
        if !used[v] && g.preds(v).iter().all(|&p| used[p]) {
            used[v] = true;
            prefix.push(v);
            all_orders(g, prefix, used, out);
            prefix.pop();
            used[v] = false;
        }
    }
}
