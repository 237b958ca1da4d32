//! Network graph: parsing, validation, linearization and cut structure.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("graph has no layers")]
    Empty,
    #[error("empty layer id at position {0}")]
    EmptyId(usize),
    #[error("duplicate layer id {0}")]
    DuplicateLayer(String),
    #[error("unknown edge endpoint {endpoint} in edge {producer} -> {consumer}")]
    UnknownEndpoint {
        producer: String,
        consumer: String,
        endpoint: String,
    },
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("cycle detected through layer {0}")]
    Cycle(String),
    #[error("graph is disconnected: layer {0} is not connected to layer {1}")]
    Disconnected(String, String),
    #[error("in_elems mismatch at {id}: declared {declared}, predecessors produce {expected}")]
    InElemsMismatch {
        id: String,
        declared: u64,
        expected: u64,
    },
    #[error("cut {cut} out of range 0..={len}")]
    CutOutOfRange { cut: usize, len: usize },
    #[error("layer order does not match the graph: {0}")]
    BadOrder(String),
}

/// One layer of the network. Sizes are element counts, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNode {
    pub id: String,
    pub op: String,
    pub param_count: u64,
    pub in_elems: u64,
    pub out_elems: u64,
}

impl LayerNode {
    pub fn new(
        id: impl Into<String>,
        op: impl Into<String>,
        params: u64,
        in_elems: u64,
        out_elems: u64,
    ) -> Self {
        Self {
            id: id.into(),
            op: op.into(),
            param_count: params,
            in_elems,
            out_elems,
        }
    }

    /// Input plus output feature-map elements.
    pub fn activation_elems(&self) -> u64 {
        self.in_elems + self.out_elems
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    name: String,
    layers: Vec<LayerNode>,
    edges: Vec<(String, String)>,
}

/// Validated, immutable network DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnnGraph {
    name: String,
    layers: Vec<LayerNode>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

/// Parses and validates a graph document.
pub fn parse_graph(text: &str) -> Result<DnnGraph, GraphError> {
    let doc: GraphDoc =
        serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
    let edges = doc
        .edges
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect::<Vec<_>>();
    DnnGraph::new(doc.name, doc.layers, &edges)
}

impl DnnGraph {
    /// Builds a graph and checks every structural invariant.
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerNode>,
        edges: &[(&str, &str)],
    ) -> Result<Self, GraphError> {
        if layers.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut index = HashMap::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.id.is_empty() {
                return Err(GraphError::EmptyId(i));
            }
            if index.insert(layer.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateLayer(layer.id.clone()));
            }
        }
        let mut seen = HashSet::new();
        let mut resolved = Vec::with_capacity(edges.len());
        for &(p, c) in edges {
            let lookup = |endpoint: &str| {
                index
                    .get(endpoint)
                    .copied()
                    .ok_or_else(|| GraphError::UnknownEndpoint {
                        producer: p.to_string(),
                        consumer: c.to_string(),
                        endpoint: endpoint.to_string(),
                    })
            };
            let (pi, ci) = (lookup(p)?, lookup(c)?);
            if pi == ci {
                return Err(GraphError::Cycle(p.to_string()));
            }
            if !seen.insert((pi, ci)) {
                return Err(GraphError::DuplicateEdge(p.to_string(), c.to_string()));
            }
            resolved.push((pi, ci));
        }
        let graph = Self::from_parts(name.into(), layers, resolved);
        graph.validate()?;
        Ok(graph)
    }

    /// Assembles a graph from already-resolved edges without validation.
    fn from_parts(name: String, layers: Vec<LayerNode>, edges: Vec<(usize, usize)>) -> Self {
        let n = layers.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for &(p, c) in &edges {
            succs[p].push(c);
            preds[c].push(p);
        }
        let index = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        Self {
            name,
            layers,
            edges,
            preds,
            succs,
            index,
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        if let Some(v) = self.kahn_remainder() {
            return Err(GraphError::Cycle(self.layers[v].id.clone()));
        }
        // weak connectivity
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in self.preds[v].iter().chain(&self.succs[v]) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(GraphError::Disconnected(
                self.layers[v].id.clone(),
                self.layers[0].id.clone(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if self.preds[i].is_empty() {
                continue;
            }
            let expected: u64 = self.preds[i]
                .iter()
                .map(|&p| self.layers[p].out_elems)
                .sum();
            if expected != layer.in_elems {
                return Err(GraphError::InElemsMismatch {
                    id: layer.id.clone(),
                    declared: layer.in_elems,
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Runs Kahn's algorithm; returns a node left over if there is a cycle.
    fn kahn_remainder(&self) -> Option<usize> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut stack: Vec<usize> = (0..self.len()).filter(|&v| indeg[v] == 0).collect();
        let mut done = 0;
        while let Some(v) = stack.pop() {
            done += 1;
            for &w in &self.succs[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    stack.push(w);
                }
            }
        }
        (done < self.len()).then(|| indeg.iter().position(|&d| d > 0).unwrap_or(0))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of layers.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerNode {
        &self.layers[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn preds(&self, idx: usize) -> &[usize] {
        &self.preds[idx]
    }

    pub fn succs(&self, idx: usize) -> &[usize] {
        &self.succs[idx]
    }

    /// Edges as (producer, consumer) layer indices, in declaration order.
    pub fn edge_indices(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .map(|&(p, c)| (self.layers[p].id.as_str(), self.layers[c].id.as_str()))
    }

    pub fn sources(&self) -> Vec<&str> {
        (0..self.len())
            .filter(|&i| self.preds[i].is_empty())
            .map(|i| self.layers[i].id.as_str())
            .collect()
    }

    pub fn sinks(&self) -> Vec<&str> {
        (0..self.len())
            .filter(|&i| self.succs[i].is_empty())
            .map(|i| self.layers[i].id.as_str())
            .collect()
    }

    /// Input elements of `idx` that do not come from a predecessor inside
    /// this graph (the network input for sources, external tensors for
    /// region subgraphs).
    pub fn external_input_elems(&self, idx: usize) -> u64 {
        let internal: u64 = self.preds[idx]
            .iter()
            .map(|&p| self.layers[p].out_elems)
            .sum();
        self.layers[idx].in_elems.saturating_sub(internal)
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    /// Serializes back into the graph document format.
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            name: self.name.clone(),
            layers: self.layers.clone(),
            edges: self
                .edges()
                .map(|(p, c)| (p.to_string(), c.to_string()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph document serializes")
    }

    /// Induced subgraph over `nodes` (indices into this graph), keeping
    /// declaration order. Not re-validated: boundary layers may receive
    /// input from outside the subgraph.
    pub fn induced_subgraph(&self, name: impl Into<String>, nodes: &[usize]) -> DnnGraph {
        let mut keep: Vec<usize> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let layers = keep.iter().map(|&i| self.layers[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter(|&&(p, c)| remap[p] != usize::MAX && remap[c] != usize::MAX)
            .map(|&(p, c)| (remap[p], remap[c]))
            .collect();
        DnnGraph::from_parts(name.into(), layers, edges)
    }

    /// Deterministic topological order (smallest declaration index first).
    pub(crate) fn canonical_topo(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&v| indeg[v] == 0).collect();
        let mut out = Vec::with_capacity(self.len());
        while let Some(v) = ready.pop_first() {
            out.push(v);
            for &w in &self.succs[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        out
    }
}

/// A linearization of the graph's layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOrder {
    /// Layer indices in execution order.
    pub order: Vec<usize>,
    pub seed: u64,
}

impl LayerOrder {
    pub fn new(order: Vec<usize>, seed: u64) -> Self {
        Self { order, seed }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids<'g>(&self, graph: &'g DnnGraph) -> Vec<&'g str> {
        self.order
            .iter()
            .map(|&i| graph.layer(i).id.as_str())
            .collect()
    }

    /// `positions()[layer] = step` at which the layer executes.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![usize::MAX; self.order.len()];
        for (step, &v) in self.order.iter().enumerate() {
            if v < pos.len() {
                pos[v] = step;
            }
        }
        pos
    }

    /// Checks that this is a permutation of the graph's layers respecting
    /// every edge.
    pub fn check(&self, graph: &DnnGraph) -> Result<(), GraphError> {
        if self.order.len() != graph.len() {
            return Err(GraphError::BadOrder(format!(
                "{} entries for {} layers",
                self.order.len(),
                graph.len()
            )));
        }
        let mut seen = vec![false; graph.len()];
        for &v in &self.order {
            if v >= graph.len() || seen[v] {
                return Err(GraphError::BadOrder(format!(
                    "entry {v} is out of range or repeated"
                )));
            }
            seen[v] = true;
        }
        let pos = self.positions();
        for (p, c) in graph.edges() {
            let (pi, ci) = (graph.index_of(p).unwrap(), graph.index_of(c).unwrap());
            if pos[pi] > pos[ci] {
                return Err(GraphError::BadOrder(format!(
                    "{c} scheduled before its producer {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Topological sort with seeded random tie-breaking.
///
/// The tie-breaking stream is ChaCha8 seeded with `seed` through
/// `SeedableRng::seed_from_u64`. At every step the ready layers, kept sorted
/// by declaration index, are indexed with `gen_range(0..ready.len())`.
pub fn topo_order(graph: &DnnGraph, seed: u64) -> LayerOrder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indeg: Vec<usize> = (0..graph.len()).map(|v| graph.preds(v).len()).collect();
    let mut ready: Vec<usize> = (0..graph.len()).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(graph.len());
    while !ready.is_empty() {
        let v = ready.remove(rng.gen_range(0..ready.len()));
        order.push(v);
        for &w in graph.succs(v) {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                let at = ready.partition_point(|&r| r < w);
                ready.insert(at, w);
            }
        }
    }
    LayerOrder::new(order, seed)
}

/// A fork/join region: the layers between a fork and its immediate
/// post-dominator, both inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchRegion {
    /// Layer indices, ascending.
    pub nodes: Vec<usize>,
    /// Fork layer; `None` when the region starts at several network inputs.
    pub entry: Option<usize>,
    /// Join layer; `None` when the branches end in separate network outputs.
    pub exit: Option<usize>,
}

struct Bitset(Vec<u64>);

impl Bitset {
    fn new(n: usize) -> Self {
        Bitset(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn union_with(&mut self, other: &Bitset) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

/// Immediate post-dominators on the graph extended with a virtual source
/// (index `n`) and virtual sink (index `n + 1`).
fn immediate_post_dominators(graph: &DnnGraph, topo: &[usize]) -> Vec<usize> {
    let n = graph.len();
    let (vsrc, vsink) = (n, n + 1);
    let succ = |v: usize| -> Vec<usize> {
        if v == vsrc {
            (0..n).filter(|&s| graph.preds(s).is_empty()).collect()
        } else if graph.succs(v).is_empty() {
            vec![vsink]
        } else {
            graph.succs(v).to_vec()
        }
    };
    let mut ipdom = vec![usize::MAX; n + 2];
    let mut depth = vec![0usize; n + 2];
    ipdom[vsink] = vsink;
    let intersect = |mut a: usize, mut b: usize, ipdom: &[usize], depth: &[usize]| {
        while a != b {
            if depth[a] >= depth[b] {
                a = ipdom[a];
            } else {
                b = ipdom[b];
            }
        }
        a
    };
    for &v in topo.iter().rev().chain(std::iter::once(&vsrc)) {
        let mut it = succ(v).into_iter();
        let mut cur = it
            .next()
            .expect("every node has a successor in the extended graph");
        for s in it {
            cur = intersect(cur, s, &ipdom, &depth);
        }
        ipdom[v] = cur;
        depth[v] = depth[cur] + 1;
    }
    ipdom
}

/// Maximal fork/join regions of the graph. Nested regions are absorbed by
/// the outermost region containing them; partially overlapping candidates
/// are merged. A pure chain has no regions.
pub fn branch_regions(graph: &DnnGraph) -> Vec<BranchRegion> {
    let n = graph.len();
    let topo = graph.canonical_topo();
    let ipdom = immediate_post_dominators(graph, &topo);
    let (vsrc, vsink) = (n, n + 1);

    let mut desc: Vec<Bitset> = (0..n).map(|_| Bitset::new(n)).collect();
    for &v in topo.iter().rev() {
        desc[v].set(v);
        for &w in graph.succs(v) {
            let (lo, hi) = desc.split_at_mut(v.max(w));
            let (dv, dw) = if v < w {
                (&mut lo[v], &hi[0])
            } else {
                (&mut hi[0], &lo[w])
            };
            dv.union_with(dw);
        }
    }

    let sources = (0..n).filter(|&v| graph.preds(v).is_empty()).count();
    let mut forks: Vec<usize> = topo
        .iter()
        .copied()
        .filter(|&v| graph.succs(v).len() >= 2)
        .collect();
    if sources >= 2 {
        forks.insert(0, vsrc);
    }

    let mut candidates: Vec<BranchRegion> = forks
        .into_iter()
        .map(|f| {
            let join = ipdom[f];
            let nodes = (0..n)
                .filter(|&v| f == vsrc || desc[f].get(v))
                .filter(|&v| join == vsink || desc[v].get(join))
                .collect();
            BranchRegion {
                nodes,
                entry: (f != vsrc).then_some(f),
                exit: (join != vsink).then_some(join),
            }
        })
        .collect();
    candidates.sort_by_key(|c| std::cmp::Reverse(c.nodes.len()));

    let mut accepted: Vec<BranchRegion> = Vec::new();
    for cand in candidates {
        let cand_set: HashSet<usize> = cand.nodes.iter().copied().collect();
        let mut absorbed = false;
        let mut merge_into = Vec::new();
        for (k, acc) in accepted.iter().enumerate() {
            let shared: Vec<usize> = acc
                .nodes
                .iter()
                .copied()
                .filter(|v| cand_set.contains(v))
                .collect();
            if shared.len() == cand.nodes.len() {
                absorbed = true;
                break;
            }
            let boundary_touch = shared.len() == 1
                && [cand.entry, cand.exit].contains(&Some(shared[0]))
                && [acc.entry, acc.exit].contains(&Some(shared[0]));
            if !shared.is_empty() && !boundary_touch {
                merge_into.push(k);
            }
        }
        if absorbed {
            continue;
        }
        let mut region = cand;
        for k in merge_into.into_iter().rev() {
            let other = accepted.remove(k);
            region = merge_regions(region, other, &topo);
        }
        accepted.push(region);
    }
    let pos = {
        let mut pos = vec![0; n];
        for (i, &v) in topo.iter().enumerate() {
            pos[v] = i;
        }
        pos
    };
    accepted.sort_by_key(|r| r.nodes.iter().map(|&v| pos[v]).min().unwrap_or(0));
    accepted
}

fn merge_regions(a: BranchRegion, b: BranchRegion, topo: &[usize]) -> BranchRegion {
    let mut nodes: Vec<usize> = a.nodes.iter().chain(&b.nodes).copied().collect();
    nodes.sort_unstable();
    nodes.dedup();
    let rank = |v: Option<usize>| v.and_then(|v| topo.iter().position(|&t| t == v));
    let entry = match (a.entry, b.entry) {
        (Some(x), Some(y)) => Some(if rank(Some(x)) <= rank(Some(y)) { x } else { y }),
        _ => None,
    };
    let exit = match (a.exit, b.exit) {
        (Some(x), Some(y)) => Some(if rank(Some(x)) >= rank(Some(y)) { x } else { y }),
        _ => None,
    };
    BranchRegion { nodes, entry, exit }
}

/// Fork/join regions as standalone subgraphs.
pub fn branch_subgraphs(graph: &DnnGraph) -> Vec<DnnGraph> {
    branch_regions(graph)
        .iter()
        .enumerate()
        .map(|(k, r)| graph.induced_subgraph(format!("{}/region{}", graph.name(), k), &r.nodes))
        .collect()
}

/// Producers in the first `cut` layers of `order` whose output is consumed
/// after the cut, as layer indices in order of execution.
pub fn crossing_producers(
    graph: &DnnGraph,
    order: &LayerOrder,
    cut: usize,
) -> Result<Vec<usize>, GraphError> {
    if cut > graph.len() {
        return Err(GraphError::CutOutOfRange {
            cut,
            len: graph.len(),
        });
    }
    let pos = order.positions();
    Ok(order.order[..cut]
        .iter()
        .copied()
        .filter(|&v| graph.succs(v).iter().any(|&w| pos[w] >= cut))
        .collect())
}

/// Ids of the layers whose output tensors cross the cut.
pub fn cut_tensors(
    graph: &DnnGraph,
    order: &LayerOrder,
    cut: usize,
) -> Result<BTreeSet<String>, GraphError> {
    Ok(crossing_producers(graph, order, cut)?
        .into_iter()
        .map(|v| graph.layer(v).id.clone())
        .collect())
}
