//! Pareto search over partitioning schemes: exhaustive enumeration for
//! small spaces and NSGA-II for the rest, plus weighted-sum selection of
//! the final point.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::evaluator::{
    weighted_cost, EvalError, EvaluationRecord, Metric, ObjectiveWeights, PartitionScheme,
    SystemSpec,
};
use crate::scalar::Scalar;

/// Largest scheme space [`exhaustive_pareto`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(
        "scheme space has {count} schemes, more than the exhaustive limit of {EXHAUSTIVE_LIMIT}"
    )]
    SpaceTooLarge { count: u128 },
    #[error("invalid GA parameters: {0}")]
    BadParams(String),
    #[error("cannot select from an empty front")]
    EmptyFront,
}

/// `x` dominates `y`: no worse everywhere, strictly better somewhere
/// (all objectives minimized).
pub fn dominates<T: Scalar>(x: &[T], y: &[T]) -> bool {
    let mut strictly = false;
    for (a, b) in x.iter().zip(y) {
        if a > b {
            return false;
        }
        strictly |= a < b;
    }
    strictly
}

/// Fast non-dominated sorting of objective vectors. Returns fronts of
/// indices, best first; indices inside a front are ascending.
pub fn sort_fronts<T: Scalar>(points: &[Vec<T>]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

fn objective_vector<T: Scalar>(rec: &EvaluationRecord<T>, objectives: &[Metric]) -> Vec<T> {
    objectives.iter().map(|&m| rec.objective(m)).collect()
}

/// Non-dominated sorting of evaluated records on the given objectives
/// (benefit metrics compared inverted).
pub fn non_dominated_sort<T: Scalar>(
    records: &[EvaluationRecord<T>],
    objectives: &[Metric],
) -> Vec<Vec<usize>> {
    let points: Vec<Vec<T>> = records
        .iter()
        .map(|r| objective_vector(r, objectives))
        .collect();
    sort_fronts(&points)
}

/// Crowding distance of each point of one front. Extreme points on any
/// objective get `+inf`; an objective with zero range adds nothing.
#[allow(clippy::needless_range_loop)]
pub fn crowding_distance<T: Scalar>(front: &[Vec<T>]) -> Vec<T> {
    let n = front.len();
    let mut dist = vec![T::zero(); n];
    if n == 0 {
        return dist;
    }
    let m = front[0].len();
    let mut idx: Vec<usize> = (0..n).collect();
    for obj in 0..m {
        idx.sort_by(|&a, &b| {
            front[a][obj]
                .partial_cmp(&front[b][obj])
                .unwrap_or(Ordering::Equal)
        });
        dist[idx[0]] = T::infinity();
        dist[idx[n - 1]] = T::infinity();
        let range = front[idx[n - 1]][obj] - front[idx[0]][obj];
        if !(range.is_finite() && range > T::zero()) {
            continue;
        }
        for w in 1..n.saturating_sub(1) {
            let gap = (front[idx[w + 1]][obj] - front[idx[w - 1]][obj]) / range;
            if gap.is_finite() {
                dist[idx[w]] = dist[idx[w]] + gap;
            }
        }
    }
    dist
}

/// NSGA-II settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-gene probability of resetting a cut.
    pub mutation_rate: f64,
    pub seed: u64,
    pub objectives: Vec<Metric>,
}

impl GaParams {
    /// Defaults sized from the layer count `layers` and chain length
    /// `platforms`: population `max(20, 2*ceil(L/5))` (even), generations
    /// `max(25, L)`, crossover 0.9, mutation `max(0.1, 1/(N-1))` per gene.
    pub fn for_system(layers: usize, platforms: usize, seed: u64, objectives: Vec<Metric>) -> Self {
        let population = (2 * layers.div_ceil(5)).max(20);
        Self {
            population: population + population % 2,
            generations: layers.max(25),
            crossover_rate: 0.9,
            mutation_rate: (1.0 / platforms.saturating_sub(1).max(1) as f64).max(0.1),
            seed,
            objectives,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let fail = |m: &str| Err(OptimizeError::BadParams(m.to_string()));
        if self.population < 2 || !self.population.is_multiple_of(2) {
            return fail("population must be even and at least 2");
        }
        if self.generations == 0 {
            return fail("generations must be positive");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate)
        {
            return fail("rates must lie in [0, 1]");
        }
        if self.objectives.is_empty() {
            return fail("at least one objective is required");
        }
        Ok(())
    }
}

/// Result of a search: the feasible non-dominated records and the full
/// evaluation table.
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct ParetoFront<T> {
    pub objectives: Vec<Metric>,
    /// Front members sorted by cut vector.
    pub members: Vec<EvaluationRecord<T>>,
    /// Every evaluated scheme, sorted by cut vector.
    pub evaluated: Vec<EvaluationRecord<T>>,
    /// `dominated_flags[i]` is `false` iff `evaluated[i]` is a member.
    pub dominated_flags: Vec<bool>,
    pub evaluations: usize,
    pub generations_run: usize,
    /// Warnings, e.g. the constraints that ruled out every scheme.
    pub diagnostics: Vec<String>,
}

impl<T: Scalar> ParetoFront<T> {
    fn from_evaluated(
        mut evaluated: Vec<EvaluationRecord<T>>,
        objectives: &[Metric],
        generations_run: usize,
    ) -> Self {
        evaluated.sort_by(|a, b| a.scheme.cmp(&b.scheme));
        let feasible: Vec<usize> = (0..evaluated.len())
            .filter(|&i| evaluated[i].feasible)
            .collect();
        let points: Vec<Vec<T>> = feasible
            .iter()
            .map(|&i| objective_vector(&evaluated[i], objectives))
            .collect();
        let mut dominated_flags = vec![true; evaluated.len()];
        if let Some(first) = sort_fronts(&points).first() {
            for &k in first {
                dominated_flags[feasible[k]] = false;
            }
        }
        let members = evaluated
            .iter()
            .zip(&dominated_flags)
            .filter(|(_, &d)| !d)
            .map(|(r, _)| r.clone())
            .collect::<Vec<_>>();
        let mut diagnostics = Vec::new();
        if members.is_empty() {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &evaluated {
                for v in &r.violated {
                    *counts.entry(v.as_str()).or_default() += 1;
                }
            }
            let mut binding: Vec<(&str, usize)> = counts.into_iter().collect();
            binding.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let listed: Vec<String> = binding
                .iter()
                .map(|(n, c)| format!("{n} ({c} schemes)"))
                .collect();
            let msg = format!(
                "no feasible scheme among {} evaluated; binding constraints: {}",
                evaluated.len(),
                listed.join(", ")
            );
            log::warn!("{msg}");
            diagnostics.push(msg);
        }
        Self {
            objectives: objectives.to_vec(),
            evaluations: evaluated.len(),
            members,
            evaluated,
            dominated_flags,
            generations_run,
            diagnostics,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Number of monotone cut vectors, `C(L + N - 1, N - 1)`, saturating.
pub fn scheme_count(layers: usize, platforms: usize) -> u128 {
    let k = platforms.saturating_sub(1) as u128;
    let n = layers as u128 + k;
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul(n - i) / (i + 1);
    }
    c
}

/// Every monotone cut vector in lexicographic order.
pub fn enumerate_schemes(layers: usize, platforms: usize) -> Vec<PartitionScheme> {
    fn rec(
        depth: usize,
        genes: usize,
        min: usize,
        layers: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<PartitionScheme>,
    ) {
        if depth == genes {
            out.push(PartitionScheme::new(cur.clone()));
            return;
        }
        for c in min..=layers {
            cur.push(c);
            rec(depth + 1, genes, c, layers, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(
        0,
        platforms.saturating_sub(1),
        0,
        layers,
        &mut Vec::new(),
        &mut out,
    );
    out
}

/// Evaluates every scheme and returns the exact feasible Pareto set.
pub fn exhaustive_pareto<T: Scalar>(
    sys: &SystemSpec<T>,
    objectives: &[Metric],
) -> Result<ParetoFront<T>, OptimizeError> {
    let count = scheme_count(sys.layer_count(), sys.platform_count());
    if count > EXHAUSTIVE_LIMIT {
        return Err(OptimizeError::SpaceTooLarge { count });
    }
    let evaluated = enumerate_schemes(sys.layer_count(), sys.platform_count())
        .par_iter()
        .map(|s| sys.evaluate_scheme(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParetoFront::from_evaluated(evaluated, objectives, 0))
}

/// Memoized evaluation table; every distinct scheme is evaluated once.
struct Archive<'s, T> {
    sys: &'s SystemSpec<T>,
    index: HashMap<Vec<usize>, usize>,
    records: Vec<EvaluationRecord<T>>,
    points: Vec<Vec<T>>,
    objectives: &'s [Metric],
}

impl<'s, T: Scalar> Archive<'s, T> {
    /// Evaluates the unseen schemes of `batch` in parallel and returns the
    /// record index of every entry.
    fn evaluate(&mut self, batch: &[Vec<usize>]) -> Result<Vec<usize>, OptimizeError> {
        let mut fresh: Vec<&Vec<usize>> = Vec::new();
        for cuts in batch {
            debug_assert!(
                cuts.windows(2).all(|w| w[0] <= w[1]),
                "unrepaired chromosome {cuts:?}"
            );
            if !self.index.contains_key(cuts) && !fresh.contains(&cuts) {
                fresh.push(cuts);
            }
        }
        let evaluated = fresh
            .par_iter()
            .map(|cuts| {
                self.sys
                    .evaluate_scheme(&PartitionScheme::new((*cuts).clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for rec in evaluated {
            self.index
                .insert(rec.scheme.cuts.clone(), self.records.len());
            self.points.push(objective_vector(&rec, self.objectives));
            self.records.push(rec);
        }
        Ok(batch.iter().map(|c| self.index[c]).collect())
    }
}

/// Constraint-domination ranking of a population (record indices):
/// feasible records by Pareto fronts, then infeasible ones by total
/// violation. Returns (rank, crowding) per member.
fn rank_population<T: Scalar>(archive: &Archive<'_, T>, pop: &[usize]) -> (Vec<usize>, Vec<T>) {
    let mut rank = vec![0usize; pop.len()];
    let mut crowd = vec![T::zero(); pop.len()];
    let feasible: Vec<usize> = (0..pop.len())
        .filter(|&i| archive.records[pop[i]].feasible)
        .collect();
    let points: Vec<Vec<T>> = feasible
        .iter()
        .map(|&i| archive.points[pop[i]].clone())
        .collect();
    let fronts = sort_fronts(&points);
    let mut groups: Vec<Vec<usize>> = fronts
        .iter()
        .map(|f| f.iter().map(|&k| feasible[k]).collect())
        .collect();

    let mut infeasible: Vec<usize> = (0..pop.len())
        .filter(|&i| !archive.records[pop[i]].feasible)
        .collect();
    infeasible.sort_by(|&a, &b| {
        archive.records[pop[a]]
            .violation
            .partial_cmp(&archive.records[pop[b]].violation)
            .unwrap_or(Ordering::Equal)
    });
    for i in infeasible {
        let v = archive.records[pop[i]].violation;
        match groups.last_mut() {
            Some(g)
                if !archive.records[pop[g[0]]].feasible
                    && archive.records[pop[g[0]]].violation == v =>
            {
                g.push(i)
            }
            _ => groups.push(vec![i]),
        }
    }
    for (r, group) in groups.iter().enumerate() {
        let pts: Vec<Vec<T>> = group
            .iter()
            .map(|&i| archive.points[pop[i]].clone())
            .collect();
        for (&i, d) in group.iter().zip(crowding_distance(&pts)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    (rank, crowd)
}

/// Keeps the best `size` members by rank, then crowding (descending), then
/// cut vector.
fn environmental_selection<T: Scalar>(
    archive: &Archive<'_, T>,
    pool: &[usize],
    size: usize,
) -> Vec<usize> {
    let (rank, crowd) = rank_population(archive, pool);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| {
        rank[a]
            .cmp(&rank[b])
            .then(crowd[b].partial_cmp(&crowd[a]).unwrap_or(Ordering::Equal))
            .then(
                archive.records[pool[a]]
                    .scheme
                    .cmp(&archive.records[pool[b]].scheme),
            )
    });
    idx.into_iter().take(size).map(|i| pool[i]).collect()
}

/// Uniform sample from the monotone cut vectors (stars and bars).
fn random_scheme(rng: &mut ChaCha8Rng, genes: usize, layers: usize) -> Vec<usize> {
    let mut picks = rand::seq::index::sample(rng, layers + genes, genes).into_vec();
    picks.sort_unstable();
    picks.iter().enumerate().map(|(i, &p)| p - i).collect()
}

fn mutate(rng: &mut ChaCha8Rng, cuts: &mut [usize], layers: usize, rate: f64) {
    for i in 0..cuts.len() {
        if rng.gen_bool(rate) {
            let lo = if i == 0 { 0 } else { cuts[i - 1] };
            let hi = cuts.get(i + 1).copied().unwrap_or(layers);
            cuts[i] = rng.gen_range(lo..=hi);
        }
    }
}

/// NSGA-II over monotone cut vectors.
///
/// Binary tournaments use constraint domination (feasible first, then
/// rank, then crowding). Single-point crossover is followed by sorting the
/// child's cuts to restore monotonicity; mutation redraws a cut between
/// its neighbours. Survivors are chosen elitistically from parents plus
/// offspring. Every distinct scheme is evaluated once, and the returned
/// front is the non-dominated feasible subset of everything evaluated.
/// All randomness comes from one ChaCha8 stream seeded with
/// `params.seed`, drawn before each parallel evaluation batch.
pub fn nsga2<T: Scalar>(
    sys: &SystemSpec<T>,
    params: &GaParams,
) -> Result<ParetoFront<T>, OptimizeError> {
    params.validate()?;
    let layers = sys.layer_count();
    let genes = sys.platform_count() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut archive = Archive {
        sys,
        index: HashMap::new(),
        records: Vec::new(),
        points: Vec::new(),
        objectives: &params.objectives,
    };

    let initial: Vec<Vec<usize>> = (0..params.population)
        .map(|_| random_scheme(&mut rng, genes, layers))
        .collect();
    let mut pop = dedup(archive.evaluate(&initial)?);

    for _ in 0..params.generations {
        let (rank, crowd) = rank_population(&archive, &pop);
        let tournament = |rng: &mut ChaCha8Rng| {
            let (a, b) = (rng.gen_range(0..pop.len()), rng.gen_range(0..pop.len()));
            let better = rank[a]
                .cmp(&rank[b])
                .then(crowd[b].partial_cmp(&crowd[a]).unwrap_or(Ordering::Equal));
            if better == Ordering::Greater {
                pop[b]
            } else {
                pop[a]
            }
        };
        let mut offspring = Vec::with_capacity(params.population);
        while offspring.len() < params.population {
            let mut a = archive.records[tournament(&mut rng)].scheme.cuts.clone();
            let mut b = archive.records[tournament(&mut rng)].scheme.cuts.clone();
            if genes >= 2 && rng.gen_bool(params.crossover_rate) {
                let point = rng.gen_range(1..genes);
                a[point..].swap_with_slice(&mut b[point..]);
                a.sort_unstable();
                b.sort_unstable();
            }
            mutate(&mut rng, &mut a, layers, params.mutation_rate);
            mutate(&mut rng, &mut b, layers, params.mutation_rate);
            offspring.push(a);
            offspring.push(b);
        }
        let children = archive.evaluate(&offspring)?;
        let pool = dedup(pop.iter().copied().chain(children).collect());
        pop = environmental_selection(&archive, &pool, params.population);
    }

    Ok(ParetoFront::from_evaluated(
        archive.records,
        &params.objectives,
        params.generations,
    ))
}

fn dedup(items: Vec<usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    items.into_iter().filter(|i| seen.insert(*i)).collect()
}

/// Front member with the lowest weighted cost; ties go to fewer
/// partitions, then the smaller cut vector.
pub fn select_final<T: Scalar>(
    front: &ParetoFront<T>,
    weights: &ObjectiveWeights<T>,
) -> Result<EvaluationRecord<T>, OptimizeError> {
    let mut best: Option<(T, &EvaluationRecord<T>)> = None;
    for rec in &front.members {
        let cost = weighted_cost(rec, weights)?;
        let better = match &best {
            None => true,
            Some((bc, br)) => match cost.partial_cmp(bc).unwrap_or(Ordering::Equal) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    (rec.partition_count, &rec.scheme) < (br.partition_count, &br.scheme)
                }
            },
        };
        if better {
            best = Some((cost, rec));
        }
    }
    best.map(|(_, r)| r.clone())
        .ok_or(OptimizeError::EmptyFront)
}
