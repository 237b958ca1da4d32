//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dnnpart::cost::{AccuracyModel, CostEntry, LinkModel, PlatformModel};
use dnnpart::evaluator::{
    throughput, Constraints, Metric, ObjectiveWeights, PartitionScheme, SystemSpec,
};
use dnnpart::graph::{branch_regions, topo_order, DnnGraph, LayerNode};
use dnnpart::memory::{min_memory_order, segment_memory};
use dnnpart::optimizer::{enumerate_schemes, exhaustive_pareto, nsga2, GaParams};
use dnnpart::report::memory_profile;
use dnnpart::run::{run, Mode, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn memory_formula_on_chains() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=30);
        let g = common::chain(&mut rng, len);
        let order = topo_order(&g, rng.gen());
        let mut ranges = vec![(0, len)];
        for _ in 0..5 {
            let lo = rng.gen_range(0..len);
            ranges.push((lo, rng.gen_range(lo + 1..=len)));
        }
        for (lo, hi) in ranges {
            let bits = [4u32, 8, 16, 32][rng.gen_range(0..4)];
            let layers = &g.layers()[lo..hi];
            let params: u64 = layers.iter().map(|l| l.param_count).sum();
            let act = layers
                .iter()
                .map(|l| l.in_elems + l.out_elems)
                .max()
                .unwrap();
            let expected = ((params + act) * bits as u64).div_ceil(8);
            let got = segment_memory(&g, &order, lo, hi, bits).map_err(|e| e.to_string())?;
            ensure(got == expected, || {
                format!("chain of {len}, [{lo},{hi}) at {bits} bits: {got} != {expected}")
            })?;
            checked += 1;
        }
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("{checked} segments on 1000 chains"))
}

fn throughput_formula() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                10f64.powf(rng.gen_range(-6.0..0.0))
            }
        };
        let stages: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut links: Vec<f64> = (1..n).map(|_| draw(&mut rng)).collect();
        if stages.iter().chain(&links).all(|&x| x == 0.0) {
            links.push(1e-3);
        }
        let slowest = stages.iter().chain(&links).copied().fold(0.0, f64::max);
        let product = throughput(&stages, &links) * slowest;
        worst = worst.max((product - 1.0).abs());
        ensure((1.0 - 1e-12..=1.0 + 1e-12).contains(&product), || {
            format!("{stages:?} / {links:?}: product {product}")
        })?;
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!("1000 tuples, max |th*max - 1| = {worst:e}"))
}

fn branch_memory_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut regions = 0;
    let mut max_orders = 0;
    while regions < 150 {
        let g = common::branchy_graph(&mut rng);
        for r in branch_regions(&g) {
            if r.nodes.len() > 8 {
                continue;
            }
            let sub = g.induced_subgraph("region", &r.nodes);
            let mut orders = Vec::new();
            common::all_orders(
                &sub,
                &mut Vec::new(),
                &mut vec![false; sub.len()],
                &mut orders,
            );
            max_orders = max_orders.max(orders.len());
            let oracle = orders
                .iter()
                .map(|o| common::simulate_peak(&sub, o))
                .min()
                .unwrap();
            let best = min_memory_order(&sub, 40_320);
            ensure(best.exact, || "exhaustive path not taken".into())?;
            ensure(best.peak_elems == oracle, || {
                format!(
                    "region {:?}: {} != brute force {}",
                    r.nodes, best.peak_elems, oracle
                )
            })?;
            ensure(
                common::simulate_peak(&sub, &best.order.order) == oracle,
                || {
                    format!(
                        "region {:?}: returned order does not reach its peak",
                        r.nodes
                    )
                },
            )?;
            regions += 1;
        }
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!("{regions} regions, up to {max_orders} orders each"))
}

fn ga_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pairs = [
        [Metric::Latency, Metric::Energy],
        [Metric::Energy, Metric::Throughput],
    ];
    let mut systems = 0;
    let mut members = 0;
    while systems < 60 {
        let layers = rng.gen_range(2..=12);
        let platforms = 2 + systems % 2;
        let mut sys = common::random_system(&mut rng, layers, platforms);
        let all = enumerate_schemes(layers, platforms)
            .iter()
            .map(|s| sys.evaluate_scheme(s).unwrap())
            .collect::<Vec<_>>();
        let mut lat: Vec<f64> = all.iter().map(|r| r.latency_s).collect();
        lat.sort_by(f64::total_cmp);
        sys.constraints = Constraints {
            max_latency_s: Some(lat[rng.gen_range(lat.len() / 3..lat.len())]),
            min_top1: Some(0.5),
            ..Default::default()
        };
        if exhaustive_pareto(&sys, &pairs[0]).unwrap().is_empty() {
            continue;
        }
        for objectives in &pairs {
            let exact = exhaustive_pareto(&sys, objectives).map_err(|e| e.to_string())?;
            let params =
                GaParams::for_system(layers, platforms, systems as u64, objectives.to_vec());
            let ga = nsga2(&sys, &params).map_err(|e| e.to_string())?;
            let a: BTreeSet<_> = exact.members.iter().map(|r| r.scheme.clone()).collect();
            let b: BTreeSet<_> = ga.members.iter().map(|r| r.scheme.clone()).collect();
            ensure(a == b, || {
                format!("system {systems} (L={layers}, N={platforms}, {objectives:?}): exhaustive {a:?}, nsga2 {b:?}")
            })?;
            members += a.len();
        }
        systems += 1;
    }
    within(start.elapsed(), 600.0)?;
    Ok(format!(
        "{systems} systems x 2 objective pairs, {members} front members matched"
    ))
}

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn toy_config(out: &Path, seed: u64) -> RunConfig {
    let toy = toy_dir();
    let mut c = RunConfig::new(toy.join("graph.json"), out);
    c.platform_paths = vec![toy.join("eyr.json"), toy.join("smb.json")];
    c.link_paths = vec![toy.join("gige.json")];
    c.accuracy_path = Some(toy.join("accuracy.json"));
    c.constraints_path = Some(toy.join("objectives.json"));
    c.seed = seed;
    c
}

/// Writes a random system to `dir` and returns a config for it.
fn random_config(rng: &mut ChaCha8Rng, dir: &Path, layers: usize, platforms: usize) -> RunConfig {
    let sys = common::random_system(rng, layers, platforms);
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("graph.json"), sys.graph.to_json()).unwrap();
    let mut c = RunConfig::new(dir.join("graph.json"), dir.join("out"));
    for (k, p) in sys.platforms.iter().enumerate() {
        let path = dir.join(format!("p{k}.json"));
        fs::write(&path, serde_json::to_string(p).unwrap()).unwrap();
        c.platform_paths.push(path);
    }
    for (k, l) in sys.links.iter().enumerate() {
        let path = dir.join(format!("l{k}.json"));
        fs::write(&path, serde_json::to_string(l).unwrap()).unwrap();
        c.link_paths.push(path);
    }
    let limit = 0.004 * layers as f64 * rng.gen_range(0.3..1.0);
    let objectives = format!(
        r#"{{"constraints":{{"max_latency_s":{limit}}},"weights":{{"latency":1,"energy":1}}}}"#
    );
    fs::write(dir.join("objectives.json"), objectives).unwrap();
    c.constraints_path = Some(dir.join("objectives.json"));
    c.seed = rng.gen();
    c
}

fn column_value(header: &[String], row: &[String], metric: Metric) -> f64 {
    let col = |name: &str| {
        let i = header.iter().position(|h| h == name).unwrap();
        match row[i].as_str() {
            "unbounded" => f64::INFINITY,
            v => v.parse::<f64>().unwrap(),
        }
    };
    match metric {
        Metric::Latency => col("latency_s"),
        Metric::Energy => col("energy_j"),
        Metric::Throughput => -col("throughput_fps"),
        Metric::Bandwidth => col("link_bits_total"),
        Metric::Accuracy => -col("top1"),
        Metric::Memory => header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("mem_"))
            .map(|(i, _)| row[i].parse::<f64>().unwrap())
            .fold(0.0, f64::max),
    }
}

/// Post-hoc check of one output directory, using only the CSV files.
fn check_pareto_csv(out: &Path, objectives: &[Metric]) -> Result<usize, String> {
    let (eh, evals) = common::read_csv(
        &fs::read_to_string(out.join("evaluations.csv")).map_err(|e| e.to_string())?,
    );
    let (ph, pareto) =
        common::read_csv(&fs::read_to_string(out.join("pareto.csv")).map_err(|e| e.to_string())?);
    ensure(eh == ph, || "headers differ".into())?;
    let feasible_col = eh.iter().position(|h| h == "feasible").unwrap();
    let feasible: Vec<&Vec<String>> = evals.iter().filter(|r| r[feasible_col] == "true").collect();
    for p in &pareto {
        ensure(evals.contains(p), || {
            format!("pareto row {p:?} missing from evaluations")
        })?;
        ensure(p[feasible_col] == "true", || {
            format!("infeasible pareto row {p:?}")
        })?;
        let pv: Vec<f64> = objectives
            .iter()
            .map(|&m| column_value(&ph, p, m))
            .collect();
        for e in &feasible {
            let ev: Vec<f64> = objectives
                .iter()
                .map(|&m| column_value(&eh, e, m))
                .collect();
            let no_worse = ev.iter().zip(&pv).all(|(a, b)| a <= b);
            let better = ev.iter().zip(&pv).any(|(a, b)| a < b);
            ensure(!(no_worse && better), || {
                format!("pareto row {p:?} dominated by {e:?}")
            })?;
        }
    }
    Ok(pareto.len())
}

fn pareto_soundness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut configs = vec![toy_config(&tmp.path().join("toy"), 1)];
    let mut exhaustive = toy_config(&tmp.path().join("toy_exhaustive"), 1);
    exhaustive.mode = Mode::Exhaustive;
    exhaustive.objectives = vec![Metric::Energy, Metric::Throughput, Metric::Accuracy];
    configs.push(exhaustive);
    for i in 0..12 {
        let layers = rng.gen_range(3..=20);
        let mut c = random_config(
            &mut rng,
            &tmp.path().join(format!("sys{i}")),
            layers,
            2 + i % 3,
        );
        c.objectives = match i % 4 {
            0 => vec![Metric::Latency, Metric::Energy],
            1 => vec![Metric::Energy, Metric::Throughput],
            2 => vec![Metric::Latency, Metric::Bandwidth, Metric::Memory],
            _ => vec![Metric::Throughput, Metric::Energy, Metric::Accuracy],
        };
        configs.push(c);
    }
    let mut rows = 0;
    for c in &configs {
        run(c).map_err(|e| format!("{}: {e}", c.output_dir.display()))?;
        rows += check_pareto_csv(&c.output_dir, &c.objectives)?;
    }
    Ok(format!(
        "{} runs, {rows} pareto rows, none dominated",
        configs.len()
    ))
}

fn pipelining_gain() -> Outcome {
    let layers = 8;
    let names: Vec<String> = (0..layers).map(|i| format!("l{i}")).collect();
    let nodes = names
        .iter()
        .map(|n| LayerNode::new(n.clone(), "Conv", 1000, 256, 256))
        .collect();
    let edges: Vec<(&str, &str)> = names
        .windows(2)
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    let g = DnnGraph::new("balanced", nodes, &edges).unwrap();
    let order = topo_order(&g, 0);
    let platform = |name: &str, speedup: f64| PlatformModel {
        name: name.into(),
        bits: 8,
        mem_capacity_bytes: 1 << 30,
        default_cost: None,
        cost_table: names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (
                    n.clone(),
                    CostEntry::new((1.0 + i as f64 * 0.1) * 1e-3 / speedup, 1e-4),
                )
            })
            .collect(),
    };
    let sys = SystemSpec::new(
        g,
        order,
        vec![platform("A", 1.0), platform("B", 1.2)],
        vec![LinkModel {
            name: "bus".into(),
            bandwidth_bps: 1e9,
            fixed_latency_s: 5e-5,
            energy_per_bit_j: 1e-10,
            fixed_energy_j: 0.0,
        }],
        AccuracyModel::Constant { top1: 0.9 },
        Constraints::default(),
        ObjectiveWeights::single(Metric::Throughput),
    )
    .map_err(|e| e.to_string())?;
    let front = exhaustive_pareto(&sys, &[Metric::Throughput]).map_err(|e| e.to_string())?;
    let single = (0..2)
        .map(|k| sys.evaluate_scheme(&sys.all_on(k)).unwrap().throughput_fps)
        .fold(0.0, f64::max);
    let best = front
        .evaluated
        .iter()
        .filter(|r| r.partition_count == 2)
        .max_by(|a, b| a.throughput_fps.total_cmp(&b.throughput_fps))
        .unwrap();
    let slowest = best
        .stage_latency_s
        .iter()
        .chain(&best.link_latency_s)
        .copied()
        .fold(0.0, f64::max);
    ensure(best.throughput_fps == 1.0 / slowest, || {
        format!("throughput {} != 1/{slowest}", best.throughput_fps)
    })?;
    let gain = best.throughput_fps / single - 1.0;
    ensure(gain >= 0.25, || {
        format!("gain {:.1}% below 25%", gain * 100.0)
    })?;
    ensure(
        front.members.iter().any(|m| m.scheme == best.scheme),
        || "best scheme not on the front".into(),
    )?;
    Ok(format!(
        "cut {} gives {:.1} fps vs {:.1} fps single-platform (+{:.1}%)",
        best.scheme,
        best.throughput_fps,
        single,
        gain * 100.0
    ))
}

fn memory_profile_shape() -> Outcome {
    let names: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
    let mut elems = 50_000u64;
    let mut nodes = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let out = elems / 2;
        let params = 10u64.pow(i as u32 / 2 + 1) * (i as u64 + 1);
        nodes.push(LayerNode::new(n.clone(), "Op", params, elems, out));
        elems = out;
    }
    let edges: Vec<(&str, &str)> = names
        .windows(2)
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    let g = DnnGraph::new("late_heavy", nodes, &edges).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut systems = vec![(
        "late_heavy".to_string(),
        SystemSpec::new(
            g.clone(),
            topo_order(&g, 0),
            vec![
                common::platform("A", 8, 1 << 30, &g, &mut rng),
                common::platform("B", 16, 1 << 30, &g, &mut rng),
            ],
            vec![common::link("bus", &mut rng)],
            AccuracyModel::Constant { top1: 0.9 },
            Constraints::default(),
            ObjectiveWeights::single(Metric::Latency),
        )
        .unwrap(),
    )];
    for i in 0..50 {
        let layers = rng.gen_range(1..25);
        systems.push((
            format!("random{i}"),
            common::random_system(&mut rng, layers, 2),
        ));
    }
    for (name, sys) in &systems {
        let rows = memory_profile(sys);
        ensure(rows.len() == sys.layer_count() + 1, || {
            format!("{name}: {} rows", rows.len())
        })?;
        for w in rows.windows(2) {
            ensure(w[0].first_bytes <= w[1].first_bytes, || {
                format!("{name}: first platform drops at cut {}", w[1].cut)
            })?;
            ensure(w[0].last_bytes >= w[1].last_bytes, || {
                format!("{name}: last platform grows at cut {}", w[1].cut)
            })?;
        }
    }
    let heavy = memory_profile(&systems[0].1);
    Ok(format!(
        "{} systems; late_heavy A: {} -> {} B, B: {} -> {} B",
        systems.len(),
        heavy[0].first_bytes,
        heavy[10].first_bytes,
        heavy[0].last_bytes,
        heavy[10].last_bytes
    ))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut pairs = Vec::new();
    pairs.push((
        toy_config(&tmp.path().join("a"), 9),
        toy_config(&tmp.path().join("b"), 9),
    ));
    let base = random_config(&mut rng, &tmp.path().join("sys"), 24, 3);
    let mut a = base.clone();
    a.output_dir = tmp.path().join("sys_a");
    let mut b = base;
    b.output_dir = tmp.path().join("sys_b");
    pairs.push((a, b));
    for (a, b) in &pairs {
        run(a).map_err(|e| e.to_string())?;
        run(b).map_err(|e| e.to_string())?;
        for file in ["evaluations.csv", "pareto.csv", "selected.json"] {
            let x = fs::read(a.output_dir.join(file)).map_err(|e| e.to_string())?;
            let y = fs::read(b.output_dir.join(file)).map_err(|e| e.to_string())?;
            ensure(x == y, || format!("{file} differs between runs"))?;
        }
    }
    Ok(format!("{} config pairs byte-identical", pairs.len()))
}

fn partition_count_n4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let sys = common::random_system(&mut rng, 5, 4);
    let hand: [(&[usize], usize); 12] = [
        (&[0, 0, 0], 1),
        (&[5, 5, 5], 1),
        (&[0, 0, 5], 1),
        (&[0, 5, 5], 1),
        (&[1, 2, 3], 4),
        (&[1, 1, 1], 2),
        (&[0, 2, 2], 2),
        (&[2, 2, 5], 2),
        (&[1, 1, 4], 3),
        (&[0, 1, 5], 2),
        (&[2, 3, 5], 3),
        (&[4, 4, 4], 2),
    ];
    for (cuts, expected) in hand {
        let rec = sys
            .evaluate_scheme(&PartitionScheme::new(cuts.to_vec()))
            .map_err(|e| e.to_string())?;
        ensure(rec.partition_count == expected, || {
            format!("{cuts:?}: {} != {expected}", rec.partition_count)
        })?;
    }
    let count = |cuts: &[usize]| {
        let mut bounds = vec![0];
        bounds.extend_from_slice(cuts);
        bounds.push(5);
        bounds.windows(2).filter(|w| w[1] > w[0]).count()
    };
    let schemes = enumerate_schemes(5, 4);
    ensure(schemes.len() == 56, || format!("{} schemes", schemes.len()))?;
    for s in &schemes {
        let rec = sys.evaluate_scheme(s).map_err(|e| e.to_string())?;
        ensure(rec.partition_count == count(&s.cuts), || {
            format!("{s}: {}", rec.partition_count)
        })?;
    }
    let front =
        exhaustive_pareto(&sys, &[Metric::Latency, Metric::Energy]).map_err(|e| e.to_string())?;
    for m in &front.members {
        ensure(m.partition_count == count(&m.scheme.cuts), || {
            format!("front member {}", m.scheme)
        })?;
    }
    Ok(format!(
        "12 hand schemes, all 56 schemes, {} front members",
        front.members.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "memory footprint formula on chains",
            memory_formula_on_chains,
        ),
        ("throughput formula", throughput_formula),
        ("branch memory oracle", branch_memory_oracle),
        ("GA oracle equivalence", ga_oracle_equivalence),
        ("Pareto soundness of emitted CSVs", pareto_soundness),
        ("pipelining throughput gain", pipelining_gain),
        ("memory profile shape", memory_profile_shape),
        ("determinism", determinism),
        ("partition count for four platforms", partition_count_n4),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.2} s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({secs:.2} s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
