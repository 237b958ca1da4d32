//! Plot-ready CSV output: `;` delimited, `.` decimal point, one header row.

use std::io::Write;

use serde::Serialize;

use crate::evaluator::{EvaluationRecord, SystemSpec};
use crate::memory::segment_memory;
use crate::scalar::Scalar;

pub const DELIMITER: u8 = b';';

/// Text written for an unbounded throughput (all latencies zero).
pub const UNBOUNDED: &str = "unbounded";

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .delimiter(DELIMITER)
        .from_writer(out)
}

fn number<T: Scalar>(x: T) -> String {
    if x.is_infinite() && x > T::zero() {
        UNBOUNDED.to_string()
    } else {
        x.to_string()
    }
}

/// Header of the evaluation tables for the given platform names.
pub fn record_header(platforms: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "cuts",
        "partition_count",
        "latency_s",
        "energy_j",
        "throughput_fps",
        "link_bits_total",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(platforms.iter().map(|p| format!("mem_{p}_bytes")));
    h.extend(
        ["top1", "feasible", "violated", "violation"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn record_row<T: Scalar>(rec: &EvaluationRecord<T>) -> Vec<String> {
    let mut row = vec![
        rec.scheme.to_string(),
        rec.partition_count.to_string(),
        number(rec.latency_s),
        number(rec.energy_j),
        number(rec.throughput_fps),
        rec.link_bits_total().to_string(),
    ];
    row.extend(rec.mem_bytes.iter().map(|(_, b)| b.to_string()));
    row.push(number(rec.top1));
    row.push(rec.feasible.to_string());
    row.push(rec.violated.join("|"));
    row.push(number(rec.violation));
    row
}

/// Writes `records` in the given order.
pub fn write_records<T: Scalar, W: Write>(
    out: W,
    platforms: &[String],
    records: &[EvaluationRecord<T>],
) -> csv::Result<()> {
    let mut w = writer(out);
    w.write_record(record_header(platforms))?;
    for rec in records {
        w.write_record(record_row(rec))?;
    }
    w.flush()?;
    Ok(())
}

/// Footprint of a two-way split at one cut: the prefix on the first
/// platform and the suffix on the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProfileRow {
    pub cut: usize,
    /// Last layer of the prefix, empty for cut 0.
    pub layer: String,
    pub first_bytes: u64,
    pub last_bytes: u64,
}

/// Memory footprint of both sides for every cut `0..=L`.
pub fn memory_profile<T: Scalar>(sys: &SystemSpec<T>) -> Vec<ProfileRow> {
    let len = sys.layer_count();
    let first = sys.platforms[0].bits;
    let last = sys.platforms[sys.platform_count() - 1].bits;
    let ids = sys.order.ids(&sys.graph);
    (0..=len)
        .map(|cut| ProfileRow {
            cut,
            layer: if cut == 0 {
                String::new()
            } else {
                ids[cut - 1].to_string()
            },
            first_bytes: segment_memory(&sys.graph, &sys.order, 0, cut, first)
                .expect("cut in range"),
            last_bytes: segment_memory(&sys.graph, &sys.order, cut, len, last)
                .expect("cut in range"),
        })
        .collect()
}

pub fn write_memory_profile<W: Write>(
    out: W,
    first: &str,
    last: &str,
    rows: &[ProfileRow],
) -> csv::Result<()> {
    let mut w = writer(out);
    w.write_record([
        "cut",
        "layer",
        &format!("mem_{first}_bytes"),
        &format!("mem_{last}_bytes"),
    ])?;
    for r in rows {
        w.write_record([
            r.cut.to_string(),
            r.layer.clone(),
            r.first_bytes.to_string(),
            r.last_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
