//! Post-processing of run counters: throughput, delivery ratio, collision
//! distributions, per-cell aggregation and the CSV formats built on them.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{MacMode, RunMetrics};

/// Version of the CSV layouts below. Bumped whenever a column changes.
pub const CSV_FORMAT_VERSION: u32 = 1;

/// z-score for a two-sided 95% normal interval.
const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no packets were generated in the measured window")]
    NoTraffic,
    #[error("cell {cell} has {seeds} seed(s); at least 2 are needed for an interval")]
    InsufficientSeeds { cell: String, seeds: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Packets per second for `delivered` packets over `window_us`.
pub fn rate_per_second(delivered: u64, window_us: u64) -> f64 {
    if window_us == 0 {
        return 0.0;
    }
    delivered as f64 * 1e6 / window_us as f64
}

/// End-to-end throughput at the coordinator over the post-warm-up window.
pub fn throughput(metrics: &RunMetrics) -> f64 {
    rate_per_second(metrics.delivered_in_window, metrics.window_us())
}

/// Delivered over generated, both restricted to packets generated after
/// warm-up, with packets still in flight at the end left out of both.
pub fn pdr(metrics: &RunMetrics) -> Result<f64, MetricsError> {
    let t = metrics.total();
    let settled = t.delivered_measured + t.dropped_measured;
    if settled == 0 {
        return Err(MetricsError::NoTraffic);
    }
    Ok(t.delivered_measured as f64 / settled as f64)
}

/// Post-warm-up collisions per node, indexed by node id.
pub fn per_node_collisions(metrics: &RunMetrics) -> Vec<u64> {
    metrics.nodes.iter().map(|c| c.collided_measured).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub count: u64,
    pub fraction: f64,
}

/// Empirical CDF: one point per distinct count, with the fraction of nodes
/// at or below it.
pub fn collision_cdf(per_node: &[u64]) -> Vec<CdfPoint> {
    let mut sorted = per_node.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &c) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.count == c => last.fraction = fraction,
            _ => out.push(CdfPoint { count: c, fraction }),
        }
    }
    if let Some(last) = out.last_mut() {
        last.fraction = 1.0;
    }
    out
}

/// Value of a step CDF at `x`.
pub fn cdf_at(cdf: &[CdfPoint], x: u64) -> f64 {
    cdf.iter().take_while(|p| p.count <= x).last().map_or(0.0, |p| p.fraction)
}

/// One run, flattened for `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub mode: MacMode,
    pub node_count: usize,
    /// Requested hidden percentage; empty when the radius was fixed.
    pub hidden_target: Option<f64>,
    pub radius: f64,
    pub seed: u64,
    pub source_rate: f64,
    /// Packets per second per source node.
    pub offered_pps: f64,
    pub hidden_receiver_centric: f64,
    pub hidden_as_written: f64,
    pub throughput_pps: f64,
    /// Empty when nothing settled in the window.
    pub pdr: Option<f64>,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub collisions: u64,
    pub transmissions: u64,
    pub queue_overflows: u64,
    pub retry_exhaustions: u64,
    pub unsatisfied_links: usize,
    pub groups: usize,
    pub trace_digest: String,
    /// Semicolon-separated, indexed by node id.
    pub per_node_collisions: String,
}

pub const SUMMARY_HEADER: [&str; 24] = [
    "scenario",
    "mode",
    "node_count",
    "hidden_target",
    "radius",
    "seed",
    "source_rate",
    "offered_pps",
    "hidden_receiver_centric",
    "hidden_as_written",
    "throughput_pps",
    "pdr",
    "generated",
    "delivered",
    "dropped",
    "in_flight",
    "collisions",
    "transmissions",
    "queue_overflows",
    "retry_exhaustions",
    "unsatisfied_links",
    "groups",
    "trace_digest",
    "per_node_collisions",
];

/// Run-level context the counters alone do not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub scenario: String,
    pub node_count: usize,
    pub hidden_target: Option<f64>,
    pub radius: f64,
    pub source_rate: f64,
    pub hidden_receiver_centric: f64,
    pub hidden_as_written: f64,
    pub unsatisfied_links: usize,
    pub groups: usize,
}

impl SummaryRow {
    pub fn new(ctx: &RunContext, offered_pps: f64, m: &RunMetrics) -> Self {
        let t = m.total();
        let per_node = per_node_collisions(m);
        SummaryRow {
            scenario: ctx.scenario.clone(),
            mode: m.mode,
            node_count: ctx.node_count,
            hidden_target: ctx.hidden_target,
            radius: ctx.radius,
            seed: m.seed,
            source_rate: ctx.source_rate,
            offered_pps,
            hidden_receiver_centric: ctx.hidden_receiver_centric,
            hidden_as_written: ctx.hidden_as_written,
            throughput_pps: throughput(m),
            pdr: pdr(m).ok(),
            generated: t.generated_measured,
            delivered: t.delivered_measured,
            dropped: t.dropped_measured,
            in_flight: t.generated_measured - t.delivered_measured - t.dropped_measured,
            collisions: per_node.iter().sum(),
            transmissions: m.transmissions,
            queue_overflows: m.queue_overflows,
            retry_exhaustions: m.retry_exhaustions,
            unsatisfied_links: ctx.unsatisfied_links,
            groups: ctx.groups,
            trace_digest: m.trace_digest.clone(),
            per_node_collisions: per_node.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        }
    }

    pub fn collision_vector(&self) -> Vec<u64> {
        if self.per_node_collisions.is_empty() {
            return Vec::new();
        }
        self.per_node_collisions.split(';').map(|s| s.parse().unwrap_or(0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the 95% normal-approximation interval.
    pub half_width: f64,
}

pub fn mean_ci(samples: &[f64]) -> Option<MeanCi> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(MeanCi { mean, half_width: Z95 * (var / n as f64).sqrt() })
}

/// Mean and interval for one (scenario, mode, node count, hidden, rate)
/// cell across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub mode: MacMode,
    pub node_count: usize,
    pub hidden_target: Option<f64>,
    pub source_rate: f64,
    pub seeds: usize,
    pub hidden_mean: f64,
    pub throughput_mean: f64,
    pub throughput_ci95: f64,
    /// Empty when any seed had no settled traffic.
    pub pdr_mean: Option<f64>,
    pub pdr_ci95: Option<f64>,
    pub collisions_mean: f64,
    pub collisions_ci95: f64,
}

pub const AGGREGATE_HEADER: [&str; 13] = [
    "scenario",
    "mode",
    "node_count",
    "hidden_target",
    "source_rate",
    "seeds",
    "hidden_mean",
    "throughput_mean",
    "throughput_ci95",
    "pdr_mean",
    "pdr_ci95",
    "collisions_mean",
    "collisions_ci95",
];

type CellKey = (String, MacMode, usize, Option<u64>, u64, u64);

fn cell_key(r: &SummaryRow) -> CellKey {
    (
        r.scenario.clone(),
        r.mode,
        r.node_count,
        r.hidden_target.map(f64::to_bits),
        r.source_rate.to_bits(),
        // Rows with a fixed radius are distinguished by it.
        if r.hidden_target.is_some() { 0 } else { r.radius.to_bits() },
    )
}

/// Groups rows into cells, keeping first-seen order, and summarises each.
pub fn aggregate(rows: &[SummaryRow]) -> Result<Vec<AggregateRow>, MetricsError> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut cells: BTreeMap<CellKey, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        let key = cell_key(r);
        let entry = cells.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &cells[&key];
            let first = members[0];
            let insufficient = || MetricsError::InsufficientSeeds {
                cell: format!("{}/{}/n{}/rate{}", first.scenario, first.mode, first.node_count, first.source_rate),
                seeds: members.len(),
            };
            let col = |f: &dyn Fn(&SummaryRow) -> f64| members.iter().map(|r| f(r)).collect::<Vec<_>>();
            let thr = mean_ci(&col(&|r| r.throughput_pps)).ok_or_else(insufficient)?;
            let coll = mean_ci(&col(&|r| r.collisions as f64)).ok_or_else(insufficient)?;
            let hidden = col(&|r| r.hidden_receiver_centric);
            let pdrs: Option<Vec<f64>> = members.iter().map(|r| r.pdr).collect();
            let pdr = pdrs.and_then(|p| mean_ci(&p));
            Ok(AggregateRow {
                scenario: first.scenario.clone(),
                mode: first.mode,
                node_count: first.node_count,
                hidden_target: first.hidden_target,
                source_rate: first.source_rate,
                seeds: members.len(),
                hidden_mean: hidden.iter().sum::<f64>() / hidden.len() as f64,
                throughput_mean: thr.mean,
                throughput_ci95: thr.half_width,
                pdr_mean: pdr.map(|p| p.mean),
                pdr_ci95: pdr.map(|p| p.half_width),
                collisions_mean: coll.mean,
                collisions_ci95: coll.half_width,
            })
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(w: W, header: &[&str], rows: &[T]) -> Result<(), MetricsError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<(), MetricsError> {
    write_rows(w, &SUMMARY_HEADER, rows)
}

pub fn write_aggregate<W: Write>(w: W, rows: &[AggregateRow]) -> Result<(), MetricsError> {
    write_rows(w, &AGGREGATE_HEADER, rows)
}

/// Two columns: `collisions,cumulative_fraction`.
pub fn write_cdf<W: Write>(w: W, cdf: &[CdfPoint]) -> Result<(), MetricsError> {
    write_rows(w, &["collisions", "cumulative_fraction"], cdf)
}

pub fn read_summary<R: std::io::Read>(r: R) -> Result<Vec<SummaryRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NodeCounters;

    fn metrics(delivered_in_window: u64, window_s: u64, nodes: Vec<NodeCounters>) -> RunMetrics {
        RunMetrics {
            mode: MacMode::Csma,
            seed: 1,
            duration_us: window_s * 1_000_000,
            warmup_us: 0,
            nodes,
            delivered_in_window,
            delivered_per_second: vec![],
            transmissions: 0,
            queue_overflows: 0,
            retry_exhaustions: 0,
            events: 0,
            trace_digest: String::new(),
        }
    }

    fn row(mode: MacMode, rate: f64, seed: u64, thr: f64) -> SummaryRow {
        let ctx = RunContext {
            scenario: "s".into(),
            node_count: 3,
            hidden_target: Some(0.4),
            radius: 10.0,
            source_rate: rate,
            hidden_receiver_centric: 0.4,
            hidden_as_written: 0.3,
            unsatisfied_links: 0,
            groups: 0,
        };
        let mut m = metrics(0, 10, vec![NodeCounters::default(); 3]);
        m.mode = mode;
        m.seed = seed;
        SummaryRow { throughput_pps: thr, ..SummaryRow::new(&ctx, rate, &m) }
    }

    #[test]
    fn throughput_is_count_over_window() {
        let m = metrics(100, 10, vec![]);
        assert_eq!(throughput(&m), 10.0);
        assert_eq!(throughput(&m) * (m.window_us() as f64 / 1e6), 100.0);
    }

    #[test]
    fn pdr_from_settled_packets() {
        let ok = NodeCounters { generated_measured: 10, delivered_measured: 10, ..Default::default() };
        assert_eq!(pdr(&metrics(0, 1, vec![ok])).unwrap(), 1.0);
        let lossy =
            NodeCounters { generated_measured: 12, delivered_measured: 6, dropped_measured: 2, ..Default::default() };
        assert_eq!(pdr(&metrics(0, 1, vec![lossy])).unwrap(), 0.75);
        assert!(matches!(pdr(&metrics(0, 1, vec![NodeCounters::default()])), Err(MetricsError::NoTraffic)));
    }

    #[test]
    fn cdf_worked_example() {
        let cdf = collision_cdf(&[0, 0, 1, 3]);
        assert_eq!(
            cdf,
            vec![
                CdfPoint { count: 0, fraction: 0.5 },
                CdfPoint { count: 1, fraction: 0.75 },
                CdfPoint { count: 3, fraction: 1.0 },
            ]
        );
        assert_eq!(cdf_at(&cdf, 2), 0.75);
        assert_eq!(cdf_at(&[CdfPoint { count: 1, fraction: 1.0 }], 0), 0.0);
    }

    #[test]
    fn cdf_of_zeros_jumps_at_zero() {
        assert_eq!(collision_cdf(&[0; 7]), vec![CdfPoint { count: 0, fraction: 1.0 }]);
        assert!(collision_cdf(&[]).is_empty());
    }

    #[test]
    fn interval_arithmetic() {
        let same = mean_ci(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(same, MeanCi { mean: 5.0, half_width: 0.0 });
        let two = mean_ci(&[10.0, 14.0]).unwrap();
        assert_eq!(two.mean, 12.0);
        // s = 2 * sqrt 2, half-width = 1.96 * s / sqrt 2.
        assert!((two.half_width - 1.96 * 2.0).abs() < 1e-12);
        assert!(mean_ci(&[1.0]).is_none());
    }

    #[test]
    fn aggregate_groups_by_cell_in_input_order() {
        let rows = vec![
            row(MacMode::Tsch, 2.0, 1, 10.0),
            row(MacMode::Csma, 1.0, 1, 3.0),
            row(MacMode::Tsch, 2.0, 2, 14.0),
            row(MacMode::Csma, 1.0, 2, 3.0),
        ];
        let agg = aggregate(&rows).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].mode, agg[0].throughput_mean, agg[0].seeds), (MacMode::Tsch, 12.0, 2));
        assert_eq!((agg[1].mode, agg[1].throughput_ci95), (MacMode::Csma, 0.0));
        assert_eq!(agg[0].pdr_mean, None);
    }

    #[test]
    fn aggregate_needs_two_seeds() {
        let err = aggregate(&[row(MacMode::Csma, 1.0, 1, 3.0)]).unwrap_err();
        assert!(matches!(err, MetricsError::InsufficientSeeds { seeds: 1, .. }));
    }

    #[test]
    fn summary_csv_round_trips() {
        let mut r = row(MacMode::ScgHybrid, 1.5, 7, 2.25);
        r.per_node_collisions = "0;4;1".into();
        r.pdr = Some(0.5);
        let mut buf = Vec::new();
        write_summary(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER.join(","));
        assert!(text.contains(",scg_hybrid,"));
        let back = read_summary(buf.as_slice()).unwrap();
        assert_eq!(back, vec![r.clone()]);
        assert_eq!(back[0].collision_vector(), vec![0, 4, 1]);
    }

    #[test]
    fn cdf_csv_has_two_columns() {
        let mut buf = Vec::new();
        write_cdf(&mut buf, &collision_cdf(&[0, 0, 1, 3])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "collisions,cumulative_fraction\n0,0.5\n1,0.75\n3,1.0\n");
    }
}
