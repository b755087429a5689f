//! Sweep execution: every (node count, connectivity, mode, rate, seed)
//! combination of a scenario, run in parallel and merged in scenario order.
//!
//! Output directory layout:
//!
//! - `summary.csv`: one row per run
//! - `aggregate.csv`: mean and 95% interval per cell (two or more seeds)
//! - `cdf_<mode>.csv`: per-node collision CDF pooled over the mode's runs
//! - `grouping.json`, `schedule.json`: planning artifacts
//! - `topologies/`: topology documents, when exported
//! - `errors.log`: failed runs, if any
//! - `manifest.json`: the resolved scenario plus SHA-256 of every input
//!   topology and every output file

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{prepare, run, MacMode};
use crate::metrics::{
    aggregate, collision_cdf, write_aggregate, write_cdf, write_summary, AggregateRow, CdfPoint, MetricsError,
    RunContext, SummaryRow,
};
use crate::scenario::{parse_scenario, Connectivity, Scenario, ScenarioError};
use crate::scg::{run_grouping, GroupingDocument};
use crate::topology::{calibrate_radius, CalibrationRequest, HnpFormula, Topology};
use crate::tsch::Schedule;

pub const MANIFEST_FORMAT: &str = "scg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("manifest scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOptions {
    /// Worker threads; `None` uses every available processor.
    pub parallel: Option<usize>,
    pub export_topology: bool,
}

/// Identifies one topology of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyKey {
    pub node_count: usize,
    /// Index into the scenario's radius or target list.
    pub connectivity_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BuiltTopology {
    pub key: TopologyKey,
    pub hidden_target: Option<f64>,
    pub topology: Topology,
    pub hidden_receiver_centric: f64,
    pub hidden_as_written: f64,
}

impl BuiltTopology {
    pub fn file_name(&self) -> String {
        format!("topology_n{}_c{}_s{}.json", self.key.node_count, self.key.connectivity_index, self.key.seed)
    }
}

/// Builds one topology: fixed radius, or calibrated to a hidden target.
pub fn build_topology(scenario: &Scenario, key: TopologyKey) -> Result<BuiltTopology, String> {
    let (topology, hidden_target) = match &scenario.connectivity {
        Connectivity::Radius(radii) => {
            let r = radii[key.connectivity_index];
            let t = Topology::generate(key.node_count, scenario.area_side, r, scenario.single_hop, key.seed)
                .map_err(|e| e.to_string())?;
            (t, None)
        }
        Connectivity::TargetHidden { targets, tolerance } => {
            let target = targets[key.connectivity_index];
            let c = calibrate_radius(&CalibrationRequest {
                node_count: key.node_count,
                area_side: scenario.area_side,
                seed: key.seed,
                target_hidden: target,
                tolerance: *tolerance,
                single_hop: scenario.single_hop,
                links: scenario.hidden_links,
                formula: scenario.hnp_formula,
            })
            .map_err(|e| e.to_string())?;
            (c.topology, Some(target))
        }
    };
    let links = scenario.hidden_links;
    Ok(BuiltTopology {
        key,
        hidden_target,
        hidden_receiver_centric: topology.tree_hidden_percentage(links, HnpFormula::ReceiverCentric),
        hidden_as_written: topology.tree_hidden_percentage(links, HnpFormula::AsWritten),
        topology,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupingArtifact {
    pub node_count: usize,
    pub hidden_target: Option<f64>,
    pub radius: f64,
    pub seed: u64,
    pub grouping: GroupingDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleArtifact {
    pub node_count: usize,
    pub hidden_target: Option<f64>,
    pub radius: f64,
    pub seed: u64,
    pub mode: MacMode,
    pub source_rate: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<RunFailure>,
    pub topologies: Vec<BuiltTopology>,
    pub groupings: Vec<GroupingArtifact>,
    /// Only the first seed of each cell, to keep the file small.
    pub schedules: Vec<ScheduleArtifact>,
}

impl SweepResult {
    pub fn aggregate(&self) -> Result<Vec<AggregateRow>, MetricsError> {
        aggregate(&self.rows)
    }

    /// Per-node collision counts of every run of `mode`, pooled. The
    /// coordinator never transmits and is left out.
    pub fn collision_cdf(&self, mode: MacMode) -> Vec<CdfPoint> {
        let pooled: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .flat_map(|r| r.collision_vector().into_iter().skip(1))
            .collect();
        collision_cdf(&pooled)
    }
}

struct Job {
    topo: usize,
    mode: MacMode,
    rate: f64,
    first_seed: bool,
}

fn with_pool<T: Send>(parallel: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SweepError> {
    match parallel {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| SweepError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the whole sweep in memory. Row order is node count, connectivity,
/// mode, rate, seed, following the scenario's list order.
pub fn execute(scenario: &Scenario, parallel: Option<usize>) -> Result<SweepResult, SweepError> {
    with_pool(parallel, || execute_inner(scenario))
}

fn execute_inner(scenario: &Scenario) -> SweepResult {
    let mut keys = Vec::new();
    for &node_count in &scenario.node_counts {
        for connectivity_index in 0..scenario.connectivity.len() {
            for &seed in &scenario.seeds {
                keys.push(TopologyKey { node_count, connectivity_index, seed });
            }
        }
    }
    let built: Vec<Result<BuiltTopology, String>> = keys.par_iter().map(|&k| build_topology(scenario, k)).collect();

    let mut jobs = Vec::new();
    let per_cell = scenario.seeds.len();
    for cell in 0..keys.len() / per_cell {
        for &mode in &scenario.modes {
            for &rate in &scenario.source_rates {
                for s in 0..per_cell {
                    jobs.push(Job { topo: cell * per_cell + s, mode, rate, first_seed: s == 0 });
                }
            }
        }
    }

    let label = |job: &Job| {
        let k = keys[job.topo];
        format!(
            "{} n={} connectivity={} mode={} rate={} seed={}",
            scenario.name, k.node_count, k.connectivity_index, job.mode, job.rate, k.seed
        )
    };

    let outcomes: Vec<Result<(SummaryRow, Option<Schedule>), String>> = jobs
        .par_iter()
        .map(|job| {
            let b = built[job.topo].as_ref().map_err(Clone::clone)?;
            let cfg = scenario.run_config(job.mode, job.rate, b.key.seed);
            let plan = prepare(&b.topology, &cfg).map_err(|e| e.to_string())?;
            let out = run(&b.topology, &plan, &cfg).map_err(|e| e.to_string())?;
            let ctx = RunContext {
                scenario: scenario.name.clone(),
                node_count: b.key.node_count,
                hidden_target: b.hidden_target,
                radius: b.topology.comm_radius(),
                source_rate: job.rate,
                hidden_receiver_centric: b.hidden_receiver_centric,
                hidden_as_written: b.hidden_as_written,
                unsatisfied_links: plan.schedule.as_ref().map_or(0, |s| s.unsatisfied().count()),
                groups: plan.grouping.as_ref().map_or(0, |g| g.groups.len()),
            };
            let row = SummaryRow::new(&ctx, cfg.traffic.packets_per_second(), &out.metrics);
            Ok((row, if job.first_seed { plan.schedule } else { None }))
        })
        .collect();

    let mut result = SweepResult {
        rows: Vec::new(),
        failures: Vec::new(),
        topologies: Vec::new(),
        groupings: Vec::new(),
        schedules: Vec::new(),
    };
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((row, schedule)) => {
                if let Some(schedule) = schedule {
                    result.schedules.push(ScheduleArtifact {
                        node_count: row.node_count,
                        hidden_target: row.hidden_target,
                        radius: row.radius,
                        seed: row.seed,
                        mode: row.mode,
                        source_rate: row.source_rate,
                        schedule,
                    });
                }
                result.rows.push(row);
            }
            Err(error) => result.failures.push(RunFailure { run: label(job), error }),
        }
    }
    let wants_grouping = scenario.modes.contains(&MacMode::ScgHybrid);
    for b in built.into_iter().flatten() {
        if wants_grouping {
            result.groupings.push(GroupingArtifact {
                node_count: b.key.node_count,
                hidden_target: b.hidden_target,
                radius: b.topology.comm_radius(),
                seed: b.key.seed,
                grouping: run_grouping(&b.topology).to_document(),
            });
        }
        result.topologies.push(b);
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEntry {
    pub node_count: usize,
    pub connectivity_index: usize,
    pub seed: u64,
    pub radius: f64,
    pub hidden_receiver_centric: f64,
    pub hidden_as_written: f64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub scenario_name: String,
    /// Resolved scenario with every default spelled out.
    pub scenario: String,
    pub scenario_sha256: String,
    pub export_topology: bool,
    pub runs: usize,
    pub failures: usize,
    pub topologies: Vec<TopologyEntry>,
    /// File name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn topology_bytes(t: &Topology) -> Result<Vec<u8>, SweepError> {
    Ok(serde_json::to_vec_pretty(&t.to_document())?)
}

/// Writes every output file of `result` into `dir` and returns the
/// manifest (also written, as `manifest.json`).
pub fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    result: &SweepResult,
    export_topology: bool,
) -> Result<Manifest, SweepError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut outputs = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<(), SweepError> {
        let path = dir.join(&name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        outputs.insert(name, sha256_hex(&bytes));
        Ok(())
    };

    let mut buf = Vec::new();
    write_summary(&mut buf, &result.rows)?;
    put("summary.csv".into(), buf)?;
    if scenario.seeds.len() >= 2 && !result.rows.is_empty() {
        let mut buf = Vec::new();
        write_aggregate(&mut buf, &result.aggregate()?)?;
        put("aggregate.csv".into(), buf)?;
    }
    for &mode in &scenario.modes {
        let mut buf = Vec::new();
        write_cdf(&mut buf, &result.collision_cdf(mode))?;
        put(format!("cdf_{mode}.csv"), buf)?;
    }
    put("grouping.json".into(), serde_json::to_vec_pretty(&result.groupings)?)?;
    put("schedule.json".into(), serde_json::to_vec_pretty(&result.schedules)?)?;

    let mut topologies = Vec::new();
    for b in &result.topologies {
        let bytes = topology_bytes(&b.topology)?;
        topologies.push(TopologyEntry {
            node_count: b.key.node_count,
            connectivity_index: b.key.connectivity_index,
            seed: b.key.seed,
            radius: b.topology.comm_radius(),
            hidden_receiver_centric: b.hidden_receiver_centric,
            hidden_as_written: b.hidden_as_written,
            sha256: sha256_hex(&bytes),
        });
        if export_topology {
            put(format!("topologies/{}", b.file_name()), bytes)?;
        }
    }
    if !result.failures.is_empty() {
        let log: String = result.failures.iter().map(|f| format!("{}\t{}\n", f.run, f.error)).collect();
        put("errors.log".into(), log.into_bytes())?;
    }

    let scenario_text = scenario.to_toml();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        generator: concat!("scg-core ", env!("CARGO_PKG_VERSION")).into(),
        scenario_name: scenario.name.clone(),
        scenario_sha256: sha256_hex(scenario_text.as_bytes()),
        scenario: scenario_text,
        export_topology,
        runs: scenario.run_count(),
        failures: result.failures.len(),
        topologies,
        outputs,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Runs the sweep and writes its outputs. Failed runs are reported in the
/// manifest and `errors.log`; they do not abort the sweep.
pub fn run_sweep(scenario: &Scenario, dir: &Path, opts: SweepOptions) -> Result<Manifest, SweepError> {
    let result = execute(scenario, opts.parallel)?;
    write_outputs(dir, scenario, &result, opts.export_topology)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, SweepError> {
    let text = fs::read(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(SweepError::Manifest(format!("unsupported format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Reruns a manifest's scenario into `dir` and lists every input or output
/// whose hash differs from the recorded one. Empty means a byte-identical
/// replay.
pub fn replay(manifest: &Manifest, dir: &Path, parallel: Option<usize>) -> Result<Vec<String>, SweepError> {
    if sha256_hex(manifest.scenario.as_bytes()) != manifest.scenario_sha256 {
        return Err(SweepError::Manifest("scenario text does not match its hash".into()));
    }
    let scenario = parse_scenario(&manifest.scenario)?;
    let fresh = run_sweep(&scenario, dir, SweepOptions { parallel, export_topology: manifest.export_topology })?;
    let mut mismatches = Vec::new();
    if fresh.topologies != manifest.topologies {
        mismatches.push("topologies".to_string());
    }
    let names: std::collections::BTreeSet<&String> = manifest.outputs.keys().chain(fresh.outputs.keys()).collect();
    for name in names {
        if manifest.outputs.get(name) != fresh.outputs.get(name) {
            mismatches.push(name.clone());
        }
    }
    Ok(mismatches)
}
