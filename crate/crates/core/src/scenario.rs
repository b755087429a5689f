//! Declarative experiment descriptions.
//!
//! A scenario is a small TOML document. Top-level keys describe the network
//! and the sweep; `[csma]`, `[tsch]` and `[hybrid]` tables override MAC
//! parameters. Unknown keys are rejected. Keys that name a sweep axis
//! (`mode`, `node_count`, `target_hidden`, `radius`) take either one value
//! or a list.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{MacMode, RunConfig, Traffic, DEFAULT_QUEUE_CAP, DEFAULT_WARMUP_FRACTION};
use crate::mac_csma::{BackoffParams, CsmaParams};
use crate::topology::{HnpFormula, LinkSet};
use crate::tsch::{HybridParams, TschParams};

pub const DEFAULT_SEED_COUNT: u64 = 10;
pub const DEFAULT_HIDDEN_TOLERANCE: f64 = 0.03;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

fn invalid<T>(key: &str, message: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Validation { key: key.to_string(), message: message.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCsma {
    #[serde(skip_serializing_if = "Option::is_none")]
    c_nb: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_be: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_attempts: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    txn_duration_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unit_backoff_us: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTsch {
    #[serde(skip_serializing_if = "Option::is_none")]
    slot_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slotframe_len: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reserved_slots: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cell_txn_us: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHybrid {
    #[serde(skip_serializing_if = "Option::is_none")]
    margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    mode: OneOrMany<MacMode>,
    node_count: OneOrMany<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    area_side: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    single_hop: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<OneOrMany<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_hidden: Option<OneOrMany<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_links: Option<LinkSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hnp_formula: Option<HnpFormula>,
    source_rates: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate_period_s: Option<f64>,
    duration_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    queue_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "is_default")]
    csma: RawCsma,
    #[serde(default, skip_serializing_if = "is_default")]
    tsch: RawTsch,
    #[serde(default, skip_serializing_if = "is_default")]
    hybrid: RawHybrid,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// How node placements become topologies.
#[derive(Debug, Clone, PartialEq)]
pub enum Connectivity {
    /// Fixed communication radii, metres.
    Radius(Vec<f64>),
    /// Radius calibrated per seed to hit each hidden percentage.
    TargetHidden { targets: Vec<f64>, tolerance: f64 },
}

impl Connectivity {
    pub fn len(&self) -> usize {
        match self {
            Connectivity::Radius(r) => r.len(),
            Connectivity::TargetHidden { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub modes: Vec<MacMode>,
    /// Total nodes including the coordinator.
    pub node_counts: Vec<usize>,
    pub area_side: f64,
    /// Coordinator hears every node regardless of distance.
    pub single_hop: bool,
    pub connectivity: Connectivity,
    pub hidden_links: LinkSet,
    pub hnp_formula: HnpFormula,
    /// Each rate `r` means `r` packets per node every `rate_period_s`.
    pub source_rates: Vec<f64>,
    pub rate_period_s: f64,
    pub duration_s: f64,
    pub warmup_fraction: f64,
    pub queue_cap: usize,
    pub seeds: Vec<u64>,
    pub csma: CsmaParams,
    pub tsch: TschParams,
    pub hybrid: HybridParams,
}

fn check_distinct<T: PartialEq + std::fmt::Debug>(key: &str, xs: &[T]) -> Result<(), ScenarioError> {
    if xs.is_empty() {
        return invalid(key, "must not be empty");
    }
    for (i, x) in xs.iter().enumerate() {
        if xs[..i].contains(x) {
            return invalid(key, format!("duplicate entry {x:?}"));
        }
    }
    Ok(())
}

fn check_positive(key: &str, x: f64) -> Result<(), ScenarioError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        invalid(key, format!("{x} must be a positive finite number"))
    }
}

fn micros(key: &str, seconds: f64, scale: f64) -> Result<u64, ScenarioError> {
    let us = seconds * scale;
    if (us - us.round()).abs() > 1e-6 {
        return invalid(key, format!("{seconds} is not a whole number of microseconds"));
    }
    Ok(us.round() as u64)
}

impl RawScenario {
    fn validate(self) -> Result<Scenario, ScenarioError> {
        if self.name.trim().is_empty() {
            return invalid("name", "must not be empty");
        }
        let modes = self.mode.into_vec();
        check_distinct("mode", &modes)?;
        let node_counts = self.node_count.into_vec();
        check_distinct("node_count", &node_counts)?;
        if let Some(&n) = node_counts.iter().find(|&&n| n < 2) {
            return invalid("node_count", format!("{n} < 2 (the coordinator counts as a node)"));
        }
        let area_side = self.area_side.unwrap_or(100.0);
        check_positive("area_side", area_side)?;

        let connectivity = match (self.radius, self.target_hidden) {
            (Some(_), Some(_)) => return invalid("radius", "set exactly one of `radius` and `target_hidden`"),
            (None, None) => return invalid("target_hidden", "set exactly one of `radius` and `target_hidden`"),
            (Some(r), None) => {
                if self.hidden_tolerance.is_some() {
                    return invalid("hidden_tolerance", "only meaningful with `target_hidden`");
                }
                let radii = r.into_vec();
                check_distinct("radius", &radii)?;
                for &x in &radii {
                    check_positive("radius", x)?;
                }
                Connectivity::Radius(radii)
            }
            (None, Some(t)) => {
                let targets = t.into_vec();
                check_distinct("target_hidden", &targets)?;
                if let Some(x) = targets.iter().find(|x| !(0.0..1.0).contains(*x)) {
                    return invalid("target_hidden", format!("{x} outside [0, 1)"));
                }
                let tolerance = self.hidden_tolerance.unwrap_or(DEFAULT_HIDDEN_TOLERANCE);
                if !(0.0..1.0).contains(&tolerance) {
                    return invalid("hidden_tolerance", format!("{tolerance} outside [0, 1)"));
                }
                Connectivity::TargetHidden { targets, tolerance }
            }
        };

        check_distinct("source_rates", &self.source_rates)?;
        if let Some(r) = self.source_rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return invalid("source_rates", format!("{r} must be finite and >= 0"));
        }
        let rate_period_s = self.rate_period_s.unwrap_or(1.0);
        check_positive("rate_period_s", rate_period_s)?;
        micros("rate_period_s", rate_period_s, 1e6)?;
        check_positive("duration_s", self.duration_s)?;
        micros("duration_s", self.duration_s, 1e6)?;
        let warmup_fraction = self.warmup_fraction.unwrap_or(DEFAULT_WARMUP_FRACTION);
        if !(0.0..1.0).contains(&warmup_fraction) {
            return invalid("warmup_fraction", format!("{warmup_fraction} outside [0, 1)"));
        }
        let queue_cap = self.queue_cap.unwrap_or(DEFAULT_QUEUE_CAP);
        if queue_cap == 0 {
            return invalid("queue_cap", "must be >= 1");
        }
        let seeds = self.seeds.unwrap_or_else(|| (1..=DEFAULT_SEED_COUNT).collect());
        check_distinct("seeds", &seeds)?;

        let d = BackoffParams::default();
        let backoff = BackoffParams {
            c_nb: self.csma.c_nb.unwrap_or(d.c_nb),
            c_be: self.csma.c_be.unwrap_or(d.c_be),
            max_attempts: self.csma.max_attempts.unwrap_or(d.max_attempts),
            unit_backoff_us: self.csma.unit_backoff_us.unwrap_or(d.unit_backoff_us),
        };
        if backoff.max_attempts == 0 {
            return invalid("csma.max_attempts", "must be >= 1");
        }
        if backoff.unit_backoff_us == 0 {
            return invalid("csma.unit_backoff_us", "must be >= 1");
        }
        if backoff.c_nb > 32 || backoff.c_be > 32 {
            return invalid("csma.c_be", "c_nb and c_be must be <= 32");
        }
        let csma = CsmaParams {
            backoff,
            txn_duration_us: self.csma.txn_duration_us.unwrap_or(CsmaParams::default().txn_duration_us),
        };
        if csma.txn_duration_us == 0 {
            return invalid("csma.txn_duration_us", "must be >= 1");
        }

        let td = TschParams::default();
        let slot_us = match self.tsch.slot_ms {
            Some(ms) => {
                check_positive("tsch.slot_ms", ms)?;
                micros("tsch.slot_ms", ms, 1e3)?
            }
            None => td.slot_us,
        };
        let tsch = TschParams {
            slot_us,
            slotframe_len: self.tsch.slotframe_len.or(td.slotframe_len),
            channels: self.tsch.channels.unwrap_or(td.channels),
            reserved_slots: self.tsch.reserved_slots.unwrap_or(td.reserved_slots),
            cell_txn_us: self.tsch.cell_txn_us.unwrap_or(td.cell_txn_us),
        };
        if tsch.channels == 0 {
            return invalid("tsch.channels", "must be >= 1");
        }
        if tsch.cell_txn_us == 0 || tsch.cell_txn_us > tsch.slot_us {
            return invalid("tsch.cell_txn_us", format!("must be in [1, {}]", tsch.slot_us));
        }
        if csma.txn_duration_us > tsch.slot_us {
            return invalid("csma.txn_duration_us", format!("must fit in one {} us slot", tsch.slot_us));
        }
        for &n in &node_counts {
            if tsch.reserved_slots >= tsch.frame_len(n) {
                let key = if self.tsch.slotframe_len.is_some() { "tsch.slotframe_len" } else { "tsch.reserved_slots" };
                return invalid(key, "the slotframe must have at least one unreserved slot");
            }
        }
        let hybrid = HybridParams { margin: self.hybrid.margin.unwrap_or(HybridParams::default().margin) };
        check_positive("hybrid.margin", hybrid.margin)?;

        Ok(Scenario {
            name: self.name,
            modes,
            node_counts,
            area_side,
            single_hop: self.single_hop.unwrap_or(false),
            connectivity,
            hidden_links: self.hidden_links.unwrap_or_default(),
            hnp_formula: self.hnp_formula.unwrap_or_default(),
            source_rates: self.source_rates,
            rate_period_s,
            duration_s: self.duration_s,
            warmup_fraction,
            queue_cap,
            seeds,
            csma,
            tsch,
            hybrid,
        })
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    raw.validate()
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&text)
}

impl Scenario {
    /// Fully explicit TOML form; parsing it yields an equal scenario.
    pub fn to_toml(&self) -> String {
        let (radius, target_hidden, hidden_tolerance) = match &self.connectivity {
            Connectivity::Radius(r) => (Some(OneOrMany::Many(r.clone())), None, None),
            Connectivity::TargetHidden { targets, tolerance } => {
                (None, Some(OneOrMany::Many(targets.clone())), Some(*tolerance))
            }
        };
        let b = &self.csma.backoff;
        let raw = RawScenario {
            name: self.name.clone(),
            mode: OneOrMany::Many(self.modes.clone()),
            node_count: OneOrMany::Many(self.node_counts.clone()),
            area_side: Some(self.area_side),
            single_hop: Some(self.single_hop),
            radius,
            target_hidden,
            hidden_tolerance,
            hidden_links: Some(self.hidden_links),
            hnp_formula: Some(self.hnp_formula),
            source_rates: self.source_rates.clone(),
            rate_period_s: Some(self.rate_period_s),
            duration_s: self.duration_s,
            warmup_fraction: Some(self.warmup_fraction),
            queue_cap: Some(self.queue_cap),
            seeds: Some(self.seeds.clone()),
            csma: RawCsma {
                c_nb: Some(b.c_nb),
                c_be: Some(b.c_be),
                max_attempts: Some(b.max_attempts),
                txn_duration_us: Some(self.csma.txn_duration_us),
                unit_backoff_us: Some(b.unit_backoff_us),
            },
            tsch: RawTsch {
                slot_ms: Some(self.tsch.slot_us as f64 / 1e3),
                slotframe_len: self.tsch.slotframe_len,
                channels: Some(self.tsch.channels),
                reserved_slots: Some(self.tsch.reserved_slots),
                cell_txn_us: Some(self.tsch.cell_txn_us),
            },
            hybrid: RawHybrid { margin: Some(self.hybrid.margin) },
        };
        toml::to_string(&raw).expect("scenario fields are all representable in TOML")
    }

    pub fn traffic(&self, rate: f64) -> Traffic {
        Traffic { rate, period_us: (self.rate_period_s * 1e6).round() as u64 }
    }

    pub fn duration_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }

    pub fn run_config(&self, mode: MacMode, rate: f64, seed: u64) -> RunConfig {
        RunConfig {
            warmup_fraction: self.warmup_fraction,
            queue_cap: self.queue_cap,
            csma: self.csma,
            tsch: self.tsch,
            hybrid: self.hybrid,
            ..RunConfig::new(mode, self.traffic(rate), self.duration_us(), seed)
        }
    }

    /// Number of runs a sweep of this scenario performs.
    pub fn run_count(&self) -> usize {
        self.node_counts.len() * self.connectivity.len() * self.modes.len() * self.source_rates.len() * self.seeds.len()
    }
}

const PRESETS: [(&str, &str); 5] = [
    ("fig2", include_str!("../presets/fig2.toml")),
    ("fig3_100node", include_str!("../presets/fig3_100node.toml")),
    ("fig4", include_str!("../presets/fig4.toml")),
    ("fig5_300node", include_str!("../presets/fig5_300node.toml")),
    ("fig6", include_str!("../presets/fig6.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// TOML text of a built-in preset. Accepts the name with or without `.toml`.
pub fn preset_text(name: &str) -> Result<&'static str, ScenarioError> {
    let key = name.strip_suffix(".toml").unwrap_or(name);
    PRESETS
        .iter()
        .find(|(n, _)| *n == key)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario(preset_text(name)?)
}
