//! Discrete-event simulation of uplink traffic in a wireless mesh under three
//! medium-access schemes: unslotted CSMA/CA, TSCH with dedicated cells,
//! and a hybrid where self-configured groups of mutually audible siblings
//! share a contention window inside the slotframe.
//!
//! The pipeline is [`topology`] (placement, tree, hidden-node ratio),
//! [`scg`] (grouping), [`tsch`] (slotframe construction), [`engine`]
//! (simulation), [`metrics`] (counters to CSV) and [`scenario`] /
//! [`sweep`] (TOML-driven parameter sweeps with a replayable manifest).
//! All randomness flows from a run seed through [`rng`], so a sweep is
//! byte-for-byte reproducible.

pub mod engine;
pub mod mac_csma;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod scg;
pub mod sweep;
pub mod topology;
pub mod tsch;
