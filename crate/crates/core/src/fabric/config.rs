use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ResourceId;
use crate::economy::{CostSchedule, ScheduleError};
use crate::money::Money;
use crate::scheduler::QueueType;
use crate::time::{SimDuration, TimeOfDay};

/// A scripted outage: the resource goes down at `down_at` (from simulation
/// start) and comes back at `up_at`, or never.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub down_at: SimDuration,
    #[serde(default)]
    pub up_at: Option<SimDuration>,
}

fn default_slots() -> u32 {
    1
}
fn default_bandwidth() -> f64 {
    10.0
}
fn default_sigma() -> f64 {
    0.05
}
fn default_markup() -> f64 {
    1.0
}
fn default_schedule() -> CostSchedule {
    CostSchedule::flat(Money::units(1))
}

/// One simulated machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResource {
    pub id: ResourceId,
    /// Speed relative to the reference machine.
    pub capability: f64,
    #[serde(default = "default_slots")]
    pub slots: u32,
    #[serde(default = "queue_default")]
    pub queue_type: QueueType,
    /// Foreign jobs queued ahead at simulation start (batch queues).
    #[serde(default)]
    pub background_queue: u32,
    /// Mean service time of a foreign job, hours.
    #[serde(default)]
    pub mean_service_hours: f64,
    /// Background load at simulation start, in `[0, 0.9]`.
    #[serde(default)]
    pub initial_load: f64,
    /// Step size of the load random walk.
    #[serde(default = "default_sigma")]
    pub load_sigma: f64,
    /// Probability that an attempt fails.
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
    #[serde(default = "default_schedule")]
    pub schedule: CostSchedule,
    /// Multiplier applied to the scheduled rate when bidding in a tender.
    #[serde(default = "default_markup")]
    pub bid_markup: f64,
    /// Users allowed to run here; `None` allows everyone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outages: Vec<Outage>,
}

fn queue_default() -> QueueType {
    QueueType::Interactive
}

impl SimResource {
    /// An idle interactive single-slot resource with a flat rate of 1.00.
    pub fn new(id: &str, capability: f64) -> Self {
        SimResource {
            id: ResourceId::from(id),
            capability,
            slots: 1,
            queue_type: QueueType::Interactive,
            background_queue: 0,
            mean_service_hours: 0.0,
            initial_load: 0.0,
            load_sigma: default_sigma(),
            failure_rate: 0.0,
            bandwidth_mbps: default_bandwidth(),
            schedule: default_schedule(),
            bid_markup: 1.0,
            users: None,
            outages: Vec::new(),
        }
    }

    pub fn with_schedule(mut self, schedule: CostSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_slots(mut self, slots: u32) -> Self {
        self.slots = slots;
        self
    }

    pub fn allows(&self, user: &str) -> bool {
        self.users.as_ref().is_none_or(|u| u.contains(user))
    }

    pub fn reliability(&self) -> f64 {
        1.0 - self.failure_rate
    }
}

fn yes() -> bool {
    true
}

fn default_origin() -> TimeOfDay {
    TimeOfDay::hm(8, 0)
}

fn default_load_step() -> SimDuration {
    SimDuration::from_minutes(5)
}

/// Switches for the stochastic parts of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricOptions {
    #[serde(default = "yes")]
    pub load_variation: bool,
    #[serde(default = "yes")]
    pub failures: bool,
    #[serde(default = "yes")]
    pub outages: bool,
    #[serde(default = "default_load_step")]
    pub load_step: SimDuration,
    /// Wall-clock time of day at simulation time zero.
    #[serde(default = "default_origin")]
    pub clock_origin: TimeOfDay,
    /// Ceiling of the load random walk.
    #[serde(default = "default_load_max")]
    pub load_max: f64,
}

fn default_load_max() -> f64 {
    0.9
}

impl Default for FabricOptions {
    fn default() -> Self {
        FabricOptions {
            load_variation: true,
            failures: true,
            outages: true,
            load_step: default_load_step(),
            clock_origin: default_origin(),
            load_max: default_load_max(),
        }
    }
}

impl FabricOptions {
    /// No load drift, failures or outages.
    pub fn frozen() -> Self {
        FabricOptions { load_variation: false, failures: false, outages: false, ..Default::default() }
    }
}

/// A fabric description as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    #[serde(default)]
    pub options: FabricOptions,
    pub resources: Vec<SimResource>,
}

#[derive(Debug, thiserror::Error)]
pub enum FabricError {
    #[error("cannot read fabric file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed fabric config: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("duplicate resource id `{0}`")]
    DuplicateId(ResourceId),
    #[error("resource `{id}`: {source}")]
    Schedule { id: ResourceId, source: ScheduleError },
    #[error("resource `{id}`: {message}")]
    Invalid { id: ResourceId, message: String },
    #[error("load ceiling must be in [0, 1), got {0}")]
    LoadCeiling(f64),
}

impl FabricConfig {
    pub fn new(resources: Vec<SimResource>, options: FabricOptions) -> Self {
        FabricConfig { options, resources }
    }

    pub fn parse(text: &str) -> Result<Self, FabricError> {
        let cfg: FabricConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fabric config serializes")
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        if !(0.0..1.0).contains(&self.options.load_max) {
            return Err(FabricError::LoadCeiling(self.options.load_max));
        }
        let mut seen = BTreeSet::new();
        for r in &self.resources {
            if !seen.insert(&r.id) {
                return Err(FabricError::DuplicateId(r.id.clone()));
            }
            let bad = |message: &str| Err(FabricError::Invalid { id: r.id.clone(), message: message.to_string() });
            if r.id.as_str().is_empty() {
                return bad("empty resource id");
            }
            if !(r.capability > 0.0 && r.capability.is_finite()) {
                return bad("capability must be positive");
            }
            if r.slots == 0 {
                return bad("slots must be at least 1");
            }
            if !(0.0..1.0).contains(&r.failure_rate) {
                return bad("failure_rate must be in [0, 1)");
            }
            if !(0.0..=self.options.load_max).contains(&r.initial_load) {
                return bad("initial_load must be within [0, load ceiling]");
            }
            if !(r.load_sigma >= 0.0 && r.mean_service_hours >= 0.0 && r.bandwidth_mbps >= 0.0) {
                return bad("load_sigma, mean_service_hours and bandwidth_mbps must be non-negative");
            }
            if r.bid_markup.is_nan() || r.bid_markup <= 0.0 {
                return bad("bid_markup must be positive");
            }
            for o in &r.outages {
                if o.down_at.millis() < 0 || o.up_at.is_some_and(|u| u <= o.down_at) {
                    return bad("outage must come back up after it goes down");
                }
            }
            r.schedule.validate().map_err(|source| FabricError::Schedule { id: r.id.clone(), source })?;
        }
        Ok(())
    }
}

/// Reads and validates a fabric configuration file (JSON).
pub fn load_fabric(path: impl AsRef<Path>) -> Result<FabricConfig, FabricError> {
    FabricConfig::parse(&std::fs::read_to_string(path)?)
}
