//! The simulated grid: resource descriptions, the directory service used for
//! discovery, fabric configuration files, a synthesizer for large
//! heterogeneous fabrics, and the runtime state of each machine.

mod config;
mod directory;
mod runtime;
mod stream;
mod synth;

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use config::{load_fabric, FabricConfig, FabricError, FabricOptions, Outage, SimResource};
pub use directory::{Directory, DirectoryEntry};
pub use runtime::{AttemptHandle, AttemptSpec, Fabric, FinishReport, StartReport, Unavailable};
pub use stream::{stream_for, unit_draw};
pub use synth::synthesize;

/// Identifier of a grid resource.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(String);

impl ResourceId {
    pub fn new(id: impl Into<String>) -> Self {
        ResourceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ResourceId {
    fn from(s: &str) -> Self {
        ResourceId(s.to_string())
    }
}

impl From<String> for ResourceId {
    fn from(s: String) -> Self {
        ResourceId(s)
    }
}

impl Borrow<str> for ResourceId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Time a job takes on a resource.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobDuration {
    pub cpu_hours: f64,
    pub wall_hours: f64,
}

/// Duration of one job with `expected_job_hours` of reference-machine work:
/// cpu time scales inversely with capability, wall time stretches with load,
/// and batch queues add the wait for the jobs ahead plus staging time.
pub fn job_duration(
    resource: &SimResource,
    expected_job_hours: f64,
    load: f64,
    queue_ahead: u32,
    payload_mb: f64,
) -> JobDuration {
    let cpu_hours = expected_job_hours / resource.capability;
    let wait = match resource.queue_type {
        crate::scheduler::QueueType::BatchQueue => queue_ahead as f64 * resource.mean_service_hours,
        crate::scheduler::QueueType::Interactive => 0.0,
    };
    let wall_hours = cpu_hours / (1.0 - load.clamp(0.0, 0.99)) + wait + staging_hours(resource, payload_mb);
    JobDuration { cpu_hours, wall_hours }
}

/// Staging time: payload size over the resource's bandwidth.
pub fn staging_hours(resource: &SimResource, payload_mb: f64) -> f64 {
    if payload_mb <= 0.0 || resource.bandwidth_mbps <= 0.0 {
        0.0
    } else {
        payload_mb / resource.bandwidth_mbps / 3600.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::QueueType;

    #[test]
    fn duration_formula() {
        let mut r = SimResource::new("R", 2.0);
        let d = job_duration(&r, 1.0, 0.0, 0, 0.0);
        assert_eq!((d.cpu_hours, d.wall_hours), (0.5, 0.5));
        r.capability = 1.0;
        assert_eq!(job_duration(&r, 1.0, 0.5, 0, 0.0).wall_hours, 2.0);
        r.queue_type = QueueType::BatchQueue;
        r.mean_service_hours = 1.0;
        assert_eq!(job_duration(&r, 1.0, 0.0, 3, 0.0).wall_hours, 4.0);
        r.queue_type = QueueType::Interactive;
        r.bandwidth_mbps = 1.0;
        assert_eq!(job_duration(&r, 1.0, 0.0, 0, 3600.0).wall_hours, 2.0);
    }
}
