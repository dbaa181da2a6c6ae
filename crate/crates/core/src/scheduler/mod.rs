//! Resource discovery, rate estimation, selection, assignment and the
//! replanning policy.

mod rate;
mod select;

use serde::{Deserialize, Serialize};

use crate::economy::CostSchedule;
use crate::fabric::{Directory, ResourceId};

pub use rate::{estimate_rate, RateEstimate, RATE_SMOOTHING};
pub use select::{
    assign, select_resources, Candidate, Placement, ScheduleDecision, SchedulerConfig, Selection, SelectionInput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueType {
    Interactive,
    BatchQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceStatus {
    Up,
    Down,
}

/// What the scheduler knows about one resource at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceView {
    pub id: ResourceId,
    pub authorized: bool,
    /// Speed relative to the reference machine.
    pub capability: f64,
    /// Concurrent job slots ("free nodes").
    pub slots: u32,
    pub queue_type: QueueType,
    pub queue_length: u32,
    pub load: f64,
    pub reliability: f64,
    pub bandwidth_mbps: f64,
    pub schedule: CostSchedule,
    pub status: ResourceStatus,
}

impl ResourceView {
    pub fn is_up(&self) -> bool {
        self.status == ResourceStatus::Up
    }
}

/// The resources `user` may use, with current load, queue and status. Down
/// resources are included and flagged.
pub fn discover(directory: &Directory, user: &str) -> Vec<ResourceView> {
    directory.authorized_views(user)
}

/// Events that may force a fresh resource selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanEvent {
    Tick,
    /// A job completed; `eta_within_deadline` is false when the projected
    /// finish has slipped past the deadline.
    Completion {
        eta_within_deadline: bool,
    },
    Failure,
    ResourceUp,
    ResourceDown,
    CostBoundary,
    ConstraintsSteered,
}

/// Decides when to rerun selection. Every event except a completion does;
/// completions only every `every`-th time or when the ETA slips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanPolicy {
    every: u32,
    completions_since_replan: u32,
}

impl ReplanPolicy {
    pub fn new(every: u32) -> Self {
        ReplanPolicy { every: every.max(1), completions_since_replan: 0 }
    }

    pub fn replan_trigger(&mut self, event: ReplanEvent) -> bool {
        let fire = match event {
            ReplanEvent::Completion { eta_within_deadline } => {
                self.completions_since_replan += 1;
                !eta_within_deadline || self.completions_since_replan >= self.every
            }
            _ => true,
        };
        if fire {
            self.completions_since_replan = 0;
        }
        fire
    }
}

impl Default for ReplanPolicy {
    fn default() -> Self {
        ReplanPolicy::new(5)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::money::Money;

    pub(crate) fn view(id: &str, capability: f64) -> ResourceView {
        ResourceView {
            id: ResourceId::from(id),
            authorized: true,
            capability,
            slots: 1,
            queue_type: QueueType::Interactive,
            queue_length: 0,
            load: 0.0,
            reliability: 1.0,
            bandwidth_mbps: 10.0,
            schedule: CostSchedule::flat(Money::units(1)),
            status: ResourceStatus::Up,
        }
    }

    #[test]
    fn replan_triggers() {
        let mut p = ReplanPolicy::default();
        assert!(p.replan_trigger(ReplanEvent::ConstraintsSteered));
        assert!(p.replan_trigger(ReplanEvent::ResourceDown));
        let done = ReplanEvent::Completion { eta_within_deadline: true };
        assert!(!p.replan_trigger(done));
        assert!(!p.replan_trigger(done));
        assert!(!p.replan_trigger(done), "3rd consecutive completion");
        assert!(!p.replan_trigger(done));
        assert!(p.replan_trigger(done), "5th completion");
        assert!(!p.replan_trigger(done));
        assert!(p.replan_trigger(ReplanEvent::Completion { eta_within_deadline: false }));
        assert!(p.replan_trigger(ReplanEvent::Tick));
        assert!(p.replan_trigger(ReplanEvent::CostBoundary));
        assert!(p.replan_trigger(ReplanEvent::Failure));
        assert!(p.replan_trigger(ReplanEvent::ResourceUp));
    }
}
