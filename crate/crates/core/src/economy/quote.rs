use serde::{Deserialize, Serialize};

use crate::fabric::ResourceId;
use crate::money::Money;
use crate::scheduler::{select_resources, Candidate, ScheduleDecision, SchedulerConfig, SelectionInput};
use crate::time::SimDuration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumedResource {
    pub resource_id: ResourceId,
    /// Money per cpu-hour used for the projection.
    pub rate: Money,
    /// Jobs per hour assumed for the projection.
    pub jobs_per_hour: f64,
    pub allocation: u64,
}

/// A pre-run answer: can the work be done by the deadline within the budget,
/// and at what projected cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub feasible: bool,
    pub feasible_deadline: bool,
    pub feasible_budget: bool,
    pub projected_cost: Money,
    pub projected_finish: SimDuration,
    pub assumed_resources: Vec<AssumedResource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Quote {
    fn from_decision(d: &ScheduleDecision, candidates: &[Candidate], deadline: SimDuration, budget: Money) -> Quote {
        let assumed_resources = d
            .selected
            .iter()
            .map(|s| {
                let rate =
                    candidates.iter().find(|c| c.resource_id == s.resource_id).map(|c| c.rate).unwrap_or_default();
                AssumedResource {
                    resource_id: s.resource_id.clone(),
                    rate,
                    jobs_per_hour: s.jobs_per_hour,
                    allocation: s.allocation,
                }
            })
            .collect();
        let feasible = d.feasible_deadline && d.feasible_budget;
        let reason = if feasible {
            None
        } else if !d.feasible_deadline {
            Some(format!("cannot meet the deadline: {} needed, {deadline} available", d.projected_finish))
        } else {
            Some(format!("projected cost {} exceeds budget {budget}", d.projected_cost))
        };
        Quote {
            feasible,
            feasible_deadline: d.feasible_deadline,
            feasible_budget: d.feasible_budget,
            projected_cost: d.projected_cost,
            projected_finish: d.projected_finish,
            assumed_resources,
            reason,
        }
    }
}

/// Runs the scheduler's selection for `n_jobs` against the current candidate
/// set without committing anything. `deadline` is the planning time left.
pub fn quote(
    n_jobs: u64,
    deadline: SimDuration,
    budget: Money,
    candidates: &[Candidate],
    config: &SchedulerConfig,
) -> Quote {
    if n_jobs > 0 && !candidates.iter().any(|c| c.usable) {
        return Quote {
            feasible: false,
            feasible_deadline: false,
            feasible_budget: false,
            projected_cost: Money::ZERO,
            projected_finish: SimDuration::ZERO,
            assumed_resources: Vec::new(),
            reason: Some("no authorized resources available".into()),
        };
    }
    let input = SelectionInput {
        n_remaining: n_jobs,
        t_rem: deadline,
        candidates: candidates.to_vec(),
        budget_remaining: budget,
    };
    let decision = select_resources(&input, config);
    Quote::from_decision(&decision, candidates, deadline, budget)
}
