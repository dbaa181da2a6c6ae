use serde::{Deserialize, Serialize};

use super::ResourceView;
use crate::fabric::ResourceId;
use crate::time::SimTime;

/// Smoothing factor of the completion-rate moving average.
pub const RATE_SMOOTHING: f64 = 0.3;

/// Estimated job consumption rate of one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub resource_id: ResourceId,
    pub jobs_per_hour: f64,
    /// Completions observed so far.
    pub samples: u32,
    pub last_update: SimTime,
}

impl RateEstimate {
    /// Initial estimate from capability: `capability × reference_rate × slots`.
    pub fn initial(view: &ResourceView, reference_rate: f64, now: SimTime) -> Self {
        let r = view.capability * reference_rate * view.slots.max(1) as f64;
        RateEstimate { resource_id: view.id.clone(), jobs_per_hour: positive(r), samples: 0, last_update: now }
    }

    /// Folds one observed completion rate (jobs/hour) into the estimate.
    pub fn observe(&mut self, observed_jobs_per_hour: f64, now: SimTime) {
        if !(observed_jobs_per_hour.is_finite() && observed_jobs_per_hour > 0.0) {
            return;
        }
        self.jobs_per_hour =
            positive(RATE_SMOOTHING * observed_jobs_per_hour + (1.0 - RATE_SMOOTHING) * self.jobs_per_hour);
        self.samples += 1;
        self.last_update = now;
    }
}

fn positive(r: f64) -> f64 {
    if r > 0.0 && r.is_finite() {
        r
    } else {
        f64::MIN_POSITIVE
    }
}

/// Estimate from a completion history: the capability-based initial value,
/// then an exponentially weighted average over the observed rates in order,
/// scaled by the share of the machine the current load leaves free.
///
/// Observations are zero-load rates: what the attempt implies the resource
/// would deliver with no background load.
pub fn estimate_rate(history: &[f64], view: &ResourceView, reference_rate: f64, now: SimTime) -> RateEstimate {
    let mut est = RateEstimate::initial(view, reference_rate, now);
    for &obs in history {
        est.observe(obs, now);
    }
    est.jobs_per_hour = positive(est.jobs_per_hour * (1.0 - view.load.clamp(0.0, 0.99)));
    est
}
