use rand::Rng;

use super::config::{FabricConfig, FabricOptions, Outage, SimResource};
use super::stream::stream_for;
use super::ResourceId;
use crate::economy::CostSchedule;
use crate::money::Money;
use crate::scheduler::QueueType;
use crate::time::SimDuration;

/// Builds a heterogeneous fabric of `n` resources from `seed`.
///
/// Capabilities are log-uniform in `[0.5, 4.0]`. Day rates grow slightly
/// faster than capability, so fast machines cost more per job; night rates
/// are 30-60% of the day rate. About a third of the resources sit behind
/// batch queues with some foreign work ahead, and about one in ten suffers a
/// single outage during the first day.
pub fn synthesize(n: usize, seed: u64) -> FabricConfig {
    let mut rng = stream_for(seed, "fabric", "synthesize");
    let width = n.max(1).to_string().len().max(2);
    let resources = (0..n)
        .map(|i| {
            let id = format!("R{:0width$}", i + 1);
            let capability = (0.5f64.ln() + rng.gen::<f64>() * (4.0f64.ln() - 0.5f64.ln())).exp();
            let capability = (capability * 100.0).round() / 100.0;
            let day = Money::units(2).scale(capability.powf(1.2) * rng.gen_range(0.7..1.4));
            let night = day.scale(rng.gen_range(0.3..0.6)).max(Money::from_cents(1));
            let batch = rng.gen_bool(0.3);
            let mut r = SimResource::new(&id, capability);
            r.id = ResourceId::from(id);
            r.schedule = CostSchedule::day_night(day.max(Money::from_cents(1)), night);
            r.slots = if rng.gen_bool(0.2) { 2 } else { 1 };
            if batch {
                r.queue_type = QueueType::BatchQueue;
                r.background_queue = rng.gen_range(0..4);
                r.mean_service_hours = rng.gen_range(0.1..0.5);
            }
            r.initial_load = rng.gen_range(0.0..0.3);
            r.failure_rate = rng.gen_range(0.0..0.03);
            r.bandwidth_mbps = rng.gen_range(1.0..100.0);
            r.bid_markup = rng.gen_range(0.9..1.2);
            if rng.gen_bool(0.1) {
                let down = rng.gen_range(60..20 * 60);
                let up = down + rng.gen_range(30..180);
                r.outages.push(Outage {
                    down_at: SimDuration::from_minutes(down),
                    up_at: Some(SimDuration::from_minutes(up)),
                });
            }
            r
        })
        .collect();
    FabricConfig::new(resources, FabricOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = synthesize(70, 42);
        assert_eq!(a, synthesize(70, 42));
        assert_ne!(a, synthesize(70, 43));
        a.validate().unwrap();
        assert_eq!(a.resources.len(), 70);
        assert_eq!(a.resources[0].id.as_str(), "R01");
        assert!(a.resources.iter().all(|r| (0.5..=4.0).contains(&r.capability)));
        assert!(a.resources.iter().any(|r| r.queue_type == QueueType::BatchQueue));
        assert!(a.resources.iter().any(|r| r.queue_type == QueueType::Interactive));
    }
}
