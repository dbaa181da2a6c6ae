//! Brute-force reference for resource selection.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskfarm::fabric::ResourceId;
use taskfarm::money::Money;
use taskfarm::scheduler::{select_resources, Candidate, SchedulerConfig, SelectionInput};
use taskfarm::time::SimDuration;

/// A random instance: up to 6 resources, up to 30 jobs, static rates.
/// Slot times are multiples of a quarter hour so capacities are exact.
pub fn instance(rng: &mut ChaCha8Rng) -> SelectionInput {
    let n_res = rng.gen_range(1..=6);
    let candidates = (0..n_res)
        .map(|i| {
            let slots = rng.gen_range(1..=3u32);
            let slot_hours = rng.gen_range(1..=12) as f64 * 0.25;
            let busy_hours =
                (0..slots).map(|_| if rng.gen_bool(0.3) { rng.gen_range(1..=8) as f64 * 0.25 } else { 0.0 }).collect();
            Candidate {
                resource_id: ResourceId::new(format!("R{i}")),
                usable: rng.gen_bool(0.9),
                jobs_per_hour: slots as f64 / slot_hours,
                rate: Money::from_cents(rng.gen_range(1..=500)),
                busy_hours,
                slots,
            }
        })
        .collect();
    SelectionInput {
        n_remaining: rng.gen_range(1..=30),
        t_rem: SimDuration::from_minutes(rng.gen_range(4..=64) * 15),
        candidates,
        budget_remaining: Money::units(1_000_000),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Jobs a candidate finishes within `hours`, counted job by job per slot.
fn jobs_within(c: &Candidate, hours: f64) -> u64 {
    let slot_hours = c.slots as f64 / c.jobs_per_hour;
    (0..c.slots as usize)
        .map(|s| {
            let mut t = c.busy_hours.get(s).copied().unwrap_or(0.0);
            let mut n = 0;
            while t + slot_hours <= hours + 1e-9 {
                t += slot_hours;
                n += 1;
            }
            n
        })
        .sum()
}

fn job_cost(c: &Candidate) -> i64 {
    (c.rate.cents() as f64 * c.slots as f64 / c.jobs_per_hour).round() as i64
}

/// Cheapest way to place `n` jobs on `members` with per-member caps, by
/// exhaustive dynamic programming over allocations.
fn cheapest_placement(n: u64, members: &[(u64, i64)]) -> Option<i64> {
    let n = n as usize;
    let mut best = vec![None; n + 1];
    best[0] = Some(0i64);
    for &(cap, cost) in members {
        let mut next = vec![None; n + 1];
        for (placed, b) in best.iter().enumerate() {
            let Some(b) = b else { continue };
            for take in 0..=(cap as usize).min(n - placed) {
                let c = b + cost * take as i64;
                let slot: &mut Option<i64> = &mut next[placed + take];
                if slot.is_none_or(|s| c < s) {
                    *slot = Some(c);
                }
            }
        }
        best = next;
    }
    best[n]
}

/// Minimum cost over every subset of usable candidates that can finish all
/// jobs in time, or `None` when no subset can.
pub fn brute_force_min(input: &SelectionInput) -> Option<Money> {
    let usable: Vec<&Candidate> = input.candidates.iter().filter(|c| c.usable).collect();
    let hours = input.t_rem.hours();
    let mut best: Option<i64> = None;
    for mask in 1u32..(1 << usable.len()) {
        let members: Vec<(u64, i64)> = usable
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| (jobs_within(c, hours), job_cost(c)))
            .collect();
        if members.iter().map(|m| m.0).sum::<u64>() < input.n_remaining {
            continue;
        }
        if let Some(c) = cheapest_placement(input.n_remaining, &members) {
            best = Some(best.map_or(c, |b| b.min(c)));
        }
    }
    best.map(Money::from_cents)
}

/// Runs `count` instances; returns (feasible instances checked, mismatches).
pub fn check(count: u64, seed: u64) -> (u64, Vec<String>) {
    let config = SchedulerConfig::default();
    let mut rng = rng(seed);
    let mut feasible = 0;
    let mut bad = Vec::new();
    for i in 0..count {
        let input = instance(&mut rng);
        let d = select_resources(&input, &config);
        match brute_force_min(&input) {
            Some(min) => {
                feasible += 1;
                if !d.feasible_deadline || d.projected_cost != min {
                    bad.push(format!(
                        "instance {i}: selected {} (feasible {}), oracle {min}",
                        d.projected_cost, d.feasible_deadline
                    ));
                }
            }
            None if d.feasible_deadline => {
                bad.push(format!("instance {i}: selection claims a cover the oracle cannot find"))
            }
            None => {}
        }
    }
    (feasible, bad)
}
