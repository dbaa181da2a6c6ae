//! Deadline-constrained, cost-minimizing resource selection.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::fabric::ResourceId;
use crate::money::Money;
use crate::plan::JobId;
use crate::time::SimDuration;

/// Slack added before flooring capacities, absorbing float noise in
/// `rate × hours` products that should be whole numbers.
const CAPACITY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub scheduling_cycle: SimDuration,
    /// Cycles of work kept in flight per resource.
    pub pipeline_factor: f64,
    /// Jobs per hour on the reference machine. `None` means one job per
    /// `expected_job_hours` of the plan.
    pub reference_rate: Option<f64>,
    /// A completion forces a replan every this many completions.
    pub completion_replan_every: u32,
    /// Fraction of the deadline held back when planning, so late failures
    /// can still be retried in time.
    #[serde(default = "default_margin")]
    pub deadline_margin: f64,
}

fn default_margin() -> f64 {
    0.1
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            scheduling_cycle: SimDuration::from_minutes(2),
            pipeline_factor: 2.0,
            reference_rate: None,
            completion_replan_every: 5,
            deadline_margin: default_margin(),
        }
    }
}

impl SchedulerConfig {
    pub fn reference_rate_for(&self, expected_job_hours: f64) -> f64 {
        self.reference_rate.unwrap_or(1.0 / expected_job_hours)
    }

    /// In-flight jobs kept on a resource: enough for every slot, and at
    /// least `pipeline_factor` cycles of work.
    pub fn quota_for(&self, jobs_per_hour: f64, slots: u32) -> u32 {
        let q = (jobs_per_hour * self.scheduling_cycle.hours() * self.pipeline_factor).round();
        (q as u32).max(slots).max(1)
    }

    /// The part of `deadline` the plan aims to finish within.
    pub fn planning_horizon(&self, deadline: SimDuration) -> SimDuration {
        SimDuration::from_millis((deadline.millis() as f64 * (1.0 - self.deadline_margin.clamp(0.0, 0.9))) as i64)
    }
}

/// One resource as the selection algorithm sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub resource_id: ResourceId,
    /// Authorized for the user and currently up.
    pub usable: bool,
    pub jobs_per_hour: f64,
    /// Money per cpu-hour for this user, pinned at decision time.
    pub rate: Money,
    /// Hours until each busy slot frees up; slots not listed are free now.
    #[serde(default)]
    pub busy_hours: Vec<f64>,
    /// Concurrent slots; `jobs_per_hour` covers all of them.
    #[serde(default = "one")]
    pub slots: u32,
}

fn one() -> u32 {
    1
}

impl Candidate {
    /// Expected money per job: the rate applied to the hours one job
    /// occupies a slot, `slots ÷ jobs_per_hour`.
    pub fn cost_per_job(&self) -> Money {
        self.rate.scale(self.slots.max(1) as f64 / self.jobs_per_hour)
    }

    /// Hours one job holds a slot.
    pub fn slot_hours(&self) -> f64 {
        self.slots.max(1) as f64 / self.jobs_per_hour
    }

    fn slot_busy(&self, slot: usize) -> f64 {
        self.busy_hours.get(slot).copied().unwrap_or(0.0).max(0.0)
    }

    /// Whole jobs the resource can finish within `hours`: per slot, the jobs
    /// that fit once the slot's committed work drains.
    pub fn capacity(&self, hours: f64) -> u64 {
        let per_slot = self.jobs_per_hour / self.slots.max(1) as f64;
        (0..self.slots.max(1) as usize)
            .map(|s| ((hours - self.slot_busy(s)).max(0.0) * per_slot + CAPACITY_SLACK).floor() as u64)
            .sum()
    }

    /// Instant (hours from now) at which the `k`-th job placed here
    /// finishes, slots taking jobs as they free up.
    pub fn kth_finish(&self, k: u64) -> f64 {
        let d = self.slot_hours();
        let mut counts = vec![0u64; self.slots.max(1) as usize];
        let mut last = 0.0;
        for _ in 0..k {
            let (s, t) = counts
                .iter()
                .enumerate()
                .map(|(s, &n)| (s, self.slot_busy(s) + (n + 1) as f64 * d))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one slot");
            counts[s] += 1;
            last = t;
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInput {
    pub n_remaining: u64,
    pub t_rem: SimDuration,
    pub candidates: Vec<Candidate>,
    pub budget_remaining: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub resource_id: ResourceId,
    /// Jobs kept in flight on this resource.
    pub quota: u32,
    /// Jobs this decision plans to place on this resource.
    pub allocation: u64,
    pub cost_per_job: Money,
    pub jobs_per_hour: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    /// Cheapest first.
    pub selected: Vec<Selection>,
    pub projected_finish: SimDuration,
    pub projected_cost: Money,
    pub feasible_deadline: bool,
    pub feasible_budget: bool,
}

impl ScheduleDecision {
    pub fn is_selected(&self, id: &ResourceId) -> bool {
        self.selected.iter().any(|s| &s.resource_id == id)
    }

    pub fn aggregate_rate(&self) -> f64 {
        self.selected.iter().map(|s| s.jobs_per_hour).sum()
    }
}

fn by_cost(a: &(Money, &Candidate), b: &(Money, &Candidate)) -> Ordering {
    a.0.cmp(&b.0).then_with(|| a.1.resource_id.cmp(&b.1.resource_id))
}

/// Fills `n` jobs onto `members` in order, each up to its capacity.
fn fill(n: u64, members: &[(Money, &Candidate)], hours: f64) -> (Vec<u64>, Money) {
    let mut left = n;
    let mut cost = Money::ZERO;
    let allocs = members
        .iter()
        .map(|(c, cand)| {
            let take = left.min(cand.capacity(hours));
            left -= take;
            cost += *c * take;
            take
        })
        .collect();
    (allocs, cost)
}

/// Earliest horizon (hours) by which the candidates together can finish `n`
/// jobs: the n-th smallest completion instant over all slots.
fn horizon_for(n: u64, members: &[(Money, &Candidate)]) -> f64 {
    #[derive(PartialEq)]
    struct At(f64);
    impl Eq for At {}
    impl PartialOrd for At {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for At {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0.total_cmp(&other.0)
        }
    }
    let at = |c: &Candidate, s: usize, k: u64| c.slot_busy(s) + k as f64 * c.slot_hours();
    let mut heap: BinaryHeap<Reverse<(At, usize, usize, u64)>> = members
        .iter()
        .enumerate()
        .flat_map(|(i, (_, c))| (0..c.slots.max(1) as usize).map(move |s| (i, s, c)))
        .map(|(i, s, c)| Reverse((At(at(c, s, 1)), i, s, 1)))
        .collect();
    let mut done = 0;
    let mut last = 0.0;
    while done < n {
        let Reverse((At(t), i, s, k)) = heap.pop().expect("at least one member");
        last = t;
        done += 1;
        heap.push(Reverse((At(at(members[i].1, s, k + 1)), i, s, k + 1)));
    }
    last
}

fn finish_hours(members: &[(Money, &Candidate)], allocs: &[u64]) -> f64 {
    members.iter().zip(allocs).filter(|(_, &a)| a > 0).map(|((_, c), &a)| c.kth_finish(a)).fold(0.0, f64::max)
}

/// Picks the cheapest set of resources that can finish `n_remaining` jobs
/// within `t_rem`, with per-resource allocations and in-flight quotas.
///
/// Candidates are sorted by expected cost per job (ties by id) and the
/// shortest prefix whose combined capacity covers the work is selected; jobs
/// are then filled cheapest-first. When no prefix suffices every candidate is
/// selected, the deadline flag is cleared and the fill uses the earliest
/// horizon at which all jobs can finish.
pub fn select_resources(input: &SelectionInput, config: &SchedulerConfig) -> ScheduleDecision {
    let mut members: Vec<(Money, &Candidate)> = input
        .candidates
        .iter()
        .filter(|c| c.usable && c.jobs_per_hour > 0.0 && c.jobs_per_hour.is_finite())
        .map(|c| (c.cost_per_job(), c))
        .collect();
    if input.n_remaining == 0 {
        return ScheduleDecision { feasible_deadline: true, feasible_budget: true, ..Default::default() };
    }
    if members.is_empty() {
        return ScheduleDecision::default();
    }
    members.sort_by(by_cost);
    let n = input.n_remaining;
    let t = input.t_rem.hours().max(0.0);

    let mut covered = 0u64;
    let mut prefix_len = None;
    for (i, (_, c)) in members.iter().enumerate() {
        covered = covered.saturating_add(c.capacity(t));
        if covered >= n {
            prefix_len = Some(i + 1);
            break;
        }
    }
    let feasible_deadline = prefix_len.is_some();
    let mut len = prefix_len.unwrap_or(members.len());
    let horizon = if feasible_deadline { t } else { horizon_for(n, &members).max(t) };

    let (mut allocs, mut cost) = fill(n, &members[..len], horizon);
    let mut feasible_budget = cost <= input.budget_remaining;
    // Trimming the most expensive member is only taken while the remaining
    // prefix still covers the deadline.
    while !feasible_budget && feasible_deadline && len > 1 {
        let shorter = &members[..len - 1];
        let cap: u64 = shorter.iter().map(|(_, c)| c.capacity(horizon)).sum();
        if cap < n {
            break;
        }
        len -= 1;
        (allocs, cost) = fill(n, &members[..len], horizon);
        feasible_budget = cost <= input.budget_remaining;
    }

    let chosen = &members[..len];
    let mut finish = SimDuration::from_hours_f64(finish_hours(chosen, &allocs));
    if feasible_deadline && finish > input.t_rem {
        finish = input.t_rem;
    }
    let selected = chosen
        .iter()
        .zip(&allocs)
        .map(|((c, cand), &allocation)| Selection {
            resource_id: cand.resource_id.clone(),
            quota: config.quota_for(cand.jobs_per_hour, cand.slots),
            allocation,
            cost_per_job: *c,
            jobs_per_hour: cand.jobs_per_hour,
        })
        .collect();
    ScheduleDecision { selected, projected_finish: finish, projected_cost: cost, feasible_deadline, feasible_budget }
}

/// A job-to-resource placement produced by [`assign`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub job_id: JobId,
    pub resource_id: ResourceId,
}

/// Fills each selected resource, cheapest first, up to its quota minus what it
/// already has in flight and up to what remains of its allocation. Jobs are
/// taken in ordinal order.
pub fn assign(
    waiting: &[JobId],
    decision: &ScheduleDecision,
    in_flight: &BTreeMap<ResourceId, u32>,
    dispatched_since_decision: &BTreeMap<ResourceId, u64>,
) -> Vec<Placement> {
    let mut jobs = waiting.to_vec();
    jobs.sort();
    let mut jobs = jobs.into_iter();
    let mut out = Vec::new();
    for sel in &decision.selected {
        let busy = in_flight.get(&sel.resource_id).copied().unwrap_or(0);
        let used = dispatched_since_decision.get(&sel.resource_id).copied().unwrap_or(0);
        let free = sel.quota.saturating_sub(busy) as u64;
        let take = free.min(sel.allocation.saturating_sub(used));
        for _ in 0..take {
            match jobs.next() {
                Some(job_id) => out.push(Placement { job_id, resource_id: sel.resource_id.clone() }),
                None => return out,
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, r: f64, cost_per_job: i64) -> Candidate {
        // rate chosen so that rate / r is the requested per-job cost
        Candidate {
            resource_id: ResourceId::from(id),
            usable: true,
            jobs_per_hour: r,
            rate: Money::units(cost_per_job).scale(r),
            busy_hours: Vec::new(),
            slots: 1,
        }
    }

    fn abc() -> Vec<Candidate> {
        vec![cand("A", 4.0, 1), cand("B", 2.0, 2), cand("C", 1.0, 5)]
    }

    fn ids(d: &ScheduleDecision) -> Vec<&str> {
        d.selected.iter().map(|s| s.resource_id.as_str()).collect()
    }

    fn input(n: u64, hours: i64, candidates: Vec<Candidate>, budget: i64) -> SelectionInput {
        SelectionInput {
            n_remaining: n,
            t_rem: SimDuration::from_hours(hours),
            candidates,
            budget_remaining: Money::units(budget),
        }
    }

    #[test]
    fn worked_example() {
        let d = select_resources(&input(10, 2, abc(), 1000), &SchedulerConfig::default());
        assert_eq!(ids(&d), vec!["A", "B"]);
        assert_eq!(d.projected_cost, Money::units(12));
        assert_eq!(d.selected[0].allocation, 8);
        assert_eq!(d.selected[1].allocation, 2);
        assert!(d.feasible_deadline && d.feasible_budget);
        assert_eq!(d.projected_finish, SimDuration::from_hours(2));
    }

    #[test]
    fn tight_deadline_selects_everything() {
        let d = select_resources(&input(10, 1, abc(), 1000), &SchedulerConfig::default());
        assert_eq!(ids(&d), vec!["A", "B", "C"]);
        assert!(!d.feasible_deadline);
        let total: u64 = d.selected.iter().map(|s| s.allocation).sum();
        assert_eq!(total, 10);
        assert!(d.projected_finish > SimDuration::from_hours(1));
    }

    #[test]
    fn nothing_to_do() {
        let d = select_resources(&input(0, 2, abc(), 1000), &SchedulerConfig::default());
        assert!(d.selected.is_empty());
        assert!(d.feasible_deadline && d.feasible_budget);
        assert_eq!(d.projected_cost, Money::ZERO);
    }

    #[test]
    fn no_usable_resources() {
        let mut c = abc();
        c.iter_mut().for_each(|c| c.usable = false);
        let d = select_resources(&input(5, 2, c, 1000), &SchedulerConfig::default());
        assert!(d.selected.is_empty());
        assert!(!d.feasible_deadline && !d.feasible_budget);
    }

    #[test]
    fn over_budget_is_flagged() {
        let d = select_resources(&input(10, 2, abc(), 5), &SchedulerConfig::default());
        assert_eq!(ids(&d), vec!["A", "B"]);
        assert!(d.feasible_deadline);
        assert!(!d.feasible_budget);
    }

    #[test]
    fn busy_time_reduces_capacity() {
        let mut c = abc();
        c[0].busy_hours = vec![1.0];
        let d = select_resources(&input(10, 2, c, 1000), &SchedulerConfig::default());
        // A can only fit 4 more jobs, B 4, C 2.
        assert_eq!(ids(&d), vec!["A", "B", "C"]);
        assert_eq!(d.projected_cost, Money::units(4 + 8 + 10));
    }

    #[test]
    fn slot_capacity() {
        let mut c = cand("S", 2.0, 1);
        c.slots = 2;
        // one hour per job per slot; 1.5h fits one job on each slot
        assert_eq!(c.capacity(1.5), 2);
        c.busy_hours = vec![0.75];
        assert_eq!(c.capacity(1.5), 1);
        assert_eq!(c.capacity(1.75), 2);
        assert_eq!(c.kth_finish(1), 1.0);
        assert_eq!(c.kth_finish(2), 1.75);
        assert_eq!(c.kth_finish(3), 2.0);
    }

    #[test]
    fn planning_horizon_holds_back_margin() {
        let cfg = SchedulerConfig::default();
        assert_eq!(cfg.planning_horizon(SimDuration::from_hours(10)), SimDuration::from_hours(9));
        let none = SchedulerConfig { deadline_margin: 0.0, ..cfg };
        assert_eq!(none.planning_horizon(SimDuration::from_hours(10)), SimDuration::from_hours(10));
    }

    #[test]
    fn quota_rule() {
        let cfg = SchedulerConfig::default();
        assert_eq!(cfg.quota_for(4.0, 1), 1);
        assert_eq!(cfg.quota_for(60.0, 1), 4);
        assert_eq!(cfg.quota_for(4.0, 3), 3);
    }

    fn decision(quotas: &[(&str, u32)]) -> ScheduleDecision {
        ScheduleDecision {
            selected: quotas
                .iter()
                .map(|&(id, q)| Selection {
                    resource_id: ResourceId::from(id),
                    quota: q,
                    allocation: 1000,
                    cost_per_job: Money::ZERO,
                    jobs_per_hour: 1.0,
                })
                .collect(),
            feasible_deadline: true,
            feasible_budget: true,
            ..Default::default()
        }
    }

    fn placed(p: &[Placement]) -> Vec<(u32, &str)> {
        p.iter().map(|p| (p.job_id.0, p.resource_id.as_str())).collect()
    }

    #[test]
    fn assign_fill_rule() {
        let waiting: Vec<JobId> = (0..6).map(JobId).collect();
        let p = assign(&waiting, &decision(&[("A", 4), ("B", 2)]), &BTreeMap::new(), &BTreeMap::new());
        assert_eq!(placed(&p), vec![(0, "A"), (1, "A"), (2, "A"), (3, "A"), (4, "B"), (5, "B")]);
    }

    #[test]
    fn assign_with_full_quotas() {
        let waiting: Vec<JobId> = (0..6).map(JobId).collect();
        let inflight = BTreeMap::from([(ResourceId::from("A"), 4), (ResourceId::from("B"), 2)]);
        assert!(assign(&waiting, &decision(&[("A", 4), ("B", 2)]), &inflight, &BTreeMap::new()).is_empty());
    }

    #[test]
    fn assign_partial_in_flight() {
        let waiting: Vec<JobId> = (0..3).map(JobId).collect();
        let inflight = BTreeMap::from([(ResourceId::from("A"), 2)]);
        let p = assign(&waiting, &decision(&[("A", 4), ("B", 2)]), &inflight, &BTreeMap::new());
        assert_eq!(placed(&p), vec![(0, "A"), (1, "A"), (2, "B")]);
    }

    #[test]
    fn assign_respects_allocation() {
        let waiting: Vec<JobId> = (0..6).map(JobId).collect();
        let mut d = decision(&[("A", 4), ("B", 4)]);
        d.selected[0].allocation = 3;
        let used = BTreeMap::from([(ResourceId::from("A"), 2)]);
        let p = assign(&waiting, &d, &BTreeMap::new(), &used);
        assert_eq!(placed(&p), vec![(0, "A"), (1, "B"), (2, "B"), (3, "B"), (4, "B")]);
    }
}
