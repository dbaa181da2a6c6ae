//! Projections computed from journal records alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{JobEvent, JobState, JournalEvent, JournalRecord, Phase};
use crate::fabric::ResourceId;
use crate::money::Money;
use crate::plan::JobId;
use crate::time::{SimDuration, SimTime};

/// Fleet-wide usage at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub t: SimTime,
    /// Resources holding at least one job.
    pub resources_in_use: u32,
    pub jobs_in_flight: u32,
    pub jobs_done: u32,
    pub committed: Money,
}

/// One resource's state after a change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub t: SimTime,
    pub in_flight: u32,
    /// Charged so far on this resource.
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSeries {
    pub resource_id: ResourceId,
    pub jobs_done: u32,
    pub attempts_failed: u32,
    pub cpu_hours: f64,
    pub cost: Money,
    pub points: Vec<ResourceUsage>,
}

/// Replays job placement and charges record by record.
#[derive(Default)]
struct Replay {
    origin: Option<SimTime>,
    end: Option<SimTime>,
    placed: BTreeMap<JobId, ResourceId>,
    in_flight: BTreeMap<ResourceId, u32>,
    done: u32,
    committed: Money,
}

impl Replay {
    /// Applies one record; returns the resource it touched, if any.
    fn apply(&mut self, r: &JournalRecord) -> Option<(ResourceId, Money, bool, bool, f64)> {
        match &r.event {
            JournalEvent::PhaseChanged { to, .. } => {
                if *to == Phase::Running && self.origin.is_none() {
                    self.origin = Some(r.t_sim);
                }
                if to.is_terminal() {
                    self.end = Some(r.t_sim);
                }
                None
            }
            JournalEvent::Recovered { reset, .. } => {
                for job in reset {
                    if let Some(res) = self.placed.remove(job) {
                        if let Some(n) = self.in_flight.get_mut(&res) {
                            *n = n.saturating_sub(1);
                        }
                    }
                }
                None
            }
            JournalEvent::JobTransition { job, from, to, event, .. } => {
                if let JobEvent::Dispatched { resource, .. } = event {
                    self.placed.insert(*job, resource.clone());
                }
                let res = self.placed.get(job).cloned()?;
                let was = from.is_in_flight();
                let is = to.is_in_flight();
                if !was && is {
                    *self.in_flight.entry(res.clone()).or_insert(0) += 1;
                } else if was && !is {
                    if let Some(n) = self.in_flight.get_mut(&res) {
                        *n = n.saturating_sub(1);
                    }
                }
                let (amount, cpu, completed, failed) = match event {
                    JobEvent::Completed { amount, cpu_hours, .. } => (*amount, *cpu_hours, true, false),
                    JobEvent::Failed { amount, cpu_hours, .. } => (*amount, *cpu_hours, false, true),
                    _ => (Money::ZERO, 0.0, false, false),
                };
                if completed {
                    self.done += 1;
                }
                self.committed += amount;
                Some((res, amount, completed, failed && *to == JobState::Failed, cpu))
            }
            _ => None,
        }
    }

    fn in_use(&self) -> u32 {
        self.in_flight.values().filter(|n| **n > 0).count() as u32
    }

    fn sample(&self, t: SimTime) -> UsageSample {
        UsageSample {
            t,
            resources_in_use: self.in_use(),
            jobs_in_flight: self.in_flight.values().sum(),
            jobs_done: self.done,
            committed: self.committed,
        }
    }
}

/// Fleet usage sampled every `step` from experiment start to its end.
pub fn usage_series(records: &[JournalRecord], step: SimDuration) -> Vec<UsageSample> {
    let step = step.max(SimDuration::from_millis(1));
    let mut replay = Replay::default();
    let mut out = Vec::new();
    let mut next: Option<SimTime> = None;
    for r in records {
        while let Some(t) = next {
            if t >= r.t_sim {
                break;
            }
            out.push(replay.sample(t));
            next = Some(t + step);
        }
        replay.apply(r);
        if next.is_none() {
            next = replay.origin;
        }
    }
    if let (Some(mut t), Some(end)) = (next, replay.end.or(records.last().map(|r| r.t_sim))) {
        while t <= end {
            out.push(replay.sample(t));
            t += step;
        }
        if out.last().is_some_and(|s| s.t < end) {
            out.push(replay.sample(end));
        }
    }
    out
}

/// Time-weighted mean of resources in use between experiment start and end.
pub fn mean_resources_in_use(records: &[JournalRecord]) -> f64 {
    let mut replay = Replay::default();
    let mut area = 0.0;
    let mut last: Option<SimTime> = None;
    for r in records {
        if let Some(t) = last {
            area += replay.in_use() as f64 * r.t_sim.duration_since(t).hours();
        }
        replay.apply(r);
        if replay.origin.is_some() {
            last = Some(r.t_sim);
        }
        if replay.end.is_some() {
            break;
        }
    }
    match (replay.origin, replay.end.or(last)) {
        (Some(o), Some(e)) if e > o => area / e.duration_since(o).hours(),
        _ => 0.0,
    }
}

/// Per-resource usage and cost, one point per change.
pub fn resource_series(records: &[JournalRecord]) -> Vec<ResourceSeries> {
    let mut replay = Replay::default();
    let mut series: BTreeMap<ResourceId, ResourceSeries> = BTreeMap::new();
    for r in records {
        let Some((res, amount, completed, failed, cpu)) = replay.apply(r) else { continue };
        let s = series.entry(res.clone()).or_insert_with(|| ResourceSeries {
            resource_id: res.clone(),
            jobs_done: 0,
            attempts_failed: 0,
            cpu_hours: 0.0,
            cost: Money::ZERO,
            points: Vec::new(),
        });
        s.cost += amount;
        s.jobs_done += u32::from(completed);
        s.attempts_failed += u32::from(failed);
        if completed || amount.is_positive() {
            s.cpu_hours += cpu;
        }
        let point =
            ResourceUsage { t: r.t_sim, in_flight: replay.in_flight.get(&res).copied().unwrap_or(0), cost: s.cost };
        match s.points.last_mut() {
            Some(p) if p.t == point.t => *p = point,
            Some(p) if p.in_flight == point.in_flight && p.cost == point.cost => {}
            _ => s.points.push(point),
        }
    }
    series.into_values().collect()
}

/// One JSON line per journaled scheduling decision.
pub fn decision_trace(records: &[JournalRecord]) -> Vec<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        t: SimTime,
        seq: u64,
        #[serde(flatten)]
        decision: &'a crate::engine::DecisionSummary,
    }
    records
        .iter()
        .filter_map(|r| match &r.event {
            JournalEvent::Replanned { decision } => {
                Some(serde_json::to_string(&Line { t: r.t_sim, seq: r.seq, decision }).expect("decisions serialize"))
            }
            _ => None,
        })
        .collect()
}
