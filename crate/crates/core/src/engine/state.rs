use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::economy::{BudgetLedger, LedgerEntry, LedgerError, Quote};
use crate::fabric::ResourceId;
use crate::money::Money;
use crate::plan::{expand_jobs, parse_plan, JobId, JobSpec, Plan};
use crate::scheduler::SchedulerConfig;
use crate::time::{SimDuration, SimTime};

use super::journal::JournalRecord;
use super::{EngineError, JournalEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Negotiating,
    Ready,
    Running,
    Paused,
    Completed,
    CompletedWithFailures,
    Aborted,
    DeadlineMissed,
    BudgetExhausted,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::Negotiating,
        Phase::Ready,
        Phase::Running,
        Phase::Paused,
        Phase::Completed,
        Phase::CompletedWithFailures,
        Phase::Aborted,
        Phase::DeadlineMissed,
        Phase::BudgetExhausted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Phase::Completed
                | Phase::CompletedWithFailures
                | Phase::Aborted
                | Phase::DeadlineMissed
                | Phase::BudgetExhausted
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Negotiating => "negotiating",
            Phase::Ready => "ready",
            Phase::Running => "running",
            Phase::Paused => "paused",
            Phase::Completed => "completed",
            Phase::CompletedWithFailures => "completed_with_failures",
            Phase::Aborted => "aborted",
            Phase::DeadlineMissed => "deadline_missed",
            Phase::BudgetExhausted => "budget_exhausted",
        }
    }

    /// Whether the phase machine allows `self → to`.
    pub fn can_become(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Negotiating, Ready)
                | (Ready, Running)
                | (Running, Paused)
                | (Paused, Running)
                | (Negotiating | Ready | Running | Paused, Aborted)
                | (Running, Completed | CompletedWithFailures)
                | (Running | Paused, DeadlineMissed | BudgetExhausted)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Waiting,
    Scheduled,
    Staging,
    Running,
    Completing,
    Done,
    Failed,
    Aborted,
}

impl JobState {
    pub const ALL: [JobState; 8] = [
        JobState::Waiting,
        JobState::Scheduled,
        JobState::Staging,
        JobState::Running,
        JobState::Completing,
        JobState::Done,
        JobState::Failed,
        JobState::Aborted,
    ];

    /// Holding (or about to hold) a slot on a resource.
    pub fn is_in_flight(self) -> bool {
        matches!(self, JobState::Scheduled | JobState::Staging | JobState::Running | JobState::Completing)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Waiting => "waiting",
            JobState::Scheduled => "scheduled",
            JobState::Staging => "staging",
            JobState::Running => "running",
            JobState::Completing => "completing",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Aborted => "aborted",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for JobState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        JobState::ALL.into_iter().find(|j| j.as_str() == s).ok_or_else(|| format!("unknown job state `{s}`"))
    }
}

/// Events that move a job through its lifecycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    /// Sent to a resource; starts a new attempt.
    Dispatched {
        resource: ResourceId,
        handle: u64,
        rate: Money,
        reservation: Money,
    },
    StagingIn,
    Started,
    Progress {
        cpu_hours: f64,
    },
    StagedOut,
    Completed {
        cpu_hours: f64,
        rate: Money,
        amount: Money,
        /// Per-slot completion rate implied by this attempt, jobs/hour.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observed_rate: Option<f64>,
    },
    Failed {
        reason: String,
        cpu_hours: f64,
        amount: Money,
    },
    /// Back to waiting for another attempt.
    Requeued,
    Aborted {
        reason: String,
    },
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::Dispatched { .. } => "dispatched",
            JobEvent::StagingIn => "staging_in",
            JobEvent::Started => "started",
            JobEvent::Progress { .. } => "progress",
            JobEvent::StagedOut => "staged_out",
            JobEvent::Completed { .. } => "completed",
            JobEvent::Failed { .. } => "failed",
            JobEvent::Requeued => "requeued",
            JobEvent::Aborted { .. } => "aborted",
        }
    }

    /// Target state from `from`, if legal. `attempt` and `retry_cap` govern
    /// requeues.
    pub fn target(&self, from: JobState, attempt: u32, retry_cap: u32) -> Option<JobState> {
        use JobState::*;
        let non_terminal = !matches!(from, Done | Failed | Aborted);
        match (self, from) {
            (JobEvent::Dispatched { .. }, Waiting) => Some(Scheduled),
            (JobEvent::StagingIn, Scheduled) => Some(Staging),
            (JobEvent::Started, Staging) => Some(Running),
            (JobEvent::Progress { .. }, s) if s.is_in_flight() => Some(s),
            (JobEvent::StagedOut, Running) => Some(Completing),
            (JobEvent::Completed { .. }, Running | Completing) => Some(Done),
            (JobEvent::Failed { .. }, _) if non_terminal => Some(Failed),
            (JobEvent::Requeued, Failed) if attempt < retry_cap => Some(Waiting),
            (JobEvent::Aborted { .. }, _) if non_terminal || from == Failed => Some(Aborted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: JobSpec,
    pub state: JobState,
    pub assigned_resource: Option<ResourceId>,
    /// Attempts started so far.
    pub attempt: u32,
    pub cost_incurred: Money,
    pub pinned_rate: Option<Money>,
    pub handle: Option<u64>,
    pub timestamps: Vec<(JobState, SimTime)>,
    pub last_update: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl JobRecord {
    fn new(spec: JobSpec, now: SimTime) -> Self {
        JobRecord {
            spec,
            state: JobState::Waiting,
            assigned_resource: None,
            attempt: 0,
            cost_incurred: Money::ZERO,
            pinned_rate: None,
            handle: None,
            timestamps: vec![(JobState::Waiting, now)],
            last_update: now,
            message: None,
        }
    }

    pub fn id(&self) -> JobId {
        self.spec.id
    }

    /// When the job last entered `state`.
    pub fn entered(&self, state: JobState) -> Option<SimTime> {
        self.timestamps.iter().rev().find(|(s, _)| *s == state).map(|(_, t)| *t)
    }
}

/// Deadline (from experiment start), budget and the paying user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConstraints {
    pub deadline: SimDuration,
    pub budget: Money,
    pub user_id: String,
}

impl ExperimentConstraints {
    pub fn new(deadline: SimDuration, budget: Money, user_id: impl Into<String>) -> Self {
        ExperimentConstraints { deadline, budget, user_id: user_id.into() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !self.deadline.is_positive() {
            return Err(EngineError::InvalidConstraints("deadline must be positive".into()));
        }
        if !self.budget.is_positive() {
            return Err(EngineError::InvalidConstraints("budget must be positive".into()));
        }
        Ok(())
    }
}

fn three() -> u32 {
    3
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Attempts allowed per job.
    #[serde(default = "three")]
    pub retry_cap: u32,
    /// Budget is a hard cap; when false it is advisory.
    #[serde(default = "yes")]
    pub enforce_budget: bool,
    /// Charge failed attempts for the cpu time they used.
    #[serde(default)]
    pub charge_failed: bool,
    /// Charge by integrating the cost schedule over the job's span instead of
    /// the rate pinned at dispatch.
    #[serde(default)]
    pub charge_integrated: bool,
    /// Create in the negotiating phase; a quote must be accepted first.
    #[serde(default)]
    pub negotiate: bool,
    #[serde(default = "default_cap")]
    pub job_cap: u64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
}

fn default_cap() -> u64 {
    crate::plan::DEFAULT_JOB_CAP
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            retry_cap: 3,
            enforce_budget: true,
            charge_failed: false,
            charge_integrated: false,
            negotiate: false,
            job_cap: default_cap(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

/// Summary of the latest scheduling decision, as journaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub reason: String,
    /// Jobs waiting when the decision was made.
    #[serde(default)]
    pub n_remaining: u64,
    /// Planning time left.
    #[serde(default)]
    pub t_rem: SimDuration,
    #[serde(default)]
    pub budget_remaining: Money,
    /// Candidates considered (authorized and up).
    #[serde(default)]
    pub candidates: u32,
    /// `(resource, quota, allocation)`, cheapest first.
    pub selected: Vec<(ResourceId, u32, u64)>,
    pub projected_finish: SimDuration,
    pub projected_cost: Money,
    pub feasible_deadline: bool,
    pub feasible_budget: bool,
    pub aggregate_rate: f64,
}

/// Complete state of one experiment, rebuilt by applying journal records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub plan: Plan,
    pub constraints: ExperimentConstraints,
    pub config: EngineConfig,
    pub jobs: Vec<JobRecord>,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_reason: Option<String>,
    /// Simulation time of start.
    pub clock_origin: Option<SimTime>,
    pub ledger: BudgetLedger,
    /// Observed per-slot completion rates, in order, per resource.
    pub observations: BTreeMap<ResourceId, Vec<f64>>,
    pub last_decision: Option<DecisionSummary>,
    pub quote: Option<Quote>,
    /// Time of the latest record.
    pub now: SimTime,
    pub last_seq: u64,
}

impl Experiment {
    pub(crate) fn from_created(
        id: &str,
        plan_text: &str,
        constraints: &ExperimentConstraints,
        config: &EngineConfig,
        now: SimTime,
    ) -> Result<Self, EngineError> {
        let plan = parse_plan(plan_text).map_err(|d| EngineError::Plan(d.to_string()))?;
        let specs = expand_jobs(&plan, id, config.job_cap).map_err(|e| EngineError::Expand(e.to_string()))?;
        Ok(Experiment {
            id: id.to_string(),
            plan,
            constraints: constraints.clone(),
            config: config.clone(),
            jobs: specs.into_iter().map(|s| JobRecord::new(s, now)).collect(),
            phase: if config.negotiate { Phase::Negotiating } else { Phase::Ready },
            phase_reason: None,
            clock_origin: None,
            ledger: BudgetLedger::new(constraints.budget, config.enforce_budget),
            observations: BTreeMap::new(),
            last_decision: None,
            quote: None,
            now,
            last_seq: 0,
        })
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(id.0 as usize)
    }

    /// Absolute simulation time of the deadline, once started.
    pub fn deadline_at(&self) -> Option<SimTime> {
        self.clock_origin.map(|t| t + self.constraints.deadline)
    }

    /// Time left before the deadline (zero when past; full deadline before start).
    pub fn time_remaining(&self, now: SimTime) -> SimDuration {
        match self.deadline_at() {
            Some(d) if d > now => d.duration_since(now),
            Some(_) => SimDuration::ZERO,
            None => self.constraints.deadline,
        }
    }

    pub fn count(&self, state: JobState) -> usize {
        self.jobs.iter().filter(|j| j.state == state).count()
    }

    pub fn waiting(&self) -> Vec<JobId> {
        self.jobs.iter().filter(|j| j.state == JobState::Waiting).map(|j| j.id()).collect()
    }

    /// Jobs neither done nor given up on.
    pub fn remaining(&self) -> usize {
        self.jobs.iter().filter(|j| j.state == JobState::Waiting || j.state.is_in_flight()).count()
    }

    pub fn in_flight_by_resource(&self) -> BTreeMap<ResourceId, u32> {
        let mut out = BTreeMap::new();
        for j in self.jobs.iter().filter(|j| j.state.is_in_flight()) {
            if let Some(r) = &j.assigned_resource {
                *out.entry(r.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    /// Whether every job is done or out of attempts.
    pub fn all_settled(&self) -> bool {
        self.jobs.iter().all(|j| matches!(j.state, JobState::Done | JobState::Failed | JobState::Aborted))
    }

    /// Validates a job event without applying it.
    pub fn check_job_event(&self, job: JobId, event: &JobEvent) -> Result<JobState, EngineError> {
        let rec = self.job(job).ok_or(EngineError::UnknownJob(job))?;
        let to = event
            .target(rec.state, rec.attempt, self.config.retry_cap)
            .ok_or_else(|| EngineError::IllegalTransition { job, from: rec.state, event: event.name().to_string() })?;
        match event {
            JobEvent::Dispatched { reservation, .. } if !self.ledger.can_reserve(*reservation) => {
                return Err(EngineError::Ledger(LedgerError::NoHeadroom {
                    amount: *reservation,
                    headroom: self.ledger.headroom(),
                }));
            }
            JobEvent::Completed { cpu_hours, amount, .. } | JobEvent::Failed { cpu_hours, amount, .. } => {
                self.ledger.check_charge(job, rec.attempt, *amount, *cpu_hours).map_err(EngineError::Ledger)?;
            }
            _ => {}
        }
        Ok(to)
    }

    /// Checks that `record` would apply cleanly.
    pub fn validate(&self, record: &JournalRecord) -> Result<(), EngineError> {
        match &record.event {
            JournalEvent::ExperimentCreated { .. } => {
                Err(EngineError::Recovery(format!("duplicate experiment-created record at seq {}", record.seq)))
            }
            JournalEvent::PhaseChanged { from, to, .. } if *from != self.phase || !from.can_become(*to) => {
                Err(EngineError::IllegalPhase { from: self.phase, to: *to })
            }
            JournalEvent::JobTransition { job, event, .. } => self.check_job_event(*job, event).map(|_| ()),
            JournalEvent::Recovered { reset, .. } => match reset.iter().find(|j| self.job(**j).is_none()) {
                Some(j) => Err(EngineError::UnknownJob(*j)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Applies one committed record.
    pub fn apply(&mut self, record: &JournalRecord) -> Result<(), EngineError> {
        let now = record.t_sim;
        match &record.event {
            JournalEvent::ExperimentCreated { .. } => {
                return Err(EngineError::Recovery(format!("duplicate experiment-created record at seq {}", record.seq)))
            }
            JournalEvent::QuoteIssued { quote } => self.quote = Some(quote.clone()),
            JournalEvent::PhaseChanged { from, to, reason, .. } => {
                if *from != self.phase || !from.can_become(*to) {
                    return Err(EngineError::IllegalPhase { from: self.phase, to: *to });
                }
                if *to == Phase::Running && self.clock_origin.is_none() {
                    self.clock_origin = Some(now);
                }
                if to.is_terminal() {
                    self.ledger.release_all();
                }
                self.phase = *to;
                self.phase_reason = reason.clone();
            }
            JournalEvent::ConstraintsSteered { constraints, .. } => {
                self.constraints = constraints.clone();
                self.ledger.budget = constraints.budget;
            }
            JournalEvent::JobTransition { job, event, .. } => self.apply_job_event(record.seq, now, *job, event)?,
            JournalEvent::Replanned { decision } => self.last_decision = Some(decision.clone()),
            JournalEvent::Anomaly { .. } => {}
            JournalEvent::Recovered { reset, .. } => {
                for &job in reset {
                    let rec = self.jobs.get_mut(job.0 as usize).ok_or(EngineError::UnknownJob(job))?;
                    self.ledger.release(job, rec.attempt);
                    rec.state = JobState::Waiting;
                    rec.handle = None;
                    rec.timestamps.push((JobState::Waiting, now));
                    rec.last_update = now;
                    rec.message = Some("reset after recovery".into());
                }
            }
        }
        self.now = self.now.max(now);
        self.last_seq = record.seq;
        Ok(())
    }

    fn apply_job_event(&mut self, seq: u64, now: SimTime, job: JobId, event: &JobEvent) -> Result<(), EngineError> {
        let to = self.check_job_event(job, event)?;
        let rec = &mut self.jobs[job.0 as usize];
        match event {
            JobEvent::Dispatched { resource, handle, rate, reservation } => {
                rec.attempt += 1;
                rec.assigned_resource = Some(resource.clone());
                rec.pinned_rate = Some(*rate);
                rec.handle = Some(*handle);
                rec.message = None;
                self.ledger.reserve(job, rec.attempt, *reservation).map_err(EngineError::Ledger)?;
            }
            JobEvent::Completed { cpu_hours, rate, amount, observed_rate } => {
                let resource = rec.assigned_resource.clone().unwrap_or_else(|| ResourceId::from(""));
                rec.cost_incurred += *amount;
                rec.handle = None;
                let entry = LedgerEntry {
                    seq,
                    t_sim: now,
                    job_id: job,
                    attempt: rec.attempt,
                    resource_id: resource.clone(),
                    cpu_hours: *cpu_hours,
                    rate: *rate,
                    amount: *amount,
                };
                self.ledger.charge(entry).map_err(EngineError::Ledger)?;
                if let Some(r) = observed_rate {
                    self.observations.entry(resource).or_default().push(*r);
                }
            }
            JobEvent::Failed { reason, cpu_hours, amount } => {
                rec.handle = None;
                rec.message = Some(reason.clone());
                if amount.is_positive() {
                    rec.cost_incurred += *amount;
                    let entry = LedgerEntry {
                        seq,
                        t_sim: now,
                        job_id: job,
                        attempt: rec.attempt,
                        resource_id: rec.assigned_resource.clone().unwrap_or_else(|| ResourceId::from("")),
                        cpu_hours: *cpu_hours,
                        rate: rec.pinned_rate.unwrap_or(Money::ZERO),
                        amount: *amount,
                    };
                    self.ledger.charge(entry).map_err(EngineError::Ledger)?;
                } else {
                    self.ledger.release(job, rec.attempt);
                }
            }
            JobEvent::Aborted { reason } => {
                rec.handle = None;
                rec.message = Some(reason.clone());
                self.ledger.release(job, rec.attempt);
            }
            JobEvent::Requeued => {
                rec.assigned_resource = None;
                rec.pinned_rate = None;
            }
            JobEvent::StagingIn | JobEvent::Started | JobEvent::Progress { .. } | JobEvent::StagedOut => {}
        }
        if to != rec.state || matches!(event, JobEvent::Completed { .. }) {
            if matches!(event, JobEvent::Completed { .. }) && rec.state == JobState::Running {
                rec.timestamps.push((JobState::Completing, now));
            }
            rec.timestamps.push((to, now));
        }
        rec.state = to;
        rec.last_update = now;
        Ok(())
    }
}
