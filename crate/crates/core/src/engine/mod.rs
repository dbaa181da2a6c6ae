//! The experiment engine: owns experiment and job state, journals every
//! change before applying it, and rebuilds state from the journal.

mod journal;
mod state;

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::economy::{LedgerError, Quote};
use crate::fabric::ResourceId;
use crate::money::Money;
use crate::plan::{JobId, Plan};
use crate::scheduler::{ScheduleDecision, SelectionInput};
use crate::time::{SimDuration, SimTime};

pub use journal::{
    read_journal, read_journal_file, DecodeError, FileJournal, JournalPrefix, JournalRecord, JournalSink,
    MemoryJournal, Truncation,
};
pub use state::{
    DecisionSummary, EngineConfig, Experiment, ExperimentConstraints, JobEvent, JobRecord, JobState, Phase,
};

/// Payload of a journal record; the variant name is the record kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum JournalEvent {
    ExperimentCreated {
        id: String,
        /// Canonical plan text.
        plan: String,
        constraints: ExperimentConstraints,
        config: EngineConfig,
        job_count: u64,
    },
    QuoteIssued {
        quote: Quote,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_id: Option<String>,
    },
    ConstraintsSteered {
        constraints: ExperimentConstraints,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_id: Option<String>,
    },
    JobTransition {
        job: JobId,
        attempt: u32,
        from: JobState,
        to: JobState,
        #[serde(flatten)]
        event: JobEvent,
    },
    Replanned {
        decision: DecisionSummary,
    },
    Anomaly {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job: Option<JobId>,
    },
    Recovered {
        reset: Vec<JobId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncated: Option<Truncation>,
    },
}

impl JournalEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            JournalEvent::ExperimentCreated { .. } => "experiment_created",
            JournalEvent::QuoteIssued { .. } => "quote_issued",
            JournalEvent::PhaseChanged { .. } => "phase_changed",
            JournalEvent::ConstraintsSteered { .. } => "constraints_steered",
            JournalEvent::JobTransition { .. } => "job_transition",
            JournalEvent::Replanned { .. } => "replanned",
            JournalEvent::Anomaly { .. } => "anomaly",
            JournalEvent::Recovered { .. } => "recovered",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    InvalidConstraints(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{0}")]
    Expand(String),
    #[error("journal write failed: {0}")]
    Journal(#[from] io::Error),
    #[error("illegal transition for job {job}: `{event}` in state {from}")]
    IllegalTransition { job: JobId, from: JobState, event: String },
    #[error("illegal phase change {from} -> {to}")]
    IllegalPhase { from: Phase, to: Phase },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("experiment is {0}; constraints can no longer change")]
    Terminal(Phase),
    #[error("new deadline {deadline} is already in the past (elapsed {elapsed})")]
    DeadlineInPast { deadline: SimDuration, elapsed: SimDuration },
    #[error(transparent)]
    Ledger(LedgerError),
    #[error("recovery failed: {0}")]
    Recovery(String),
}

/// Client-requested phase changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Accept the quote (negotiating → ready).
    Accept,
    /// ready → running, or paused → running.
    Start,
    Pause,
    Resume,
    Abort,
}

impl std::str::FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "accept" => Ok(Action::Accept),
            "start" => Ok(Action::Start),
            "pause" => Ok(Action::Pause),
            "resume" => Ok(Action::Resume),
            "abort" => Ok(Action::Abort),
            _ => Err(format!("unknown action `{s}`")),
        }
    }
}

/// A partial constraint change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Steer {
    #[serde(default)]
    pub deadline: Option<SimDuration>,
    #[serde(default)]
    pub budget: Option<Money>,
}

/// Point-in-time summary of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_reason: Option<String>,
    pub constraints: ExperimentConstraints,
    pub total_jobs: usize,
    /// Every job state with its count.
    pub counts: BTreeMap<JobState, usize>,
    pub in_flight: BTreeMap<ResourceId, u32>,
    pub budget: Money,
    pub committed: Money,
    pub reserved: Money,
    pub now: SimTime,
    pub elapsed: SimDuration,
    /// Remaining jobs over the current aggregate rate.
    pub eta: Option<SimDuration>,
    pub last_seq: u64,
}

impl Snapshot {
    pub fn count(&self, state: JobState) -> usize {
        self.counts.get(&state).copied().unwrap_or(0)
    }
}

impl Experiment {
    pub fn snapshot(&self) -> Snapshot {
        let mut counts: BTreeMap<JobState, usize> = JobState::ALL.iter().map(|s| (*s, 0)).collect();
        for j in &self.jobs {
            *counts.get_mut(&j.state).expect("all states present") += 1;
        }
        let remaining = self.remaining();
        let eta = match &self.last_decision {
            _ if remaining == 0 => Some(SimDuration::ZERO),
            Some(d) if d.aggregate_rate > 0.0 => Some(SimDuration::from_hours_f64(remaining as f64 / d.aggregate_rate)),
            _ => None,
        };
        Snapshot {
            id: self.id.clone(),
            phase: self.phase,
            phase_reason: self.phase_reason.clone(),
            constraints: self.constraints.clone(),
            total_jobs: self.jobs.len(),
            counts,
            in_flight: self.in_flight_by_resource(),
            budget: self.ledger.budget,
            committed: self.ledger.committed(),
            reserved: self.ledger.reserved(),
            now: self.now,
            elapsed: self.clock_origin.map_or(SimDuration::ZERO, |o| self.now.duration_since(o)),
            eta,
            last_seq: self.last_seq,
        }
    }
}

type Listener = Box<dyn FnMut(&JournalRecord) + Send>;

/// Result of rebuilding an engine from a journal.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub records_applied: usize,
    pub truncated: Option<Truncation>,
    /// Jobs stranded in flight and put back to waiting.
    pub reset: Vec<JobId>,
    /// Byte length of the valid journal prefix.
    pub valid_len: u64,
}

/// Owner of one experiment. Every mutation goes through [`Engine::commit`],
/// which appends the record to the journal before applying it.
pub struct Engine {
    exp: Experiment,
    sink: Box<dyn JournalSink>,
    records: Vec<JournalRecord>,
    listeners: Vec<Listener>,
    replan_request: Option<String>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("experiment", &self.exp.id).field("records", &self.records.len()).finish()
    }
}

impl Engine {
    /// Creates an experiment with every job waiting and journals its creation.
    pub fn create(
        id: &str,
        plan: &Plan,
        constraints: ExperimentConstraints,
        config: EngineConfig,
        sink: Box<dyn JournalSink>,
        now: SimTime,
    ) -> Result<Engine, EngineError> {
        constraints.validate()?;
        if config.retry_cap == 0 {
            return Err(EngineError::InvalidConstraints("retry cap must be at least 1".into()));
        }
        let plan_text = plan.to_string();
        let exp = Experiment::from_created(id, &plan_text, &constraints, &config, now)?;
        let mut engine = Engine { exp, sink, records: Vec::new(), listeners: Vec::new(), replan_request: None };
        let event = JournalEvent::ExperimentCreated {
            id: id.to_string(),
            plan: plan_text,
            job_count: engine.exp.jobs.len() as u64,
            constraints,
            config,
        };
        let record = JournalRecord { seq: 1, t_sim: now, event };
        engine.sink.append(&record.encode())?;
        engine.exp.last_seq = 1;
        engine.records.push(record);
        Ok(engine)
    }

    /// Rebuilds an experiment from journal text. Jobs left in flight are
    /// returned to waiting; when `sink` is given the reset is journaled there
    /// and the engine continues appending to it.
    pub fn recover(
        reader: impl io::Read,
        sink: Box<dyn JournalSink>,
        now: Option<SimTime>,
    ) -> Result<(Engine, RecoveryReport), EngineError> {
        let prefix = read_journal(reader)?;
        let mut records = prefix.records.into_iter();
        let first = records.next().ok_or_else(|| EngineError::Recovery("no experiment-created record".into()))?;
        let JournalEvent::ExperimentCreated { id, plan, constraints, config, .. } = &first.event else {
            return Err(EngineError::Recovery("no experiment-created record".into()));
        };
        let mut exp = Experiment::from_created(id, plan, constraints, config, first.t_sim)?;
        exp.last_seq = first.seq;
        let mut applied = vec![first.clone()];
        for rec in records {
            exp.apply(&rec)?;
            applied.push(rec);
        }
        let reset: Vec<JobId> = exp.jobs.iter().filter(|j| j.state.is_in_flight()).map(|j| j.id()).collect();
        let report = RecoveryReport {
            records_applied: applied.len(),
            truncated: prefix.truncated.clone(),
            reset: reset.clone(),
            valid_len: prefix.valid_len,
        };
        let at = now.unwrap_or(exp.now).max(exp.now);
        let mut engine = Engine { exp, sink, records: applied, listeners: Vec::new(), replan_request: None };
        if !reset.is_empty() || prefix.truncated.is_some() {
            engine.commit(at, JournalEvent::Recovered { reset, truncated: prefix.truncated })?;
        }
        Ok((engine, report))
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn records(&self) -> &[JournalRecord] {
        &self.records
    }

    /// Records with `seq > after`.
    pub fn records_after(&self, after: u64) -> &[JournalRecord] {
        let start = self.records.partition_point(|r| r.seq <= after);
        &self.records[start..]
    }

    /// Registers a callback run after each commit.
    pub fn subscribe(&mut self, listener: impl FnMut(&JournalRecord) + Send + 'static) {
        self.listeners.push(Box::new(listener));
    }

    pub fn snapshot(&self) -> Snapshot {
        self.exp.snapshot()
    }

    /// Takes the pending replan request raised by a steer.
    pub fn take_replan_request(&mut self) -> Option<String> {
        self.replan_request.take()
    }

    /// Appends `event` to the journal, then applies it. On a journal error
    /// nothing changes.
    pub fn commit(&mut self, now: SimTime, event: JournalEvent) -> Result<&JournalRecord, EngineError> {
        let record = JournalRecord { seq: self.exp.last_seq + 1, t_sim: now.max(self.exp.now), event };
        self.exp.validate(&record)?;
        self.sink.append(&record.encode())?;
        self.exp.apply(&record)?;
        for l in &mut self.listeners {
            l(&record);
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn anomaly(&mut self, now: SimTime, message: impl Into<String>, job: Option<JobId>) -> Result<(), EngineError> {
        self.commit(now, JournalEvent::Anomaly { message: message.into(), job }).map(|_| ())
    }

    /// Applies a job event. An illegal event is rejected, journaled as an
    /// anomaly, and leaves the state unchanged.
    pub fn apply_transition(&mut self, now: SimTime, job: JobId, event: JobEvent) -> Result<&JobRecord, EngineError> {
        let from = match self.exp.check_job_event(job, &event) {
            Ok(_) => self.exp.jobs[job.0 as usize].state,
            Err(e) => {
                if matches!(e, EngineError::IllegalTransition { .. } | EngineError::UnknownJob(_)) {
                    self.anomaly(now, e.to_string(), Some(job))?;
                }
                return Err(e);
            }
        };
        let attempt = self.exp.jobs[job.0 as usize].attempt + u32::from(matches!(event, JobEvent::Dispatched { .. }));
        let to = event.target(from, self.exp.jobs[job.0 as usize].attempt, self.exp.config.retry_cap).expect("checked");
        self.commit(now, JournalEvent::JobTransition { job, attempt, from, to, event })?;
        Ok(&self.exp.jobs[job.0 as usize])
    }

    /// Fails the current attempt and requeues the job while attempts remain
    /// and the experiment is live. Returns whether it was requeued.
    pub fn fail_job(
        &mut self,
        now: SimTime,
        job: JobId,
        reason: &str,
        cpu_hours: f64,
        amount: Money,
    ) -> Result<bool, EngineError> {
        self.apply_transition(now, job, JobEvent::Failed { reason: reason.to_string(), cpu_hours, amount })?;
        let rec = &self.exp.jobs[job.0 as usize];
        if matches!(self.exp.phase, Phase::Running | Phase::Paused) && rec.attempt < self.exp.config.retry_cap {
            self.apply_transition(now, job, JobEvent::Requeued)?;
            return Ok(true);
        }
        Ok(false)
    }

    fn set_phase(
        &mut self,
        now: SimTime,
        to: Phase,
        reason: Option<String>,
        client_id: Option<String>,
    ) -> Result<Phase, EngineError> {
        let from = self.exp.phase;
        if !from.can_become(to) {
            return Err(EngineError::IllegalPhase { from, to });
        }
        if to.is_terminal() {
            self.settle_jobs(now, to)?;
        }
        self.commit(now, JournalEvent::PhaseChanged { from, to, reason, client_id })?;
        Ok(to)
    }

    /// Before a terminal phase: in-flight attempts fail without charge and
    /// waiting jobs are aborted.
    fn settle_jobs(&mut self, now: SimTime, to: Phase) -> Result<(), EngineError> {
        let reason = format!("experiment {to}");
        let ids: Vec<(JobId, JobState)> = self.exp.jobs.iter().map(|j| (j.id(), j.state)).collect();
        for (id, state) in ids {
            if state.is_in_flight() {
                let event = JobEvent::Failed { reason: reason.clone(), cpu_hours: 0.0, amount: Money::ZERO };
                self.apply_transition(now, id, event)?;
            } else if state == JobState::Waiting {
                self.apply_transition(now, id, JobEvent::Aborted { reason: reason.clone() })?;
            }
        }
        Ok(())
    }

    /// Applies a client action and returns the new phase.
    pub fn control(&mut self, now: SimTime, action: Action, client_id: Option<&str>) -> Result<Phase, EngineError> {
        let from = self.exp.phase;
        let to = match (action, from) {
            (Action::Accept, _) => Phase::Ready,
            (Action::Start | Action::Resume, Phase::Paused) => Phase::Running,
            (Action::Start, _) => Phase::Running,
            (Action::Resume, _) => Phase::Running,
            (Action::Pause, _) => Phase::Paused,
            (Action::Abort, _) => Phase::Aborted,
        };
        if matches!(action, Action::Resume) && from != Phase::Paused {
            return Err(EngineError::IllegalPhase { from, to });
        }
        let reason = Some(format!("client {action:?}").to_lowercase());
        let phase = self.set_phase(now, to, reason, client_id.map(str::to_string))?;
        if phase == Phase::Running {
            self.replan_request.get_or_insert_with(|| "started".into());
        }
        Ok(phase)
    }

    /// Ends the experiment in `to` (a terminal phase) for `reason`.
    pub fn finish(&mut self, now: SimTime, to: Phase, reason: &str) -> Result<Phase, EngineError> {
        self.set_phase(now, to, Some(reason.to_string()), None)
    }

    /// Replaces deadline and/or budget. The scheduler is asked to replan.
    pub fn steer(
        &mut self,
        now: SimTime,
        steer: &Steer,
        client_id: Option<&str>,
    ) -> Result<ExperimentConstraints, EngineError> {
        if self.exp.phase.is_terminal() {
            return Err(EngineError::Terminal(self.exp.phase));
        }
        let mut next = self.exp.constraints.clone();
        if let Some(d) = steer.deadline {
            next.deadline = d;
        }
        if let Some(b) = steer.budget {
            next.budget = b;
        }
        next.validate()?;
        if let Some(origin) = self.exp.clock_origin {
            let elapsed = now.max(self.exp.now).duration_since(origin);
            if steer.deadline.is_some() && next.deadline <= elapsed {
                return Err(EngineError::DeadlineInPast { deadline: next.deadline, elapsed });
            }
        }
        let reason = match (steer.deadline.is_some(), steer.budget.is_some()) {
            (true, true) => "deadline and budget changed",
            (true, false) => "deadline changed",
            (false, true) => "budget changed",
            (false, false) => "constraints unchanged",
        };
        self.commit(
            now,
            JournalEvent::ConstraintsSteered { constraints: next.clone(), client_id: client_id.map(str::to_string) },
        )?;
        self.replan_request = Some(reason.to_string());
        Ok(next)
    }

    pub fn record_quote(&mut self, now: SimTime, quote: Quote) -> Result<(), EngineError> {
        self.commit(now, JournalEvent::QuoteIssued { quote }).map(|_| ())
    }

    /// Journals a scheduling decision.
    pub fn record_decision(
        &mut self,
        now: SimTime,
        reason: &str,
        input: &SelectionInput,
        decision: &ScheduleDecision,
    ) -> Result<(), EngineError> {
        let summary = DecisionSummary {
            reason: reason.to_string(),
            n_remaining: input.n_remaining,
            t_rem: input.t_rem,
            budget_remaining: input.budget_remaining,
            candidates: input.candidates.iter().filter(|c| c.usable).count() as u32,
            selected: decision.selected.iter().map(|s| (s.resource_id.clone(), s.quota, s.allocation)).collect(),
            projected_finish: decision.projected_finish,
            projected_cost: decision.projected_cost,
            feasible_deadline: decision.feasible_deadline,
            feasible_budget: decision.feasible_budget,
            aggregate_rate: decision.aggregate_rate(),
        };
        self.commit(now, JournalEvent::Replanned { decision: summary }).map(|_| ())
    }
}

#[cfg(test)]
mod tests;
