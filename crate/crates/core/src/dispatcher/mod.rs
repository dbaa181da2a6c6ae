//! Turns placements into job-wrapper scripts, launches them on an executor
//! backend, and feeds status updates back to the engine.

mod local;
mod wrapper;

use serde::{Deserialize, Serialize};

use crate::economy::charge_amount;
use crate::engine::{Engine, EngineError, JobEvent, JobState};
use crate::fabric::{AttemptHandle, AttemptSpec, Fabric, ResourceId, Unavailable};
use crate::money::Money;
use crate::plan::{JobId, TaskScript, Value};
use crate::time::{SimDuration, SimTime};

pub use local::LocalExecutor;
pub use wrapper::{WrapperCommand, WrapperError, WrapperScript};

/// A job bound for a resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchOrder {
    pub job_id: JobId,
    pub resource_id: ResourceId,
    pub handle: AttemptHandle,
    /// Attempt number this order starts.
    pub attempt: u32,
    /// Resolved task.
    pub task: TaskScript,
    pub binding: Vec<(String, Value)>,
    pub pinned_rate: Money,
    pub projected_duration: SimDuration,
    /// Held against the budget until the attempt ends.
    pub reservation: Money,
    /// Reference-machine hours of work.
    pub expected_job_hours: f64,
    pub payload_mb: f64,
}

pub fn build_wrapper(order: &DispatchOrder) -> Result<WrapperScript, WrapperError> {
    WrapperScript::from_task(&order.task)
}

/// An execution backend.
pub trait Executor {
    /// Starts (or queues) the wrapper for `order`.
    fn launch(&mut self, now: SimTime, order: &DispatchOrder, wrapper: &WrapperScript) -> Result<(), Unavailable>;
}

/// Backend over the simulated fabric. Attempts that get a slot are collected
/// in `starts` for the event loop to schedule.
pub struct SimExecutor<'a> {
    pub fabric: &'a mut Fabric,
    pub starts: Vec<(SimTime, AttemptHandle)>,
}

impl<'a> SimExecutor<'a> {
    pub fn new(fabric: &'a mut Fabric) -> Self {
        SimExecutor { fabric, starts: Vec::new() }
    }
}

impl Executor for SimExecutor<'_> {
    fn launch(&mut self, now: SimTime, order: &DispatchOrder, _wrapper: &WrapperScript) -> Result<(), Unavailable> {
        let spec = AttemptSpec {
            handle: order.handle,
            job: order.job_id,
            attempt: order.attempt,
            resource: order.resource_id.clone(),
            expected_job_hours: order.expected_job_hours,
            payload_mb: order.payload_mb,
        };
        let started = self.fabric.submit(now, spec)?;
        self.starts.extend(started);
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    /// The resource refused the attempt; the job was failed (and requeued if
    /// attempts remain).
    #[error("resource unavailable: {0}")]
    Unavailable(Unavailable),
}

/// Sends a waiting job to its resource: `waiting → scheduled → staging`.
/// A refused launch fails the attempt with reason "resource unavailable".
pub fn dispatch(
    engine: &mut Engine,
    now: SimTime,
    order: &DispatchOrder,
    executor: &mut dyn Executor,
) -> Result<AttemptHandle, DispatchError> {
    let wrapper = build_wrapper(order)?;
    let attempt = engine.experiment().job(order.job_id).map_or(1, |j| j.attempt + 1);
    engine.apply_transition(
        now,
        order.job_id,
        JobEvent::Dispatched {
            resource: order.resource_id.clone(),
            handle: order.handle.0,
            rate: order.pinned_rate,
            reservation: order.reservation,
        },
    )?;
    debug_assert_eq!(engine.experiment().job(order.job_id).map(|j| j.attempt), Some(attempt));
    match executor.launch(now, order, &wrapper) {
        Ok(()) => {
            engine.apply_transition(now, order.job_id, JobEvent::StagingIn)?;
            Ok(order.handle)
        }
        Err(e) => {
            engine.fail_job(now, order.job_id, "resource unavailable", 0.0, Money::ZERO)?;
            Err(DispatchError::Unavailable(e))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusPhase {
    StagingIn,
    Started,
    Progress,
    StagedOut,
    Completed,
    Failed,
}

/// A report from the wrapper about one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub handle: AttemptHandle,
    pub job_id: JobId,
    pub phase: StatusPhase,
    /// Cpu-hours consumed so far.
    pub cpu_hours: f64,
    #[serde(default)]
    pub message: Option<String>,
    /// Per-slot completion rate this attempt implies, jobs/hour.
    #[serde(default)]
    pub observed_rate: Option<f64>,
    /// Amount to charge instead of cpu-hours × pinned rate.
    #[serde(default)]
    pub charge: Option<Money>,
}

impl StatusUpdate {
    pub fn new(handle: AttemptHandle, job_id: JobId, phase: StatusPhase) -> Self {
        StatusUpdate { handle, job_id, phase, cpu_hours: 0.0, message: None, observed_rate: None, charge: None }
    }
}

/// What a status update did.
#[derive(Debug, Clone, PartialEq)]
pub enum StatusOutcome {
    Applied(JobState),
    /// Failed and back in the waiting queue.
    Requeued,
    /// Failed with no attempts left.
    GaveUp,
    /// The job finished but its charge would break the budget; it was
    /// failed without charge.
    BudgetExceeded,
    /// Not applicable; journaled as an anomaly.
    Dropped(String),
}

/// Maps a status update to a job transition. Completion charges the ledger;
/// failure triggers the retry rule. Updates for unknown or stale handles,
/// and out-of-order phases, are journaled as anomalies and dropped.
pub fn handle_status(engine: &mut Engine, now: SimTime, update: &StatusUpdate) -> Result<StatusOutcome, EngineError> {
    let Some(job) = engine.experiment().job(update.job_id) else {
        let msg = format!("status for unknown job {}", update.job_id);
        engine.anomaly(now, msg.clone(), None)?;
        return Ok(StatusOutcome::Dropped(msg));
    };
    if job.handle != Some(update.handle.0) {
        let msg = format!("status for stale attempt {} of job {}", update.handle, update.job_id);
        engine.anomaly(now, msg.clone(), Some(update.job_id))?;
        return Ok(StatusOutcome::Dropped(msg));
    }
    let rate = job.pinned_rate.unwrap_or(Money::ZERO);
    let attempt = job.attempt;
    let config = engine.experiment().config.clone();
    let event = match update.phase {
        StatusPhase::StagingIn => JobEvent::StagingIn,
        StatusPhase::Started => JobEvent::Started,
        StatusPhase::Progress => JobEvent::Progress { cpu_hours: update.cpu_hours },
        StatusPhase::StagedOut => JobEvent::StagedOut,
        StatusPhase::Completed => {
            let amount = update.charge.unwrap_or_else(|| charge_amount(rate, update.cpu_hours));
            let ledger = &engine.experiment().ledger;
            if ledger.check_charge(update.job_id, attempt, amount, update.cpu_hours).is_err() && ledger.enforce {
                engine.fail_job(now, update.job_id, "budget exhausted", update.cpu_hours, Money::ZERO)?;
                return Ok(StatusOutcome::BudgetExceeded);
            }
            JobEvent::Completed { cpu_hours: update.cpu_hours, rate, amount, observed_rate: update.observed_rate }
        }
        StatusPhase::Failed => {
            let mut amount = Money::ZERO;
            if config.charge_failed {
                amount = update.charge.unwrap_or_else(|| charge_amount(rate, update.cpu_hours));
                if engine.experiment().ledger.check_charge(update.job_id, attempt, amount, update.cpu_hours).is_err() {
                    amount = Money::ZERO;
                }
            }
            let reason = update.message.clone().unwrap_or_else(|| "execution error".into());
            return match engine.fail_job(now, update.job_id, &reason, update.cpu_hours, amount) {
                Ok(true) => Ok(StatusOutcome::Requeued),
                Ok(false) => Ok(StatusOutcome::GaveUp),
                Err(EngineError::IllegalTransition { .. }) => Ok(StatusOutcome::Dropped("out of order".into())),
                Err(e) => Err(e),
            };
        }
    };
    match engine.apply_transition(now, update.job_id, event) {
        Ok(rec) => Ok(StatusOutcome::Applied(rec.state)),
        Err(EngineError::IllegalTransition { from, event, .. }) => {
            Ok(StatusOutcome::Dropped(format!("`{event}` out of order in state {from}")))
        }
        Err(e) => Err(e),
    }
}
