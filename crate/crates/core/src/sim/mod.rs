//! Discrete-event driver that runs one experiment over the simulated fabric.
//!
//! Events are processed in `(time, ordinal)` order; ordinals come from a
//! counter bumped on every scheduling, so identical inputs replay
//! identically. Every processed event is written to the trace as one JSON
//! line.

mod report;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::dispatcher::{
    dispatch, handle_status, DispatchError, DispatchOrder, SimExecutor, StatusPhase, StatusUpdate,
};
use crate::economy::{
    cost_at, integrated_charge, owner_bid, peak_rate, quote, run_tender, Quote, TenderOutcome, TenderRequest,
};
use crate::engine::{Action, Engine, EngineError, JobEvent, JobState, JournalEvent, Phase, Steer};
use crate::fabric::{AttemptHandle, Fabric, FabricConfig, ResourceId, SimResource};
use crate::money::Money;
use crate::plan::JobId;
use crate::scheduler::{
    assign, discover, estimate_rate, select_resources, Candidate, ReplanEvent, ReplanPolicy, ScheduleDecision,
    SelectionInput,
};
use crate::time::{SimDuration, SimTime, TimeOfDay};

pub use report::{
    decision_trace, mean_resources_in_use, resource_series, usage_series, ResourceSeries, ResourceUsage, UsageSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    JobStart,
    JobFinish,
    LoadStep,
    ResourceDown,
    ResourceUp,
    ScheduleTick,
    CostBoundary,
}

/// What an event refers to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<AttemptHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: SimTime,
    pub ordinal: u64,
    pub kind: SimEventKind,
    pub payload: EventPayload,
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: SimTime,
    pub ord: u64,
    /// An event kind, or `experiment_<phase>` for the final line.
    pub kind: String,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunUntil {
    Time(SimTime),
    Terminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub phase: Phase,
    pub now: SimTime,
    pub events: u64,
    /// Set when the event queue ran dry before the condition held.
    pub stalled: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Pin rates through a sealed-bid tender at start.
    #[serde(default)]
    pub tender: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Drives an [`Engine`] against a [`Fabric`].
pub struct SimRunner {
    engine: Engine,
    fabric: Fabric,
    options: SimOptions,
    now: SimTime,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: BTreeMap<u64, SimEvent>,
    next_ord: u64,
    trace: Vec<String>,
    next_handle: u64,
    decision: Option<ScheduleDecision>,
    dispatched_since: BTreeMap<ResourceId, u64>,
    /// The last dispatch attempt found no reservation headroom.
    budget_blocked: bool,
    policy: ReplanPolicy,
    tender: Option<TenderOutcome>,
    scheduled: bool,
    ended: bool,
    processed: u64,
}

impl std::fmt::Debug for SimRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimRunner").field("engine", &self.engine).field("now", &self.now).finish()
    }
}

impl SimRunner {
    /// Attaches a runner to `engine`, whether fresh or recovered. The fabric
    /// is brought to the engine's current time; a running experiment picks up
    /// at the next tick.
    pub fn new(engine: Engine, fabric: FabricConfig, seed: u64, options: SimOptions) -> Result<Self, SimError> {
        let now = engine.experiment().now;
        let next_handle = engine
            .records()
            .iter()
            .filter_map(|r| match &r.event {
                JournalEvent::JobTransition { event: JobEvent::Dispatched { handle, .. }, .. } => Some(*handle),
                _ => None,
            })
            .max()
            .map_or(1, |h| h + 1);
        let every = engine.experiment().config.scheduler.completion_replan_every;
        let mut runner = SimRunner {
            engine,
            fabric: Fabric::fast_forward(fabric, seed, now),
            options,
            now,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            next_ord: 0,
            trace: Vec::new(),
            next_handle,
            decision: None,
            dispatched_since: BTreeMap::new(),
            budget_blocked: false,
            policy: ReplanPolicy::new(every),
            tender: None,
            scheduled: false,
            ended: false,
            processed: 0,
        };
        if runner.engine.experiment().phase.is_terminal() {
            runner.ended = true;
        } else {
            runner.ensure_scheduled()?;
        }
        Ok(runner)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn into_engine(self) -> Engine {
        self.engine
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn phase(&self) -> Phase {
        self.engine.experiment().phase
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    /// The trace as newline-terminated lines.
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn decision(&self) -> Option<&ScheduleDecision> {
        self.decision.as_ref()
    }

    pub fn tender(&self) -> Option<&TenderOutcome> {
        self.tender.as_ref()
    }

    /// Time of day at simulation instant `t`.
    pub fn time_of_day(&self, t: SimTime) -> TimeOfDay {
        TimeOfDay::from_millis(self.fabric.config().options.clock_origin.millis() + t.millis())
    }

    /// Accepts a pending quote if needed and starts the experiment.
    pub fn start(&mut self, client_id: Option<&str>) -> Result<Phase, SimError> {
        if self.phase() == Phase::Negotiating {
            self.control(Action::Accept, client_id)?;
        }
        self.control(Action::Start, client_id)
    }

    /// Applies a client action at the current simulation time.
    pub fn control(&mut self, action: Action, client_id: Option<&str>) -> Result<Phase, SimError> {
        let phase = self.engine.control(self.now, action, client_id)?;
        if phase == Phase::Running && self.tender.is_none() && self.options.tender {
            self.run_tender();
        }
        self.ensure_scheduled()?;
        self.check_end()?;
        Ok(phase)
    }

    /// Changes constraints; the scheduler replans at the next tick.
    pub fn steer(&mut self, steer: &Steer, client_id: Option<&str>) -> Result<Quote, SimError> {
        self.engine.steer(self.now, steer, client_id)?;
        let q = self.quote();
        self.accounting_check()?;
        self.check_end()?;
        Ok(q)
    }

    /// What the scheduler would promise for the remaining work right now.
    pub fn quote(&self) -> Quote {
        let input = self.selection_input();
        let exp = self.engine.experiment();
        quote(input.n_remaining, input.t_rem, input.budget_remaining, &input.candidates, &exp.config.scheduler)
    }

    /// Issues the quote and journals it.
    pub fn record_quote(&mut self) -> Result<Quote, SimError> {
        let q = self.quote();
        self.engine.record_quote(self.now, q.clone())?;
        Ok(q)
    }

    /// Processes events until `until` holds.
    pub fn run_until(&mut self, until: RunUntil) -> Result<RunOutcome, SimError> {
        let start = self.processed;
        let mut stalled = None;
        loop {
            if self.ended {
                break;
            }
            let next = self.queue.peek().map(|Reverse((t, _))| *t);
            match (until, next) {
                (RunUntil::Time(limit), Some(t)) if t > limit => {
                    self.now = self.now.max(limit);
                    break;
                }
                (RunUntil::Time(limit), None) => {
                    self.now = self.now.max(limit);
                    break;
                }
                (RunUntil::Terminal, None) => {
                    stalled =
                        Some(format!("event queue exhausted at {} with the experiment {}", self.now, self.phase()));
                    break;
                }
                _ => {
                    self.step()?;
                }
            }
        }
        Ok(RunOutcome { phase: self.phase(), now: self.now, events: self.processed - start, stalled })
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(Reverse((t, ord))) = self.queue.pop() else { return Ok(false) };
        let ev = self.pending.remove(&ord).expect("queued events are pending");
        self.now = self.now.max(t);
        self.processed += 1;
        self.push_trace(
            t,
            ord,
            serde_json::to_value(ev.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            ev.payload.clone(),
        );
        self.process(ev)?;
        self.check_end()?;
        Ok(true)
    }

    fn push_trace(&mut self, t: SimTime, ord: u64, kind: String, payload: EventPayload) {
        let line = TraceLine { t, ord, kind, payload };
        self.trace.push(serde_json::to_string(&line).expect("trace lines serialize"));
    }

    fn schedule(&mut self, time: SimTime, kind: SimEventKind, payload: EventPayload) {
        let ordinal = self.next_ord;
        self.next_ord += 1;
        self.queue.push(Reverse((time, ordinal)));
        self.pending.insert(ordinal, SimEvent { time, ordinal, kind, payload });
    }

    fn ensure_scheduled(&mut self) -> Result<(), SimError> {
        if self.scheduled || !matches!(self.phase(), Phase::Running | Phase::Paused) {
            return Ok(());
        }
        self.scheduled = true;
        let now = self.now;
        self.schedule(now, SimEventKind::ScheduleTick, EventPayload::default());
        let next_load = self.fabric.next_load_step();
        self.schedule(next_load.max(now), SimEventKind::LoadStep, EventPayload::default());
        for (at, id, down) in self.fabric.outage_events() {
            if at > now {
                let kind = if down { SimEventKind::ResourceDown } else { SimEventKind::ResourceUp };
                self.schedule(at, kind, EventPayload { resource: Some(id), ..Default::default() });
            }
        }
        self.schedule_cost_boundary();
        Ok(())
    }

    fn schedule_cost_boundary(&mut self) {
        let tod = self.time_of_day(self.now);
        let next = self.fabric.config().resources.iter().filter_map(|r| r.schedule.next_boundary_after(tod)).min();
        if let Some(ms) = next {
            self.schedule(self.now + SimDuration::from_millis(ms), SimEventKind::CostBoundary, EventPayload::default());
        }
    }

    fn process(&mut self, ev: SimEvent) -> Result<(), SimError> {
        match ev.kind {
            SimEventKind::ScheduleTick => {
                if self.phase() == Phase::Running {
                    self.accounting_check()?;
                }
                if self.phase() == Phase::Running {
                    self.replan("tick")?;
                    self.dispatch_waiting()?;
                }
                if !self.phase().is_terminal() {
                    let cycle = self.engine.experiment().config.scheduler.scheduling_cycle;
                    self.schedule(
                        self.now + cycle.max(SimDuration::from_millis(1)),
                        SimEventKind::ScheduleTick,
                        EventPayload::default(),
                    );
                }
            }
            SimEventKind::LoadStep => {
                self.fabric.load_step();
                let next = self.fabric.next_load_step();
                self.schedule(next, SimEventKind::LoadStep, EventPayload::default());
            }
            SimEventKind::CostBoundary => {
                self.react(ReplanEvent::CostBoundary, "cost boundary")?;
                self.schedule_cost_boundary();
            }
            SimEventKind::ResourceDown => {
                let id = ev.payload.resource.expect("outage events name a resource");
                let killed = self.fabric.resource_down(&id);
                for spec in killed {
                    let job = self.engine.experiment().job(spec.job);
                    if job.and_then(|j| j.handle) == Some(spec.handle.0) {
                        let mut u = StatusUpdate::new(spec.handle, spec.job, StatusPhase::Failed);
                        u.message = Some(format!("resource {id} went down"));
                        handle_status(&mut self.engine, self.now, &u)?;
                    }
                }
                self.react(ReplanEvent::ResourceDown, "resource down")?;
            }
            SimEventKind::ResourceUp => {
                let id = ev.payload.resource.expect("outage events name a resource");
                self.fabric.resource_up(&id);
                self.react(ReplanEvent::ResourceUp, "resource up")?;
            }
            SimEventKind::JobStart => {
                let h = ev.payload.handle.expect("job events carry a handle");
                let Some(report) = self.fabric.start(self.now, h) else { return Ok(()) };
                let spec = self.fabric.spec(h).expect("started attempt is live").clone();
                if self.engine.experiment().job(spec.job).and_then(|j| j.handle) == Some(h.0) {
                    let mut u = StatusUpdate::new(h, spec.job, StatusPhase::Started);
                    u.cpu_hours = 0.0;
                    handle_status(&mut self.engine, self.now, &u)?;
                }
                let payload =
                    EventPayload { handle: Some(h), job: Some(spec.job), resource: Some(spec.resource), reason: None };
                self.schedule(report.finish_at, SimEventKind::JobFinish, payload);
            }
            SimEventKind::JobFinish => self.on_finish(ev.payload.handle.expect("job events carry a handle"))?,
        }
        Ok(())
    }

    fn on_finish(&mut self, h: AttemptHandle) -> Result<(), SimError> {
        let started_at = self.fabric.started_at(h);
        let Some(report) = self.fabric.finish(self.now, h) else { return Ok(()) };
        for (at, next) in report.started.clone() {
            let spec = self.fabric.spec(next).expect("slotted attempt is live");
            let payload = EventPayload {
                handle: Some(next),
                job: Some(spec.job),
                resource: Some(spec.resource.clone()),
                reason: None,
            };
            self.schedule(at, SimEventKind::JobStart, payload);
        }
        let job = report.spec.job;
        if self.engine.experiment().job(job).and_then(|j| j.handle) != Some(h.0) {
            return Ok(());
        }
        let trigger = if report.failed {
            let mut u = StatusUpdate::new(h, job, StatusPhase::Failed);
            u.cpu_hours = report.cpu_hours;
            u.message = Some(format!("execution failed on {}", report.spec.resource));
            handle_status(&mut self.engine, self.now, &u)?;
            ReplanEvent::Failure
        } else {
            handle_status(&mut self.engine, self.now, &StatusUpdate::new(h, job, StatusPhase::StagedOut))?;
            let mut u = StatusUpdate::new(h, job, StatusPhase::Completed);
            u.cpu_hours = report.cpu_hours;
            let slots = self.fabric.directory().get(&report.spec.resource).map_or(1, |e| e.resource.slots);
            let load_free = 1.0 - report.load.clamp(0.0, 0.99);
            let zero_load_hours = report.exec_hours - report.cpu_hours / load_free + report.cpu_hours;
            if zero_load_hours > 0.0 {
                u.observed_rate = Some(slots as f64 / zero_load_hours);
            }
            if self.engine.experiment().config.charge_integrated {
                if let (Some(start), Some(entry)) = (started_at, self.fabric.directory().get(&report.spec.resource)) {
                    let user = self.engine.experiment().constraints.user_id.clone();
                    let wall = self.now.duration_since(start).millis();
                    u.charge = Some(integrated_charge(
                        &entry.resource.schedule,
                        &user,
                        self.time_of_day(start),
                        wall,
                        report.cpu_hours,
                    ));
                }
            }
            match handle_status(&mut self.engine, self.now, &u)? {
                crate::dispatcher::StatusOutcome::BudgetExceeded => ReplanEvent::Failure,
                _ => ReplanEvent::Completion { eta_within_deadline: self.eta_within_deadline() },
            }
        };
        let reason = if trigger == ReplanEvent::Failure { "failure" } else { "completion" };
        self.react(trigger, reason)
    }

    fn eta_within_deadline(&self) -> bool {
        let exp = self.engine.experiment();
        let rate = self.decision.as_ref().map_or(0.0, |d| d.aggregate_rate());
        let waiting = exp.count(JobState::Waiting) as f64;
        waiting == 0.0 || (rate > 0.0 && waiting / rate <= self.planning_time_left().hours())
    }

    /// Replans if the policy says so, then dispatches.
    fn react(&mut self, event: ReplanEvent, reason: &str) -> Result<(), SimError> {
        if self.phase() != Phase::Running {
            return Ok(());
        }
        if self.policy.replan_trigger(event) || self.decision.is_none() {
            self.replan(reason)?;
        }
        self.dispatch_waiting()
    }

    fn run_tender(&mut self) {
        let exp = self.engine.experiment();
        let user = exp.constraints.user_id.clone();
        let window = exp.constraints.deadline;
        let tod = self.time_of_day(self.now);
        let bids: Vec<_> = discover(self.fabric.directory(), &user)
            .iter()
            .filter(|v| v.authorized && v.is_up())
            .filter_map(|v| self.fabric.directory().get(&v.id))
            .map(|e| {
                let r = &e.resource;
                owner_bid(&r.id, &r.schedule, &user, self.now, tod, r.slots, r.bid_markup, window)
            })
            .collect();
        let slots = bids.iter().map(|b| b.capacity).sum::<u32>().max(1);
        self.tender = run_tender(&TenderRequest { slots, window }, &bids).ok();
    }

    /// Rate a job dispatched now to `resource` is pinned at.
    fn rate_for(&self, resource: &SimResource) -> Money {
        if let Some(rate) = self.tender.as_ref().and_then(|t| t.pinned_rate(&resource.id, self.now)) {
            return rate;
        }
        let user = &self.engine.experiment().constraints.user_id;
        cost_at(&resource.schedule, user, self.time_of_day(self.now))
    }

    fn planning_time_left(&self) -> SimDuration {
        let exp = self.engine.experiment();
        let horizon = exp.config.scheduler.planning_horizon(exp.constraints.deadline);
        match exp.clock_origin {
            Some(origin) => (origin + horizon).duration_since(self.now),
            None => horizon,
        }
    }

    /// Per-slot hours until `resource` drains the attempts it already holds.
    fn slot_busy(&self, resource: &ResourceId, slots: u32, slot_hours: f64) -> Vec<f64> {
        let mut running = Vec::new();
        let mut queued = 0u32;
        for j in &self.engine.experiment().jobs {
            if !j.state.is_in_flight() || j.assigned_resource.as_ref() != Some(resource) {
                continue;
            }
            match (j.state, j.entered(JobState::Running)) {
                (JobState::Running | JobState::Completing, Some(t)) => {
                    running.push((slot_hours - self.now.duration_since(t).hours()).max(0.0))
                }
                _ => queued += 1,
            }
        }
        running.sort_by(f64::total_cmp);
        let mut busy = vec![0.0; slots.max(1) as usize];
        for (slot, r) in busy.iter_mut().zip(running) {
            *slot = r;
        }
        for _ in 0..queued {
            let min = busy.iter_mut().min_by(|a, b| a.total_cmp(b)).expect("at least one slot");
            *min += slot_hours;
        }
        if busy.iter().all(|b| *b == 0.0) {
            busy.clear();
        }
        busy
    }

    /// Candidate set and remaining work as the scheduler sees them now.
    pub fn selection_input(&self) -> SelectionInput {
        let exp = self.engine.experiment();
        let user = &exp.constraints.user_id;
        let reference = exp.config.scheduler.reference_rate_for(exp.plan.expected_job_hours());
        let candidates = discover(self.fabric.directory(), user)
            .into_iter()
            .filter(|v| v.authorized)
            .filter_map(|v| {
                let entry = self.fabric.directory().get(&v.id)?;
                let history = exp.observations.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
                let est = estimate_rate(history, &v, reference, self.now);
                let slots = v.slots.max(1);
                let slot_hours = slots as f64 / est.jobs_per_hour;
                Some(Candidate {
                    usable: v.is_up(),
                    jobs_per_hour: est.jobs_per_hour,
                    rate: self.rate_for(&entry.resource),
                    busy_hours: self.slot_busy(&v.id, slots, slot_hours),
                    slots,
                    resource_id: v.id,
                })
            })
            .collect();
        SelectionInput {
            n_remaining: exp.count(JobState::Waiting) as u64,
            t_rem: self.planning_time_left(),
            candidates,
            budget_remaining: exp.ledger.headroom().max(Money::ZERO),
        }
    }

    fn replan(&mut self, default_reason: &str) -> Result<(), SimError> {
        let reason = self.engine.take_replan_request().unwrap_or_else(|| default_reason.to_string());
        let input = self.selection_input();
        let decision = select_resources(&input, &self.engine.experiment().config.scheduler);
        self.engine.record_decision(self.now, &reason, &input, &decision)?;
        self.decision = Some(decision);
        self.dispatched_since.clear();
        if input.candidates.is_empty() {
            self.engine.finish(self.now, Phase::Aborted, "infeasible: no authorized resources")?;
        }
        Ok(())
    }

    /// Halts under enforcement once spend has reached the budget.
    fn accounting_check(&mut self) -> Result<(), SimError> {
        let exp = self.engine.experiment();
        if exp.ledger.enforce && exp.remaining() > 0 && exp.ledger.committed() >= exp.ledger.budget {
            self.engine.finish(self.now, Phase::BudgetExhausted, "budget exhausted")?;
        }
        Ok(())
    }

    fn dispatch_waiting(&mut self) -> Result<(), SimError> {
        if self.phase() != Phase::Running {
            return Ok(());
        }
        let Some(decision) = self.decision.clone() else { return Ok(()) };
        let exp = self.engine.experiment();
        let placements = assign(&exp.waiting(), &decision, &exp.in_flight_by_resource(), &self.dispatched_since);
        let expected = exp.plan.expected_job_hours();
        let payload_mb = exp.plan.payload_mb();
        let integrated = exp.config.charge_integrated;
        let user = exp.constraints.user_id.clone();
        let mut blocked = false;
        for p in placements {
            let Some(entry) = self.fabric.directory().get(&p.resource_id) else { continue };
            let resource = entry.resource.clone();
            let rate = self.rate_for(&resource);
            let slot_hours = decision
                .selected
                .iter()
                .find(|s| s.resource_id == p.resource_id)
                .map_or(0.0, |s| resource.slots.max(1) as f64 / s.jobs_per_hour);
            let cpu = expected / resource.capability;
            let basis = if integrated { peak_rate(&resource.schedule, &user) } else { rate };
            let reservation = basis.scale(slot_hours.max(cpu));
            if !self.engine.experiment().ledger.can_reserve(reservation) {
                blocked = true;
                self.budget_blocked = true;
                break;
            }
            let job = self.engine.experiment().job(p.job_id).expect("placed jobs exist");
            let order = DispatchOrder {
                job_id: p.job_id,
                resource_id: p.resource_id.clone(),
                handle: AttemptHandle(self.next_handle),
                attempt: job.attempt + 1,
                task: job.spec.task.clone(),
                binding: job.spec.binding.clone(),
                pinned_rate: rate,
                projected_duration: SimDuration::from_hours_f64(slot_hours),
                reservation,
                expected_job_hours: expected,
                payload_mb,
            };
            self.next_handle += 1;
            let mut executor = SimExecutor::new(&mut self.fabric);
            let result = dispatch(&mut self.engine, self.now, &order, &mut executor);
            let starts = std::mem::take(&mut executor.starts);
            match result {
                Ok(_) => {
                    *self.dispatched_since.entry(p.resource_id.clone()).or_insert(0) += 1;
                    self.budget_blocked = false;
                }
                Err(DispatchError::Unavailable(_)) => {}
                Err(e) => return Err(e.into()),
            }
            for (at, h) in starts {
                let spec = self.fabric.spec(h).expect("slotted attempt is live");
                let payload = EventPayload {
                    handle: Some(h),
                    job: Some(spec.job),
                    resource: Some(spec.resource.clone()),
                    reason: None,
                };
                self.schedule(at, SimEventKind::JobStart, payload);
            }
        }
        let exp = self.engine.experiment();
        if exp.ledger.enforce && blocked && exp.in_flight_by_resource().is_empty() {
            self.engine.finish(
                self.now,
                Phase::BudgetExhausted,
                "budget exhausted: no job fits the remaining budget",
            )?;
        }
        Ok(())
    }

    /// Ends the run when the experiment is settled, late, or already terminal.
    fn check_end(&mut self) -> Result<(), SimError> {
        if self.ended {
            return Ok(());
        }
        let exp = self.engine.experiment();
        let phase = exp.phase;
        if phase == Phase::Running && exp.all_settled() {
            let clean = exp.jobs.iter().all(|j| j.state == JobState::Done);
            let (to, reason) = if clean {
                (Phase::Completed, "all jobs done")
            } else {
                (Phase::CompletedWithFailures, "all jobs settled, some failed")
            };
            self.engine.finish(self.now, to, reason)?;
        } else if matches!(phase, Phase::Running | Phase::Paused) && exp.deadline_at().is_some_and(|d| self.now > d) {
            // Work the budget had already ruled out is reported as such.
            if exp.ledger.enforce && self.budget_blocked && exp.remaining() > 0 {
                self.engine.finish(
                    self.now,
                    Phase::BudgetExhausted,
                    "budget exhausted: remaining jobs were unaffordable",
                )?;
            } else {
                self.engine.finish(self.now, Phase::DeadlineMissed, "deadline passed")?;
            }
        }
        if self.phase().is_terminal() {
            self.teardown();
        }
        Ok(())
    }

    fn teardown(&mut self) {
        self.ended = true;
        let ids: Vec<ResourceId> = self.fabric.config().resources.iter().map(|r| r.id.clone()).collect();
        for id in ids {
            for h in self.fabric.attempts_on(&id) {
                self.fabric.cancel(self.now, h);
            }
        }
        self.queue.clear();
        self.pending.clear();
        let exp = self.engine.experiment();
        let payload = EventPayload { reason: exp.phase_reason.clone(), ..Default::default() };
        let kind = format!("experiment_{}", exp.phase);
        let ord = self.next_ord;
        self.next_ord += 1;
        self.push_trace(self.now, ord, kind, payload);
    }
}
