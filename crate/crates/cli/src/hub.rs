//! Registry of live experiments shared by every client session.
//!
//! Each experiment owns a simulation runner behind a mutex; every mutation and
//! every clock advance goes through that lock, so commands from concurrent
//! sessions are applied one at a time between event batches. Journal records
//! are fanned out to event-stream subscribers from inside the commit, which
//! lets a subscriber take a backlog and a live receiver atomically.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use taskfarm::economy::Quote;
use taskfarm::engine::{
    read_journal_file, Action, Engine, EngineConfig, EngineError, ExperimentConstraints, FileJournal, JobState,
    JournalRecord, JournalSink, MemoryJournal, Phase, Snapshot, Steer,
};
use taskfarm::fabric::{FabricConfig, ResourceId};
use taskfarm::money::Money;
use taskfarm::plan::{parse_plan, Diagnostic};
use taskfarm::sim::{
    decision_trace, resource_series, usage_series, ResourceSeries, RunUntil, SimError, SimOptions, SimRunner,
    UsageSample,
};
use taskfarm::time::{SimDuration, SimTime};
use tokio::sync::broadcast;

/// Failure of a hub operation, mapped onto an HTTP status by the API layer.
#[derive(Debug, Clone, PartialEq)]
pub enum HubError {
    NotFound(String),
    /// Not allowed in the experiment's current phase.
    Conflict(String),
    /// Well-formed but unacceptable input.
    Invalid {
        message: String,
        diagnostics: Vec<Diagnostic>,
    },
    Internal(String),
}

impl std::fmt::Display for HubError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HubError::NotFound(m) | HubError::Conflict(m) | HubError::Internal(m) => f.write_str(m),
            HubError::Invalid { message, .. } => f.write_str(message),
        }
    }
}

impl std::error::Error for HubError {}

impl HubError {
    fn invalid(message: impl Into<String>) -> Self {
        HubError::Invalid { message: message.into(), diagnostics: Vec::new() }
    }
}

impl From<SimError> for HubError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Engine(e) => e.into(),
            other => HubError::Internal(other.to_string()),
        }
    }
}

impl From<EngineError> for HubError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::IllegalPhase { .. } | EngineError::Terminal(_) => HubError::Conflict(message),
            EngineError::InvalidConstraints(_)
            | EngineError::DeadlineInPast { .. }
            | EngineError::Plan(_)
            | EngineError::Expand(_) => HubError::invalid(message),
            _ => HubError::Internal(message),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub fabric: FabricConfig,
    pub seed: u64,
    /// Journals are written here when set, and recovered from here on start.
    pub journal_dir: Option<PathBuf>,
    pub options: SimOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintsRequest {
    pub deadline: SimDuration,
    pub budget: Money,
    #[serde(default)]
    pub user_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub plan: String,
    pub constraints: ConstraintsRequest,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub config: Option<EngineConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub phase: Phase,
    pub quote: Quote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Steered {
    pub constraints: ExperimentConstraints,
    pub quote: Quote,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// The experiment as one status read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Status {
    #[serde(flatten)]
    pub snapshot: Snapshot,
    /// Simulation clock, which runs ahead of the last journal record.
    pub clock: SimTime,
    pub selected_resources: Vec<ResourceId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRow {
    pub id: u32,
    pub binding: BTreeMap<String, serde_json::Value>,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    pub attempt: u32,
    pub cost: Money,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobsPage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub jobs: Vec<JobRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resources {
    pub resources: Vec<ResourceSeries>,
    pub usage: Vec<UsageSample>,
}

pub struct Live {
    runner: Mutex<SimRunner>,
    events: broadcast::Sender<JournalRecord>,
}

impl Live {
    fn lock(&self) -> MutexGuard<'_, SimRunner> {
        self.runner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Journal records already committed plus a receiver for the ones to come.
pub struct Subscription {
    pub backlog: VecDeque<JournalRecord>,
    pub receiver: broadcast::Receiver<JournalRecord>,
    pub live: Arc<Live>,
}

impl Subscription {
    /// Records after `seq`, read under the runner lock.
    pub fn since(&self, seq: u64) -> Vec<JournalRecord> {
        self.live.lock().engine().records_after(seq).to_vec()
    }
}

const EVENT_BUFFER: usize = 4096;

pub struct Hub {
    config: HubConfig,
    experiments: RwLock<BTreeMap<String, Arc<Live>>>,
    next_id: AtomicU64,
}

impl Hub {
    pub fn new(config: HubConfig) -> Self {
        Hub { config, experiments: RwLock::new(BTreeMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn fabric(&self) -> &FabricConfig {
        &self.config.fabric
    }

    fn attach(&self, mut engine: Engine) -> Result<Arc<Live>, HubError> {
        let (tx, _) = broadcast::channel(EVENT_BUFFER);
        let sender = tx.clone();
        engine.subscribe(move |r| {
            let _ = sender.send(r.clone());
        });
        let id = engine.experiment().id.clone();
        let runner = SimRunner::new(engine, self.config.fabric.clone(), self.config.seed, self.config.options.clone())?;
        let live = Arc::new(Live { runner: Mutex::new(runner), events: tx });
        self.experiments.write().unwrap_or_else(|p| p.into_inner()).insert(id, live.clone());
        Ok(live)
    }

    /// Resumes every experiment journaled in the journal directory; returns
    /// their ids.
    pub fn recover_all(&self) -> anyhow::Result<Vec<String>> {
        let Some(dir) = &self.config.journal_dir else { return Ok(Vec::new()) };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "journal"))
            .collect();
        paths.sort();
        let mut ids = Vec::new();
        for path in paths {
            let prefix = read_journal_file(&path)?;
            let bytes = fs::read(&path)?;
            let sink = FileJournal::reopen(&path, prefix.valid_len)?;
            let (engine, _) = Engine::recover(&bytes[..prefix.valid_len as usize], Box::new(sink), None)?;
            let id = engine.experiment().id.clone();
            self.attach(engine).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            if let Some(n) = id.strip_prefix("exp-").and_then(|n| n.parse::<u64>().ok()) {
                self.next_id.fetch_max(n + 1, Ordering::SeqCst);
            }
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Live>, HubError> {
        self.experiments
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| HubError::NotFound(format!("no experiment `{id}`")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.experiments.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    /// Parses the plan, creates the experiment and journals its first quote.
    pub fn create(&self, req: CreateRequest, client_id: Option<&str>) -> Result<Created, HubError> {
        let plan = parse_plan(&req.plan).map_err(|d| HubError::Invalid {
            message: format!("plan does not parse: {}", d.first()),
            diagnostics: d.0.clone(),
        })?;
        let id = match req.id {
            Some(id) if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') => {
                return Err(HubError::invalid(format!("invalid experiment id `{id}`")))
            }
            Some(id) => id,
            None => format!("exp-{:04}", self.next_id.fetch_add(1, Ordering::SeqCst)),
        };
        if self.get(&id).is_ok() {
            return Err(HubError::Conflict(format!("experiment `{id}` already exists")));
        }
        let user = req.constraints.user_id.or(client_id.map(str::to_string)).unwrap_or_else(|| "user".into());
        let constraints = ExperimentConstraints::new(req.constraints.deadline, req.constraints.budget, user);
        constraints.validate()?;
        let sink: Box<dyn JournalSink> = match &self.config.journal_dir {
            Some(dir) => Box::new(
                FileJournal::create(dir, &id).map_err(|e| HubError::Internal(format!("cannot create journal: {e}")))?,
            ),
            None => Box::new(MemoryJournal::new()),
        };
        let engine = Engine::create(&id, &plan, constraints, req.config.unwrap_or_default(), sink, SimTime::ZERO)?;
        let live = self.attach(engine)?;
        let mut runner = live.lock();
        let quote = runner.record_quote()?;
        Ok(Created { id, phase: runner.phase(), quote })
    }

    pub fn control(&self, id: &str, action: Action, client_id: Option<&str>) -> Result<Phase, HubError> {
        let live = self.get(id)?;
        let mut runner = live.lock();
        Ok(runner.control(action, client_id)?)
    }

    pub fn steer(&self, id: &str, steer: &Steer, client_id: Option<&str>) -> Result<Steered, HubError> {
        let live = self.get(id)?;
        let mut runner = live.lock();
        let spent = runner.engine().experiment().ledger.committed();
        let quote = runner.steer(steer, client_id)?;
        let warning = steer.budget.filter(|b| *b <= spent).map(|b| {
            format!("budget {b} does not exceed the {spent} already spent; the experiment stops as budget_exhausted")
        });
        Ok(Steered {
            constraints: runner.engine().experiment().constraints.clone(),
            quote,
            phase: runner.phase(),
            warning,
        })
    }

    pub fn status(&self, id: &str) -> Result<Status, HubError> {
        let live = self.get(id)?;
        let runner = live.lock();
        Ok(Status {
            snapshot: runner.engine().snapshot(),
            clock: runner.now(),
            selected_resources: runner
                .decision()
                .map(|d| d.selected.iter().map(|s| s.resource_id.clone()).collect())
                .unwrap_or_default(),
        })
    }

    pub fn jobs(&self, id: &str, state: Option<JobState>, page: usize, page_size: usize) -> Result<JobsPage, HubError> {
        let page = page.max(1);
        let page_size = page_size.clamp(1, 1000);
        let live = self.get(id)?;
        let runner = live.lock();
        let exp = runner.engine().experiment();
        let matching: Vec<_> = exp.jobs.iter().filter(|j| state.is_none_or(|s| j.state == s)).collect();
        let jobs = matching
            .iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|j| JobRow {
                id: j.spec.id.0,
                binding: j
                    .spec
                    .binding
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null)))
                    .collect(),
                state: j.state,
                resource: j.assigned_resource.clone(),
                attempt: j.attempt,
                cost: j.cost_incurred,
            })
            .collect();
        Ok(JobsPage { page, page_size, total: matching.len(), jobs })
    }

    pub fn resources(&self, id: &str, step: SimDuration) -> Result<Resources, HubError> {
        let live = self.get(id)?;
        let runner = live.lock();
        let records = runner.engine().records();
        Ok(Resources { resources: resource_series(records), usage: usage_series(records, step) })
    }

    pub fn decisions(&self, id: &str) -> Result<Vec<serde_json::Value>, HubError> {
        let live = self.get(id)?;
        let runner = live.lock();
        Ok(decision_trace(runner.engine().records())
            .iter()
            .map(|l| serde_json::from_str(l).expect("decision lines are JSON"))
            .collect())
    }

    pub fn ledger_csv(&self, id: &str) -> Result<String, HubError> {
        let live = self.get(id)?;
        let runner = live.lock();
        let mut out = Vec::new();
        runner.engine().experiment().ledger.write_csv(&mut out).map_err(|e| HubError::Internal(e.to_string()))?;
        Ok(String::from_utf8(out).expect("csv is utf-8"))
    }

    /// Records after `from_seq` and a receiver for later ones, with no gap
    /// between them.
    pub fn subscribe(&self, id: &str, from_seq: u64) -> Result<Subscription, HubError> {
        let live = self.get(id)?;
        let runner = live.lock();
        let backlog = runner.engine().records_after(from_seq).iter().cloned().collect();
        let receiver = live.events.subscribe();
        drop(runner);
        Ok(Subscription { backlog, receiver, live })
    }

    /// Moves one experiment's clock forward by `by`.
    pub fn advance(&self, id: &str, by: SimDuration) -> Result<Phase, HubError> {
        let live = self.get(id)?;
        let mut runner = live.lock();
        let until = runner.now() + by;
        Ok(runner.run_until(RunUntil::Time(until))?.phase)
    }

    /// Runs one experiment until it reaches a terminal phase or stalls.
    pub fn run_to_end(&self, id: &str) -> Result<Phase, HubError> {
        let live = self.get(id)?;
        let mut runner = live.lock();
        Ok(runner.run_until(RunUntil::Terminal)?.phase)
    }

    /// Advances every running or paused experiment by `by`.
    pub fn advance_all(&self, by: SimDuration) {
        for id in self.ids() {
            let Ok(live) = self.get(&id) else { continue };
            let mut runner = live.lock();
            if matches!(runner.phase(), Phase::Running | Phase::Paused) {
                let until = runner.now() + by;
                if let Err(e) = runner.run_until(RunUntil::Time(until)) {
                    eprintln!("experiment {id}: {e}");
                }
            }
        }
    }
}
