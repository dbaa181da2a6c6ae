//! Whole-experiment simulations used by the acceptance checks.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use taskfarm::economy::CostSchedule;
use taskfarm::engine::{
    Engine, EngineConfig, ExperimentConstraints, JobEvent, JobState, JournalEvent, JournalRecord, MemoryJournal, Phase,
};
use taskfarm::fabric::{synthesize, FabricConfig, FabricOptions, SimResource};
use taskfarm::money::Money;
use taskfarm::plan::parse_plan;
use taskfarm::scheduler::QueueType;
use taskfarm::sim::{mean_resources_in_use, RunUntil, SimOptions, SimRunner};
use taskfarm::time::{SimDuration, SimTime};

use super::oracle;

pub fn plan_text(jobs: u64, job_hours: f64) -> String {
    format!(
        "plan sweep;\noption expected_job_hours = {job_hours};\nparameter i integer range from 1 to {jobs} step 1;\ntask main\n    execute \"model ${{i}}\"\nendtask\n"
    )
}

#[derive(Clone)]
pub struct Scenario {
    pub jobs: u64,
    pub job_hours: f64,
    pub fabric: FabricConfig,
    pub deadline: SimDuration,
    pub budget: Money,
    pub seed: u64,
    pub config: EngineConfig,
}

pub struct Finished {
    pub runner: SimRunner,
    pub journal: MemoryJournal,
    pub elapsed: Duration,
}

impl Finished {
    pub fn phase(&self) -> Phase {
        self.runner.phase()
    }

    pub fn records(&self) -> &[JournalRecord] {
        self.runner.engine().records()
    }

    pub fn committed(&self) -> Money {
        self.runner.engine().experiment().ledger.committed()
    }
}

pub fn runner(s: &Scenario) -> (SimRunner, MemoryJournal) {
    let plan = parse_plan(&plan_text(s.jobs, s.job_hours)).expect("generated plan parses");
    let journal = MemoryJournal::new();
    let c = ExperimentConstraints::new(s.deadline, s.budget, "user");
    let engine = Engine::create("exp", &plan, c, s.config.clone(), Box::new(journal.clone()), SimTime::ZERO)
        .expect("experiment is created");
    let r = SimRunner::new(engine, s.fabric.clone(), s.seed, SimOptions::default()).expect("runner starts");
    (r, journal)
}

pub fn run(s: &Scenario) -> Finished {
    let t0 = Instant::now();
    let (mut runner, journal) = runner(s);
    runner.start(Some("user")).expect("start accepted");
    runner.run_until(RunUntil::Terminal).expect("run completes");
    Finished { runner, journal, elapsed: t0.elapsed() }
}

/// Final job states and phase, the outcome compared across recovery.
pub fn outcome(r: &SimRunner) -> (Phase, BTreeMap<JobState, usize>) {
    let mut counts = BTreeMap::new();
    for j in &r.engine().experiment().jobs {
        *counts.entry(j.state).or_insert(0) += 1;
    }
    (r.phase(), counts)
}

pub struct DeadlineRun {
    pub deadline_h: i64,
    pub phase: Phase,
    pub finished_h: f64,
    pub cost: Money,
    pub mean_in_use: f64,
}

/// 200 two-hour jobs on 70 synthesized resources at three deadlines.
pub fn deadline_sweep() -> (Vec<DeadlineRun>, Duration) {
    let t0 = Instant::now();
    let runs = [10, 15, 20]
        .into_iter()
        .map(|h| {
            let s = Scenario {
                jobs: 200,
                job_hours: 2.0,
                fabric: synthesize(70, 42),
                deadline: SimDuration::from_hours(h),
                budget: Money::units(1_000_000),
                seed: 42,
                config: EngineConfig::default(),
            };
            let f = run(&s);
            DeadlineRun {
                deadline_h: h,
                phase: f.phase(),
                finished_h: f.runner.now().hours(),
                cost: f.committed(),
                mean_in_use: mean_resources_in_use(f.records()),
            }
        })
        .collect();
    (runs, t0.elapsed())
}

pub fn check_deadline_sweep(runs: &[DeadlineRun]) -> Vec<String> {
    let mut bad = Vec::new();
    for r in runs {
        if !r.phase.is_terminal() || r.phase != Phase::Completed || r.finished_h > r.deadline_h as f64 {
            bad.push(format!("{}h: {} at {:.2}h", r.deadline_h, r.phase.as_str(), r.finished_h));
        }
    }
    for w in runs.windows(2) {
        if w[1].mean_in_use >= w[0].mean_in_use {
            bad.push(format!(
                "mean in use {:.2} at {}h vs {:.2} at {}h",
                w[1].mean_in_use, w[1].deadline_h, w[0].mean_in_use, w[0].deadline_h
            ));
        }
        if w[1].cost > w[0].cost {
            bad.push(format!("cost {} at {}h above {} at {}h", w[1].cost, w[1].deadline_h, w[0].cost, w[0].deadline_h));
        }
    }
    bad
}

pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = oracle::rng(seed);
    Scenario {
        jobs: rng.gen_range(10..=60),
        job_hours: [0.5, 1.0, 2.0, 3.0][rng.gen_range(0..4)],
        fabric: synthesize(rng.gen_range(4..=16), seed),
        deadline: SimDuration::from_hours(rng.gen_range(6..=30)),
        budget: Money::units(1_000_000),
        seed,
        config: EngineConfig::default(),
    }
}

/// Stretches the deadline until the quote says it can be met, so the run
/// ends on the constraint under test rather than on time.
pub fn with_feasible_deadline(mut s: Scenario) -> Scenario {
    let (probe, _) = runner(&s);
    let q = probe.quote();
    if !q.feasible_deadline {
        let hours = (q.projected_finish.hours() * 1.5 / 0.9).ceil() as i64;
        s.deadline = SimDuration::from_hours(hours.max(1));
    }
    s
}

/// Cheapest conceivable charge for one job: the lowest rate anywhere in the
/// fabric applied to the shortest cpu time.
pub fn min_job_charge(s: &Scenario) -> Money {
    s.fabric
        .resources
        .iter()
        .map(|r| {
            let low = r.schedule.segments.iter().map(|g| g.rate).min().unwrap_or(Money::ZERO);
            low.scale(r.schedule.multiplier("user") * s.job_hours / r.capability)
        })
        .min()
        .unwrap_or(Money::ZERO)
}

/// Walks a journal checking the budget invariant; returns the problems.
pub fn budget_violations(records: &[JournalRecord]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut budget = None;
    let mut committed = Money::ZERO;
    let mut exhausted_at = None;
    for r in records {
        match &r.event {
            JournalEvent::ExperimentCreated { constraints, .. }
            | JournalEvent::ConstraintsSteered { constraints, .. } => budget = Some(constraints.budget),
            JournalEvent::PhaseChanged { to: Phase::BudgetExhausted, .. } => exhausted_at = Some(r.seq),
            JournalEvent::JobTransition {
                event: JobEvent::Completed { amount, .. } | JobEvent::Failed { amount, .. },
                ..
            } => {
                committed += *amount;
                if let Some(at) = exhausted_at {
                    if amount.is_positive() {
                        bad.push(format!("charge {amount} at seq {} after exhaustion at seq {at}", r.seq));
                    }
                }
            }
            _ => {}
        }
        if let Some(b) = budget {
            if committed > b {
                bad.push(format!("committed {committed} over budget {b} at seq {}", r.seq));
            }
        }
    }
    bad
}

pub struct BudgetSummary {
    pub runs: usize,
    pub exhausted: usize,
    pub problems: Vec<String>,
}

/// Seeded simulations with budgets from far too small to ample.
pub fn budget_invariant(count: u64) -> BudgetSummary {
    let mut problems = Vec::new();
    let mut exhausted = 0;
    for seed in 0..count {
        let mut s = with_feasible_deadline(random_scenario(1000 + seed));
        let floor = min_job_charge(&s) * s.jobs;
        let (probe, _) = runner(&s);
        let quoted = probe.quote().projected_cost;
        let mut rng = oracle::rng(seed);
        s.budget = quoted.scale(rng.gen_range(0.05..1.5)).max(Money::from_cents(1));
        let f = run(&s);
        for p in budget_violations(f.records()) {
            problems.push(format!("seed {seed}: {p}"));
        }
        if f.phase() == Phase::BudgetExhausted {
            exhausted += 1;
        }
        if s.budget < floor && f.phase() != Phase::BudgetExhausted {
            problems.push(format!(
                "seed {seed}: budget {} under the floor {floor} ended {}",
                s.budget,
                f.phase().as_str()
            ));
        }
    }
    BudgetSummary { runs: count as usize, exhausted, problems }
}

/// A fabric with no load, failures, outages, queues or staging, and flat
/// prices.
pub fn frozen_fabric(rng: &mut impl Rng) -> FabricConfig {
    let n = rng.gen_range(1..=8);
    let resources = (0..n)
        .map(|i| {
            let cap = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0][rng.gen_range(0..6)];
            let mut r = SimResource::new(&format!("F{i}"), cap)
                .with_schedule(CostSchedule::flat(Money::from_cents(rng.gen_range(10..=600))))
                .with_slots(rng.gen_range(1..=2));
            r.queue_type = QueueType::Interactive;
            r.initial_load = 0.0;
            r.failure_rate = 0.0;
            r
        })
        .collect();
    FabricConfig::new(resources, FabricOptions::frozen())
}

pub struct QuoteSummary {
    pub checked: usize,
    pub problems: Vec<String>,
}

/// Random quotes in a frozen world; each feasible one is run to the end.
pub fn quote_soundness(count: usize) -> QuoteSummary {
    let mut problems = Vec::new();
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < count {
        seed += 1;
        let mut rng = oracle::rng(50_000 + seed);
        let s = Scenario {
            jobs: rng.gen_range(1..=80),
            job_hours: [0.5, 1.0, 2.0][rng.gen_range(0..3)],
            fabric: frozen_fabric(&mut rng),
            deadline: SimDuration::from_hours(rng.gen_range(2..=24)),
            budget: Money::units(rng.gen_range(10..=5000)),
            seed,
            config: EngineConfig::default(),
        };
        let (probe, _) = runner(&s);
        let q = probe.quote();
        if !q.feasible {
            continue;
        }
        checked += 1;
        let f = run(&s);
        let end = f.runner.now();
        if f.phase() != Phase::Completed || end.since_start() > s.deadline {
            problems.push(format!(
                "seed {seed}: {} at {:.3}h, deadline {}",
                f.phase().as_str(),
                end.hours(),
                s.deadline
            ));
        }
        if f.committed() != q.projected_cost {
            problems.push(format!("seed {seed}: cost {} vs quoted {}", f.committed(), q.projected_cost));
        }
    }
    QuoteSummary { checked, problems }
}

/// Runs, truncates the journal at a random record, recovers, continues and
/// compares outcomes with the uninterrupted run.
pub fn recovery_equivalence(count: u64) -> Vec<String> {
    let mut problems = Vec::new();
    for seed in 0..count {
        // A crash forfeits in-flight work, so the deadline leaves room to
        // redo it.
        let mut s = with_feasible_deadline(random_scenario(7000 + seed));
        s.deadline = SimDuration::from_millis(s.deadline.millis() * 2);
        let whole = run(&s);
        let expected = outcome(&whole.runner);
        let lines = whole.journal.lines();
        let mut rng = oracle::rng(seed);
        let cut = rng.gen_range(1..=lines.len());
        let mut text = lines[..cut].join("\n");
        text.push('\n');
        let (engine, _) = match Engine::recover(text.as_bytes(), Box::new(MemoryJournal::new()), None) {
            Ok(x) => x,
            Err(e) => {
                problems.push(format!("seed {seed}: recovery at record {cut} failed: {e}"));
                continue;
            }
        };
        let mut resumed =
            SimRunner::new(engine, s.fabric.clone(), s.seed, SimOptions::default()).expect("runner resumes");
        if resumed.phase() == Phase::Ready {
            resumed.start(Some("user")).expect("start accepted");
        }
        resumed.run_until(RunUntil::Terminal).expect("run completes");
        let got = outcome(&resumed);
        if got != expected {
            problems.push(format!("seed {seed}: cut at {cut}/{}: {got:?} vs {expected:?}", lines.len()));
        }
    }
    problems
}

/// Two identical runs; returns the problems and the journal size in bytes.
pub fn determinism(seed: u64) -> (Vec<String>, usize) {
    let s = random_scenario(seed);
    let mut s = s;
    s.fabric = synthesize(30, seed);
    s.jobs = 120;
    let a = run(&s);
    let b = run(&s);
    let mut problems = Vec::new();
    if a.journal.text() != b.journal.text() {
        problems.push("journals differ".to_string());
    }
    if a.runner.trace_text() != b.runner.trace_text() {
        problems.push("traces differ".to_string());
    }
    (problems, a.journal.text().len())
}

/// Random selection inputs where a shrunken horizon dropped a resource.
pub fn monotonicity(count: u64) -> Vec<String> {
    use taskfarm::scheduler::{select_resources, SchedulerConfig};
    let config = SchedulerConfig::default();
    let mut rng = oracle::rng(8);
    let mut problems = Vec::new();
    for i in 0..count {
        let mut input = oracle::instance(&mut rng);
        input.budget_remaining = Money::from_cents(rng.gen_range(0..=20_000));
        let mut ids: Vec<usize> = (0..input.candidates.len()).collect();
        ids.shuffle(&mut rng);
        let wide = select_resources(&input, &config);
        let shrunk = SimDuration::from_millis(rng.gen_range(0..=input.t_rem.millis()));
        input.t_rem = shrunk;
        let narrow = select_resources(&input, &config);
        if let Some(lost) = wide.selected.iter().find(|s| !narrow.is_selected(&s.resource_id)) {
            problems.push(format!("instance {i}: {} dropped when the horizon shrank to {shrunk}", lost.resource_id));
        }
    }
    problems
}
