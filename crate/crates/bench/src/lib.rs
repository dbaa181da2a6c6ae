//! Shared inputs for the benchmarks.

use taskfarm::engine::{Engine, EngineConfig, ExperimentConstraints, MemoryJournal};
use taskfarm::fabric::{synthesize, ResourceId};
use taskfarm::money::Money;
use taskfarm::plan::parse_plan;
use taskfarm::scheduler::{Candidate, SelectionInput};
use taskfarm::sim::{SimOptions, SimRunner};
use taskfarm::time::{SimDuration, SimTime};

/// A selection problem over `n` resources with spread rates and speeds.
pub fn selection_input(n: usize, jobs: u64, hours: i64) -> SelectionInput {
    let candidates = (0..n)
        .map(|i| Candidate {
            resource_id: ResourceId::new(format!("R{i:04}")),
            usable: i % 17 != 5,
            jobs_per_hour: 0.25 + (i % 7) as f64 * 0.2,
            rate: Money::from_cents(50 + ((i * 37) % 400) as i64),
            busy_hours: if i % 3 == 0 { vec![1.5] } else { Vec::new() },
            slots: 1 + (i % 4) as u32,
        })
        .collect();
    SelectionInput {
        n_remaining: jobs,
        t_rem: SimDuration::from_hours(hours),
        candidates,
        budget_remaining: Money::from_cents(100_000_000),
    }
}

/// Plan text sweeping `axes` integer parameters of `width` values each.
pub fn sweep_plan(axes: usize, width: usize) -> String {
    let mut src = String::new();
    for a in 0..axes {
        src.push_str(&format!("parameter p{a} integer range from 1 to {width} step 1;\n"));
    }
    src.push_str("task main\n    stage_in \"model.in\"\n    execute \"model");
    for a in 0..axes {
        src.push_str(&format!(" ${{p{a}}}"));
    }
    src.push_str("\"\n    output \"out.dat\"\n    stage_out \"out.dat\" \"results/out_${p0}.dat\"\nendtask\n");
    src
}

/// A started runner for `jobs` jobs on a synthesized fabric.
pub fn runner(resources: usize, jobs: usize, deadline_hours: i64, seed: u64) -> SimRunner {
    let plan = parse_plan(&sweep_plan(1, jobs)).expect("plan parses");
    let constraints =
        ExperimentConstraints::new(SimDuration::from_hours(deadline_hours), Money::from_cents(100_000_000), "bench");
    let engine = Engine::create(
        "bench",
        &plan,
        constraints,
        EngineConfig::default(),
        Box::new(MemoryJournal::new()),
        SimTime::ZERO,
    )
    .expect("experiment is valid");
    let mut r = SimRunner::new(engine, synthesize(resources, seed), seed, SimOptions::default()).expect("runner");
    r.start(None).expect("starts");
    r
}
