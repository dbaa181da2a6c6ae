//! Parametric task farming under deadline and budget constraints.
//!
//! A declarative plan is expanded into one job per parameter combination.
//! The engine owns experiment state and journals every change; the
//! scheduler picks the cheapest set of resources that finishes the remaining
//! jobs by the deadline; the dispatcher turns jobs into wrapper scripts; and
//! [`sim`] drives all of it against a simulated grid fabric.

pub mod dispatcher;
pub mod economy;
pub mod engine;
pub mod fabric;
pub mod money;
pub mod plan;
pub mod scheduler;
pub mod sim;
pub mod time;

pub use economy::{BudgetLedger, CostSchedule, Quote};
pub use engine::{
    Action, Engine, EngineConfig, EngineError, ExperimentConstraints, JobEvent, JobRecord, JobState, JournalEvent,
    JournalRecord, Phase, Snapshot, Steer,
};
pub use fabric::{FabricConfig, ResourceId};
pub use money::Money;
pub use plan::{parse_plan, JobId, JobSpec, Plan};
pub use scheduler::{ScheduleDecision, SchedulerConfig, SelectionInput};
pub use sim::{RunUntil, SimOptions, SimRunner};
pub use time::{SimDuration, SimTime};
