//! Report files written after a run.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskfarm::engine::{Engine, JobState, Phase};
use taskfarm::money::Money;
use taskfarm::sim::{decision_trace, mean_resources_in_use, usage_series, SimRunner, UsageSample};
use taskfarm::time::SimDuration;

/// Headline figures of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub id: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_reason: Option<String>,
    pub deadline: SimDuration,
    pub budget: Money,
    pub committed: Money,
    pub elapsed: SimDuration,
    pub total_jobs: usize,
    pub done: usize,
    pub failed: usize,
    pub mean_resources_in_use: f64,
    pub peak_resources_in_use: u32,
}

pub fn summarize(engine: &Engine, step: SimDuration) -> Summary {
    let snap = engine.snapshot();
    let usage = usage_series(engine.records(), step);
    Summary {
        id: snap.id.clone(),
        phase: snap.phase,
        phase_reason: snap.phase_reason.clone(),
        deadline: snap.constraints.deadline,
        budget: snap.budget,
        committed: snap.committed,
        elapsed: snap.elapsed,
        total_jobs: snap.total_jobs,
        done: snap.count(JobState::Done),
        failed: snap.count(JobState::Failed),
        mean_resources_in_use: mean_resources_in_use(engine.records()),
        peak_resources_in_use: usage.iter().map(|u| u.resources_in_use).max().unwrap_or(0),
    }
}

/// Usage over time as CSV, one row per sample.
pub fn usage_csv(samples: &[UsageSample]) -> String {
    let mut out = String::from("t_hours,resources_in_use,jobs_in_flight,jobs_done,committed\n");
    let origin = samples.first().map(|s| s.t);
    for s in samples {
        let hours = origin.map_or(0.0, |o| s.t.duration_since(o).hours());
        let _ = writeln!(out, "{hours:.2},{},{},{},{}", s.resources_in_use, s.jobs_in_flight, s.jobs_done, s.committed);
    }
    out
}

/// Side-by-side comparison of several runs.
pub fn comparison_table(summaries: &[Summary]) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>10} {:>12} {:>8} {:>6} {:>12} {:>6}  {}\n",
        "experiment", "deadline_h", "elapsed_h", "cost", "done", "failed", "mean_in_use", "peak", "phase"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<24} {:>10.2} {:>10.2} {:>12} {:>8} {:>6} {:>12.2} {:>6}  {}",
            s.id,
            s.deadline.hours(),
            s.elapsed.hours(),
            s.committed.to_string(),
            s.done,
            s.failed,
            s.mean_resources_in_use,
            s.peak_resources_in_use,
            s.phase
        );
    }
    out
}

fn write(dir: &Path, name: String, body: &str, paths: &mut Vec<PathBuf>) -> io::Result<()> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    paths.push(path);
    Ok(())
}

fn lines(items: impl IntoIterator<Item = String>) -> String {
    items.into_iter().map(|l| l + "\n").collect()
}

/// Writes ledger, usage, decision and summary files derived from the
/// journal. Returns the paths written.
pub fn write_journal_reports(engine: &Engine, dir: &Path, step: SimDuration) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let id = engine.experiment().id.clone();
    let mut paths = Vec::new();
    let mut ledger = Vec::new();
    engine.experiment().ledger.write_csv(&mut ledger)?;
    write(dir, format!("{id}.ledger.csv"), &String::from_utf8_lossy(&ledger), &mut paths)?;
    write(dir, format!("{id}.usage.csv"), &usage_csv(&usage_series(engine.records(), step)), &mut paths)?;
    write(dir, format!("{id}.decisions.jsonl"), &lines(decision_trace(engine.records())), &mut paths)?;
    let summary = serde_json::to_string_pretty(&summarize(engine, step)).expect("summary serializes") + "\n";
    write(dir, format!("{id}.summary.json"), &summary, &mut paths)?;
    Ok(paths)
}

/// Journal-derived reports plus the simulation event trace.
pub fn write_run_reports(runner: &SimRunner, dir: &Path, step: SimDuration) -> io::Result<Vec<PathBuf>> {
    let mut paths = write_journal_reports(runner.engine(), dir, step)?;
    let id = &runner.engine().experiment().id;
    write(dir, format!("{id}.trace.jsonl"), &runner.trace_text(), &mut paths)?;
    Ok(paths)
}
