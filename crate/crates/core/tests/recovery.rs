mod common;

use std::fs::{self, OpenOptions};
use std::io::Write;

use common::runs::{outcome, plan_text};
use taskfarm::engine::{Engine, EngineConfig, ExperimentConstraints, FileJournal, JobState, Phase};
use taskfarm::fabric::synthesize;
use taskfarm::money::Money;
use taskfarm::plan::parse_plan;
use taskfarm::sim::{RunUntil, SimOptions, SimRunner};
use taskfarm::time::{SimDuration, SimTime, MS_PER_HOUR};

fn start_on_disk(dir: &std::path::Path) -> SimRunner {
    let plan = parse_plan(&plan_text(30, 1.0)).unwrap();
    let sink = FileJournal::create(dir, "disk").unwrap();
    let c = ExperimentConstraints::new(SimDuration::from_hours(40), Money::units(100_000), "user");
    let e = Engine::create("disk", &plan, c, EngineConfig::default(), Box::new(sink), SimTime::ZERO).unwrap();
    let mut r = SimRunner::new(e, synthesize(8, 4), 4, SimOptions::default()).unwrap();
    r.start(None).unwrap();
    r
}

fn resume(dir: &std::path::Path) -> (SimRunner, taskfarm::engine::RecoveryReport) {
    let path = FileJournal::path_for(dir, "disk");
    let bytes = fs::read(&path).unwrap();
    let valid = taskfarm::engine::read_journal_file(&path).unwrap().valid_len;
    let sink = FileJournal::reopen(&path, valid).unwrap();
    let (engine, report) = Engine::recover(&bytes[..], Box::new(sink), None).unwrap();
    (SimRunner::new(engine, synthesize(8, 4), 4, SimOptions::default()).unwrap(), report)
}

#[test]
fn torn_tail_is_ignored_and_run_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = start_on_disk(dir.path());
    r.run_until(RunUntil::Time(SimTime::from_millis(2 * MS_PER_HOUR))).unwrap();
    let done_before = r.engine().experiment().count(JobState::Done);
    drop(r);

    let path = FileJournal::path_for(dir.path(), "disk");
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"seq\":99999,\"t_sim\":1,\"kind\":\"job_tr").unwrap();
    drop(f);

    let torn = fs::metadata(&path).unwrap().len();
    let prefix = taskfarm::engine::read_journal_file(&path).unwrap();
    assert!(prefix.truncated.is_none());
    assert!(prefix.valid_len < torn);
    let (mut resumed, report) = resume(dir.path());
    assert_eq!(fs::read(&path).unwrap()[..prefix.valid_len as usize].last(), Some(&b'\n'));
    assert!(report.truncated.is_none());
    assert_eq!(resumed.engine().experiment().count(JobState::Done), done_before);
    for id in &report.reset {
        assert_eq!(resumed.engine().experiment().job(*id).unwrap().state, JobState::Waiting);
    }
    let out = resumed.run_until(RunUntil::Terminal).unwrap();
    assert_eq!(out.phase, Phase::Completed);
    assert_eq!(outcome(&resumed).1[&JobState::Done], 30);

    // The reopened journal holds the whole history and recovers again.
    let (again, _) = resume(dir.path());
    assert_eq!(again.engine().experiment().phase, Phase::Completed);
    assert_eq!(again.engine().experiment().ledger.committed(), resumed.engine().experiment().ledger.committed());
}

#[test]
fn corrupt_middle_record_stops_replay_there() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = start_on_disk(dir.path());
    r.run_until(RunUntil::Time(SimTime::from_millis(MS_PER_HOUR))).unwrap();
    drop(r);
    let path = FileJournal::path_for(dir.path(), "disk");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let victim = lines.len() / 2;
    // Same shape, wrong time: the checksum no longer matches.
    lines[victim] = lines[victim].replacen("\"t_sim\":\"PT", "\"t_sim\":\"PT1", 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let bytes = fs::read(&path).unwrap();
    let (engine, report) = Engine::recover(&bytes[..], Box::new(taskfarm::engine::MemoryJournal::new()), None).unwrap();
    let t = report.truncated.expect("corruption is reported");
    assert_eq!(t.line, victim + 1);
    assert!(t.reason.contains("checksum"), "{}", t.reason);
    assert_eq!(report.records_applied, victim);
    assert!(engine.records().last().unwrap().event.kind() == "recovered");
}
