use std::sync::{Arc, Mutex};

use super::*;
use crate::plan::parse_plan;

fn six_job_plan() -> Plan {
    parse_plan(
        r#"plan six; parameter a list 1, 2, 3; parameter b list "x", "y"; task main execute "run ${a} ${b}" endtask"#,
    )
    .unwrap()
}

fn constraints() -> ExperimentConstraints {
    ExperimentConstraints::new(SimDuration::from_hours(2), Money::units(100), "alice")
}

fn engine(journal: &MemoryJournal) -> Engine {
    Engine::create(
        "e1",
        &six_job_plan(),
        constraints(),
        EngineConfig::default(),
        Box::new(journal.clone()),
        SimTime::ZERO,
    )
    .unwrap()
}

fn t(min: i64) -> SimTime {
    SimTime::from_millis(min * 60_000)
}

fn dispatch(e: &mut Engine, job: u32, res: &str, now: SimTime) {
    let ev = JobEvent::Dispatched {
        resource: res.into(),
        handle: job as u64,
        rate: Money::units(6),
        reservation: Money::units(9),
    };
    e.apply_transition(now, JobId(job), ev).unwrap();
}

fn run_to_running(e: &mut Engine, job: u32, res: &str, now: SimTime) {
    dispatch(e, job, res, now);
    e.apply_transition(now, JobId(job), JobEvent::StagingIn).unwrap();
    e.apply_transition(now, JobId(job), JobEvent::Started).unwrap();
}

fn complete(e: &mut Engine, job: u32, now: SimTime) {
    let ev = JobEvent::Completed {
        cpu_hours: 1.5,
        rate: Money::units(6),
        amount: Money::units(9),
        observed_rate: Some(0.5),
    };
    e.apply_transition(now, JobId(job), ev).unwrap();
}

#[test]
fn create_six_jobs_ready() {
    let j = MemoryJournal::new();
    let e = engine(&j);
    let s = e.snapshot();
    assert_eq!(s.phase, Phase::Ready);
    assert_eq!(s.total_jobs, 6);
    assert_eq!(s.count(JobState::Waiting), 6);
    assert_eq!(s.counts.values().sum::<usize>(), 6);
    assert!(JobState::ALL.iter().filter(|s| **s != JobState::Waiting).all(|st| s.count(*st) == 0));
}

#[test]
fn zero_budget_rejected() {
    let c = ExperimentConstraints::new(SimDuration::from_hours(2), Money::ZERO, "alice");
    let err =
        Engine::create("e", &six_job_plan(), c, EngineConfig::default(), Box::new(MemoryJournal::new()), SimTime::ZERO)
            .unwrap_err();
    assert_eq!(err.to_string(), "budget must be positive");
}

#[test]
fn first_record_carries_full_plan() {
    let dir = tempfile::tempdir().unwrap();
    let sink = FileJournal::create(dir.path(), "e1").unwrap();
    let plan = six_job_plan();
    Engine::create("e1", &plan, constraints(), EngineConfig::default(), Box::new(sink), SimTime::ZERO).unwrap();
    let prefix = read_journal_file(&FileJournal::path_for(dir.path(), "e1")).unwrap();
    assert_eq!(prefix.records.len(), 1);
    let JournalEvent::ExperimentCreated { plan: text, job_count, .. } = &prefix.records[0].event else {
        panic!("first record is {:?}", prefix.records[0].event.kind());
    };
    assert_eq!(parse_plan(text).unwrap(), plan);
    assert_eq!(*job_count, 6);
}

#[test]
fn transitions_follow_the_state_machine() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    dispatch(&mut e, 0, "R3", t(0));
    let r = e.experiment().job(JobId(0)).unwrap();
    assert_eq!(r.state, JobState::Scheduled);
    assert_eq!(r.assigned_resource, Some(ResourceId::from("R3")));
    assert_eq!(r.attempt, 1);
    e.apply_transition(t(1), JobId(0), JobEvent::StagingIn).unwrap();
    e.apply_transition(t(2), JobId(0), JobEvent::Started).unwrap();
    complete(&mut e, 0, t(90));
    let r = e.experiment().job(JobId(0)).unwrap();
    assert_eq!(r.state, JobState::Done);
    assert_eq!(r.cost_incurred, Money::units(9));
    assert_eq!(e.experiment().ledger.committed(), Money::units(9));
    assert_eq!(e.experiment().ledger.reserved(), Money::ZERO);

    let before = j.lines().len();
    let err = e
        .apply_transition(
            t(91),
            JobId(0),
            JobEvent::Dispatched {
                resource: "R1".into(),
                handle: 9,
                rate: Money::units(1),
                reservation: Money::units(1),
            },
        )
        .unwrap_err();
    assert!(matches!(err, EngineError::IllegalTransition { from: JobState::Done, .. }));
    assert_eq!(e.experiment().job(JobId(0)).unwrap().state, JobState::Done);
    let lines = j.lines();
    assert_eq!(lines.len(), before + 1);
    assert!(matches!(JournalRecord::decode(lines.last().unwrap()).unwrap().event, JournalEvent::Anomaly { .. }));
}

#[test]
fn progress_refreshes_timestamp_only() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    run_to_running(&mut e, 1, "R1", t(0));
    e.apply_transition(t(7), JobId(1), JobEvent::Progress { cpu_hours: 0.1 }).unwrap();
    let r = e.experiment().job(JobId(1)).unwrap();
    assert_eq!(r.state, JobState::Running);
    assert_eq!(r.last_update, t(7));
}

#[test]
fn failures_requeue_until_cap() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    for attempt in 1..=3 {
        dispatch(&mut e, 2, "R1", t(attempt));
        let requeued = e.fail_job(t(attempt), JobId(2), "execution error", 0.2, Money::ZERO).unwrap();
        assert_eq!(requeued, attempt < 3);
        assert_eq!(e.experiment().job(JobId(2)).unwrap().attempt, attempt as u32);
    }
    assert_eq!(e.experiment().job(JobId(2)).unwrap().state, JobState::Failed);
    assert_eq!(e.experiment().ledger.committed(), Money::ZERO);
}

#[test]
fn journal_write_failure_leaves_state_unchanged() {
    struct Broken;
    impl JournalSink for Broken {
        fn append(&mut self, _: &str) -> io::Result<()> {
            Err(io::Error::other("disk full"))
        }
    }
    let err =
        Engine::create("e", &six_job_plan(), constraints(), EngineConfig::default(), Box::new(Broken), SimTime::ZERO)
            .unwrap_err();
    assert!(matches!(err, EngineError::Journal(_)));
}

#[test]
fn recovery_of_completed_run_matches_live_state() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    for job in 0..6 {
        run_to_running(&mut e, job, if job % 2 == 0 { "A" } else { "B" }, t(job as i64));
        complete(&mut e, job, t(30 + job as i64));
    }
    e.finish(t(40), Phase::Completed, "all jobs done").unwrap();
    let (r, report) = Engine::recover(j.text().as_bytes(), Box::new(MemoryJournal::new()), None).unwrap();
    assert_eq!(report.truncated, None);
    assert!(report.reset.is_empty());
    assert_eq!(r.experiment(), e.experiment());
    assert_eq!(r.experiment().phase, Phase::Completed);
    assert_eq!(r.experiment().count(JobState::Done), 6);
}

#[test]
fn empty_journal_is_an_error() {
    let err = Engine::recover(&b""[..], Box::new(MemoryJournal::new()), None).unwrap_err();
    assert_eq!(err.to_string(), "recovery failed: no experiment-created record");
}

#[test]
fn stranded_jobs_return_to_waiting() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    run_to_running(&mut e, 0, "A", t(0));
    run_to_running(&mut e, 1, "B", t(0));
    run_to_running(&mut e, 2, "A", t(1));
    complete(&mut e, 2, t(20));
    let out = MemoryJournal::new();
    let (r, report) = Engine::recover(j.text().as_bytes(), Box::new(out.clone()), Some(t(25))).unwrap();
    assert_eq!(report.reset, vec![JobId(0), JobId(1)]);
    for job in [0, 1] {
        let rec = r.experiment().job(JobId(job)).unwrap();
        assert_eq!(rec.state, JobState::Waiting);
        assert_eq!(rec.attempt, 1, "the stranded attempt counts");
    }
    assert_eq!(r.experiment().ledger.reserved(), Money::ZERO);
    assert_eq!(r.experiment().ledger.committed(), Money::units(9));
    // the reset is journaled and replays to the same state
    let mut text = j.text();
    text.push_str(&out.text());
    let (again, report2) = Engine::recover(text.as_bytes(), Box::new(MemoryJournal::new()), None).unwrap();
    assert!(report2.reset.is_empty());
    assert_eq!(again.experiment(), r.experiment());
    // the next dispatch is attempt 2
    let mut r = r;
    dispatch(&mut r, 0, "A", t(26));
    assert_eq!(r.experiment().job(JobId(0)).unwrap().attempt, 2);
}

#[test]
fn torn_tail_is_ignored() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    dispatch(&mut e, 0, "A", t(0));
    let mut text = j.text();
    let full_len = text.len() as u64;
    text.push_str(r#"{"seq":4,"t_sim":0,"kind":"job_tra"#);
    let (r, report) = Engine::recover(text.as_bytes(), Box::new(MemoryJournal::new()), None).unwrap();
    assert_eq!(report.truncated, None);
    assert_eq!(report.valid_len, full_len);
    assert_eq!(report.reset, vec![JobId(0)]);
    assert_eq!(r.experiment().phase, Phase::Running);
}

#[test]
fn checksum_failure_halts_and_reports() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    dispatch(&mut e, 0, "A", t(0));
    dispatch(&mut e, 1, "A", t(0));
    let mut lines = j.lines();
    lines[2] = lines[2].replace("\"A\"", "\"B\"");
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    let (r, report) = Engine::recover(text.as_bytes(), Box::new(MemoryJournal::new()), None).unwrap();
    let trunc = report.truncated.unwrap();
    assert_eq!(trunc.line, 3);
    assert_eq!(trunc.reason, "checksum mismatch");
    assert_eq!(report.records_applied, 2);
    assert_eq!(r.experiment().count(JobState::Waiting), 6);
}

#[test]
fn records_round_trip() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, Some("c1")).unwrap();
    run_to_running(&mut e, 0, "A", t(0));
    complete(&mut e, 0, t(3));
    for (line, rec) in j.lines().iter().zip(e.records()) {
        assert_eq!(&JournalRecord::decode(line).unwrap(), rec);
        assert_eq!(&rec.encode(), line);
    }
    let seqs: Vec<u64> = e.records().iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    assert_eq!(e.records_after(2).first().unwrap().seq, 3);
}

#[test]
fn steering() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    e.take_replan_request();
    let c = e.steer(t(10), &Steer { deadline: Some(SimDuration::from_hours(1)), budget: None }, Some("c2")).unwrap();
    assert_eq!(c.deadline, SimDuration::from_hours(1));
    assert_eq!(e.take_replan_request().as_deref(), Some("deadline changed"));
    let past = e.steer(t(90), &Steer { deadline: Some(SimDuration::from_minutes(30)), budget: None }, None);
    assert!(matches!(past, Err(EngineError::DeadlineInPast { .. })));
    let bad = e.steer(t(10), &Steer { deadline: None, budget: Some(Money::ZERO) }, None);
    assert!(matches!(bad, Err(EngineError::InvalidConstraints(_))));
    e.control(t(11), Action::Abort, None).unwrap();
    let done = e.steer(t(12), &Steer { deadline: None, budget: Some(Money::units(5)) }, None);
    assert!(matches!(done, Err(EngineError::Terminal(Phase::Aborted))));
}

#[test]
fn abort_fails_in_flight_without_charge() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    e.control(t(0), Action::Start, None).unwrap();
    run_to_running(&mut e, 0, "A", t(0));
    run_to_running(&mut e, 1, "A", t(0));
    complete(&mut e, 1, t(5));
    let committed = e.experiment().ledger.committed();
    assert_eq!(e.control(t(6), Action::Abort, Some("ops")).unwrap(), Phase::Aborted);
    let x = e.experiment();
    assert_eq!(x.ledger.committed(), committed);
    assert_eq!(x.ledger.reserved(), Money::ZERO);
    assert_eq!(x.job(JobId(0)).unwrap().state, JobState::Failed);
    assert_eq!(x.count(JobState::Aborted), 4);
    assert!(matches!(e.control(t(7), Action::Start, None), Err(EngineError::IllegalPhase { .. })));
}

#[test]
fn phase_actions() {
    let j = MemoryJournal::new();
    let mut e = engine(&j);
    assert!(matches!(e.control(t(0), Action::Pause, None), Err(EngineError::IllegalPhase { .. })));
    assert!(matches!(e.control(t(0), Action::Resume, None), Err(EngineError::IllegalPhase { .. })));
    assert_eq!(e.control(t(0), Action::Start, None).unwrap(), Phase::Running);
    assert_eq!(e.experiment().clock_origin, Some(t(0)));
    assert_eq!(e.control(t(5), Action::Pause, None).unwrap(), Phase::Paused);
    assert_eq!(e.control(t(6), Action::Start, None).unwrap(), Phase::Running);
    assert_eq!(e.experiment().clock_origin, Some(t(0)));
}

#[test]
fn negotiation_requires_accept() {
    let config = EngineConfig { negotiate: true, ..Default::default() };
    let mut e =
        Engine::create("n", &six_job_plan(), constraints(), config, Box::new(MemoryJournal::new()), SimTime::ZERO)
            .unwrap();
    assert_eq!(e.experiment().phase, Phase::Negotiating);
    assert!(e.control(t(0), Action::Start, None).is_err());
    assert_eq!(e.control(t(0), Action::Accept, None).unwrap(), Phase::Ready);
}

#[test]
fn enforcement_refuses_reservations_beyond_budget() {
    let c = ExperimentConstraints::new(SimDuration::from_hours(2), Money::units(10), "alice");
    let mut e =
        Engine::create("b", &six_job_plan(), c, EngineConfig::default(), Box::new(MemoryJournal::new()), SimTime::ZERO)
            .unwrap();
    e.control(t(0), Action::Start, None).unwrap();
    dispatch(&mut e, 0, "A", t(0));
    let ev =
        JobEvent::Dispatched { resource: "A".into(), handle: 1, rate: Money::units(6), reservation: Money::units(9) };
    assert!(matches!(e.apply_transition(t(0), JobId(1), ev), Err(EngineError::Ledger(_))));
    assert_eq!(e.experiment().job(JobId(1)).unwrap().state, JobState::Waiting);
}

#[test]
fn snapshots_conserve_counts_under_concurrency() {
    let j = MemoryJournal::new();
    let plan =
        parse_plan(r#"parameter a integer range from 1 to 250 step 1; task main execute "r ${a}" endtask"#).unwrap();
    let mut e = Engine::create("c", &plan, constraints(), EngineConfig::default(), Box::new(j), SimTime::ZERO).unwrap();
    e.control(t(0), Action::Start, None).unwrap();
    let total = e.experiment().jobs.len();
    let shared = Arc::new(Mutex::new(e));
    let writer = {
        let shared = shared.clone();
        std::thread::spawn(move || {
            for job in 0..250u32 {
                let events = [
                    JobEvent::Dispatched {
                        resource: "A".into(),
                        handle: job as u64,
                        rate: Money::ZERO,
                        reservation: Money::ZERO,
                    },
                    JobEvent::StagingIn,
                    JobEvent::Started,
                    JobEvent::Completed { cpu_hours: 0.0, rate: Money::ZERO, amount: Money::ZERO, observed_rate: None },
                ];
                for ev in events {
                    shared.lock().unwrap().apply_transition(t(1), JobId(job), ev).unwrap();
                }
            }
        })
    };
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let shared = shared.clone();
            std::thread::spawn(move || {
                let mut seen = 0;
                while seen < 300 {
                    let s = shared.lock().unwrap().snapshot();
                    assert_eq!(s.counts.values().sum::<usize>(), total);
                    seen += 1;
                }
            })
        })
        .collect();
    writer.join().unwrap();
    for r in readers {
        r.join().unwrap();
    }
    assert_eq!(shared.lock().unwrap().snapshot().count(JobState::Done), 250);
}

#[test]
fn file_journal_reopen_drops_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = FileJournal::path_for(dir.path(), "f");
    {
        let sink = FileJournal::create(dir.path(), "f").unwrap();
        let mut e =
            Engine::create("f", &six_job_plan(), constraints(), EngineConfig::default(), Box::new(sink), SimTime::ZERO)
                .unwrap();
        e.control(t(0), Action::Start, None).unwrap();
    }
    let good = std::fs::read(&path).unwrap();
    let mut torn = good.clone();
    torn.extend_from_slice(b"{\"seq\":3,");
    std::fs::write(&path, &torn).unwrap();
    let prefix = read_journal_file(&path).unwrap();
    assert_eq!(prefix.valid_len, good.len() as u64);
    let sink = FileJournal::reopen(&path, prefix.valid_len).unwrap();
    let (mut e, _) = Engine::recover(&good[..], Box::new(sink), None).unwrap();
    e.control(t(1), Action::Pause, None).unwrap();
    let prefix = read_journal_file(&path).unwrap();
    assert_eq!(prefix.records.len(), 3);
    assert_eq!(prefix.truncated, None);
}
