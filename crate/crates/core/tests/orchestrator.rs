mod common;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use common::{drive, engine, engine_with, script_marks, SCRIPT, SESSION_ID};
use lawluo_core::backend::mock::MockChat;
use lawluo_core::backend::{AgentBackends, ChatBackend, ChatRequest};
use lawluo_core::model::{AblationConfig, Phase, Session, Speaker, TolcTrigger};
use lawluo_core::orchestrator::{FailPoint, MessageOutcome};
use lawluo_core::secretary::validate_report;
use lawluo_core::tolc::{Mark, Marks, AFFIRMED_HEADER};
use lawluo_core::{Error, Warning};

fn never() -> AblationConfig {
    AblationConfig {
        tolc_trigger: TolcTrigger::Never,
        ..Default::default()
    }
}

fn always() -> AblationConfig {
    AblationConfig {
        tolc_trigger: TolcTrigger::Always,
        ..Default::default()
    }
}

struct RecordingChat {
    inner: MockChat,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ChatBackend for RecordingChat {
    fn chat(&self, request: &ChatRequest) -> lawluo_core::Result<String> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.chat(request)
    }
}

fn recording_backends() -> (AgentBackends, Arc<RecordingChat>) {
    let rec = Arc::new(RecordingChat {
        inner: MockChat::default(),
        requests: Mutex::new(Vec::new()),
    });
    let mut b = AgentBackends::mock();
    b.lawyer = rec.clone();
    (b, rec)
}

#[test]
fn first_message_assigns_a_domain_and_answers() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", never(), "", 1).unwrap();
    let out = orch.handle_user_message("s", SCRIPT[0]).unwrap();
    match out {
        MessageOutcome::Response { domain, text } => {
            assert!(domain.is_some());
            assert!(!text.is_empty());
        }
        other => panic!("expected a response, got {other:?}"),
    }
    let s = orch.session("s").unwrap();
    assert_eq!(s.phase(), Phase::Consultation);
    assert_eq!(s.transcript().len(), 2);
}

#[test]
fn never_trigger_never_pauses() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", never(), "", 1).unwrap();
    for text in SCRIPT.iter().chain(["ok?", "and then?"].iter()) {
        assert!(matches!(
            orch.handle_user_message("s", text).unwrap(),
            MessageOutcome::Response { .. }
        ));
    }
    let log = orch.events("s").unwrap();
    assert!(log.iter().all(|r| r.event_type != "ClarificationRequested"));
}

#[test]
fn scripted_dialogue_matches_the_golden_transcript() {
    let run = |_: usize| {
        let dir = tempfile::tempdir().unwrap();
        let orch = engine(dir.path());
        drive(&orch, SESSION_ID, &AblationConfig::default()).unwrap();
        serde_json::to_string_pretty(orch.session(SESSION_ID).unwrap().transcript()).unwrap() + "\n"
    };
    let first = run(0);
    assert_eq!(first, run(1));

    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transcript.json");
    if std::env::var_os("LAWLUO_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &first).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden transcript recorded");
    assert_eq!(first, expected);
}

#[test]
fn empty_marks_answer_from_the_root_query_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, rec) = recording_backends();
    let orch = engine_with(dir.path(), backends);
    orch.create_session_with_id("s", always(), "", 1).unwrap();
    assert!(orch.handle_user_message("s", SCRIPT[1]).unwrap().tree().is_some());
    orch.submit_marks("s", &Marks::new()).unwrap();
    let requests = rec.requests.lock().unwrap();
    let last = &requests.last().unwrap().messages.last().unwrap().content;
    assert!(last.contains(SCRIPT[1]));
    assert!(!last.contains(AFFIRMED_HEADER));
    let s = orch.session("s").unwrap();
    assert!(s.transcript()[1].clarification_used);
}

#[test]
fn all_yes_marks_put_every_question_in_the_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let (backends, rec) = recording_backends();
    let orch = engine_with(dir.path(), backends);
    orch.create_session_with_id("s", always(), "", 1).unwrap();
    let tree = orch.handle_user_message("s", SCRIPT[1]).unwrap().tree().unwrap().clone();
    let marks: Marks = tree.nodes.iter().skip(1).map(|n| (n.index, Mark::Yes)).collect();
    orch.submit_marks("s", &marks).unwrap();
    let requests = rec.requests.lock().unwrap();
    let prompt = &requests.last().unwrap().messages.last().unwrap().content;
    for node in &tree.nodes {
        assert!(prompt.contains(&node.text), "missing {}", node.text);
    }
}

#[test]
fn marks_on_a_stale_tree_are_a_phase_error() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", always(), "", 1).unwrap();
    let tree = orch.handle_user_message("s", SCRIPT[1]).unwrap().tree().unwrap().clone();
    orch.submit_marks("s", &script_marks(&tree)).unwrap();
    assert!(matches!(
        orch.submit_marks("s", &Marks::new()),
        Err(Error::Phase { phase: Phase::Consultation, .. })
    ));
}

#[test]
fn invalid_marks_leave_the_tree_pending() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", always(), "", 1).unwrap();
    orch.handle_user_message("s", SCRIPT[1]).unwrap();
    let bad: Marks = [(99, Mark::Yes)].into_iter().collect();
    assert!(matches!(orch.submit_marks("s", &bad), Err(Error::Usage(_))));
    let root: Marks = [(1, Mark::Yes)].into_iter().collect();
    assert!(matches!(orch.submit_marks("s", &root), Err(Error::Usage(_))));
    assert_eq!(orch.session("s").unwrap().phase(), Phase::AwaitingMarks);
}

#[test]
fn one_turn_session_closes_with_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", never(), "", 1).unwrap();
    orch.handle_user_message("s", SCRIPT[0]).unwrap();
    let report = orch.close_session("s").unwrap();
    assert!(validate_report(&report).is_ok(), "{:?}", validate_report(&report));
    assert_eq!(report.report_number, "LL-000001");
    assert_eq!(report.consultation_date, "2024-06-01");
    let s = orch.session("s").unwrap();
    assert_eq!(s.phase(), Phase::Closed);
    assert!(s.review().is_some());
    assert_eq!(orch.close_session("s").unwrap(), report);
}

#[test]
fn boss_disabled_delivers_without_review() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    let config = AblationConfig {
        boss_enabled: false,
        ..never()
    };
    orch.create_session_with_id("s", config, "", 1).unwrap();
    orch.handle_user_message("s", SCRIPT[0]).unwrap();
    orch.close_session("s").unwrap();
    let s = orch.session("s").unwrap();
    assert_eq!(s.phase(), Phase::Closed);
    assert!(s.review().is_none());
    let log = orch.events("s").unwrap();
    let approved = log.iter().find(|r| r.event_type == "Approved").unwrap();
    assert_eq!(approved.payload["review"], serde_json::Value::Null);
    let reply = log.iter().find(|r| r.event_type == "LawyerResponded").unwrap();
    assert_eq!(reply.payload["selected"], 0);
    assert_eq!(reply.payload["score"], serde_json::Value::Null);
}

#[test]
fn closing_rules() {
    let dir = tempfile::tempdir().unwrap();
    let orch = engine(dir.path());
    orch.create_session_with_id("s", always(), "", 1).unwrap();
    assert!(matches!(orch.close_session("s"), Err(Error::Usage(_))));
    orch.handle_user_message("s", SCRIPT[1]).unwrap();
    assert!(matches!(orch.close_session("s"), Err(Error::Phase { .. })));
    assert!(matches!(orch.close_session("nope"), Err(Error::NotFound(_))));
    assert!(matches!(orch.handle_user_message("nope", "hi"), Err(Error::NotFound(_))));
    assert!(matches!(orch.handle_user_message("s", "another"), Err(Error::Phase { .. })));
}

#[test]
fn crash_after_report_ready_then_close_completes() {
    let dir = tempfile::tempdir().unwrap();
    {
        let orch = engine(dir.path());
        orch.create_session_with_id("s", never(), "", 1).unwrap();
        orch.handle_user_message("s", SCRIPT[0]).unwrap();
        // CloseRequested and ReportReady succeed, Approved crashes.
        orch.store().set_fail_point(Some(FailPoint::BeforeAppend(3)));
        assert!(matches!(orch.close_session("s"), Err(Error::SimulatedCrash(_))));
        assert_eq!(orch.session("s").unwrap().phase(), Phase::BossReview);
    }
    let orch = engine(dir.path());
    let s = orch.session("s").unwrap();
    assert_eq!(s.phase(), Phase::BossReview);
    let drafted = s.report().unwrap().clone();
    let report = orch.close_session("s").unwrap();
    assert_eq!(report.report_number, drafted.report_number);
    assert_eq!(orch.close_session("s").unwrap(), report);
    let log = orch.events("s").unwrap();
    assert_eq!(log.iter().filter(|r| r.event_type == "ReportReady").count(), 1);
    assert_eq!(log.iter().filter(|r| r.event_type == "Approved").count(), 1);
}

#[test]
fn torn_tail_is_dropped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let acknowledged;
    {
        let orch = engine(dir.path());
        orch.create_session_with_id("s", never(), "", 1).unwrap();
        orch.handle_user_message("s", SCRIPT[0]).unwrap();
        acknowledged = orch.session("s").unwrap();
        orch.store().set_fail_point(Some(FailPoint::TornAppend(2)));
        assert!(orch.handle_user_message("s", SCRIPT[2]).is_err());
    }
    let orch = engine(dir.path());
    let s = orch.session("s").unwrap();
    let warnings = orch.store().take_warnings();
    assert!(matches!(warnings.as_slice(), [Warning::TornLogTail { line: 6 }]), "{warnings:?}");
    // The acknowledged user message survives, the torn reply does not.
    assert_eq!(s.transcript().len(), acknowledged.transcript().len() + 1);
    assert_eq!(s.pending_user_turn().unwrap().text, SCRIPT[2]);
    let out = orch.resume("s").unwrap().unwrap();
    assert!(out.text().is_some());
    assert_eq!(orch.events("s").unwrap().len(), 6);
}

#[test]
fn retrying_an_unanswered_message_finishes_the_turn() {
    let dir = tempfile::tempdir().unwrap();
    {
        let orch = engine(dir.path());
        orch.create_session_with_id("s", never(), "", 1).unwrap();
        orch.store().set_fail_point(Some(FailPoint::BeforeAppend(3)));
        assert!(orch.handle_user_message("s", SCRIPT[0]).is_err());
    }
    let orch = engine(dir.path());
    assert!(matches!(orch.handle_user_message("s", "something else"), Err(Error::Usage(_))));
    assert!(orch.handle_user_message("s", SCRIPT[0]).unwrap().text().is_some());
    assert_eq!(orch.session("s").unwrap().transcript().len(), 2);
}

#[test]
fn snapshot_and_full_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let live = {
        let orch = engine(dir.path());
        drive(&orch, SESSION_ID, &AblationConfig::default()).unwrap();
        orch.session(SESSION_ID).unwrap()
    };
    let session_dir = dir.path().join("sessions").join(SESSION_ID);
    assert!(session_dir.join("snapshot.json").is_file());
    let from_snapshot = engine(dir.path()).session(SESSION_ID).unwrap();
    std::fs::remove_file(session_dir.join("snapshot.json")).unwrap();
    let from_log = engine(dir.path()).session(SESSION_ID).unwrap();
    assert_eq!(from_snapshot, live);
    assert_eq!(from_log, live);
}

#[test]
fn concurrent_messages_on_one_session_stay_on_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let orch = Arc::new(engine(dir.path()));
    orch.create_session_with_id("s", never(), "", 3).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let orch = orch.clone();
            thread::spawn(move || orch.handle_user_message("s", &format!("question number {i} about my lease")))
        })
        .collect();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    let s = orch.session("s").unwrap();
    assert_eq!(s.transcript().len(), 16);
    for pair in s.transcript().chunks(2) {
        assert_eq!((pair[0].speaker, pair[1].speaker), (Speaker::User, Speaker::Lawyer));
    }
    let events: Vec<_> = orch.events("s").unwrap().iter().map(|r| r.event().unwrap()).collect();
    assert_eq!(Session::replay("s", &events).unwrap(), s);
}

#[test]
fn distinct_sessions_run_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let orch = Arc::new(engine(dir.path()));
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let orch = orch.clone();
            thread::spawn(move || {
                let id = format!("p{i}");
                drive(&orch, &id, &AblationConfig::default()).unwrap().report
            })
        })
        .collect();
    let mut numbers: Vec<String> = handles.into_iter().map(|h| h.join().unwrap().report_number).collect();
    numbers.sort();
    assert_eq!(numbers, ["LL-000001", "LL-000002", "LL-000003", "LL-000004"]);
    assert_eq!(orch.store().ids().unwrap(), ["p0", "p1", "p2", "p3"]);
}
