#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Utc};
use lawluo_core::backend::AgentBackends;
use lawluo_core::model::{AblationConfig, Phase};
use lawluo_core::orchestrator::{Agents, FixedClock, MessageOutcome, Orchestrator, SessionStore};
use lawluo_core::secretary::ConsultationReport;
use lawluo_core::tolc::{Mark, Marks, TreeView};
use lawluo_core::{Error, Result};

pub const SESSION_ID: &str = "scripted";
pub const SEED: u64 = 7;
pub const INITIAL_STATE: &str = "Client is 34, married eight years, one daughter aged six, lives in rented flat.";

/// Four user messages; the second is short enough to trigger clarification by default.
pub const SCRIPT: [&str; 4] = [
    "My husband moved out of our home last spring and stopped paying for our daughter, and now I want a divorce.",
    "Can I keep the apartment?",
    "He says the savings account is his alone because it is in his name, although we both paid into it for years.",
    "If we go to court, how long will the divorce take and what documents should I start collecting now?",
];

pub fn t0() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2024-06-01T09:00:00Z")
        .unwrap()
        .with_timezone(&Utc)
}

pub fn mock_agents() -> Arc<Agents> {
    static AGENTS: OnceLock<Arc<Agents>> = OnceLock::new();
    AGENTS
        .get_or_init(|| Arc::new(Agents::bundled(&AgentBackends::mock()).expect("bundled agents")))
        .clone()
}

pub fn engine(dir: &Path) -> Orchestrator {
    engine_with(dir, AgentBackends::mock())
}

pub fn engine_with(dir: &Path, backends: AgentBackends) -> Orchestrator {
    Orchestrator::new(
        SessionStore::open(dir).expect("store"),
        mock_agents(),
        backends,
        Arc::new(FixedClock::new(t0())),
    )
}

/// Scripted client marks: node 2 yes, node 3 no, first third-layer node yes.
/// A node is skipped when the same question already carries the other mark.
pub fn script_marks(tree: &TreeView) -> Marks {
    let wanted = [(2, Mark::Yes), (3, Mark::No), (2 + tree.k, Mark::Yes)];
    let mut marks = Marks::new();
    let mut by_text: Vec<(String, Mark)> = Vec::new();
    for (index, mark) in wanted {
        let Some(node) = tree.nodes.iter().find(|n| n.index == index && n.layer > 1) else {
            continue;
        };
        if by_text.iter().any(|(t, m)| *t == node.text && *m != mark) {
            continue;
        }
        by_text.push((node.text.clone(), mark));
        marks.insert(index, mark);
    }
    marks
}

pub struct Run {
    pub outcomes: Vec<MessageOutcome>,
    pub report: ConsultationReport,
}

/// Runs the script to a closed session. Safe to call again after a crash:
/// finished steps are skipped and half-finished ones completed.
pub fn drive(orch: &Orchestrator, id: &str, config: &AblationConfig) -> Result<Run> {
    match orch.session(id) {
        Ok(_) => {}
        Err(Error::NotFound(_)) => {
            orch.create_session_with_id(id, config.clone(), INITIAL_STATE, SEED)?;
        }
        Err(e) => return Err(e),
    }
    let mut outcomes = Vec::new();
    for (i, text) in SCRIPT.iter().enumerate() {
        let s = orch.session(id)?;
        let users = s
            .transcript()
            .iter()
            .filter(|t| t.speaker == lawluo_core::model::Speaker::User)
            .count();
        let answered = s.pending_user_turn().is_none() && s.phase() != Phase::AwaitingMarks;
        if users > i + 1 || (users == i + 1 && answered) {
            continue;
        }
        if s.phase() == Phase::AwaitingMarks {
            let tree = orch.tree(id)?;
            orch.submit_marks(id, &script_marks(&tree))?;
            continue;
        }
        let outcome = orch.handle_user_message(id, text)?;
        if let MessageOutcome::AwaitingMarks { tree, .. } = &outcome {
            orch.submit_marks(id, &script_marks(tree))?;
        }
        outcomes.push(outcome);
    }
    let report = orch.close_session(id)?;
    Ok(Run { outcomes, report })
}
