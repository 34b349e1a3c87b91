//! The consultation pipeline as a service: reception, lawyer turns with
//! clarification pauses, and closing through the secretary and the boss.
//!
//! Every operation runs under the session's writer lock and records each
//! step as an event before moving on. An operation interrupted by a crash
//! can be finished later: [`Orchestrator::resume`] completes a pending
//! lawyer turn and [`Orchestrator::close_session`] picks up from whatever
//! closing step was last recorded.

pub mod clock;
pub mod store;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::AgentBackends;
use crate::boss::{self, RewardModel, RmTrainConfig};
use crate::case_bank::{self, CaseBank, CaseLibrary, VectorIndex};
use crate::error::{Error, Result};
use crate::lawyer::{self, PersonaTemplates, RespondParams};
use crate::model::{
    AblationConfig, DomainLabel, DomainTaxonomy, LawyerReply, Phase, Session, SessionEvent, SessionGenesis,
};
use crate::receptionist::{self, Receptionist, TrainConfig, DEFAULT_TAU};
use crate::secretary::{self, ConsultationReport, ReportParams};
use crate::tolc::{self, Marks, TreeParams, TreeView, VerifiedSet};

pub use clock::{Clock, FixedClock, SystemClock};
pub use store::{FailPoint, Listener, LogRecord, SessionStore, SessionUpdate, SessionWriter};

pub const DATA_DIR_ENV: &str = "LAWLUO_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "lawluo-data";

/// `LAWLUO_DATA_DIR`, or `./lawluo-data`.
pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Where trained artifacts live inside a data directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub receptionist: PathBuf,
    pub reward_model: PathBuf,
    pub cases: PathBuf,
    pub case_index: PathBuf,
}

impl ArtifactPaths {
    pub fn new(data_dir: &Path) -> Self {
        ArtifactPaths {
            receptionist: data_dir.join("models").join("receptionist.json"),
            reward_model: data_dir.join("models").join("reward_model.json"),
            cases: data_dir.join("cases").join("cases.jsonl"),
            case_index: data_dir.join("cases").join("index.json"),
        }
    }
}

/// Trained models and static assets shared by all sessions.
pub struct Agents {
    pub receptionist: Receptionist,
    pub cases: CaseLibrary,
    pub personas: PersonaTemplates,
    pub demos: Vec<ConsultationReport>,
    pub reward_model: RewardModel,
}

impl Agents {
    /// Trains everything from the bundled fixtures.
    pub fn bundled(backends: &AgentBackends) -> Result<Self> {
        Ok(Agents {
            receptionist: train_bundled_receptionist(backends)?,
            cases: CaseLibrary::build(case_bank::sample_bank(), backends.case_embedder.clone())?,
            personas: PersonaTemplates::default(),
            demos: secretary::default_demos(),
            reward_model: boss::train_rm(&boss::sample_labels(), backends.boss.as_ref(), &RmTrainConfig::default())?,
        })
    }

    /// Uses artifacts saved under `data_dir` where present, bundled fixtures otherwise.
    pub fn load(data_dir: &Path, backends: &AgentBackends) -> Result<Self> {
        let paths = ArtifactPaths::new(data_dir);
        let receptionist = if paths.receptionist.is_file() {
            crate::read_json(&paths.receptionist)?
        } else {
            train_bundled_receptionist(backends)?
        };
        let reward_model = if paths.reward_model.is_file() {
            RewardModel::load(&paths.reward_model)?
        } else {
            boss::train_rm(&boss::sample_labels(), backends.boss.as_ref(), &RmTrainConfig::default())?
        };
        let cases = if paths.cases.is_file() {
            let bank = CaseBank::ingest(&paths.cases)?;
            let saved = paths
                .case_index
                .is_file()
                .then(|| VectorIndex::load(&paths.case_index))
                .transpose()?;
            match saved {
                Some(index) if index.backend_tag == backends.case_embedder.tag() => {
                    CaseLibrary::with_index(bank, index, backends.case_embedder.clone())?
                }
                _ => CaseLibrary::build(bank, backends.case_embedder.clone())?,
            }
        } else {
            CaseLibrary::build(case_bank::sample_bank(), backends.case_embedder.clone())?
        };
        Ok(Agents {
            receptionist,
            cases,
            personas: PersonaTemplates::default(),
            demos: secretary::default_demos(),
            reward_model,
        })
    }
}

fn train_bundled_receptionist(backends: &AgentBackends) -> Result<Receptionist> {
    Receptionist::train(
        &receptionist::sample_questions(),
        &DomainTaxonomy::default(),
        backends.receptionist.as_ref(),
        &TrainConfig::default(),
        DEFAULT_TAU,
    )
}

#[derive(Debug, Clone, Default)]
pub struct EngineParams {
    pub tree: TreeParams,
    pub respond: RespondParams,
    pub report: ReportParams,
}

/// Result of a user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MessageOutcome {
    Response {
        domain: Option<DomainLabel>,
        text: String,
    },
    AwaitingMarks {
        domain: Option<DomainLabel>,
        tree: TreeView,
    },
}

impl MessageOutcome {
    pub fn text(&self) -> Option<&str> {
        match self {
            MessageOutcome::Response { text, .. } => Some(text),
            MessageOutcome::AwaitingMarks { .. } => None,
        }
    }

    pub fn tree(&self) -> Option<&TreeView> {
        match self {
            MessageOutcome::Response { .. } => None,
            MessageOutcome::AwaitingMarks { tree, .. } => Some(tree),
        }
    }
}

// Distinct streams for the backend calls of one turn.
const SALT_TREE: u64 = 1;
const SALT_LAWYER: u64 = 2;
const SALT_REPORT: u64 = 3;
const SALT_REWRITE: u64 = 4;

fn call_seed(seed: u64, turn: usize, salt: u64) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(turn as u64).to_le_bytes());
    bytes[16..].copy_from_slice(&salt.to_le_bytes());
    crate::backend::mock::fnv1a(&bytes)
}

pub struct Orchestrator {
    store: SessionStore,
    agents: Arc<Agents>,
    backends: AgentBackends,
    params: EngineParams,
    clock: Arc<dyn Clock>,
}

impl Orchestrator {
    pub fn new(store: SessionStore, agents: Arc<Agents>, backends: AgentBackends, clock: Arc<dyn Clock>) -> Self {
        Orchestrator {
            store,
            agents,
            backends,
            params: EngineParams::default(),
            clock,
        }
    }

    pub fn with_params(mut self, params: EngineParams) -> Self {
        self.params = params;
        self
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn agents(&self) -> &Arc<Agents> {
        &self.agents
    }

    pub fn create_session(&self, config: AblationConfig, initial_state: &str, seed: u64) -> Result<Session> {
        self.create_session_with_id(&uuid::Uuid::new_v4().to_string(), config, initial_state, seed)
    }

    pub fn create_session_with_id(
        &self,
        id: &str,
        config: AblationConfig,
        initial_state: &str,
        seed: u64,
    ) -> Result<Session> {
        let genesis = SessionGenesis {
            config,
            initial_state: initial_state.to_string(),
            seed,
            started_at: self.clock.now(),
        };
        self.store.create(id, genesis, self.clock.as_ref())
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        self.store.get(id)
    }

    pub fn events(&self, id: &str) -> Result<Vec<LogRecord>> {
        self.store.records(id)
    }

    /// The clarification tree awaiting marks.
    pub fn tree(&self, id: &str) -> Result<TreeView> {
        let s = self.store.get(id)?;
        s.pending_tree().map(|t| t.view()).ok_or_else(|| Error::Phase {
            phase: s.phase(),
            event: "tree".into(),
        })
    }

    /// Routes a user message: reception on the first one, then either a
    /// clarification tree or a lawyer reply. Repeating the text of a message
    /// that is still unanswered finishes that turn instead of failing.
    pub fn handle_user_message(&self, id: &str, text: &str) -> Result<MessageOutcome> {
        if text.trim().is_empty() {
            return Err(Error::Usage("user message is empty".into()));
        }
        self.store.with_writer(id, |w| {
            let s = w.session();
            if !matches!(s.phase(), Phase::Reception | Phase::Consultation) {
                return Err(Error::Phase {
                    phase: s.phase(),
                    event: "UserMessage".into(),
                });
            }
            if let Some(pending) = s.pending_user_turn() {
                if pending.text == text {
                    return self.advance(w, s);
                }
                return Err(Error::Usage("previous user message has not been answered".into()));
            }
            if s.phase() == Phase::Reception {
                let domain = self
                    .agents
                    .receptionist
                    .classify(text, self.backends.receptionist.as_ref())?;
                tracing::info!(session = id, domain = %domain.name, "domain assigned");
                w.append(SessionEvent::DomainAssigned { domain }, self.clock.as_ref())?;
            }
            let s = w.append(
                SessionEvent::UserMessage {
                    text: text.to_string(),
                },
                self.clock.as_ref(),
            )?;
            self.advance(w, s)
        })
    }

    /// Applies the client's marks and answers the clarified question.
    pub fn submit_marks(&self, id: &str, marks: &Marks) -> Result<String> {
        self.store.with_writer(id, |w| {
            let s = w.session();
            if s.phase() != Phase::AwaitingMarks {
                return Err(Error::Phase {
                    phase: s.phase(),
                    event: "MarksSubmitted".into(),
                });
            }
            let s = w.append(
                SessionEvent::MarksSubmitted { marks: marks.clone() },
                self.clock.as_ref(),
            )?;
            let verified = s.pending_clarification().map(|c| c.verified.clone());
            self.lawyer_turn(w, &s, verified.as_ref())
        })
    }

    /// Finishes a turn left half-done by a crash. `None` when nothing is pending.
    pub fn resume(&self, id: &str) -> Result<Option<MessageOutcome>> {
        self.store.with_writer(id, |w| {
            let s = w.session();
            if s.phase() != Phase::Consultation || s.pending_user_turn().is_none() {
                return Ok(None);
            }
            self.advance(w, s).map(Some)
        })
    }

    /// Drives the session to `Closed` and returns the delivered report.
    /// Calling it again on a closed session returns the same report.
    pub fn close_session(&self, id: &str) -> Result<ConsultationReport> {
        self.store.with_writer(id, |w| loop {
            let s = w.session();
            match s.phase() {
                Phase::Reception => {
                    return Err(Error::Usage("cannot close an empty consultation".into()));
                }
                Phase::AwaitingMarks => {
                    return Err(Error::Phase {
                        phase: s.phase(),
                        event: "CloseRequested".into(),
                    });
                }
                Phase::Consultation => {
                    if s.pending_user_turn().is_some() {
                        return Err(Error::Usage("the last user message has not been answered".into()));
                    }
                    w.append(SessionEvent::CloseRequested, self.clock.as_ref())?;
                }
                Phase::ReportGeneration => {
                    let number = secretary::format_report_number(self.store.next_report_number()?);
                    let report = secretary::generate_report(
                        &s,
                        &self.agents.demos,
                        self.backends.secretary.as_ref(),
                        &number,
                        &self.params.report,
                        call_seed(s.seed(), s.transcript().len(), SALT_REPORT),
                    )?;
                    w.append(SessionEvent::ReportReady { report }, self.clock.as_ref())?;
                }
                Phase::BossReview => {
                    let review = self.review(&s)?;
                    w.append(SessionEvent::Approved { review }, self.clock.as_ref())?;
                }
                Phase::Closed => {
                    return s
                        .report()
                        .cloned()
                        .ok_or_else(|| Error::Usage("closed session has no report".into()));
                }
            }
        })
    }

    fn review(&self, s: &Session) -> Result<Option<boss::ReportReview>> {
        if !s.config().boss_enabled {
            return Ok(None);
        }
        let report = s
            .report()
            .ok_or_else(|| Error::Usage("no report to review".into()))?;
        let review = boss::review_report(&self.agents.reward_model, report, self.backends.boss.as_ref(), || {
            secretary::draft_report(
                s,
                &self.agents.demos,
                self.backends.secretary.as_ref(),
                &report.report_number,
                &self.params.report,
                call_seed(s.seed(), s.transcript().len(), SALT_REWRITE),
            )
        })?;
        if review.low_confidence {
            tracing::warn!(session = s.id(), score = review.score, "report delivered with low confidence");
        }
        Ok(Some(review))
    }

    /// Next step for a pending user turn: clarification or lawyer reply.
    fn advance(&self, w: &SessionWriter<'_>, s: Session) -> Result<MessageOutcome> {
        let pending = s
            .pending_user_turn()
            .cloned()
            .ok_or_else(|| Error::Usage("no user message is pending".into()))?;
        let domain = s.domain().cloned();
        if let Some(c) = s.pending_clarification() {
            let verified = c.verified.clone();
            let text = self.lawyer_turn(w, &s, Some(&verified))?;
            return Ok(MessageOutcome::Response { domain, text });
        }
        if s.config().clarification_fires(&pending.text) {
            let tree = tolc::build_tree(
                &pending.text,
                pending.index,
                self.backends.clarifier.as_ref(),
                &self.agents.cases,
                &self.params.tree,
                call_seed(s.seed(), pending.index, SALT_TREE),
            )?;
            let view = tree.view();
            w.append(SessionEvent::ClarificationRequested { tree }, self.clock.as_ref())?;
            return Ok(MessageOutcome::AwaitingMarks { domain, tree: view });
        }
        let text = self.lawyer_turn(w, &s, None)?;
        Ok(MessageOutcome::Response { domain, text })
    }

    fn lawyer_turn(&self, w: &SessionWriter<'_>, s: &Session, verified: Option<&VerifiedSet>) -> Result<String> {
        let pending = s
            .pending_user_turn()
            .ok_or_else(|| Error::Usage("no user message is pending".into()))?;
        let config = s.config();
        let domain = s.domain().cloned().unwrap_or_else(DomainLabel::others);
        let persona = if config.role_enhancement_enabled {
            lawyer::role_enhance(&domain, &self.agents.personas)
        } else {
            lawyer::plain_persona(&domain, &self.agents.personas)
        };
        let candidates = lawyer::respond(
            &persona,
            s,
            &pending.text,
            verified,
            self.backends.lawyer.as_ref(),
            config.n_candidates,
            call_seed(s.seed(), pending.index, SALT_LAWYER),
            &self.params.respond,
        )?;
        let model = config.boss_enabled.then_some(&self.agents.reward_model);
        let selection = boss::select_best(model, &candidates.texts, self.backends.boss.as_ref())?;
        let text = candidates.texts[selection.index].clone();
        w.append(
            SessionEvent::LawyerResponded(LawyerReply {
                candidates: candidates.texts,
                selected: selection.index,
                score: selection.score,
            }),
            self.clock.as_ref(),
        )?;
        Ok(text)
    }
}
