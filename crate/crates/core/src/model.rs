//! Domain types and the consultation session state machine.
//!
//! A [`Session`] is an immutable value. Every change is expressed as a
//! [`SessionEvent`] and applied with [`Session::apply_event`], which returns a
//! new session and leaves the input untouched. Folding the event log of a
//! session from its genesis record reproduces it exactly, which is what the
//! store relies on for crash recovery.
//!
//! Phase graph (self-loops in `Consultation` carry the dialogue turns):
//!
//! ```text
//! Reception --DomainAssigned--> Consultation --ClarificationRequested--> AwaitingMarks
//! AwaitingMarks --MarksSubmitted--> Consultation --CloseRequested--> ReportGeneration
//! ReportGeneration --ReportReady--> BossReview --Approved--> Closed
//! ```

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::boss::ReportReview;
use crate::error::{Error, Result};
use crate::secretary::ConsultationReport;
use crate::tolc::{ClarificationTree, Marks, VerifiedSet};

pub const DOMAIN_COUNT: usize = 16;
pub const OTHERS_ID: u8 = 16;
pub const OTHERS_NAME: &str = "Others";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub id: u8,
    pub name: String,
}

impl DomainLabel {
    pub fn others() -> Self {
        DomainLabel {
            id: OTHERS_ID,
            name: OTHERS_NAME.to_string(),
        }
    }

    pub fn is_others(&self) -> bool {
        self.id == OTHERS_ID
    }
}

/// Default practice areas. Deployments usually replace these with their own
/// (localized) list through [`DomainTaxonomy::from_names`].
const DEFAULT_DOMAIN_NAMES: [&str; 15] = [
    "Marriage and Family",
    "Traffic Accidents",
    "Labor Disputes",
    "Contract Disputes",
    "Criminal Defense",
    "Debt Collection",
    "Real Estate",
    "Corporate Law",
    "Inheritance",
    "Personal Injury",
    "Intellectual Property",
    "Administrative Litigation",
    "Medical Disputes",
    "Consumer Rights",
    "Insurance",
];

/// The sixteen consultation domains of one deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DomainLabel>", into = "Vec<DomainLabel>")]
pub struct DomainTaxonomy {
    labels: Vec<DomainLabel>,
}

impl Default for DomainTaxonomy {
    fn default() -> Self {
        Self::from_names(DEFAULT_DOMAIN_NAMES.iter().map(|s| s.to_string()).collect())
            .expect("default taxonomy is valid")
    }
}

impl DomainTaxonomy {
    /// Builds a taxonomy from the fifteen named domains; "Others" is appended as id 16.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() != DOMAIN_COUNT - 1 {
            return Err(Error::Config(format!(
                "expected {} domain names, got {}",
                DOMAIN_COUNT - 1,
                names.len()
            )));
        }
        let mut labels: Vec<DomainLabel> = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| DomainLabel {
                id: i as u8 + 1,
                name,
            })
            .collect();
        labels.push(DomainLabel::others());
        Self::from_labels(labels)
    }

    pub fn from_labels(labels: Vec<DomainLabel>) -> Result<Self> {
        if labels.len() != DOMAIN_COUNT {
            return Err(Error::Config(format!(
                "a taxonomy needs exactly {DOMAIN_COUNT} labels, got {}",
                labels.len()
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "domain ids must be contiguous from 1; position {} has id {}",
                    i + 1,
                    label.id
                )));
            }
            if label.name.trim().is_empty() {
                return Err(Error::Config(format!("domain {} has an empty name", label.id)));
            }
        }
        if labels[DOMAIN_COUNT - 1].name != OTHERS_NAME {
            return Err(Error::Config(format!(
                "domain {OTHERS_ID} must be \"{OTHERS_NAME}\""
            )));
        }
        let mut names: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != DOMAIN_COUNT {
            return Err(Error::Config("domain names must be distinct".into()));
        }
        Ok(DomainTaxonomy { labels })
    }

    pub fn labels(&self) -> &[DomainLabel] {
        &self.labels
    }

    pub fn get(&self, id: u8) -> Option<&DomainLabel> {
        self.labels.get((id as usize).checked_sub(1)?)
    }

    pub fn others(&self) -> &DomainLabel {
        &self.labels[DOMAIN_COUNT - 1]
    }
}

impl TryFrom<Vec<DomainLabel>> for DomainTaxonomy {
    type Error = Error;

    fn try_from(labels: Vec<DomainLabel>) -> Result<Self> {
        Self::from_labels(labels)
    }
}

impl From<DomainTaxonomy> for Vec<DomainLabel> {
    fn from(t: DomainTaxonomy) -> Self {
        t.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Lawyer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub clarification_used: bool,
}

/// When a user message in consultation is expanded into a clarification tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TolcTrigger {
    Always,
    Never,
    /// Fires when the message has at most `threshold` tokens.
    ShortQuery { threshold: usize },
}

impl Default for TolcTrigger {
    fn default() -> Self {
        TolcTrigger::ShortQuery { threshold: 12 }
    }
}

impl TolcTrigger {
    pub fn fires(&self, text: &str) -> bool {
        match *self {
            TolcTrigger::Always => true,
            TolcTrigger::Never => false,
            TolcTrigger::ShortQuery { threshold } => token_count(text) <= threshold,
        }
    }
}

/// Whitespace-delimited words, except that every CJK ideograph counts as its own token.
pub fn token_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if is_cjk(c) {
            count += 1;
            in_word = false;
        } else if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF)
}

fn default_true() -> bool {
    true
}

fn default_candidates() -> usize {
    3
}

/// Per-session switches used for ablation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default = "default_true")]
    pub receptionist_enabled: bool,
    #[serde(default = "default_true")]
    pub role_enhancement_enabled: bool,
    #[serde(default = "default_true")]
    pub tolc_enabled: bool,
    #[serde(default = "default_true")]
    pub boss_enabled: bool,
    #[serde(default)]
    pub tolc_trigger: TolcTrigger,
    /// With a single candidate the boss has nothing to choose between.
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            receptionist_enabled: true,
            role_enhancement_enabled: true,
            tolc_enabled: true,
            boss_enabled: true,
            tolc_trigger: TolcTrigger::default(),
            n_candidates: default_candidates(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates < 1 {
            return Err(Error::Config("n_candidates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn clarification_fires(&self, text: &str) -> bool {
        self.tolc_enabled && self.tolc_trigger.fires(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Reception,
    Consultation,
    AwaitingMarks,
    ReportGeneration,
    BossReview,
    Closed,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Reception,
        Phase::Consultation,
        Phase::AwaitingMarks,
        Phase::ReportGeneration,
        Phase::BossReview,
        Phase::Closed,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionGenesis {
    pub config: AblationConfig,
    pub initial_state: String,
    pub seed: u64,
    pub started_at: DateTime<Utc>,
}

/// Candidate bookkeeping for one lawyer reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawyerReply {
    pub candidates: Vec<String>,
    pub selected: usize,
    /// Boss score of the selected candidate, absent when the boss is disabled.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload")]
pub enum SessionEvent {
    SessionCreated(SessionGenesis),
    DomainAssigned { domain: DomainLabel },
    UserMessage { text: String },
    ClarificationRequested { tree: ClarificationTree },
    MarksSubmitted { marks: Marks },
    LawyerResponded(LawyerReply),
    CloseRequested,
    ReportReady { report: ConsultationReport },
    Approved { review: Option<ReportReview> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    SessionCreated,
    DomainAssigned,
    UserMessage,
    ClarificationRequested,
    MarksSubmitted,
    LawyerResponded,
    CloseRequested,
    ReportReady,
    Approved,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::SessionCreated,
        EventKind::DomainAssigned,
        EventKind::UserMessage,
        EventKind::ClarificationRequested,
        EventKind::MarksSubmitted,
        EventKind::LawyerResponded,
        EventKind::CloseRequested,
        EventKind::ReportReady,
        EventKind::Approved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::SessionCreated => "SessionCreated",
            EventKind::DomainAssigned => "DomainAssigned",
            EventKind::UserMessage => "UserMessage",
            EventKind::ClarificationRequested => "ClarificationRequested",
            EventKind::MarksSubmitted => "MarksSubmitted",
            EventKind::LawyerResponded => "LawyerResponded",
            EventKind::CloseRequested => "CloseRequested",
            EventKind::ReportReady => "ReportReady",
            EventKind::Approved => "Approved",
        }
    }
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SessionEvent::SessionCreated(_) => EventKind::SessionCreated,
            SessionEvent::DomainAssigned { .. } => EventKind::DomainAssigned,
            SessionEvent::UserMessage { .. } => EventKind::UserMessage,
            SessionEvent::ClarificationRequested { .. } => EventKind::ClarificationRequested,
            SessionEvent::MarksSubmitted { .. } => EventKind::MarksSubmitted,
            SessionEvent::LawyerResponded(_) => EventKind::LawyerResponded,
            SessionEvent::CloseRequested => EventKind::CloseRequested,
            SessionEvent::ReportReady { .. } => EventKind::ReportReady,
            SessionEvent::Approved { .. } => EventKind::Approved,
        }
    }
}

/// The phase-level transition table. `None` means the edge does not exist.
pub fn transition(phase: Phase, kind: EventKind) -> Option<Phase> {
    use EventKind as K;
    use Phase as P;
    match (phase, kind) {
        (P::Reception, K::DomainAssigned) => Some(P::Consultation),
        (P::Consultation, K::UserMessage) => Some(P::Consultation),
        (P::Consultation, K::LawyerResponded) => Some(P::Consultation),
        (P::Consultation, K::ClarificationRequested) => Some(P::AwaitingMarks),
        (P::AwaitingMarks, K::MarksSubmitted) => Some(P::Consultation),
        (P::Consultation, K::CloseRequested) => Some(P::ReportGeneration),
        (P::ReportGeneration, K::ReportReady) => Some(P::BossReview),
        (P::BossReview, K::Approved) => Some(P::Closed),
        _ => None,
    }
}

/// Verified clarification facts attached to the user turn they clarified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clarification {
    pub turn_index: usize,
    pub tree: ClarificationTree,
    pub verified: VerifiedSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    session_id: String,
    phase: Phase,
    domain: Option<DomainLabel>,
    initial_state: String,
    transcript: Vec<Turn>,
    pending_tree: Option<ClarificationTree>,
    clarifications: Vec<Clarification>,
    report: Option<ConsultationReport>,
    review: Option<ReportReview>,
    config: AblationConfig,
    seed: u64,
    started_at: DateTime<Utc>,
}

impl Session {
    /// Starts a consultation with a fresh random identifier.
    pub fn new(
        config: AblationConfig,
        initial_state: impl Into<String>,
        seed: u64,
        started_at: DateTime<Utc>,
    ) -> Result<Self> {
        let genesis = SessionGenesis {
            config,
            initial_state: initial_state.into(),
            seed,
            started_at,
        };
        Self::from_genesis(uuid::Uuid::new_v4().to_string(), genesis)
    }

    pub fn from_genesis(session_id: String, genesis: SessionGenesis) -> Result<Self> {
        genesis.config.validate()?;
        let receptionist = genesis.config.receptionist_enabled;
        Ok(Session {
            session_id,
            phase: if receptionist {
                Phase::Reception
            } else {
                Phase::Consultation
            },
            domain: (!receptionist).then(DomainLabel::others),
            initial_state: genesis.initial_state,
            transcript: Vec::new(),
            pending_tree: None,
            clarifications: Vec::new(),
            report: None,
            review: None,
            config: genesis.config,
            seed: genesis.seed,
            started_at: genesis.started_at,
        })
    }

    /// Rebuilds a session from its full event log. The first event must be the genesis.
    pub fn replay<'a>(
        session_id: &str,
        events: impl IntoIterator<Item = &'a SessionEvent>,
    ) -> Result<Self> {
        let mut events = events.into_iter();
        let genesis = match events.next() {
            Some(SessionEvent::SessionCreated(g)) => g.clone(),
            Some(other) => {
                return Err(Error::Usage(format!(
                    "event log must start with SessionCreated, found {}",
                    other.kind().name()
                )))
            }
            None => return Err(Error::Usage("empty event log".into())),
        };
        let mut session = Self::from_genesis(session_id.to_string(), genesis)?;
        for event in events {
            session = session.apply_event(event)?;
        }
        Ok(session)
    }

    pub fn genesis(&self) -> SessionGenesis {
        SessionGenesis {
            config: self.config.clone(),
            initial_state: self.initial_state.clone(),
            seed: self.seed,
            started_at: self.started_at,
        }
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }
    pub fn phase(&self) -> Phase {
        self.phase
    }
    pub fn domain(&self) -> Option<&DomainLabel> {
        self.domain.as_ref()
    }
    pub fn initial_state(&self) -> &str {
        &self.initial_state
    }
    pub fn transcript(&self) -> &[Turn] {
        &self.transcript
    }
    pub fn pending_tree(&self) -> Option<&ClarificationTree> {
        self.pending_tree.as_ref()
    }
    pub fn clarifications(&self) -> &[Clarification] {
        &self.clarifications
    }
    pub fn report(&self) -> Option<&ConsultationReport> {
        self.report.as_ref()
    }
    pub fn review(&self) -> Option<&ReportReview> {
        self.review.as_ref()
    }
    pub fn config(&self) -> &AblationConfig {
        &self.config
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn started_at(&self) -> DateTime<Utc> {
        self.started_at
    }
    pub fn start_date(&self) -> NaiveDate {
        self.started_at.date_naive()
    }

    /// The last turn when it is a user message still waiting for the lawyer.
    pub fn pending_user_turn(&self) -> Option<&Turn> {
        self.transcript
            .last()
            .filter(|t| t.speaker == Speaker::User)
    }

    /// Completed turns, excluding a trailing unanswered user message.
    pub fn history(&self) -> &[Turn] {
        match self.pending_user_turn() {
            Some(_) => &self.transcript[..self.transcript.len() - 1],
            None => &self.transcript,
        }
    }

    pub fn lawyer_turn_count(&self) -> usize {
        self.transcript
            .iter()
            .filter(|t| t.speaker == Speaker::Lawyer)
            .count()
    }

    /// Verified facts gathered for the pending user turn, if it went through clarification.
    pub fn pending_clarification(&self) -> Option<&Clarification> {
        let pending = self.pending_user_turn()?;
        self.clarifications
            .last()
            .filter(|c| c.turn_index == pending.index)
    }

    /// Applies one event and returns the successor session.
    pub fn apply_event(&self, event: &SessionEvent) -> Result<Session> {
        let kind = event.kind();
        let next_phase = transition(self.phase, kind).ok_or_else(|| Error::Phase {
            phase: self.phase,
            event: kind.name().to_string(),
        })?;
        let mut next = self.clone();
        next.phase = next_phase;

        match event {
            SessionEvent::SessionCreated(_) => unreachable!("genesis has no incoming edge"),
            SessionEvent::DomainAssigned { domain } => {
                next.domain = Some(domain.clone());
            }
            SessionEvent::UserMessage { text } => {
                if self.pending_user_turn().is_some() {
                    return Err(Error::Usage(
                        "previous user message has not been answered".into(),
                    ));
                }
                if text.trim().is_empty() {
                    return Err(Error::Usage("user message is empty".into()));
                }
                next.push_turn(Speaker::User, text.clone(), false);
            }
            SessionEvent::ClarificationRequested { tree } => {
                let pending = self.pending_user_turn().ok_or_else(|| {
                    Error::Usage("clarification requested without a pending user message".into())
                })?;
                if tree.root().text != pending.text || tree.origin_turn() != pending.index {
                    return Err(Error::Usage(
                        "clarification tree root does not match the pending user message".into(),
                    ));
                }
                next.pending_tree = Some(tree.clone());
            }
            SessionEvent::MarksSubmitted { marks } => {
                let tree = self
                    .pending_tree
                    .as_ref()
                    .ok_or_else(|| Error::Usage("no clarification tree is pending".into()))?;
                let verified = tree.apply_marks(marks)?;
                next.clarifications.push(Clarification {
                    turn_index: tree.origin_turn(),
                    tree: tree.with_marks(marks)?,
                    verified,
                });
                next.pending_tree = None;
            }
            SessionEvent::LawyerResponded(reply) => {
                if self.pending_user_turn().is_none() {
                    return Err(Error::Usage("no user message to respond to".into()));
                }
                let text = reply.candidates.get(reply.selected).ok_or_else(|| {
                    Error::Usage(format!(
                        "selected candidate {} out of {}",
                        reply.selected,
                        reply.candidates.len()
                    ))
                })?;
                let used = self.pending_clarification().is_some();
                next.push_turn(Speaker::Lawyer, text.clone(), used);
            }
            SessionEvent::CloseRequested => {
                if self.lawyer_turn_count() == 0 {
                    return Err(Error::Usage(
                        "cannot close a consultation without any lawyer response".into(),
                    ));
                }
            }
            SessionEvent::ReportReady { report } => {
                next.report = Some(report.clone());
            }
            SessionEvent::Approved { review } => {
                if let Some(revised) = review.as_ref().and_then(|r| r.revised_report.as_ref()) {
                    next.report = Some(revised.clone());
                }
                next.review = review.clone();
            }
        }
        Ok(next)
    }

    fn push_turn(&mut self, speaker: Speaker, text: String, clarification_used: bool) {
        let index = self.transcript.len() + 1;
        self.transcript.push(Turn {
            index,
            speaker,
            text,
            clarification_used,
        });
    }
}
