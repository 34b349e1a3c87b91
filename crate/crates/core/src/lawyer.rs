//! Domain lawyer personas and candidate response generation.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::backend::{self, ChatBackend, ChatMessage, ChatRequest};
use crate::error::{Error, Result, Warning};
use crate::model::{Session, Speaker, Turn};
use crate::tolc::{compose_clarified_prompt, VerifiedSet};

pub const DOMAIN_PLACEHOLDER: &str = "{domain_name}";
pub const BASE_TEMPERATURE: f64 = 0.2;
pub const TEMPERATURE_STEP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PersonaTemplates {
    pub specialist: String,
    pub generalist: String,
    pub plain: String,
    #[serde(default)]
    pub style_directives: Vec<String>,
}

impl PersonaTemplates {
    pub fn from_toml(raw: &str) -> Result<Self> {
        let t: PersonaTemplates =
            toml::from_str(raw).map_err(|e| Error::Config(format!("persona templates: {e}")))?;
        let found = t.specialist.matches(DOMAIN_PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::Config(format!(
                "specialist template must contain {DOMAIN_PLACEHOLDER} exactly once, found {found}"
            )));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&raw)
    }
}

impl Default for PersonaTemplates {
    fn default() -> Self {
        Self::from_toml(include_str!("../fixtures/personas.toml")).expect("bundled templates are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LawyerPersona {
    pub domain: crate::model::DomainLabel,
    pub system_prompt: String,
    pub style_directives: Vec<String>,
}

impl LawyerPersona {
    /// System message: the prompt followed by the directives as a list.
    pub fn system_message(&self) -> String {
        let mut s = self.system_prompt.clone();
        for d in &self.style_directives {
            s.push_str("\n- ");
            s.push_str(d);
        }
        s
    }
}

/// Persona for `domain`; the catch-all domain gets the generalist template.
pub fn role_enhance(domain: &crate::model::DomainLabel, templates: &PersonaTemplates) -> LawyerPersona {
    let system_prompt = if domain.is_others() {
        templates.generalist.clone()
    } else {
        templates.specialist.replace(DOMAIN_PLACEHOLDER, &domain.name)
    };
    LawyerPersona {
        domain: domain.clone(),
        system_prompt,
        style_directives: templates.style_directives.clone(),
    }
}

/// Persona used when role enhancement is switched off.
pub fn plain_persona(domain: &crate::model::DomainLabel, templates: &PersonaTemplates) -> LawyerPersona {
    LawyerPersona {
        domain: domain.clone(),
        system_prompt: templates.plain.clone(),
        style_directives: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RespondParams {
    pub max_tokens: u32,
    /// Character budget for replayed history; oldest exchanges go first.
    pub max_history_chars: usize,
}

impl Default for RespondParams {
    fn default() -> Self {
        RespondParams {
            max_tokens: 1024,
            max_history_chars: 24_000,
        }
    }
}

pub fn candidate_temperature(j: usize) -> f64 {
    BASE_TEMPERATURE + TEMPERATURE_STEP * j as f64
}

fn history_sentinel(omitted: usize) -> String {
    format!("\n\n(The first {omitted} turns of this conversation are omitted for length.)")
}

/// Messages for one lawyer call: persona and session context, history, then the current input.
pub fn build_messages(
    persona: &LawyerPersona,
    context: &str,
    history: &[Turn],
    user_input: &str,
    params: &RespondParams,
) -> Vec<ChatMessage> {
    let mut start = 0;
    let total: usize = history.iter().map(|t| t.text.chars().count()).sum();
    let mut kept = total;
    // Drop whole user/lawyer exchanges so the replay still starts with the client.
    while kept > params.max_history_chars && start < history.len() {
        let end = (start + 2).min(history.len());
        kept -= history[start..end].iter().map(|t| t.text.chars().count()).sum::<usize>();
        start = end;
    }
    let mut system = persona.system_message();
    if !context.trim().is_empty() {
        system.push_str("\n\n");
        system.push_str(context.trim());
    }
    if start > 0 {
        system.push_str(&history_sentinel(start));
    }
    let mut messages = vec![ChatMessage::system(system)];
    for turn in &history[start..] {
        messages.push(match turn.speaker {
            Speaker::User => ChatMessage::user(turn.text.clone()),
            Speaker::Lawyer => ChatMessage::assistant(turn.text.clone()),
        });
    }
    messages.push(ChatMessage::user(user_input.to_string()));
    messages
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub texts: Vec<String>,
    pub warnings: Vec<Warning>,
}

/// Generates `n_candidates` replies to the session's pending user message at
/// temperatures 0.2, 0.5, 0.8, … Failed candidates are dropped with a
/// warning as long as one succeeds.
pub fn respond(
    persona: &LawyerPersona,
    session: &Session,
    user_message: &str,
    verified: Option<&VerifiedSet>,
    chat: &dyn ChatBackend,
    n_candidates: usize,
    seed: u64,
    params: &RespondParams,
) -> Result<Candidates> {
    if n_candidates == 0 {
        return Err(Error::Usage("n_candidates must be at least 1".into()));
    }
    let input = match verified {
        Some(v) => compose_clarified_prompt(v),
        None => user_message.to_string(),
    };
    let messages = build_messages(persona, session.initial_state(), session.history(), &input, params);
    let outcomes: Vec<Result<String>> = (0..n_candidates)
        .into_par_iter()
        .map(|j| {
            let request = ChatRequest::new(messages.clone(), candidate_temperature(j), params.max_tokens, seed);
            backend::chat(chat, &request)
        })
        .collect();

    let mut texts = Vec::new();
    let mut warnings = Vec::new();
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(t) => texts.push(t),
            Err(e) => {
                tracing::warn!(index, error = %e, "lawyer candidate failed");
                warnings.push(Warning::CandidateFailed {
                    index,
                    error: e.to_string(),
                });
            }
        }
    }
    if texts.is_empty() {
        let detail = warnings
            .iter()
            .map(|w| match w {
                Warning::CandidateFailed { error, .. } => error.as_str(),
                _ => "",
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::BackendUnavailable(format!("every lawyer candidate failed: {detail}")));
    }
    Ok(Candidates { texts, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockChat;
    use crate::model::{AblationConfig, DomainLabel, DomainTaxonomy, SessionEvent};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Recorder {
        inner: MockChat,
        requests: Mutex<Vec<ChatRequest>>,
        fail_every: Option<usize>,
        calls: AtomicUsize,
    }

    impl Recorder {
        fn new(fail_every: Option<usize>) -> Self {
            Recorder {
                inner: MockChat::default(),
                requests: Mutex::new(Vec::new()),
                fail_every,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatBackend for Recorder {
        fn chat(&self, request: &ChatRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.requests.lock().unwrap().push(request.clone());
            if let Some(k) = self.fail_every {
                if candidate_bucket(request.temperature) % k == 0 {
                    return Err(Error::BackendUnavailable("down".into()));
                }
            }
            self.inner.chat(request)
        }
    }

    fn candidate_bucket(t: f64) -> usize {
        ((t - BASE_TEMPERATURE) / TEMPERATURE_STEP).round() as usize
    }

    fn session_with(turns: &[&str]) -> Session {
        let t0 = chrono::DateTime::from_timestamp(0, 0).unwrap();
        let cfg = AblationConfig { receptionist_enabled: false, ..Default::default() };
        let mut s = Session::new(cfg, "", 1, t0).unwrap();
        for (i, text) in turns.iter().enumerate() {
            let ev = if i % 2 == 0 {
                SessionEvent::UserMessage { text: text.to_string() }
            } else {
                SessionEvent::LawyerResponded(crate::model::LawyerReply {
                    candidates: vec![text.to_string()],
                    selected: 0,
                    score: None,
                })
            };
            s = s.apply_event(&ev).unwrap();
        }
        s
    }

    fn persona() -> LawyerPersona {
        role_enhance(&DomainTaxonomy::default().labels()[0], &PersonaTemplates::default())
    }

    #[test]
    fn others_gets_the_generalist_persona() {
        let t = PersonaTemplates::default();
        let p = role_enhance(&DomainLabel::others(), &t);
        assert_eq!(p.system_prompt, t.generalist);
        assert_eq!(p, role_enhance(&DomainLabel::others(), &t));
    }

    #[test]
    fn specialist_prompts_name_their_domain_once() {
        let t = PersonaTemplates::default();
        let tax = DomainTaxonomy::default();
        let prompts: Vec<String> = tax.labels().iter().map(|d| role_enhance(d, &t).system_message()).collect();
        for (d, p) in tax.labels().iter().zip(&prompts) {
            if !d.is_others() {
                assert_eq!(p.matches(d.name.as_str()).count(), 1, "{}", d.name);
            }
        }
        let mut unique = prompts.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 16);
        let a = role_enhance(&tax.labels()[0], &t).system_prompt;
        let b = role_enhance(&tax.labels()[1], &t).system_prompt;
        assert_eq!(a.replace(&tax.labels()[0].name, "X"), b.replace(&tax.labels()[1].name, "X"));
    }

    #[test]
    fn template_needs_one_placeholder() {
        let bad = "specialist = \"no placeholder\"\ngeneralist = \"g\"\nplain = \"p\"\n";
        assert!(matches!(PersonaTemplates::from_toml(bad), Err(Error::Config(_))));
    }

    #[test]
    fn single_candidate_makes_one_call() {
        let chat = Recorder::new(None);
        let s = session_with(&["my landlord kept the deposit"]);
        let c = respond(&persona(), &s, "my landlord kept the deposit", None, &chat, 1, 3, &RespondParams::default()).unwrap();
        assert_eq!(c.texts.len(), 1);
        assert_eq!(chat.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn three_candidates_are_distinct() {
        let s = session_with(&["q"]);
        let c = respond(&persona(), &s, "q", None, &MockChat::default(), 3, 3, &RespondParams::default()).unwrap();
        assert_eq!(c.texts.len(), 3);
        assert!(c.texts[0] != c.texts[1] && c.texts[1] != c.texts[2] && c.texts[0] != c.texts[2]);
    }

    #[test]
    fn affirmed_fact_reaches_the_prompt() {
        let chat = Recorder::new(None);
        let s = session_with(&["q"]);
        let v = VerifiedSet {
            root_query: "q".into(),
            affirmed: vec!["We married in 2019".into()],
            negated: vec![],
        };
        respond(&persona(), &s, "q", Some(&v), &chat, 1, 0, &RespondParams::default()).unwrap();
        let reqs = chat.requests.lock().unwrap();
        assert!(reqs[0].messages.last().unwrap().content.contains("We married in 2019"));
    }

    #[test]
    fn history_is_replayed_in_order() {
        let chat = Recorder::new(None);
        let s = session_with(&["u1", "l1", "u2", "l2", "u3"]);
        respond(&persona(), &s, "u3", None, &chat, 1, 0, &RespondParams::default()).unwrap();
        let reqs = chat.requests.lock().unwrap();
        let contents: Vec<&str> = reqs[0].messages[1..].iter().map(|m| m.content.as_str()).collect();
        assert_eq!(contents, vec!["u1", "l1", "u2", "l2", "u3"]);
    }

    #[test]
    fn long_history_drops_oldest_exchanges_with_sentinel() {
        let turns: Vec<Turn> = (1..=6)
            .map(|i| Turn {
                index: i,
                speaker: if i % 2 == 1 { Speaker::User } else { Speaker::Lawyer },
                text: "x".repeat(10),
                clarification_used: false,
            })
            .collect();
        let params = RespondParams { max_history_chars: 25, ..Default::default() };
        let m = build_messages(&persona(), "", &turns, "now", &params);
        assert_eq!(m.len(), 1 + 2 + 1);
        assert!(m[0].content.contains("first 4 turns"));
        assert_eq!(m[1].role, crate::backend::Role::User);
    }

    #[test]
    fn partial_failures_are_tolerated_and_total_failure_is_an_error() {
        let s = session_with(&["q"]);
        let chat = Recorder::new(Some(2));
        let c = respond(&persona(), &s, "q", None, &chat, 3, 0, &RespondParams::default()).unwrap();
        assert_eq!(c.texts.len(), 1);
        assert_eq!(c.warnings.len(), 2);
        let chat = Recorder::new(Some(1));
        assert!(matches!(
            respond(&persona(), &s, "q", None, &chat, 2, 0, &RespondParams::default()),
            Err(Error::BackendUnavailable(_))
        ));
    }
}
