//! Terminal consultations.
//!
//! Interactive mode reads client messages from stdin and asks about each
//! clarifying question in turn. Script mode replays a file:
//!
//! ```text
//! # comment
//! state: facts known before the conversation
//! My husband moved out and I want a divorce.
//! Can I keep the apartment?
//! marks: 2=y 3=n 5=y
//! ```
//!
//! Every other non-blank line is a client message. A `marks:` line answers
//! the clarification raised by the message just before it; a clarification
//! with no `marks:` line is answered with no marks.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{NaiveDate, TimeZone, Utc};
use clap::Args;
use lawluo_core::boss::ReportReview;
use lawluo_core::model::{AblationConfig, Clarification, DomainLabel, Turn};
use lawluo_core::orchestrator::{Agents, Clock, FixedClock, MessageOutcome, Orchestrator, SessionStore, SystemClock};
use lawluo_core::secretary::ConsultationReport;
use lawluo_core::tolc::{Mark, Marks, TreeView};
use serde::Serialize;

use crate::{emit, AblationArgs, BackendArgs, CliResult, Failure};

#[derive(Debug, Args)]
pub struct ConsultArgs {
    /// Replay client messages and marks from this file instead of reading stdin.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Facts known before the conversation; a script's `state:` line overrides it.
    #[arg(long, default_value = "")]
    initial_state: String,
    /// Seed for every generation in the session.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consultation date, YYYY-MM-DD; pins the session clock for reproducible output.
    #[arg(long)]
    date: Option<NaiveDate>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Message(String),
    Marks(Marks),
}

#[derive(Debug, Default)]
struct Script {
    initial_state: Option<String>,
    steps: Vec<Step>,
}

fn parse_mark_list(list: &str, line: usize) -> Result<Marks, Failure> {
    let mut marks = Marks::new();
    for pair in list.split_whitespace() {
        let bad = || Failure::Usage(format!("script line {line}: expected node=y|n, got {pair:?}"));
        let (node, answer) = pair.split_once('=').ok_or_else(bad)?;
        let node: usize = node.parse().map_err(|_| bad())?;
        let mark = match answer {
            "y" | "yes" => Mark::Yes,
            "n" | "no" => Mark::No,
            _ => return Err(bad()),
        };
        if marks.insert(node, mark).is_some() {
            return Err(Failure::Usage(format!("script line {line}: node {node} marked twice")));
        }
    }
    Ok(marks)
}

fn parse_script(raw: &str) -> Result<Script, Failure> {
    let mut script = Script::default();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(state) = line.strip_prefix("state:") {
            if !script.steps.is_empty() {
                return Err(Failure::Usage(format!("script line {}: state must precede messages", i + 1)));
            }
            script.initial_state = Some(state.trim().to_string());
        } else if let Some(list) = line.strip_prefix("marks:") {
            if !matches!(script.steps.last(), Some(Step::Message(_))) {
                return Err(Failure::Usage(format!("script line {}: marks must follow a message", i + 1)));
            }
            script.steps.push(Step::Marks(parse_mark_list(list, i + 1)?));
        } else {
            script.steps.push(Step::Message(line.to_string()));
        }
    }
    Ok(script)
}

/// What `consult` prints to stdout once the session is closed.
#[derive(Debug, Serialize)]
struct ConsultOutput {
    domain: Option<DomainLabel>,
    config: AblationConfig,
    transcript: Vec<Turn>,
    clarifications: Vec<Clarification>,
    report: ConsultationReport,
    review: Option<ReportReview>,
}

trait Client {
    fn next_message(&mut self) -> Result<Option<String>, Failure>;
    fn answer(&mut self, tree: &TreeView) -> Result<Marks, Failure>;
}

struct Scripted {
    steps: std::vec::IntoIter<Step>,
    peeked: Option<Step>,
}

impl Client for Scripted {
    fn next_message(&mut self) -> Result<Option<String>, Failure> {
        match self.peeked.take().or_else(|| self.steps.next()) {
            None => Ok(None),
            Some(Step::Message(m)) => {
                eprintln!("client> {m}");
                Ok(Some(m))
            }
            Some(Step::Marks(_)) => Err(Failure::Usage(
                "script has marks for a message that raised no clarifying questions".into(),
            )),
        }
    }

    fn answer(&mut self, tree: &TreeView) -> Result<Marks, Failure> {
        match self.steps.next() {
            Some(Step::Marks(m)) => {
                for (index, mark) in &m {
                    if let Some(n) = tree.nodes.iter().find(|n| n.index == *index) {
                        eprintln!("  [{index}] {} -> {}", n.text, if *mark == Mark::Yes { "yes" } else { "no" });
                    }
                }
                Ok(m)
            }
            other => {
                self.peeked = other;
                eprintln!("  (no marks given)");
                Ok(Marks::new())
            }
        }
    }
}

struct Interactive<R> {
    input: R,
}

impl<R: BufRead> Interactive<R> {
    fn read_line(&mut self, prompt: &str) -> Result<Option<String>, Failure> {
        eprint!("{prompt}");
        std::io::stderr().flush()?;
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        Ok(Some(line.trim().to_string()))
    }
}

impl<R: BufRead> Client for Interactive<R> {
    fn next_message(&mut self) -> Result<Option<String>, Failure> {
        loop {
            match self.read_line("client> ")? {
                None => return Ok(None),
                Some(l) if l == "/close" => return Ok(None),
                Some(l) if l.is_empty() => continue,
                Some(l) => return Ok(Some(l)),
            }
        }
    }

    /// One y/n prompt per question; a repeated question reuses the first answer.
    fn answer(&mut self, tree: &TreeView) -> Result<Marks, Failure> {
        eprintln!("Before answering, does any of this apply? (y, n, or enter to skip)");
        let mut marks = Marks::new();
        let mut given: HashMap<String, Option<Mark>> = HashMap::new();
        for node in tree.nodes.iter().filter(|n| n.layer > 1) {
            let mark = match given.get(&node.text) {
                Some(m) => *m,
                None => {
                    let m = loop {
                        let reply = self.read_line(&format!("  [{}] {} ", node.index, node.text))?;
                        match reply.as_deref().map(str::to_ascii_lowercase).as_deref() {
                            Some("y" | "yes") => break Some(Mark::Yes),
                            Some("n" | "no") => break Some(Mark::No),
                            Some("") | None => break None,
                            Some(_) => eprintln!("  please answer y or n"),
                        }
                    };
                    given.insert(node.text.clone(), m);
                    m
                }
            };
            if let Some(m) = mark {
                marks.insert(node.index, m);
            }
        }
        Ok(marks)
    }
}

pub fn run(args: ConsultArgs) -> CliResult {
    let (client, initial_state): (Box<dyn Client>, String) = match &args.script {
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|source| lawluo_core::Error::Io {
                path: path.clone(),
                source,
            })?;
            let script = parse_script(&raw)?;
            let state = script.initial_state.unwrap_or_else(|| args.initial_state.clone());
            (
                Box::new(Scripted {
                    steps: script.steps.into_iter(),
                    peeked: None,
                }),
                state,
            )
        }
        None => (
            Box::new(Interactive {
                input: std::io::stdin().lock(),
            }),
            args.initial_state.clone(),
        ),
    };

    let clock: Arc<dyn Clock> = match args.date {
        Some(d) => Arc::new(FixedClock::new(Utc.from_utc_datetime(&d.and_hms_opt(9, 0, 0).expect("valid time")))),
        None => Arc::new(SystemClock),
    };
    let backends = args.backend.backends()?;
    let agents = Agents::load(&args.backend.data_dir, &backends)?;
    let store = SessionStore::open(&args.backend.data_dir)?;
    let orch = Orchestrator::new(store, Arc::new(agents), backends, clock);
    let config = args.ablation.config();
    let session = orch.create_session(config, &initial_state, args.seed)?;
    let id = session.id().to_string();
    eprintln!("session {id}");

    converse(&orch, &id, client)?;

    let report = orch.close_session(&id)?;
    eprintln!("\n{}", report.render());
    let s = orch.session(&id)?;
    emit(&ConsultOutput {
        domain: s.domain().cloned(),
        config: s.config().clone(),
        transcript: s.transcript().to_vec(),
        clarifications: s.clarifications().to_vec(),
        report,
        review: s.review().cloned(),
    })
}

fn converse(orch: &Orchestrator, id: &str, mut client: Box<dyn Client>) -> CliResult {
    let mut asked = false;
    while let Some(text) = client.next_message()? {
        asked = true;
        let reply = match orch.handle_user_message(id, &text)? {
            MessageOutcome::Response { text, .. } => text,
            MessageOutcome::AwaitingMarks { tree, .. } => {
                let marks = client.answer(&tree)?;
                orch.submit_marks(id, &marks)?
            }
        };
        eprintln!("lawyer> {reply}\n");
    }
    if !asked {
        return Err(Failure::Usage("the consultation ended before any message".into()));
    }
    Ok(())
}
