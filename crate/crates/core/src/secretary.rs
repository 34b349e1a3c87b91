//! Nine-section consultation reports.
//!
//! The secretary prompts the chat backend with four demonstration reports
//! and the session transcript, then parses the reply by section header.
//! Headers pair a fixed ASCII tag with a Chinese label, and parsing keys on
//! the tag alone so localized labels do not matter.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backend::{self, ChatBackend, ChatMessage, ChatRequest};
use crate::error::{Error, Result};
use crate::model::{Phase, Session, Speaker};

pub const REPORT_TASK: &str = "Task: COMPILE consultation report.";
pub const TRANSCRIPT_BEGIN: &str = "<<<TRANSCRIPT";
pub const TRANSCRIPT_END: &str = "TRANSCRIPT>>>";
pub const DEMO_COUNT: usize = 4;
/// One initial attempt plus three retries.
pub const REPORT_ATTEMPTS: usize = 4;
pub const CONFIRMED_FACTS_HEADER: &str = "Facts confirmed during clarification:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    ReportNumber,
    ConsultationDate,
    Client,
    Subject,
    Purpose,
    FactsAndBackground,
    LegalAnalysis,
    LegalAdvice,
    RiskWarnings,
}

impl Section {
    pub const ALL: [Section; 9] = [
        Section::ReportNumber,
        Section::ConsultationDate,
        Section::Client,
        Section::Subject,
        Section::Purpose,
        Section::FactsAndBackground,
        Section::LegalAnalysis,
        Section::LegalAdvice,
        Section::RiskWarnings,
    ];

    /// Sections the backend writes; number and date are filled in locally.
    pub const GENERATED: [Section; 7] = [
        Section::Client,
        Section::Subject,
        Section::Purpose,
        Section::FactsAndBackground,
        Section::LegalAnalysis,
        Section::LegalAdvice,
        Section::RiskWarnings,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Section::ReportNumber => "[REPORT_NUMBER]",
            Section::ConsultationDate => "[CONSULTATION_DATE]",
            Section::Client => "[CLIENT]",
            Section::Subject => "[SUBJECT]",
            Section::Purpose => "[PURPOSE]",
            Section::FactsAndBackground => "[FACTS_AND_BACKGROUND]",
            Section::LegalAnalysis => "[LEGAL_ANALYSIS]",
            Section::LegalAdvice => "[LEGAL_ADVICE]",
            Section::RiskWarnings => "[RISK_WARNINGS]",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Section::ReportNumber => "[REPORT_NUMBER] 报告编号",
            Section::ConsultationDate => "[CONSULTATION_DATE] 咨询日期",
            Section::Client => "[CLIENT] 委托人",
            Section::Subject => "[SUBJECT] 咨询事项",
            Section::Purpose => "[PURPOSE] 咨询目的",
            Section::FactsAndBackground => "[FACTS_AND_BACKGROUND] 事实与背景",
            Section::LegalAnalysis => "[LEGAL_ANALYSIS] 法律分析",
            Section::LegalAdvice => "[LEGAL_ADVICE] 法律建议",
            Section::RiskWarnings => "[RISK_WARNINGS] 风险提示",
        }
    }

    pub fn field_name(self) -> &'static str {
        match self {
            Section::ReportNumber => "report_number",
            Section::ConsultationDate => "consultation_date",
            Section::Client => "client",
            Section::Subject => "subject",
            Section::Purpose => "purpose",
            Section::FactsAndBackground => "facts_and_background",
            Section::LegalAnalysis => "legal_analysis",
            Section::LegalAdvice => "legal_advice",
            Section::RiskWarnings => "risk_warnings",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsultationReport {
    pub report_number: String,
    pub consultation_date: String,
    pub client: String,
    pub subject: String,
    pub purpose: String,
    pub facts_and_background: String,
    pub legal_analysis: String,
    pub legal_advice: String,
    pub risk_warnings: String,
}

impl ConsultationReport {
    pub fn get(&self, section: Section) -> &str {
        match section {
            Section::ReportNumber => &self.report_number,
            Section::ConsultationDate => &self.consultation_date,
            Section::Client => &self.client,
            Section::Subject => &self.subject,
            Section::Purpose => &self.purpose,
            Section::FactsAndBackground => &self.facts_and_background,
            Section::LegalAnalysis => &self.legal_analysis,
            Section::LegalAdvice => &self.legal_advice,
            Section::RiskWarnings => &self.risk_warnings,
        }
    }

    pub fn get_mut(&mut self, section: Section) -> &mut String {
        match section {
            Section::ReportNumber => &mut self.report_number,
            Section::ConsultationDate => &mut self.consultation_date,
            Section::Client => &mut self.client,
            Section::Subject => &mut self.subject,
            Section::Purpose => &mut self.purpose,
            Section::FactsAndBackground => &mut self.facts_and_background,
            Section::LegalAnalysis => &mut self.legal_analysis,
            Section::LegalAdvice => &mut self.legal_advice,
            Section::RiskWarnings => &mut self.risk_warnings,
        }
    }

    /// Plain-text rendering with all nine headers in order.
    pub fn render(&self) -> String {
        render_sections(self, &Section::ALL)
    }
}

fn render_sections(report: &ConsultationReport, sections: &[Section]) -> String {
    sections
        .iter()
        .map(|&s| format!("{}\n{}", s.header(), report.get(s)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn header_at(line: &str) -> Option<(Section, &str)> {
    let line = line.trim_start();
    Section::ALL.iter().find_map(|&s| {
        let rest = line
            .strip_prefix(s.header())
            .or_else(|| line.strip_prefix(s.tag()).map(|r| {
                // Tolerate a localized label after the tag: drop the rest of the header line.
                if r.trim().is_empty() { r } else { "" }
            }))?;
        Some((s, rest.trim()))
    })
}

/// Splits text into sections by header line. Later duplicates of a header
/// replace earlier ones; text before the first header is ignored.
pub fn parse_sections(text: &str) -> Vec<(Section, String)> {
    let mut out: Vec<(Section, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        if let Some((section, rest)) = header_at(line) {
            out.retain(|(s, _)| *s != section);
            out.push((section, if rest.is_empty() { vec![] } else { vec![rest] }));
        } else if let Some((_, lines)) = out.last_mut() {
            lines.push(line);
        }
    }
    out.into_iter()
        .map(|(s, lines)| (s, lines.join("\n").trim().to_string()))
        .collect()
}

/// Parses a full nine-section rendering back into a report.
pub fn parse_report(text: &str) -> Result<ConsultationReport> {
    let sections = parse_sections(text);
    let mut report = ConsultationReport::default();
    let mut missing = Vec::new();
    for s in Section::ALL {
        match sections.iter().find(|(p, body)| *p == s && !body.is_empty()) {
            Some((_, body)) => *report.get_mut(s) = body.clone(),
            None => missing.push(s.field_name().to_string()),
        }
    }
    if missing.is_empty() {
        Ok(report)
    } else {
        Err(Error::ReportFormat {
            attempts: 1,
            missing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportValidation {
    pub violations: Vec<String>,
}

impl ReportValidation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_report(report: &ConsultationReport) -> ReportValidation {
    let mut violations = Vec::new();
    for s in Section::ALL {
        if report.get(s).trim().is_empty() {
            violations.push(format!("{} empty", s.field_name()));
        }
    }
    if !report.consultation_date.trim().is_empty()
        && NaiveDate::parse_from_str(&report.consultation_date, "%Y-%m-%d").is_err()
    {
        violations.push("consultation_date invalid".to_string());
    }
    ReportValidation { violations }
}

pub fn format_report_number(n: u64) -> String {
    format!("LL-{n:06}")
}

const DEMO_SOURCES: [&str; DEMO_COUNT] = [
    include_str!("../fixtures/demos/demo1.json"),
    include_str!("../fixtures/demos/demo2.json"),
    include_str!("../fixtures/demos/demo3.json"),
    include_str!("../fixtures/demos/demo4.json"),
];

/// The bundled demonstration reports.
pub fn default_demos() -> Vec<ConsultationReport> {
    DEMO_SOURCES
        .iter()
        .map(|s| serde_json::from_str(s).expect("bundled demo parses"))
        .collect()
}

/// Loads every `*.json` report in `dir`, sorted by file name.
pub fn load_demos(dir: &Path) -> Result<Vec<ConsultationReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&raw)?)
        })
        .collect()
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report_messages(session: &Session, demos: &[ConsultationReport]) -> Vec<ChatMessage> {
    let mut task = format!("{REPORT_TASK}\n");
    task.push_str(
        "Organize the consultation below into a report. Follow the structure of the examples \
         and write every section under its header.\n",
    );
    for (i, demo) in demos.iter().enumerate() {
        task.push_str(&format!("\nExample report {}:\n", i + 1));
        task.push_str(&render_sections(demo, &Section::GENERATED));
        task.push('\n');
    }
    task.push_str(&format!("\n{TRANSCRIPT_BEGIN}\n"));
    for turn in session.transcript() {
        let who = match turn.speaker {
            Speaker::User => "Client",
            Speaker::Lawyer => "Lawyer",
        };
        task.push_str(&format!("{who}: {}\n", one_line(&turn.text)));
    }
    task.push_str(&format!("{TRANSCRIPT_END}\n\nUse exactly these headers, each on its own line:\n"));
    for s in Section::GENERATED {
        task.push_str(s.header());
        task.push('\n');
    }
    vec![
        ChatMessage::system(
            "You are the secretary of a law firm. You write accurate consultation reports using \
             only what was said in the consultation.",
        ),
        ChatMessage::user(task),
    ]
}

fn missing_generated(sections: &[(Section, String)]) -> Vec<String> {
    Section::GENERATED
        .iter()
        .filter(|&&s| !sections.iter().any(|(p, b)| *p == s && !b.is_empty()))
        .map(|s| s.field_name().to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            temperature: 0.2,
            max_tokens: 2048,
        }
    }
}

/// Compiles the session into a report numbered `report_number`.
///
/// Facts the client affirmed during clarification are appended to the
/// facts section when the backend did not already include them.
pub fn generate_report(
    session: &Session,
    demos: &[ConsultationReport],
    chat: &dyn ChatBackend,
    report_number: &str,
    params: &ReportParams,
    seed: u64,
) -> Result<ConsultationReport> {
    if session.phase() != Phase::ReportGeneration {
        return Err(Error::Phase {
            phase: session.phase(),
            event: "generate_report".into(),
        });
    }
    draft_report(session, demos, chat, report_number, params, seed)
}

/// Same as [`generate_report`] without the phase check; used when a
/// reviewed report is rewritten.
pub fn draft_report(
    session: &Session,
    demos: &[ConsultationReport],
    chat: &dyn ChatBackend,
    report_number: &str,
    params: &ReportParams,
    seed: u64,
) -> Result<ConsultationReport> {
    if session.transcript().is_empty() {
        return Err(Error::Usage("cannot write a report for an empty transcript".into()));
    }
    if demos.len() != DEMO_COUNT {
        return Err(Error::Usage(format!(
            "exactly {DEMO_COUNT} demonstration reports are required, got {}",
            demos.len()
        )));
    }

    let mut messages = report_messages(session, demos);
    let mut missing = Vec::new();
    for attempt in 0..REPORT_ATTEMPTS {
        if attempt > 0 {
            let last = messages.last_mut().expect("user message");
            last.content.push_str(&format!(
                "\nFormat reminder: the previous reply lacked these sections: {}. Write all \
                 sections, each under its header.\n",
                missing.join(", ")
            ));
        }
        let request = ChatRequest::new(messages.clone(), params.temperature, params.max_tokens, seed);
        let reply = backend::chat(chat, &request)?;
        let sections = parse_sections(&reply);
        missing = missing_generated(&sections);
        if !missing.is_empty() {
            tracing::warn!(attempt, ?missing, "report reply is missing sections");
            continue;
        }
        let mut report = ConsultationReport {
            report_number: report_number.to_string(),
            consultation_date: session.start_date().format("%Y-%m-%d").to_string(),
            ..ConsultationReport::default()
        };
        for (s, body) in sections {
            if Section::GENERATED.contains(&s) {
                *report.get_mut(s) = body;
            }
        }
        append_confirmed_facts(&mut report, session);
        let validation = validate_report(&report);
        if validation.is_ok() {
            return Ok(report);
        }
        missing = validation.violations;
    }
    Err(Error::ReportFormat {
        attempts: REPORT_ATTEMPTS,
        missing,
    })
}

fn append_confirmed_facts(report: &mut ConsultationReport, session: &Session) {
    let absent: Vec<&str> = session
        .clarifications()
        .iter()
        .flat_map(|c| c.verified.affirmed.iter())
        .map(String::as_str)
        .filter(|f| !report.facts_and_background.contains(f))
        .collect();
    if absent.is_empty() {
        return;
    }
    let facts = &mut report.facts_and_background;
    facts.push_str("\n\n");
    facts.push_str(CONFIRMED_FACTS_HEADER);
    let mut seen = Vec::new();
    for f in absent {
        if !seen.contains(&f) {
            facts.push_str("\n- ");
            facts.push_str(f);
            seen.push(f);
        }
    }
}
