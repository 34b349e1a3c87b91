//! Deterministic offline backend.
//!
//! Chat replies are a pure function of the request seed, the message
//! contents and the temperature bucket (width 0.1). The reply template is
//! chosen by the task marker in the last message:
//!
//! | marker                      | reply                                             |
//! |-----------------------------|---------------------------------------------------|
//! | clarification task (`K=n`)  | numbered list of exactly `n` yes/no questions     |
//! | report task                 | all report sections, facts echoed from transcript |
//! | pairwise judge task         | `Verdict: A` or `B`, longer response wins         |
//! | turn-score judge task       | `Score: n` with the configured constant           |
//! | anything else               | lawyer-style advice                               |
//!
//! Embeddings are a bag of hashed character trigrams folded into 64
//! dimensions and L2-normalized.

use crate::backend::{ChatBackend, ChatRequest, EmbeddingBackend, EmbeddingVector, Role};
use crate::error::Result;
use crate::{eval, secretary, tolc};

pub const MOCK_DIMENSION: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn temperature_bucket(temperature: f64) -> i64 {
    (temperature * 10.0 + 1e-9).floor() as i64
}

#[derive(Debug, Clone)]
pub struct MockChat {
    judge_score: u8,
}

impl Default for MockChat {
    fn default() -> Self {
        MockChat { judge_score: 7 }
    }
}

impl MockChat {
    pub fn with_judge_score(judge_score: u8) -> Self {
        MockChat { judge_score }
    }
}

fn request_hash(request: &ChatRequest, bucket: i64) -> u64 {
    let mut h = fnv1a_extend(FNV_OFFSET, &request.seed.to_le_bytes());
    h = fnv1a_extend(h, &bucket.to_le_bytes());
    for m in &request.messages {
        let role: &[u8] = match m.role {
            Role::System => b"s",
            Role::User => b"u",
            Role::Assistant => b"a",
        };
        h = fnv1a_extend(h, role);
        h = fnv1a_extend(h, m.content.as_bytes());
        h = fnv1a_extend(h, &[0xff]);
    }
    h
}

fn mix(h: u64, i: u64) -> u64 {
    fnv1a_extend(h, &i.to_le_bytes())
}

impl ChatBackend for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let bucket = temperature_bucket(request.temperature);
        let h = request_hash(request, bucket);
        let task = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();

        let reply = if task.contains(tolc::CLARIFY_TASK) {
            clarify_reply(task, h)
        } else if task.contains(secretary::REPORT_TASK) {
            report_reply(task)
        } else if task.contains(eval::PAIRWISE_TASK) {
            pairwise_reply(task)
        } else if task.contains(eval::SCORE_TASK) {
            format!("Score: {}", self.judge_score)
        } else {
            lawyer_reply(task, h, bucket)
        };
        Ok(reply)
    }
}

const FACT_QUESTIONS: [&str; 16] = [
    "Is there a written agreement covering this matter?",
    "Did the key events take place within the last three years?",
    "Has the other party acknowledged the facts in writing or in messages?",
    "Do you hold evidence such as receipts, photos, or chat records?",
    "Is jointly owned property involved?",
    "Are minor children affected by the outcome?",
    "Has either side already started court or arbitration proceedings?",
    "Was a payment made that you now want returned?",
    "Did the other party act intentionally?",
    "Have you suffered a physical injury?",
    "Is an employer or company a party to the dispute?",
    "Has a government authority issued a decision in this matter?",
    "Are there debts owed by either party?",
    "Did you sign anything under pressure?",
    "Is the amount in dispute above 100,000 yuan?",
    "Has the other party been unfaithful or left the family home?",
];

fn requested_count(task: &str) -> usize {
    task.find("K=")
        .map(|at| {
            task[at + 2..]
                .chars()
                .take_while(|c| c.is_ascii_digit())
                .collect::<String>()
        })
        .and_then(|digits| digits.parse().ok())
        .unwrap_or(3)
}

fn clarify_reply(task: &str, h: u64) -> String {
    let k = requested_count(task);
    let start = (h % FACT_QUESTIONS.len() as u64) as usize;
    (0..k)
        .map(|i| {
            let q = FACT_QUESTIONS[(start + i) % FACT_QUESTIONS.len()];
            let tag = mix(h, i as u64) & 0xff_ffff;
            format!("{}. {} (ref {:06x})", i + 1, q, tag)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn transcript_lines<'a>(task: &'a str, prefix: &str) -> Vec<&'a str> {
    let Some(begin) = task.find(secretary::TRANSCRIPT_BEGIN) else {
        return Vec::new();
    };
    let body = &task[begin + secretary::TRANSCRIPT_BEGIN.len()..];
    let body = body
        .find(secretary::TRANSCRIPT_END)
        .map_or(body, |end| &body[..end]);
    body.lines()
        .filter_map(|l| l.trim().strip_prefix(prefix))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

fn clip(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        text.to_string()
    } else {
        let mut s: String = text.chars().take(max_chars).collect();
        s.push_str("...");
        s
    }
}

fn report_reply(task: &str) -> String {
    use secretary::Section;
    let client = transcript_lines(task, "Client:");
    let lawyer = transcript_lines(task, "Lawyer:");
    let first = client.first().copied().unwrap_or("a legal matter");
    let body = |section: Section| -> String {
        match section {
            Section::Client => "Consulting client".to_string(),
            Section::Subject => clip(first, 80),
            Section::Purpose => format!("Obtain legal guidance regarding: {}", clip(first, 120)),
            Section::FactsAndBackground => client.join(" "),
            Section::LegalAnalysis => clip(lawyer.first().copied().unwrap_or("-"), 240),
            Section::LegalAdvice => clip(lawyer.last().copied().unwrap_or("-"), 240),
            Section::RiskWarnings => "Outcomes depend on the available evidence and local court \
                practice; limitation periods may bar late claims."
                .to_string(),
            Section::ReportNumber | Section::ConsultationDate => unreachable!(),
        }
    };
    Section::GENERATED
        .iter()
        .map(|&s| format!("{}\n{}", s.header(), body(s)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(text[start..start + len].trim())
}

fn pairwise_reply(task: &str) -> String {
    let a = between(task, eval::RESPONSE_A_OPEN, eval::RESPONSE_A_CLOSE).unwrap_or_default();
    let b = between(task, eval::RESPONSE_B_OPEN, eval::RESPONSE_B_CLOSE).unwrap_or_default();
    // Position bias on ties: the first response shown wins.
    let winner = if b.chars().count() > a.chars().count() {
        "B"
    } else {
        "A"
    };
    format!("Verdict: {winner}")
}

const OPENINGS: [&str; 4] = [
    "Thank you for the details.",
    "I understand your concern.",
    "Let me walk you through the legal position.",
    "This is a common situation in practice.",
];

const ADVICE: [&str; 8] = [
    "Keep every document and message related to the matter, since evidence decides most disputes.",
    "Check the applicable limitation period so that your claim is not time-barred.",
    "Try to negotiate a written settlement before starting litigation.",
    "If negotiation fails, you may file a claim with the competent people's court.",
    "Prepare a clear timeline of the key events and the amounts involved.",
    "Consider mediation, which is usually faster and cheaper than a full trial.",
    "Do not sign any further agreement until its terms have been reviewed.",
    "Ask the other party to confirm their position in writing.",
];

fn lawyer_reply(task: &str, h: u64, bucket: i64) -> String {
    let sentences = 1 + bucket.rem_euclid(4) as usize;
    let first_line = task.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut out = format!(
        "{} Regarding \"{}\":",
        OPENINGS[(h % OPENINGS.len() as u64) as usize],
        clip(first_line.trim(), 60)
    );
    let start = ((h >> 8) % ADVICE.len() as u64) as usize;
    for j in 0..sentences {
        out.push(' ');
        out.push_str(ADVICE[(start + 3 * j) % ADVICE.len()]);
    }
    out
}

/// Hashed character-trigram embedder.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    max_chars: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { max_chars: 8192 }
    }
}

impl MockEmbedder {
    pub fn with_max_chars(max_chars: usize) -> Self {
        MockEmbedder { max_chars }
    }

    pub fn vector(text: &str) -> EmbeddingVector {
        let mut chars: Vec<char> = vec!['\u{2}', '\u{2}'];
        chars.extend(text.chars().flat_map(char::to_lowercase));
        chars.extend(['\u{3}', '\u{3}']);
        let mut bins = vec![0.0f64; MOCK_DIMENSION];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bin = (fnv1a(&buf[..len]) % MOCK_DIMENSION as u64) as usize;
            bins[bin] += 1.0;
        }
        let norm = bins.iter().map(|x| x * x).sum::<f64>().sqrt();
        EmbeddingVector(bins.into_iter().map(|x| x / norm).collect())
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn tag(&self) -> String {
        format!("mock-trigram-{MOCK_DIMENSION}")
    }

    fn max_chars(&self) -> usize {
        self.max_chars
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| Self::vector(t)).collect())
    }
}
