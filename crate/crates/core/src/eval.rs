//! Judge-based evaluation: forced-choice pairwise comparison and per-turn 1–10 scoring.
//!
//! Pairwise judging asks the judge twice, once per presentation order. When
//! both orders pick the same text that text wins; otherwise a seeded coin
//! decides and the result is flagged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, ChatBackend, ChatMessage, ChatRequest};
use crate::error::{Error, Result};
use crate::model::{Speaker, Turn};

pub const PAIRWISE_TASK: &str = "Task: JUDGE pairwise.";
pub const SCORE_TASK: &str = "Task: JUDGE turn score.";
pub const RESPONSE_A_OPEN: &str = "<response_a>";
pub const RESPONSE_A_CLOSE: &str = "</response_a>";
pub const RESPONSE_B_OPEN: &str = "<response_b>";
pub const RESPONSE_B_CLOSE: &str = "</response_b>";
/// One initial attempt plus three retries.
pub const JUDGE_ATTEMPTS: usize = 4;
pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 10;

/// Prompt templates. Pairwise uses `{question}`, `{response_a}` and
/// `{response_b}`; turn scoring uses `{conversation}` and `{reply}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgePrompts {
    pub pairwise: String,
    pub turn_score: String,
}

impl Default for JudgePrompts {
    fn default() -> Self {
        JudgePrompts {
            pairwise: include_str!("../fixtures/judge/pairwise.txt").to_string(),
            turn_score: include_str!("../fixtures/judge/turn_score.txt").to_string(),
        }
    }
}

impl JudgePrompts {
    pub fn new(pairwise: String, turn_score: String) -> Result<Self> {
        let need = |t: &str, what: &str, parts: &[&str]| -> Result<()> {
            match parts.iter().find(|p| !t.contains(*p)) {
                Some(p) => Err(Error::Config(format!("{what} prompt lacks {p}"))),
                None => Ok(()),
            }
        };
        need(
            &pairwise,
            "pairwise",
            &[
                PAIRWISE_TASK,
                "{question}",
                RESPONSE_A_OPEN,
                "{response_a}",
                RESPONSE_A_CLOSE,
                RESPONSE_B_OPEN,
                "{response_b}",
                RESPONSE_B_CLOSE,
            ],
        )?;
        need(&turn_score, "turn score", &[SCORE_TASK, "{conversation}", "{reply}"])?;
        Ok(JudgePrompts {
            pairwise,
            turn_score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

impl Winner {
    fn flip(self) -> Winner {
        match self {
            Winner::A => Winner::B,
            Winner::B => Winner::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseItem {
    pub question: String,
    pub response_a: String,
    pub response_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub question: String,
    pub response_a: String,
    pub response_b: String,
    pub winner: Winner,
    pub judge_tag: String,
    /// Winner as judged with `response_a` shown first.
    pub forward: Winner,
    /// Winner as judged with the responses swapped, mapped back to the original labels.
    pub reverse: Winner,
    pub disagreement: bool,
}

fn verdict(reply: &str) -> Option<Winner> {
    let lower = reply.to_ascii_lowercase();
    let at = lower.rfind("verdict")?;
    let rest = reply[at + "verdict".len()..].trim_start_matches([':', ' ', '*', '\t']);
    match rest.chars().next()? {
        'A' | 'a' => Some(Winner::A),
        'B' | 'b' => Some(Winner::B),
        _ => None,
    }
}

fn ask<T>(
    judge: &dyn ChatBackend,
    prompt: String,
    seed: u64,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T> {
    let mut last_reply = String::new();
    for attempt in 0..JUDGE_ATTEMPTS {
        let request = ChatRequest::new(vec![ChatMessage::user(prompt.clone())], 0.0, 64, seed);
        last_reply = backend::chat(judge, &request)?;
        if let Some(v) = parse(&last_reply) {
            return Ok(v);
        }
        tracing::warn!(attempt, reply = %last_reply, "unusable judge reply");
    }
    Err(Error::Judge {
        attempts: JUDGE_ATTEMPTS,
        last_reply,
    })
}

fn pairwise_prompt(prompts: &JudgePrompts, question: &str, first: &str, second: &str) -> String {
    prompts
        .pairwise
        .replace("{question}", question)
        .replace("{response_a}", first)
        .replace("{response_b}", second)
}

/// Judges one pair under both orderings.
pub fn pairwise_judge(
    judge: &dyn ChatBackend,
    prompts: &JudgePrompts,
    judge_tag: &str,
    item: &PairwiseItem,
    seed: u64,
) -> Result<PairwiseResult> {
    if [&item.question, &item.response_a, &item.response_b]
        .iter()
        .any(|t| t.trim().is_empty())
    {
        return Err(Error::Usage("question and both responses must be non-empty".into()));
    }
    let forward = ask(
        judge,
        pairwise_prompt(prompts, &item.question, &item.response_a, &item.response_b),
        seed,
        verdict,
    )?;
    let reverse = ask(
        judge,
        pairwise_prompt(prompts, &item.question, &item.response_b, &item.response_a),
        seed,
        verdict,
    )?
    .flip();
    let disagreement = forward != reverse;
    let winner = if disagreement {
        if ChaCha8Rng::seed_from_u64(seed).random::<bool>() {
            Winner::A
        } else {
            Winner::B
        }
    } else {
        forward
    };
    Ok(PairwiseResult {
        question: item.question.clone(),
        response_a: item.response_a.clone(),
        response_b: item.response_b.clone(),
        winner,
        judge_tag: judge_tag.to_string(),
        forward,
        reverse,
        disagreement,
    })
}

/// Judges every item in parallel; item `i` uses seed `seed + i`.
pub fn judge_all(
    judge: &dyn ChatBackend,
    prompts: &JudgePrompts,
    judge_tag: &str,
    items: &[PairwiseItem],
    seed: u64,
) -> Result<Vec<PairwiseResult>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| pairwise_judge(judge, prompts, judge_tag, item, seed.wrapping_add(i as u64)))
        .collect()
}

pub fn win_rate(results: &[PairwiseResult], subject: Winner) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Usage("win rate of an empty result set".into()));
    }
    let wins = results.iter().filter(|r| r.winner == subject).count();
    Ok(wins as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSummary {
    pub n: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub disagreements: usize,
}

/// Summary for `subject`.
pub fn summarize(results: &[PairwiseResult], subject: Winner) -> Result<PairwiseSummary> {
    Ok(PairwiseSummary {
        n: results.len(),
        wins: results.iter().filter(|r| r.winner == subject).count(),
        win_rate: win_rate(results, subject)?,
        disagreements: results.iter().filter(|r| r.disagreement).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnScore {
    pub turn_index: usize,
    pub score: u8,
}

fn score(reply: &str) -> Option<u8> {
    let lower = reply.to_ascii_lowercase();
    let at = lower.rfind("score")?;
    let rest = reply[at + "score".len()..].trim_start_matches([':', ' ', '*', '\t']);
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let n: u32 = digits.parse().ok()?;
    (MIN_SCORE as u32..=MAX_SCORE as u32)
        .contains(&n)
        .then_some(n as u8)
}

fn speaker_label(s: Speaker) -> &'static str {
    match s {
        Speaker::User => "Client",
        Speaker::Lawyer => "Lawyer",
    }
}

/// One score per lawyer turn, in turn order. Each prompt shows the
/// conversation before the scored reply.
pub fn turn_scores(
    judge: &dyn ChatBackend,
    prompts: &JudgePrompts,
    transcript: &[Turn],
    seed: u64,
) -> Result<Vec<TurnScore>> {
    let lawyer_turns: Vec<usize> = transcript
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == Speaker::Lawyer)
        .map(|(i, _)| i)
        .collect();
    if lawyer_turns.is_empty() {
        return Err(Error::Usage("transcript has no lawyer turn to score".into()));
    }
    lawyer_turns
        .par_iter()
        .map(|&i| {
            let conversation = transcript[..i]
                .iter()
                .map(|t| format!("{}: {}", speaker_label(t.speaker), t.text))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = prompts
                .turn_score
                .replace("{conversation}", &conversation)
                .replace("{reply}", &transcript[i].text);
            let s = ask(judge, prompt, seed.wrapping_add(i as u64), score)?;
            Ok(TurnScore {
                turn_index: transcript[i].index,
                score: s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockChat;

    fn item(a: &str, b: &str) -> PairwiseItem {
        PairwiseItem {
            question: "q".into(),
            response_a: a.into(),
            response_b: b.into(),
        }
    }

    fn judge(i: &PairwiseItem, seed: u64) -> PairwiseResult {
        pairwise_judge(&MockChat::default(), &JudgePrompts::default(), "mock", i, seed).unwrap()
    }

    #[test]
    fn longer_response_wins_in_both_orders() {
        let r = judge(&item("a much longer answer", "short"), 1);
        assert_eq!((r.forward, r.reverse, r.winner), (Winner::A, Winner::A, Winner::A));
        assert!(!r.disagreement);
    }

    #[test]
    fn swapping_inputs_relabels_the_same_winner() {
        let r = judge(&item("short", "a much longer answer"), 1);
        assert_eq!(r.winner, Winner::B);
    }

    #[test]
    fn identical_responses_take_the_coin_and_are_flagged() {
        let i = item("same", "same");
        let r = judge(&i, 3);
        assert!(r.disagreement);
        assert_eq!(r, judge(&i, 3));
    }

    #[test]
    fn verdict_and_score_parsing() {
        assert_eq!(verdict("Verdict: B"), Some(Winner::B));
        assert_eq!(verdict("**Verdict:** a"), Some(Winner::A));
        assert_eq!(verdict("B is better"), None);
        assert_eq!(score("Score: 7"), Some(7));
        assert_eq!(score("Score: 11"), None);
        assert_eq!(score("Score: 0"), None);
    }

    #[test]
    fn out_of_range_scores_end_in_a_judge_error() {
        let transcript = vec![
            Turn { index: 1, speaker: Speaker::User, text: "q".into(), clarification_used: false },
            Turn { index: 2, speaker: Speaker::Lawyer, text: "a".into(), clarification_used: false },
        ];
        let err = turn_scores(&MockChat::with_judge_score(11), &JudgePrompts::default(), &transcript, 0)
            .unwrap_err();
        assert!(matches!(err, Error::Judge { attempts: 4, .. }));
    }

    #[test]
    fn templates_must_carry_placeholders() {
        assert!(JudgePrompts::new("no markers".into(), JudgePrompts::default().turn_score).is_err());
        let d = JudgePrompts::default();
        assert!(JudgePrompts::new(d.pairwise, d.turn_score).is_ok());
    }
}
