//! Binary reward model over embedded agent outputs.
//!
//! `ŷ = σ(w·e + b)` is fitted with binary cross-entropy. At inference the
//! model picks the best of the lawyer's candidates and reviews finished
//! reports; it never updates the generating model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{self, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::secretary::ConsultationReport;
use crate::vector;

pub const PROB_FLOOR: f64 = 1e-12;
/// Reports scoring below this are regenerated once.
pub const REVIEW_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RewardRecord", try_from = "RewardRecord")]
pub struct RewardModel {
    weight: Vec<f64>,
    bias: f64,
    train_log: Vec<TrainStep>,
}

#[derive(Serialize, Deserialize)]
struct RewardRecord {
    dims: usize,
    weight: Vec<f64>,
    bias: f64,
    train_log: Vec<TrainStep>,
}

impl From<RewardModel> for RewardRecord {
    fn from(m: RewardModel) -> Self {
        RewardRecord {
            dims: m.weight.len(),
            weight: m.weight,
            bias: m.bias,
            train_log: m.train_log,
        }
    }
}

impl TryFrom<RewardRecord> for RewardModel {
    type Error = Error;

    fn try_from(r: RewardRecord) -> Result<Self> {
        if r.weight.len() != r.dims {
            return Err(Error::Shape(format!(
                "reward model declares {} dims but has {} weights",
                r.dims,
                r.weight.len()
            )));
        }
        Ok(RewardModel {
            weight: r.weight,
            bias: r.bias,
            train_log: r.train_log,
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

impl RewardModel {
    /// `w = 0, b = 0`: every output scores 0.5.
    pub fn untrained(dims: usize) -> Self {
        RewardModel {
            weight: vec![0.0; dims],
            bias: 0.0,
            train_log: Vec::new(),
        }
    }

    pub fn from_parts(weight: Vec<f64>, bias: f64) -> Self {
        RewardModel {
            weight,
            bias,
            train_log: Vec::new(),
        }
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
    pub fn bias(&self) -> f64 {
        self.bias
    }
    pub fn train_log(&self) -> &[TrainStep] {
        &self.train_log
    }
    pub fn dims(&self) -> usize {
        self.weight.len()
    }

    pub fn logit(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.weight.len() {
            return Err(Error::Shape(format!(
                "embedding has dimension {}, reward model expects {}",
                e.len(),
                self.weight.len()
            )));
        }
        Ok(vector::dot(&self.weight, e) + self.bias)
    }

    /// Probability of "better", kept strictly inside (0, 1).
    pub fn prob(&self, e: &[f64]) -> Result<f64> {
        Ok(clamp_prob(sigmoid(self.logit(e)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Mean binary cross-entropy with its gradient `(∂L/∂w, ∂L/∂b)`.
///
/// Predictions are clamped to `[1e-12, 1 − 1e-12]` inside the logarithms;
/// the gradient is that of the unclamped loss, `(ŷ − y)·e / N`.
pub fn rm_loss(outputs: &[Vec<f64>], labels: &[u8], model: &RewardModel) -> Result<(f64, Vec<f64>, f64)> {
    if outputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} outputs but {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Usage("no labeled outputs".into()));
    }
    let n = outputs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; model.dims()];
    let mut gb = 0.0;
    for (e, &y) in outputs.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Usage(format!("label must be 0 or 1, got {y}")));
        }
        let p = sigmoid(model.logit(e)?);
        let pc = clamp_prob(p);
        let y = y as f64;
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let r = (p - y) / n;
        for (g, x) in gw.iter_mut().zip(e) {
            *g += r * x;
        }
        gb += r;
    }
    Ok((loss / n, gw, gb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Recorded for reproducibility; full-batch training from zero draws no random numbers.
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            lr: 1.0,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent from `w = 0, b = 0`.
pub fn train_rm_vectors(outputs: &[Vec<f64>], labels: &[u8], config: &RmTrainConfig) -> Result<RewardModel> {
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Usage("training data needs both labels".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::Usage("learning rate must be positive".into()));
    }
    let dims = outputs.first().map_or(0, Vec::len);
    let mut model = RewardModel::untrained(dims);
    let (mut loss, mut gw, mut gb) = rm_loss(outputs, labels, &model)?;
    model.train_log.push(TrainStep { epoch: 0, loss });
    for epoch in 1..=config.epochs {
        for (w, g) in model.weight.iter_mut().zip(&gw) {
            *w -= config.lr * g;
        }
        model.bias -= config.lr * gb;
        (loss, gw, gb) = rm_loss(outputs, labels, &model)?;
        model.train_log.push(TrainStep { epoch, loss });
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOutput {
    pub text: String,
    pub label: u8,
}

pub fn load_labels(path: &Path) -> Result<Vec<LabeledOutput>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&raw, path)
}

pub fn parse_labels(raw: &str, path: &Path) -> Result<Vec<LabeledOutput>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: LabeledOutput = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", rec.label)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn train_rm(
    labeled: &[LabeledOutput],
    embedder: &dyn EmbeddingBackend,
    config: &RmTrainConfig,
) -> Result<RewardModel> {
    if labeled.is_empty() {
        return Err(Error::Usage("no labeled outputs".into()));
    }
    let texts: Vec<String> = labeled.iter().map(|l| l.text.clone()).collect();
    let outputs: Vec<Vec<f64>> = backend::embed(embedder, &texts)?
        .vectors
        .into_iter()
        .map(|v| v.0)
        .collect();
    let labels: Vec<u8> = labeled.iter().map(|l| l.label).collect();
    train_rm_vectors(&outputs, &labels, config)
}

pub fn score(model: &RewardModel, text: &str, embedder: &dyn EmbeddingBackend) -> Result<f64> {
    model.prob(&backend::embed_one(embedder, text)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Absent when no model took part.
    pub score: Option<f64>,
}

/// Index of the highest logit, first index on ties.
pub fn select_best_vectors(model: &RewardModel, candidates: &[Vec<f64>]) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidates to choose from".into()));
    }
    let logits: Vec<f64> = candidates.iter().map(|c| model.logit(c)).collect::<Result<_>>()?;
    let index = vector::argmax_first(&logits).expect("non-empty");
    Ok(Selection {
        index,
        score: Some(clamp_prob(sigmoid(logits[index]))),
    })
}

/// Best-of-n choice; with no model (boss disabled) the first candidate is taken.
pub fn select_best(
    model: Option<&RewardModel>,
    candidates: &[String],
    embedder: &dyn EmbeddingBackend,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidates to choose from".into()));
    }
    let Some(model) = model else {
        return Ok(Selection {
            index: 0,
            score: None,
        });
    };
    let vectors: Vec<Vec<f64>> = backend::embed(embedder, candidates)?
        .vectors
        .into_iter()
        .map(|v| v.0)
        .collect();
    select_best_vectors(model, &vectors)
}

/// Outcome of the boss reading a finished report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportReview {
    /// Score of the delivered report.
    pub score: f64,
    pub regenerated: bool,
    pub low_confidence: bool,
    /// The regenerated report, when one replaced the original.
    pub revised_report: Option<ConsultationReport>,
}

/// Scores `report`; below [`REVIEW_THRESHOLD`] it is regenerated once, and a
/// second low score delivers the regenerated report flagged low-confidence.
pub fn review_report(
    model: &RewardModel,
    report: &ConsultationReport,
    embedder: &dyn EmbeddingBackend,
    regenerate: impl FnOnce() -> Result<ConsultationReport>,
) -> Result<ReportReview> {
    let first = score(model, &report.render(), embedder)?;
    if first >= REVIEW_THRESHOLD {
        return Ok(ReportReview {
            score: first,
            regenerated: false,
            low_confidence: false,
            revised_report: None,
        });
    }
    let revised = regenerate()?;
    let second = score(model, &revised.render(), embedder)?;
    Ok(ReportReview {
        score: second,
        regenerated: true,
        low_confidence: second < REVIEW_THRESHOLD,
        revised_report: Some(revised),
    })
}

const SAMPLE_LABELS: &str = include_str!("../fixtures/rm_labels.jsonl");

/// Bundled better/worse examples used when no reward model has been trained.
pub fn sample_labels() -> Vec<LabeledOutput> {
    parse_labels(SAMPLE_LABELS, Path::new("rm_labels.jsonl")).expect("bundled labels parse")
}
