//! Domain routing for the first user message.
//!
//! Frozen backend embeddings are passed through a trainable linear
//! projection `z = x W` (`W` is `D × D'`). The projection is fitted with a
//! squared-hinge triplet objective
//!
//! ```text
//! L = 1/N Σ_i ( ‖a_i − p_i‖² + max(0, α − ‖a_i − n_i‖)² )
//! ```
//!
//! using full-batch gradient descent with backtracking, so the recorded
//! training loss never increases. Inference is nearest centroid by cosine in
//! the projected space, with a similarity floor below which the query falls
//! back to "Others".

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{self, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::model::{DomainLabel, DomainTaxonomy, OTHERS_ID};
use crate::vector;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 0.3;
pub const MAX_HALVINGS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProjectionRecord", try_from = "ProjectionRecord")]
pub struct ProjectionModel {
    weight: Array2<f64>,
    alpha: f64,
    train_log: Vec<TrainStep>,
}

/// On-disk form: `{dims, alpha, weight (row-major), train_log}`.
#[derive(Serialize, Deserialize)]
struct ProjectionRecord {
    dims: [usize; 2],
    alpha: f64,
    weight: Vec<f64>,
    train_log: Vec<TrainStep>,
}

impl From<ProjectionModel> for ProjectionRecord {
    fn from(m: ProjectionModel) -> Self {
        let (rows, cols) = m.weight.dim();
        ProjectionRecord {
            dims: [rows, cols],
            alpha: m.alpha,
            weight: m.weight.iter().copied().collect(),
            train_log: m.train_log,
        }
    }
}

impl TryFrom<ProjectionRecord> for ProjectionModel {
    type Error = Error;

    fn try_from(r: ProjectionRecord) -> Result<Self> {
        let weight = Array2::from_shape_vec((r.dims[0], r.dims[1]), r.weight)
            .map_err(|e| Error::Shape(format!("projection weight: {e}")))?;
        if !(r.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(ProjectionModel {
            weight,
            alpha: r.alpha,
            train_log: r.train_log,
        })
    }
}

impl ProjectionModel {
    /// Identity map, padded with zero columns or truncated to `output_dim`.
    pub fn identity(input_dim: usize, output_dim: usize, alpha: f64) -> Self {
        let mut weight = Array2::zeros((input_dim, output_dim));
        for i in 0..input_dim.min(output_dim) {
            weight[[i, i]] = 1.0;
        }
        ProjectionModel {
            weight,
            alpha,
            train_log: Vec::new(),
        }
    }

    pub fn from_weight(weight: Array2<f64>, alpha: f64) -> Self {
        ProjectionModel {
            weight,
            alpha,
            train_log: Vec::new(),
        }
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn train_log(&self) -> &[TrainStep] {
        &self.train_log
    }
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }
    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "embedding has dimension {}, projection expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(Array1::from(x.to_vec()).dot(&self.weight).to_vec())
    }
}

/// Triplets of raw (unprojected) embeddings, one row per triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Array2<f64>,
}

impl TripletBatch {
    pub fn from_rows(triples: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let n = triples.len();
        if n == 0 {
            return Err(Error::Usage("no triplets".into()));
        }
        let d = triples[0].0.len();
        let stack = |pick: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((n, d));
            for (i, t) in triples.iter().enumerate() {
                let row = pick(t);
                if row.len() != d {
                    return Err(Error::Shape(format!(
                        "triplet {i} has dimension {}, expected {d}",
                        row.len()
                    )));
                }
                m.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
            }
            Ok(m)
        };
        Ok(TripletBatch {
            anchors: stack(|t| &t.0)?,
            positives: stack(|t| &t.1)?,
            negatives: stack(|t| &t.2)?,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, input_dim: usize) -> Result<()> {
        let shape = self.anchors.dim();
        if self.positives.dim() != shape || self.negatives.dim() != shape {
            return Err(Error::Shape(
                "anchors, positives and negatives must have equal shapes".into(),
            ));
        }
        if shape.1 != input_dim {
            return Err(Error::Shape(format!(
                "triplets have dimension {}, weight expects {input_dim}",
                shape.1
            )));
        }
        if shape.0 == 0 {
            return Err(Error::Usage("no triplets".into()));
        }
        Ok(())
    }
}

/// Loss on already-projected vectors.
pub fn triplet_loss_projected(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    alpha: f64,
) -> Result<f64> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Shape("triplet lists differ in length".into()));
    }
    if anchors.is_empty() {
        return Err(Error::Usage("no triplets".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Usage("alpha must be positive".into()));
    }
    let mut total = 0.0;
    for ((a, p), n) in anchors.iter().zip(positives).zip(negatives) {
        if a.len() != p.len() || a.len() != n.len() {
            return Err(Error::Shape("triplet vectors differ in dimension".into()));
        }
        let ap: f64 = a.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum();
        let an: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        total += ap + (alpha - an).max(0.0).powi(2);
    }
    Ok(total / anchors.len() as f64)
}

/// Loss and `∂L/∂W` for the projection `weight` over a raw triplet batch.
pub fn triplet_loss(weight: &Array2<f64>, batch: &TripletBatch, alpha: f64) -> Result<(f64, Array2<f64>)> {
    batch.check(weight.nrows())?;
    if !(alpha > 0.0) {
        return Err(Error::Usage("alpha must be positive".into()));
    }
    let n = batch.len() as f64;
    let raw_ap = &batch.anchors - &batch.positives;
    let raw_an = &batch.anchors - &batch.negatives;
    let ap = raw_ap.dot(weight);
    let an = raw_an.dot(weight);

    let mut loss = 0.0;
    // Per-row coefficient on (a − n) from the squared hinge; zero when inactive.
    let mut hinge_coef = Array1::<f64>::zeros(batch.len());
    for (i, (ap_row, an_row)) in ap.outer_iter().zip(an.outer_iter()).enumerate() {
        let pos = ap_row.dot(&ap_row);
        let dist = an_row.dot(&an_row).sqrt();
        let h = (alpha - dist).max(0.0);
        loss += pos + h * h;
        if h > 0.0 && dist > 0.0 {
            hinge_coef[i] = h / dist;
        }
    }
    let scaled_an = &an * &hinge_coef.insert_axis(Axis(1));
    let grad = (raw_ap.t().dot(&ap) - raw_an.t().dot(&scaled_an)) * (2.0 / n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Projected dimension; defaults to the embedding dimension.
    pub output_dim: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: DEFAULT_ALPHA,
            lr: 0.5,
            epochs: 50,
            output_dim: None,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent from the identity projection.
///
/// Each epoch tries a step of `lr` and halves it (at most [`MAX_HALVINGS`]
/// times) until the loss does not increase; if no step qualifies the weight
/// is kept. `train_log` holds the loss before training (epoch 0) and after
/// every epoch.
pub fn train_projection_vectors(batch: &TripletBatch, config: &TrainConfig) -> Result<ProjectionModel> {
    if batch.is_empty() {
        return Err(Error::Usage("no triplets to train on".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::Usage("learning rate must be positive".into()));
    }
    let input_dim = batch.anchors.ncols();
    let mut model = ProjectionModel::identity(
        input_dim,
        config.output_dim.unwrap_or(input_dim),
        config.alpha,
    );
    let (mut loss, mut grad) = triplet_loss(&model.weight, batch, config.alpha)?;
    model.train_log.push(TrainStep { epoch: 0, loss });

    for epoch in 1..=config.epochs {
        let mut step = config.lr;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &model.weight - &(&grad * step);
            let (cand_loss, cand_grad) = triplet_loss(&candidate, batch, config.alpha)?;
            if cand_loss <= loss {
                model.weight = candidate;
                loss = cand_loss;
                grad = cand_grad;
                break;
            }
            step *= 0.5;
        }
        model.train_log.push(TrainStep { epoch, loss });
    }
    Ok(model)
}

/// Embeds the texts of each triplet and trains the projection on them.
pub fn train_projection(
    triplets: &[(String, String, String)],
    backend: &dyn EmbeddingBackend,
    config: &TrainConfig,
) -> Result<ProjectionModel> {
    if triplets.is_empty() {
        return Err(Error::Usage("no triplets to train on".into()));
    }
    let texts: Vec<String> = triplets
        .iter()
        .flat_map(|(a, p, n)| [a.clone(), p.clone(), n.clone()])
        .collect();
    let vectors = backend::embed(backend, &texts)?.vectors;
    let rows: Vec<_> = vectors
        .chunks(3)
        .map(|c| (c[0].0.clone(), c[1].0.clone(), c[2].0.clone()))
        .collect();
    train_projection_vectors(&TripletBatch::from_rows(&rows)?, config)
}

/// Samples one (anchor, positive, negative) index triple per anchor whose class
/// has at least two members and at least one other class exists.
pub fn mine_triplets(labels: &[u8], seed: u64) -> Vec<(usize, usize, usize)> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let same = &by_class[&label];
        let others = labels.len() - same.len();
        if same.len() < 2 || others == 0 {
            continue;
        }
        let pos = loop {
            let j = same[rng.random_range(0..same.len())];
            if j != i {
                break j;
            }
        };
        let neg = loop {
            let j = rng.random_range(0..labels.len());
            if labels[j] != label {
                break j;
            }
        };
        out.push((i, pos, neg));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub text: String,
    pub domain_id: u8,
}

/// Reads a JSONL corpus of `{"text", "domain_id"}` records.
pub fn load_corpus(path: &Path) -> Result<Vec<LabeledQuestion>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&raw, path)
}

pub fn parse_corpus(raw: &str, path: &Path) -> Result<Vec<LabeledQuestion>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: LabeledQuestion = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(1..=OTHERS_ID).contains(&q.domain_id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("domain_id {} outside 1..=16", q.domain_id),
            });
        }
        out.push(q);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub domain: DomainLabel,
    pub centroid: Vec<f64>,
    pub support_count: usize,
}

/// Class means in projected space, ordered by domain id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCentroids {
    centroids: Vec<Centroid>,
}

impl DomainCentroids {
    /// Means of the projected vectors per label. Every domain in `required`
    /// needs at least one sample; other labels present in the data (such as
    /// "Others") get a centroid as well.
    pub fn build(
        labeled: &[(Vec<f64>, DomainLabel)],
        model: &ProjectionModel,
        required: &[DomainLabel],
    ) -> Result<Self> {
        let mut sums: BTreeMap<u8, (DomainLabel, Vec<f64>, usize)> = BTreeMap::new();
        for (x, label) in labeled {
            let z = model.project(x)?;
            let entry = sums
                .entry(label.id)
                .or_insert_with(|| (label.clone(), vec![0.0; z.len()], 0));
            for (s, v) in entry.1.iter_mut().zip(&z) {
                *s += v;
            }
            entry.2 += 1;
        }
        if let Some(missing) = required.iter().find(|d| !sums.contains_key(&d.id)) {
            return Err(Error::MissingClass {
                domain_id: missing.id,
                name: missing.name.clone(),
            });
        }
        let centroids = sums
            .into_values()
            .map(|(domain, sum, count)| Centroid {
                domain,
                centroid: sum.into_iter().map(|s| s / count as f64).collect(),
                support_count: count,
            })
            .collect();
        Ok(DomainCentroids { centroids })
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn get(&self, domain_id: u8) -> Option<&Centroid> {
        self.centroids.iter().find(|c| c.domain.id == domain_id)
    }

    /// Highest-cosine centroid; ties go to the smaller domain id, and a best
    /// similarity below `tau` yields "Others".
    pub fn nearest(&self, projected: &[f64], tau: f64) -> DomainLabel {
        let mut best: Option<(&Centroid, f64)> = None;
        for c in &self.centroids {
            let sim = vector::cosine(projected, &c.centroid);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((c, sim));
            }
        }
        match best {
            Some((c, sim)) if sim >= tau => c.domain.clone(),
            _ => DomainLabel::others(),
        }
    }
}

/// Embeds labeled questions and builds centroids for every non-"Others" domain of `taxonomy`.
pub fn build_centroids(
    questions: &[LabeledQuestion],
    model: &ProjectionModel,
    backend: &dyn EmbeddingBackend,
    taxonomy: &DomainTaxonomy,
) -> Result<DomainCentroids> {
    let required: Vec<DomainLabel> = taxonomy
        .labels()
        .iter()
        .filter(|d| !d.is_others())
        .cloned()
        .collect();
    if questions.is_empty() {
        let first = &required[0];
        return Err(Error::MissingClass {
            domain_id: first.id,
            name: first.name.clone(),
        });
    }
    let texts: Vec<String> = questions.iter().map(|q| q.text.clone()).collect();
    let vectors = backend::embed(backend, &texts)?.vectors;
    let labeled: Vec<(Vec<f64>, DomainLabel)> = vectors
        .into_iter()
        .zip(questions)
        .map(|(v, q)| {
            let label = taxonomy.get(q.domain_id).cloned().ok_or_else(|| {
                Error::Usage(format!("domain_id {} is not in the taxonomy", q.domain_id))
            })?;
            Ok((v.0, label))
        })
        .collect::<Result<_>>()?;
    DomainCentroids::build(&labeled, model, &required)
}

/// A trained receptionist: projection, centroids and similarity floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receptionist {
    pub model: ProjectionModel,
    pub centroids: DomainCentroids,
    pub tau: f64,
}

impl Receptionist {
    /// Mines triplets from a labeled corpus, trains the projection and builds centroids.
    pub fn train(
        questions: &[LabeledQuestion],
        taxonomy: &DomainTaxonomy,
        backend: &dyn EmbeddingBackend,
        config: &TrainConfig,
        tau: f64,
    ) -> Result<Self> {
        let labels: Vec<u8> = questions.iter().map(|q| q.domain_id).collect();
        let triplets: Vec<(String, String, String)> = mine_triplets(&labels, config.seed)
            .into_iter()
            .map(|(a, p, n)| {
                (
                    questions[a].text.clone(),
                    questions[p].text.clone(),
                    questions[n].text.clone(),
                )
            })
            .collect();
        let model = train_projection(&triplets, backend, config)?;
        let centroids = build_centroids(questions, &model, backend, taxonomy)?;
        Ok(Receptionist {
            model,
            centroids,
            tau,
        })
    }

    pub fn classify(&self, query: &str, backend: &dyn EmbeddingBackend) -> Result<DomainLabel> {
        let x = backend::embed_one(backend, query)?;
        classify_vector(&x.0, &self.model, &self.centroids, self.tau)
    }
}

pub fn classify_vector(
    embedding: &[f64],
    model: &ProjectionModel,
    centroids: &DomainCentroids,
    tau: f64,
) -> Result<DomainLabel> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Usage(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(centroids.nearest(&model.project(embedding)?, tau))
}

const SAMPLE_QUESTIONS: &str = include_str!("../fixtures/questions.jsonl");

/// Bundled labeled questions used when no receptionist has been trained.
pub fn sample_questions() -> Vec<LabeledQuestion> {
    parse_corpus(SAMPLE_QUESTIONS, Path::new("questions.jsonl")).expect("bundled questions parse")
}
