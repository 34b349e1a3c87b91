//! Legal precedent corpus and exact cosine retrieval.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{self, EmbeddingBackend};
use crate::error::{Error, Result, Warning};
use crate::model::OTHERS_ID;
use crate::tolc::{CaseRetriever, CaseSnippet};
use crate::vector;

/// Characters of the body embedded alongside the title.
pub const EMBED_BODY_CHARS: usize = 2000;
const EMBED_BATCH: usize = 64;
const SNIPPET_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub title: String,
    #[serde(default)]
    pub domain_id: Option<u8>,
    pub body: String,
    #[serde(default)]
    pub source: String,
}

impl Case {
    fn embedding_text(&self) -> String {
        let body: String = self.body.chars().take(EMBED_BODY_CHARS).collect();
        format!("{}\n{}", self.title, body)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseBank {
    cases: IndexMap<String, Case>,
    warnings: Vec<Warning>,
}

impl CaseBank {
    /// Reads a JSONL corpus. A repeated `case_id` replaces the earlier record
    /// in place and records a warning.
    pub fn ingest(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw, path)
    }

    pub fn parse(raw: &str, path: &Path) -> Result<Self> {
        let mut bank = CaseBank::default();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let case: Case = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if case.case_id.trim().is_empty() {
                return Err(bad("case_id is empty".into()));
            }
            if case.body.trim().is_empty() {
                return Err(bad("body is empty".into()));
            }
            if let Some(d) = case.domain_id {
                if !(1..=OTHERS_ID).contains(&d) {
                    return Err(bad(format!("domain_id {d} outside 1..=16")));
                }
            }
            let id = case.case_id.clone();
            if bank.cases.insert(id.clone(), case).is_some() {
                tracing::warn!(case_id = %id, line = line_no, "duplicate case id, keeping the later record");
                bank.warnings.push(Warning::DuplicateCase {
                    case_id: id,
                    line: line_no,
                });
            }
        }
        Ok(bank)
    }

    pub fn from_cases(cases: impl IntoIterator<Item = Case>) -> Self {
        let mut bank = CaseBank::default();
        for c in cases {
            bank.cases.insert(c.case_id.clone(), c);
        }
        bank
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
    pub fn get(&self, case_id: &str) -> Option<&Case> {
        self.cases.get(case_id)
    }
    pub fn cases(&self) -> impl Iterator<Item = &Case> {
        self.cases.values()
    }
    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub case_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    pub dimension: usize,
    pub backend_tag: String,
    pub entries: Vec<IndexEntry>,
}

/// Embeds title plus the first [`EMBED_BODY_CHARS`] characters of each body.
pub fn build_index(bank: &CaseBank, embedder: &dyn EmbeddingBackend) -> Result<VectorIndex> {
    if bank.is_empty() {
        return Err(Error::Usage("cannot index an empty case bank".into()));
    }
    let cases: Vec<&Case> = bank.cases().collect();
    let mut entries = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|c| c.embedding_text()).collect();
        let vectors = backend::embed(embedder, &texts)?.vectors;
        for (case, v) in chunk.iter().zip(vectors) {
            let unit = vector::normalized(&v.0).ok_or_else(|| {
                Error::Protocol(format!("zero embedding for case {}", case.case_id))
            })?;
            entries.push(IndexEntry {
                case_id: case.case_id.clone(),
                vector: unit,
            });
        }
    }
    let dimension = entries[0].vector.len();
    if entries.iter().any(|e| e.vector.len() != dimension) {
        return Err(Error::Protocol("case embeddings have inconsistent dimensions".into()));
    }
    Ok(VectorIndex {
        dimension,
        backend_tag: embedder.tag(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub case_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<Hit>,
    pub warnings: Vec<Warning>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top `k` entries by cosine, descending, ties by `case_id` ascending.
    /// A `k` beyond the index size returns everything with a warning.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Retrieval> {
        if k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Usage("cannot retrieve from an empty index".into()));
        }
        if query.len() != self.dimension {
            return Err(Error::Shape(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dimension
            )));
        }
        let mut warnings = Vec::new();
        if k > self.len() {
            warnings.push(Warning::ClampedK {
                requested: k,
                available: self.len(),
            });
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|e| Hit {
                case_id: e.case_id.clone(),
                score: vector::cosine(query, &e.vector),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.case_id.cmp(&b.case_id))
        });
        hits.truncate(k);
        Ok(Retrieval { hits, warnings })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

pub fn retrieve(
    index: &VectorIndex,
    query: &str,
    k: usize,
    embedder: &dyn EmbeddingBackend,
) -> Result<Retrieval> {
    if index.is_empty() {
        return Err(Error::Usage("cannot retrieve from an empty index".into()));
    }
    let q = backend::embed_one(embedder, query)?;
    index.search(&q.0, k)
}

/// A bank with its index and the embedder that built it.
#[derive(Clone)]
pub struct CaseLibrary {
    bank: Arc<CaseBank>,
    index: Arc<VectorIndex>,
    embedder: Arc<dyn EmbeddingBackend>,
}

impl CaseLibrary {
    pub fn build(bank: CaseBank, embedder: Arc<dyn EmbeddingBackend>) -> Result<Self> {
        let index = build_index(&bank, embedder.as_ref())?;
        Ok(CaseLibrary {
            bank: Arc::new(bank),
            index: Arc::new(index),
            embedder,
        })
    }

    /// Pairs a bank with a previously built index, which must come from the same embedder.
    pub fn with_index(bank: CaseBank, index: VectorIndex, embedder: Arc<dyn EmbeddingBackend>) -> Result<Self> {
        if index.backend_tag != embedder.tag() {
            return Err(Error::Config(format!(
                "index was built with {}, current embedder is {}",
                index.backend_tag,
                embedder.tag()
            )));
        }
        if let Some(e) = index.entries.iter().find(|e| bank.get(&e.case_id).is_none()) {
            return Err(Error::Config(format!("index entry {} is not in the bank", e.case_id)));
        }
        Ok(CaseLibrary {
            bank: Arc::new(bank),
            index: Arc::new(index),
            embedder,
        })
    }

    pub fn bank(&self) -> &CaseBank {
        &self.bank
    }
    pub fn index(&self) -> &VectorIndex {
        &self.index
    }
}

impl CaseRetriever for CaseLibrary {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<CaseSnippet>> {
        let found = retrieve(&self.index, query, k, self.embedder.as_ref())?;
        Ok(found
            .hits
            .into_iter()
            .filter_map(|h| self.bank.get(&h.case_id))
            .map(|c| CaseSnippet {
                case_id: c.case_id.clone(),
                title: c.title.clone(),
                excerpt: c.body.chars().take(SNIPPET_CHARS).collect(),
            })
            .collect())
    }
}

const SAMPLE_CASES: &str = include_str!("../fixtures/cases/sample_cases.jsonl");

/// Small bundled corpus used when no case bank has been ingested.
pub fn sample_bank() -> CaseBank {
    CaseBank::parse(SAMPLE_CASES, Path::new("sample_cases.jsonl")).expect("bundled cases parse")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockEmbedder;

    fn line(id: &str, title: &str) -> String {
        serde_json::json!({"case_id": id, "title": title, "domain_id": 1, "body": "b", "source": "s"})
            .to_string()
    }

    fn parse(raw: &str) -> Result<CaseBank> {
        CaseBank::parse(raw, Path::new("cases.jsonl"))
    }

    #[test]
    fn three_lines_three_cases_and_empty_file_is_empty() {
        let raw = [line("a", "x"), line("b", "x"), line("c", "x")].join("\n");
        assert_eq!(parse(&raw).unwrap().len(), 3);
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_keeps_the_later_record() {
        let raw = [
            line("a", "first"),
            line("d", "one"),
            line("b", "x"),
            line("c", "x"),
            line("d", "two"),
        ]
        .join("\n");
        let bank = parse(&raw).unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.get("d").unwrap().title, "two");
        assert_eq!(
            bank.warnings(),
            &[Warning::DuplicateCase {
                case_id: "d".into(),
                line: 5
            }]
        );
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let raw = format!("{}\nnot json\n", line("a", "x"));
        assert!(matches!(parse(&raw), Err(Error::Parse { line: 2, .. })));
        let raw = r#"{"case_id":"a","title":"t","body":"  ","source":""}"#;
        assert!(matches!(parse(raw), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            CaseBank::ingest(Path::new("/nonexistent/cases.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    fn index(vectors: &[(&str, Vec<f64>)]) -> VectorIndex {
        VectorIndex {
            dimension: vectors[0].1.len(),
            backend_tag: "t".into(),
            entries: vectors
                .iter()
                .map(|(id, v)| IndexEntry {
                    case_id: id.to_string(),
                    vector: vector::normalized(v).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn orthogonal_entries() {
        let idx = index(&[("e1", vec![1.0, 0.0]), ("e2", vec![0.0, 1.0])]);
        let r = idx.search(&[1.0, 0.0], 1).unwrap();
        assert_eq!(r.hits, vec![Hit { case_id: "e1".into(), score: 1.0 }]);
    }

    #[test]
    fn clamped_k_returns_all_with_warning() {
        let idx = index(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![1.0, 1.0]),
            ("d", vec![-1.0, 0.0]),
        ]);
        let r = idx.search(&[1.0, 0.0], 10).unwrap();
        assert_eq!(r.hits.len(), 4);
        assert_eq!(r.warnings, vec![Warning::ClampedK { requested: 10, available: 4 }]);
        assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_case_id() {
        let idx = index(&[("z", vec![1.0, 0.0]), ("a", vec![1.0, 0.0]), ("m", vec![0.0, 1.0])]);
        let ids: Vec<_> = idx.search(&[1.0, 0.0], 2).unwrap().hits.into_iter().map(|h| h.case_id).collect();
        assert_eq!(ids, vec!["a", "z"]);
    }

    #[test]
    fn empty_index_and_zero_k_are_usage_errors() {
        let empty = VectorIndex { dimension: 2, backend_tag: "t".into(), entries: vec![] };
        assert!(matches!(empty.search(&[1.0, 0.0], 1), Err(Error::Usage(_))));
        let idx = index(&[("a", vec![1.0, 0.0])]);
        assert!(matches!(idx.search(&[1.0, 0.0], 0), Err(Error::Usage(_))));
        assert!(matches!(build_index(&CaseBank::default(), &MockEmbedder::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn mock_index_is_unit_norm_and_deterministic() {
        let bank = sample_bank();
        let e = MockEmbedder::default();
        let a = build_index(&bank, &e).unwrap();
        assert_eq!(a, build_index(&bank, &e).unwrap());
        assert_eq!(a.len(), bank.len());
        assert!(a.entries.iter().all(|x| (vector::l2_norm(&x.vector) - 1.0).abs() < 1e-9));
    }

    #[test]
    fn index_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        let idx = build_index(&sample_bank(), &MockEmbedder::default()).unwrap();
        idx.save(&path).unwrap();
        assert_eq!(VectorIndex::load(&path).unwrap(), idx);
    }
}
