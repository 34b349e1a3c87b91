//! Validation and statistics for dialogue fine-tuning corpora.
//!
//! Corpora are JSONL, one [`DialogueRecord`] per line. A record passes when
//! it has at least two turns, alternates user/assistant starting with the
//! user, has no empty turn, and (for `multi_turn`) has at least four turns.
//! Statistics are only produced for corpora in which every record passes,
//! so the validator and the counter never disagree.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LegalTermExplanation,
    LegalJudgment,
    JudicialInterpretation,
    ScenarioQa,
    SingleTurn,
    JudicialExam,
    MultiTurn,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::LegalTermExplanation,
        Category::LegalJudgment,
        Category::JudicialInterpretation,
        Category::ScenarioQa,
        Category::SingleTurn,
        Category::JudicialExam,
        Category::MultiTurn,
    ];
}

/// Published record counts of the six knowledge-intensive categories.
pub const KINLED_REFERENCE: [(Category, usize); 6] = [
    (Category::LegalTermExplanation, 3125),
    (Category::LegalJudgment, 533),
    (Category::JudicialInterpretation, 4382),
    (Category::ScenarioQa, 3026),
    (Category::SingleTurn, 995),
    (Category::JudicialExam, 985),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: DialogueRole,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub category: Category,
    pub turns: Vec<DialogueTurn>,
    #[serde(default)]
    pub source: String,
}

/// Reasons a record fails; empty when it passes.
pub fn check_record(record: &DialogueRecord) -> Vec<String> {
    let mut reasons = Vec::new();
    if record.turns.len() < 2 {
        reasons.push("fewer than 2 turns".to_string());
    }
    let alternates = record.turns.iter().enumerate().all(|(i, t)| {
        t.role
            == if i % 2 == 0 {
                DialogueRole::User
            } else {
                DialogueRole::Assistant
            }
    });
    if !alternates {
        reasons.push("role order".to_string());
    }
    if record.category == Category::MultiTurn && record.turns.len() < 4 {
        reasons.push("multi_turn requires ≥ 4 turns".to_string());
    }
    if record.turns.iter().any(|t| t.text.trim().is_empty()) {
        reasons.push("empty turn text".to_string());
    }
    reasons
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineResult {
    pub line: usize,
    pub ok: bool,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileValidation {
    pub path: PathBuf,
    pub lines: Vec<LineResult>,
    pub passed: usize,
    pub failed: usize,
}

impl FileValidation {
    pub fn is_ok(&self) -> bool {
        self.failed == 0
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, std::result::Result<DialogueRecord, String>)>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| format!("parse: {e}"))))
        .collect())
}

/// Per-line verdicts for one corpus file. Only an unreadable file is an error.
pub fn validate_dialogue_file(path: &Path) -> Result<FileValidation> {
    let lines: Vec<LineResult> = read_records(path)?
        .into_iter()
        .map(|(line, parsed)| {
            let reasons = match parsed {
                Ok(record) => check_record(&record),
                Err(e) => vec![e],
            };
            LineResult {
                line,
                ok: reasons.is_empty(),
                reasons,
            }
        })
        .collect();
    let passed = lines.iter().filter(|l| l.ok).count();
    Ok(FileValidation {
        path: path.to_path_buf(),
        failed: lines.len() - passed,
        passed,
        lines,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub total_turns: usize,
    pub max_turns: usize,
}

impl CategoryStats {
    pub fn mean_turns(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_turns as f64 / self.count as f64
        }
    }

    fn add(&mut self, turns: usize) {
        self.count += 1;
        self.total_turns += turns;
        self.max_turns = self.max_turns.max(turns);
    }

    fn merge(&mut self, other: &CategoryStats) {
        self.count += other.count;
        self.total_turns += other.total_turns;
        self.max_turns = self.max_turns.max(other.max_turns);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub mean_turns: f64,
    pub max_turns: usize,
    /// Every category is present, with zero counts where absent.
    pub categories: BTreeMap<Category, CategoryStats>,
}

impl CorpusStats {
    fn from_categories(categories: BTreeMap<Category, CategoryStats>) -> Self {
        let mut all = CategoryStats::default();
        for c in categories.values() {
            all.merge(c);
        }
        CorpusStats {
            total: all.count,
            mean_turns: all.mean_turns(),
            max_turns: all.max_turns,
            categories,
        }
    }

    pub fn count(&self, category: Category) -> usize {
        self.categories.get(&category).map_or(0, |c| c.count)
    }

    /// Categories whose counts differ from the published reference, as `(category, expected, found)`.
    pub fn reference_mismatches(&self) -> Vec<(Category, usize, usize)> {
        KINLED_REFERENCE
            .iter()
            .filter(|(c, n)| self.count(*c) != *n)
            .map(|&(c, n)| (c, n, self.count(c)))
            .collect()
    }
}

fn empty_categories() -> BTreeMap<Category, CategoryStats> {
    Category::ALL.iter().map(|&c| (c, CategoryStats::default())).collect()
}

/// Counts and turn statistics over several files. Refused, with every
/// failing line listed, unless all records validate.
pub fn corpus_stats(paths: &[PathBuf]) -> Result<CorpusStats> {
    let per_file: Vec<(FileValidation, BTreeMap<Category, CategoryStats>)> = paths
        .par_iter()
        .map(|p| {
            let validation = validate_dialogue_file(p)?;
            let mut cats = empty_categories();
            if validation.is_ok() {
                for (_, rec) in read_records(p)? {
                    let rec = rec.expect("validated");
                    cats.get_mut(&rec.category).expect("all categories").add(rec.turns.len());
                }
            }
            Ok((validation, cats))
        })
        .collect::<Result<_>>()?;

    let failures: Vec<String> = per_file
        .iter()
        .flat_map(|(v, _)| {
            v.lines
                .iter()
                .filter(|l| !l.ok)
                .map(move |l| format!("{}:{}: {}", v.path.display(), l.line, l.reasons.join(", ")))
        })
        .collect();
    if !failures.is_empty() {
        return Err(Error::Usage(format!(
            "statistics refused, {} invalid records: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    let mut categories = empty_categories();
    for (_, cats) in &per_file {
        for (c, s) in cats {
            categories.get_mut(c).expect("all categories").merge(s);
        }
    }
    Ok(CorpusStats::from_categories(categories))
}

/// Manifest mapping corpus files to the category their records must carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<PathBuf, Category>,
}

impl Manifest {
    /// Loads a manifest; relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Manifest {
            files: m.files.into_iter().map(|(p, c)| (base.join(p), c)).collect(),
        })
    }

    /// Records whose category differs from the manifest, as `path:line` strings.
    pub fn category_mismatches(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (path, expected) in &self.files {
            for (line, rec) in read_records(path)? {
                if let Ok(rec) = rec {
                    if rec.category != *expected {
                        out.push(format!("{}:{line}", path.display()));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.keys().cloned().collect()
    }
}
