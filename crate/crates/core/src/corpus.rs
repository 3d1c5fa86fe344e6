//! Corpus records, line-delimited ingestion, and single-turn to multi-turn
//! conversion of Q&A records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astseg::SubtaskPlan;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("subtask plan is empty")]
    EmptyPlan,
    #[error("record `{0}` does not hold a single question/answer pair")]
    NotSingleTurn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Textbook,
    Code,
    Education,
    Guidance,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Textbook,
        Category::Code,
        Category::Education,
        Category::Guidance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Textbook => "textbook",
            Category::Code => "code",
            Category::Education => "education",
            Category::Guidance => "guidance",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "textbook" => Ok(Category::Textbook),
            "code" => Ok(Category::Code),
            "education" => Ok(Category::Education),
            "guidance" => Ok(Category::Guidance),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    #[default]
    En,
    Zh,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// One training text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
    pub category: Category,
    #[serde(default)]
    pub lang: Lang,
    #[serde(default)]
    pub turns: Vec<Turn>,
}

impl CorpusRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, category: Category) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            category,
            lang: Lang::En,
            turns: Vec::new(),
        }
    }

    /// Checks the per-record invariants (id uniqueness is a dataset concern).
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: &str| CorpusError::Invalid {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.turns.is_empty() && self.text.trim().is_empty() {
            return Err(invalid("record has neither text nor turns"));
        }
        if self.category == Category::Guidance {
            if self.turns.len() < 2 {
                return Err(invalid("guidance record needs at least two turns"));
            }
            if !roles_alternate(&self.turns) {
                return Err(invalid("guidance turns must alternate starting with user"));
            }
        }
        Ok(())
    }

    /// The text the model trains on: the raw text, or the rendered dialogue.
    pub fn training_text(&self) -> String {
        if self.turns.is_empty() {
            return self.text.clone();
        }
        let mut out = String::new();
        for turn in &self.turns {
            let tag = match turn.role {
                Role::User => "U: ",
                Role::Assistant => "A: ",
            };
            out.push_str(tag);
            out.push_str(&turn.content);
            out.push('\n');
        }
        out
    }

    /// Text used for embedding: the dialogue content if present, else the text.
    pub fn embedding_text(&self) -> String {
        if self.turns.is_empty() {
            self.text.clone()
        } else {
            self.turns
                .iter()
                .map(|t| t.content.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

fn roles_alternate(turns: &[Turn]) -> bool {
    turns.iter().enumerate().all(|(i, t)| {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        t.role == expected
    })
}

/// Ordered collection of records with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<CorpusRecord>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self, CorpusError> {
        let mut ds = Self::new();
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, record: CorpusRecord) -> Result<(), CorpusError> {
        record.validate()?;
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records whose category is in `categories`, order preserved.
    pub fn filter_categories(&self, categories: &[Category]) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| categories.contains(&r.category))
                .cloned()
                .collect(),
        }
    }

    /// Concatenates two datasets; ids must stay unique.
    pub fn extend(&mut self, other: Dataset) -> Result<(), CorpusError> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn into_records(self) -> Vec<CorpusRecord> {
        self.records
    }
}

/// On-disk line shape. Every field optional so errors can name what is missing.
#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    category: Option<String>,
    lang: Option<Lang>,
    turns: Option<Vec<Turn>>,
}

/// Parses line-delimited records. `category` overrides the per-line field;
/// `None` takes the category from each line.
pub fn parse_corpus(input: &str, category: Option<Category>) -> Result<Dataset, CorpusError> {
    parse_lines(input.lines().map(|l| Ok(l.to_string())), category)
}

/// Loads a corpus file, tagging every record with `category`.
pub fn load_corpus(path: &Path, category: Category) -> Result<Dataset, CorpusError> {
    load_with(path, Some(category))
}

/// Loads a corpus file, taking each record's category from the line itself.
pub fn load_corpus_mixed(path: &Path) -> Result<Dataset, CorpusError> {
    load_with(path, None)
}

fn load_with(path: &Path, category: Option<Category>) -> Result<Dataset, CorpusError> {
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = fs::File::open(path).map_err(io)?;
    let path_str = path.display().to_string();
    parse_lines(
        BufReader::new(file).lines().map(|l| {
            l.map_err(|source| CorpusError::Io { path: path_str.clone(), source })
        }),
        category,
    )
}

fn parse_lines<I>(lines: I, category: Option<Category>) -> Result<Dataset, CorpusError>
where
    I: Iterator<Item = Result<String, CorpusError>>,
{
    let mut ds = Dataset::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed { line: line_no, message };
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let id = raw.id.ok_or_else(|| malformed("missing `id`".into()))?;
        let text = raw.text.unwrap_or_default();
        let turns = raw.turns.unwrap_or_default();
        if text.trim().is_empty() && turns.is_empty() {
            return Err(malformed(format!("record `{id}` has neither `text` nor `turns`")));
        }
        let category = match (category, raw.category) {
            (Some(c), _) => c,
            (None, Some(c)) => c.parse().map_err(malformed)?,
            (None, None) => return Err(malformed("missing `category`".into())),
        };
        let record = CorpusRecord { id, text, category, lang: raw.lang.unwrap_or_default(), turns };
        record
            .validate()
            .map_err(|e| malformed(e.to_string()))?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        ds.records.push(record);
    }
    Ok(ds)
}

/// Reply template for the i-th guided assistant turn.
pub fn guided_step_text(index: usize, description: &str) -> String {
    format!("Step {index}: {description} — now try this part yourself")
}

/// User follow-up placed between guided assistant turns.
pub const CONTINUE_PROMPT: &str = "I finished that part. What is the next step?";

/// Rewrites a single Q&A record as a guidance dialogue with one assistant
/// turn per subtask.
pub fn split_to_multiturn(
    record: &CorpusRecord,
    plan: &SubtaskPlan,
) -> Result<CorpusRecord, CorpusError> {
    if plan.is_empty() {
        return Err(CorpusError::EmptyPlan);
    }
    let question = match record.turns.as_slice() {
        [] => record.text.clone(),
        [q, a] if q.role == Role::User && a.role == Role::Assistant => q.content.clone(),
        [q] if q.role == Role::User => q.content.clone(),
        _ => return Err(CorpusError::NotSingleTurn(record.id.clone())),
    };
    if question.trim().is_empty() {
        return Err(CorpusError::NotSingleTurn(record.id.clone()));
    }
    let mut turns = Vec::with_capacity(plan.len() * 2);
    for (i, sub) in plan.subtasks().iter().enumerate() {
        turns.push(Turn::user(if i == 0 { question.clone() } else { CONTINUE_PROMPT.to_string() }));
        turns.push(Turn::assistant(guided_step_text(sub.index, &sub.description)));
    }
    let out = CorpusRecord {
        id: format!("{}-mt", record.id),
        text: question,
        category: Category::Guidance,
        lang: record.lang,
        turns,
    };
    out.validate()?;
    Ok(out)
}

/// Category to fine-tuning phase table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub table: BTreeMap<Category, u8>,
}

impl Default for PhaseMap {
    fn default() -> Self {
        let table = BTreeMap::from([
            (Category::Textbook, 1),
            (Category::Code, 1),
            (Category::Education, 2),
            (Category::Guidance, 3),
        ]);
        Self { table }
    }
}

impl PhaseMap {
    pub fn phase_of(&self, c: Category) -> Option<u8> {
        self.table.get(&c).copied()
    }

    pub fn categories_for(&self, phase: u8) -> Vec<Category> {
        self.table
            .iter()
            .filter(|(_, &p)| p == phase)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Every category mapped, and every phase 1..=3 hit.
    pub fn is_surjective(&self) -> bool {
        Category::ALL.iter().all(|c| self.table.contains_key(c))
            && (1..=3).all(|p| self.table.values().any(|&v| v == p))
            && self.table.values().all(|&v| (1..=3).contains(&v))
    }
}
