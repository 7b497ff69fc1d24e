//! Task datasets: loading, validation, sampling and persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fraction_count, SeededRng};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: input is empty")]
    EmptyInput { line: usize },
    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateIdInMemory(String),
    #[error("line {line}: record {id:?} has no output but split {split} requires one")]
    MissingOutput {
        line: usize,
        id: String,
        split: Split,
    },
    #[error("example {0:?} has no output but the split requires one")]
    MissingOutputInMemory(String),
    #[error("fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("task {0:?} is not a classification task")]
    NotClassification(String),
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Example {
    pub fn labeled(id: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            output: Some(output.into()),
        }
    }

    pub fn unlabeled(id: impl Into<String>, input: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Unlabeled,
}

impl Split {
    pub fn requires_output(self) -> bool {
        !matches!(self, Split::Unlabeled)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generation,
}

/// One named segment of a structured input, e.g. `[CONTEXT]` or `[DATA]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSegment {
    pub name: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Prompt prefix placed before the exemplars.
    pub description: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_template: Option<Vec<FieldSegment>>,
}

impl TaskSpec {
    pub fn classification(task_id: &str, description: &str, labels: &[&str]) -> Self {
        Self {
            task_id: task_id.to_string(),
            description: description.to_string(),
            kind: TaskKind::Classification,
            label_set: Some(labels.iter().map(|l| l.to_string()).collect()),
            field_template: None,
        }
    }

    pub fn generation(task_id: &str, description: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            description: description.to_string(),
            kind: TaskKind::Generation,
            label_set: None,
            field_template: None,
        }
    }

    pub fn with_field_template(mut self, segments: &[(&str, &str)]) -> Self {
        self.field_template = Some(
            segments
                .iter()
                .map(|(name, tag)| FieldSegment {
                    name: name.to_string(),
                    tag: tag.to_string(),
                })
                .collect(),
        );
        self
    }

    pub fn is_classification(&self) -> bool {
        self.kind == TaskKind::Classification
    }

    pub fn labels(&self) -> &[String] {
        self.label_set.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.task_id.trim().is_empty() {
            return Err(CorpusError::InvalidTask("task_id is empty".into()));
        }
        match (self.kind, &self.label_set) {
            (TaskKind::Classification, None) => {
                return Err(CorpusError::InvalidTask(
                    "classification task needs a label_set".into(),
                ))
            }
            (TaskKind::Classification, Some(l)) if l.is_empty() => {
                return Err(CorpusError::InvalidTask("label_set is empty".into()))
            }
            (TaskKind::Generation, Some(_)) => {
                return Err(CorpusError::InvalidTask(
                    "label_set is only allowed on classification tasks".into(),
                ))
            }
            _ => {}
        }
        if let Some(labels) = &self.label_set {
            let mut seen = HashSet::new();
            for l in labels {
                if !seen.insert(l.as_str()) {
                    return Err(CorpusError::InvalidTask(format!("label {l:?} listed twice")));
                }
            }
        }
        if let Some(template) = &self.field_template {
            let mut seen = HashSet::new();
            for seg in template {
                if seg.tag.is_empty() {
                    return Err(CorpusError::InvalidTask(format!(
                        "field {:?} has an empty tag",
                        seg.name
                    )));
                }
                if !seen.insert(seg.tag.as_str()) {
                    return Err(CorpusError::InvalidTask(format!(
                        "field tag {:?} is not distinct",
                        seg.tag
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let task: TaskSpec = serde_json::from_str(&text).map_err(|e| CorpusError::InvalidTask(e.to_string()))?;
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
    pub task_id: String,
    /// Number of examples whose id was assigned at ingest from the line index.
    pub assigned_ids: usize,
}

impl Dataset {
    /// Builds a dataset after checking id uniqueness and label presence.
    pub fn new(examples: Vec<Example>, split: Split, task_id: impl Into<String>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateIdInMemory(ex.id.clone()));
            }
            if split.requires_output() && ex.output.is_none() {
                return Err(CorpusError::MissingOutputInMemory(ex.id.clone()));
            }
        }
        Ok(Self {
            examples,
            split,
            task_id: task_id.into(),
            assigned_ids: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Same inputs and ids with outputs dropped, as an unlabeled pool.
    pub fn without_outputs(&self) -> Dataset {
        Dataset {
            examples: self
                .examples
                .iter()
                .map(|e| Example::unlabeled(e.id.clone(), e.input.clone()))
                .collect(),
            split: Split::Unlabeled,
            task_id: self.task_id.clone(),
            assigned_ids: self.assigned_ids,
        }
    }

    /// Examples whose id is not in `exclude`, order preserved.
    pub fn excluding(&self, exclude: &HashSet<&str>, split: Split) -> Dataset {
        Dataset {
            examples: self
                .examples
                .iter()
                .filter(|e| !exclude.contains(e.id.as_str()))
                .cloned()
                .collect(),
            split,
            task_id: self.task_id.clone(),
            assigned_ids: 0,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    input: String,
    #[serde(default)]
    output: Option<String>,
}

/// Loads a JSONL file, one `{"id", "input", "output"?}` record per line.
///
/// Blank lines are skipped but still counted for line numbers. Records
/// without an id get the zero-padded 1-based line number as id; the number
/// of such assignments is kept in [`Dataset::assigned_ids`].
pub fn load_jsonl(path: &Path, split: Split, task: &TaskSpec) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, split, task)
}

pub fn parse_jsonl(text: &str, split: Split, task: &TaskSpec) -> Result<Dataset, CorpusError> {
    let mut examples = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut assigned_ids = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.input.trim().is_empty() {
            return Err(CorpusError::EmptyInput { line: line_no });
        }
        let id = match raw.id {
            Some(id) => id,
            None => {
                assigned_ids += 1;
                format!("{line_no:08}")
            }
        };
        if let Some(&first) = first_line.get(&id) {
            return Err(CorpusError::DuplicateId {
                id,
                first,
                second: line_no,
            });
        }
        if split.requires_output() && raw.output.is_none() {
            return Err(CorpusError::MissingOutput {
                line: line_no,
                id,
                split,
            });
        }
        first_line.insert(id.clone(), line_no);
        examples.push(Example {
            id,
            input: raw.input,
            output: raw.output,
        });
    }
    if assigned_ids > 0 {
        log::info!("assigned line-index ids to {assigned_ids} records");
    }
    Ok(Dataset {
        examples,
        split,
        task_id: task.task_id.clone(),
        assigned_ids,
    })
}

/// Serializes examples as JSONL text, one record per line.
pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<(), CorpusError> {
    write_text(path, &to_jsonl(&ds.examples))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Uniform sample of `round(fraction * N)` examples without replacement.
/// Selected examples keep their relative order.
pub fn sample_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, CorpusError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CorpusError::FractionOutOfRange(fraction));
    }
    let k = fraction_count(fraction, ds.len());
    let picked = SeededRng::new(seed).choose_sorted(ds.len(), k);
    Ok(Dataset {
        examples: picked.into_iter().map(|i| ds.examples[i].clone()).collect(),
        split: ds.split,
        task_id: ds.task_id.clone(),
        assigned_ids: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelHistogram {
    pub counts: BTreeMap<String, usize>,
    /// Labeled outputs that are not in the task's label set.
    pub out_of_set: usize,
}

/// Counts each output label. Examples without an output are not counted.
pub fn label_histogram(ds: &Dataset, task: &TaskSpec) -> Result<LabelHistogram, CorpusError> {
    if !task.is_classification() {
        return Err(CorpusError::NotClassification(task.task_id.clone()));
    }
    let mut counts: BTreeMap<String, usize> = task.labels().iter().map(|l| (l.clone(), 0)).collect();
    let mut out_of_set = 0;
    for out in ds.examples.iter().filter_map(|e| e.output.as_deref()) {
        match counts.get_mut(out) {
            Some(c) => *c += 1,
            None => out_of_set += 1,
        }
    }
    Ok(LabelHistogram { counts, out_of_set })
}
