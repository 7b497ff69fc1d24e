//! Tagged few-shot prompts for the teacher, and parsing of its completions.
//!
//! Prompt grammar (whitespace is fixed, prompts must be bit-exact):
//!
//! ```text
//! <description>\n
//! [INPUT] <x_1>\n[OUTPUT] <y_1>\n
//! ...
//! [INPUT] <target input>\n[OUTPUT]      (annotate)
//! [INPUT]                               (generate)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Example, TaskSpec};
use crate::rng::{sub_seed, SeededRng};

pub const INPUT_TAG: &str = "[INPUT]";
pub const OUTPUT_TAG: &str = "[OUTPUT]";

pub const DEFAULT_EXEMPLARS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Annotate,
    Generate,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Annotate => "annotate",
            Mode::Generate => "generate",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("exemplar {0:?} has no output")]
    UnlabeledExemplar(String),
    #[error("annotate prompts need a target example")]
    MissingTarget,
    #[error("generate prompts take no target example")]
    UnexpectedTarget,
    #[error("target input is empty")]
    EmptyTarget,
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
    #[error("exemplar policy asks for {k} exemplars but only {available} are available")]
    NotEnoughExemplars { k: usize, available: usize },
    #[error("fixed exemplar id {0:?} not found in the exemplar source")]
    UnknownExemplar(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selection", rename_all = "kebab-case")]
pub enum ExemplarSelection {
    SeededUniform,
    FixedList { ids: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPolicy {
    pub k: usize,
    #[serde(flatten)]
    pub selection: ExemplarSelection,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExemplarPolicy {
    fn default() -> Self {
        Self {
            k: DEFAULT_EXEMPLARS,
            selection: ExemplarSelection::SeededUniform,
            seed: 0,
        }
    }
}

impl ExemplarPolicy {
    /// Exemplars for one job. Seeded-uniform selection is re-drawn per job
    /// from `(seed, job_index)`; a fixed list is the same for every job.
    pub fn select<'a>(&self, source: &'a [Example], job_index: u64) -> Result<Vec<&'a Example>, PromptError> {
        match &self.selection {
            ExemplarSelection::SeededUniform => {
                if self.k > source.len() {
                    return Err(PromptError::NotEnoughExemplars {
                        k: self.k,
                        available: source.len(),
                    });
                }
                let mut rng = SeededRng::new(sub_seed(self.seed, "exemplars", job_index));
                Ok(rng
                    .choose_indices(source.len(), self.k)
                    .into_iter()
                    .map(|i| &source[i])
                    .collect())
            }
            ExemplarSelection::FixedList { ids } => ids
                .iter()
                .take(self.k)
                .map(|id| {
                    source
                        .iter()
                        .find(|e| &e.id == id)
                        .ok_or_else(|| PromptError::UnknownExemplar(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
                .and_then(|v| {
                    if v.len() < self.k {
                        Err(PromptError::NotEnoughExemplars {
                            k: self.k,
                            available: v.len(),
                        })
                    } else {
                        Ok(v)
                    }
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub mode: Mode,
    pub exemplar_ids: Vec<String>,
    pub prompt_hash: String,
}

/// SHA-256 of the prompt text, lowercase hex.
pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn contains_tag_literal(text: &str) -> bool {
    text.contains(INPUT_TAG) || text.contains(OUTPUT_TAG)
}

pub fn render_prompt(
    task: &TaskSpec,
    exemplars: &[&Example],
    mode: Mode,
    target: Option<&Example>,
) -> Result<RenderedPrompt, PromptError> {
    let mut text = String::with_capacity(task.description.len() + 64 * (exemplars.len() + 1));
    text.push_str(&task.description);
    text.push('\n');
    for ex in exemplars {
        let output = ex
            .output
            .as_deref()
            .ok_or_else(|| PromptError::UnlabeledExemplar(ex.id.clone()))?;
        text.push_str(INPUT_TAG);
        text.push(' ');
        text.push_str(&ex.input);
        text.push('\n');
        text.push_str(OUTPUT_TAG);
        text.push(' ');
        text.push_str(output);
        text.push('\n');
    }
    match (mode, target) {
        (Mode::Annotate, None) => return Err(PromptError::MissingTarget),
        (Mode::Annotate, Some(t)) => {
            if t.input.trim().is_empty() {
                return Err(PromptError::EmptyTarget);
            }
            text.push_str(INPUT_TAG);
            text.push(' ');
            text.push_str(&t.input);
            text.push('\n');
            text.push_str(OUTPUT_TAG);
        }
        (Mode::Generate, Some(_)) => return Err(PromptError::UnexpectedTarget),
        (Mode::Generate, None) => text.push_str(INPUT_TAG),
    }
    Ok(RenderedPrompt {
        prompt_hash: prompt_hash(&text),
        exemplar_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
        mode,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub input: Option<String>,
    pub output: String,
}

fn before_tag<'a>(text: &'a str, tag: &str) -> &'a str {
    match text.find(tag) {
        Some(i) => &text[..i],
        None => text,
    }
}

/// Parses the teacher's continuation of a prompt.
///
/// Annotate: everything before the first `[INPUT]` is the label.
/// Generate: text before the first `[OUTPUT]` is the input, text after it
/// (up to the next `[INPUT]`) is the output.
pub fn parse_completion(raw: &str, mode: Mode) -> Result<ParsedCompletion, PromptError> {
    match mode {
        Mode::Annotate => {
            let output = before_tag(raw, INPUT_TAG).trim();
            if output.is_empty() {
                return Err(PromptError::MalformedCompletion("empty output".into()));
            }
            Ok(ParsedCompletion {
                input: None,
                output: output.to_string(),
            })
        }
        Mode::Generate => {
            let Some(pos) = raw.find(OUTPUT_TAG) else {
                return Err(PromptError::MalformedCompletion(format!("no {OUTPUT_TAG} tag")));
            };
            let input = raw[..pos].trim();
            let output = before_tag(&raw[pos + OUTPUT_TAG.len()..], INPUT_TAG).trim();
            if output.is_empty() {
                return Err(PromptError::MalformedCompletion("empty output".into()));
            }
            Ok(ParsedCompletion {
                input: Some(input.to_string()),
                output: output.to_string(),
            })
        }
    }
}
