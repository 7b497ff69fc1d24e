//! Deterministic teachers for tests and desk-scale runs.
//!
//! All three answer purely from the request, so identical requests always
//! produce identical completions regardless of call order or concurrency.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use super::{AttemptError, BackendConfig, BackendError, CompletionBackend, CompletionRequest};
use crate::corpus::{load_jsonl, Split, TaskSpec};
use crate::prompting::{INPUT_TAG, OUTPUT_TAG};

fn annotate_target(prompt: &str) -> Option<&str> {
    let body = prompt.strip_suffix(OUTPUT_TAG)?.strip_suffix('\n')?;
    let start = body.rfind(INPUT_TAG)? + INPUT_TAG.len();
    Some(body[start..].strip_prefix(' ').unwrap_or(&body[start..]))
}

/// Last complete exemplar block of a generate prompt, as `" x\n[OUTPUT] y"`.
fn last_exemplar_block(prompt: &str) -> Option<&str> {
    let body = prompt.strip_suffix(INPUT_TAG)?;
    let start = body.rfind(INPUT_TAG)? + INPUT_TAG.len();
    Some(body[start..].trim_end_matches('\n'))
}

fn is_annotate_prompt(prompt: &str) -> bool {
    prompt.ends_with(OUTPUT_TAG)
}

fn pause(ms: u64) {
    if ms > 0 {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

/// Echoes the prompt back: the target input for annotate prompts, the last
/// exemplar pair for generate prompts.
pub struct EchoBackend {
    delay_ms: u64,
}

impl EchoBackend {
    pub fn new(delay_ms: u64) -> Self {
        Self { delay_ms }
    }
}

impl CompletionBackend for EchoBackend {
    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError> {
        pause(self.delay_ms);
        let text = if is_annotate_prompt(&req.prompt) {
            annotate_target(&req.prompt)
        } else {
            last_exemplar_block(&req.prompt)
        };
        Ok(text.unwrap_or("").to_string())
    }
}

/// Answers annotate prompts from an input→output table; a miss is an error.
/// Generate prompts draw the entry at `seed % len` in key order.
pub struct LookupBackend {
    table: BTreeMap<String, String>,
    delay_ms: u64,
}

impl LookupBackend {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self { table, delay_ms: 0 }
    }

    pub fn from_config(config: &BackendConfig, base_dir: &Path) -> Result<Self, BackendError> {
        let mut table = config.lookup.clone().unwrap_or_default();
        if let Some(rel) = &config.lookup_path {
            let path = base_dir.join(rel);
            let task = TaskSpec::generation("lookup", "");
            let ds = load_jsonl(&path, Split::Unlabeled, &task)
                .map_err(|e| BackendError::Config(format!("lookup table: {e}")))?;
            for ex in ds.examples {
                if let Some(out) = ex.output {
                    table.insert(ex.input, out);
                }
            }
        }
        Ok(Self {
            table,
            delay_ms: config.mock_delay_ms,
        })
    }
}

impl CompletionBackend for LookupBackend {
    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError> {
        pause(self.delay_ms);
        if is_annotate_prompt(&req.prompt) {
            let key = annotate_target(&req.prompt).unwrap_or("");
            return match self.table.get(key) {
                Some(y) => Ok(format!(" {y}")),
                None => Err(AttemptError::Fatal(BackendError::LookupMiss(key.to_string()))),
            };
        }
        if self.table.is_empty() {
            return Err(AttemptError::Fatal(BackendError::LookupMiss(String::new())));
        }
        let idx = (req.seed % self.table.len() as u64) as usize;
        let (x, y) = self.table.iter().nth(idx).expect("index within table");
        Ok(format!(" {x}\n{OUTPUT_TAG} {y}"))
    }
}

/// Replays a fixed list of completions, entry `(job_index + attempt) % len`.
pub struct ScriptedBackend {
    script: Vec<String>,
    fail_jobs: Vec<u64>,
    delay_ms: u64,
}

impl ScriptedBackend {
    pub fn new(script: Vec<String>) -> Self {
        Self {
            script,
            fail_jobs: Vec::new(),
            delay_ms: 0,
        }
    }

    pub fn from_config(config: &BackendConfig) -> Self {
        Self {
            script: config.script.clone().unwrap_or_default(),
            fail_jobs: config.fail_jobs.clone(),
            delay_ms: config.mock_delay_ms,
        }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError> {
        pause(self.delay_ms);
        if self.fail_jobs.contains(&req.job_index) {
            return Err(AttemptError::Transient(format!("scripted failure for job {}", req.job_index)));
        }
        let idx = (req.job_index + req.attempt as u64) % self.script.len() as u64;
        Ok(self.script[idx as usize].clone())
    }
}
