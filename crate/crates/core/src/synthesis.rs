//! Annotation and generation jobs against a teacher.
//!
//! Work is organised in waves. Within a wave every pending job runs its
//! resample loop concurrently against a snapshot of the already accepted
//! inputs; the wave's candidates are then resolved sequentially in job order,
//! and jobs that lost a dedup race go back to the pending set with their next
//! attempt number. Each request depends only on `(seed, job_index, attempt)`,
//! so the accepted records are identical for any degree of parallelism.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{default_max_tokens, default_temperature, BackendError, CompletionRequest, Teacher};
use crate::corpus::{write_text, Dataset, Example, TaskSpec};
use crate::prompting::{
    contains_tag_literal, parse_completion, render_prompt, ExemplarPolicy, Mode, PromptError, INPUT_TAG,
};
use crate::rng::{sub_seed, SeededRng};

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_for_dedup(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_punctuation(text: &str) -> &str {
    text.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Maps a teacher output onto the task's label set: exact match after
/// normalization first, then with surrounding punctuation removed
/// (`"Yes."` → `"yes"`). Returns the label as spelled in the label set.
pub fn canonical_label<'a>(output: &str, labels: &'a [String]) -> Option<&'a str> {
    let norm = normalize_for_dedup(output);
    if let Some(l) = labels.iter().find(|l| normalize_for_dedup(l) == norm) {
        return Some(l);
    }
    let bare = strip_punctuation(&norm);
    labels
        .iter()
        .find(|l| strip_punctuation(&normalize_for_dedup(l)) == bare)
        .map(String::as_str)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Annotate,
    Generate,
    Combine,
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanMode::Annotate => "annotate",
            PlanMode::Generate => "generate",
            PlanMode::Combine => "combine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeCounts {
    pub annotate: usize,
    pub generate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub mode: PlanMode,
    /// Requested record counts. Only the count for the plan's mode is used,
    /// except in combine mode where both are.
    pub counts: ModeCounts,
    /// Overrides the per-mode default temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub exemplar_policy: ExemplarPolicy,
    #[serde(default = "default_resamples")]
    pub max_resamples: u32,
    #[serde(default)]
    pub seed: u64,
    /// Identity of the subset that supplied exemplars (and the pool).
    #[serde(default)]
    pub source: String,
}

fn default_resamples() -> u32 {
    2
}

impl SynthesisPlan {
    fn base(mode: PlanMode, counts: ModeCounts) -> Self {
        Self {
            mode,
            counts,
            temperature: None,
            max_tokens: None,
            exemplar_policy: ExemplarPolicy::default(),
            max_resamples: default_resamples(),
            seed: 0,
            source: String::new(),
        }
    }

    pub fn annotate(count: usize) -> Self {
        Self::base(PlanMode::Annotate, ModeCounts { annotate: count, generate: 0 })
    }

    pub fn generate(count: usize) -> Self {
        Self::base(PlanMode::Generate, ModeCounts { annotate: 0, generate: count })
    }

    pub fn combine(annotate: usize, generate: usize) -> Self {
        Self::base(PlanMode::Combine, ModeCounts { annotate, generate })
    }

    pub fn temperature_for(&self, mode: Mode) -> f64 {
        self.temperature.unwrap_or_else(|| default_temperature(mode))
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err(SynthesisError::InvalidPlan(format!("temperature {t} outside [0, 2]")));
            }
        }
        if self.max_tokens == Some(0) {
            return Err(SynthesisError::InvalidPlan("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub input: String,
    pub output: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub teacher: String,
    pub temperature: f64,
    pub prompt_hash: String,
    pub job_index: u64,
    pub seed: u64,
    /// Exemplars embedded in the prompt, in prompt order.
    pub exemplar_ids: Vec<String>,
}

impl SyntheticRecord {
    pub fn to_example(&self) -> Example {
        Example::labeled(
            format!("syn-{}-{:06}", self.mode, self.job_index),
            self.input.clone(),
            self.output.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub job_index: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub attempts: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageTotals {
    pub requests: u64,
    pub transport_attempts: u64,
    pub prompt_chars: u64,
    pub completion_chars: u64,
}

impl UsageTotals {
    fn add(&mut self, other: &UsageTotals) {
        self.requests += other.requests;
        self.transport_attempts += other.transport_attempts;
        self.prompt_chars += other.prompt_chars;
        self.completion_chars += other.completion_chars;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub mode: Mode,
    pub requested: usize,
    pub produced: usize,
}

impl Shortfall {
    pub fn missing(&self) -> usize {
        self.requested - self.produced
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub records: Vec<SyntheticRecord>,
    pub dropped: Vec<DroppedItem>,
    pub shortfalls: Vec<Shortfall>,
    pub usage: UsageTotals,
}

impl SynthesisOutput {
    fn append(&mut self, other: SynthesisOutput) {
        self.records.extend(other.records);
        self.dropped.extend(other.dropped);
        self.shortfalls.extend(other.shortfalls);
        self.usage.add(&other.usage);
    }

    pub fn count(&self, mode: Mode) -> usize {
        self.records.iter().filter(|r| r.mode == mode).count()
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("annotation pool is empty")]
    EmptyPool,
    #[error("requested {requested} annotations but the pool has {available} items")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("plan mode is {found}, expected {expected}")]
    WrongMode { expected: PlanMode, found: PlanMode },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{source} ({completed} jobs completed; checkpoint: {checkpoint:?})")]
    Backend {
        #[source]
        source: BackendError,
        completed: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Predicate over accepted records, e.g. a factuality filter. Records for
/// which it returns `false` are resampled like any other invalid completion.
pub type RecordFilter = Arc<dyn Fn(&SyntheticRecord) -> bool + Send + Sync>;

#[derive(Clone, Default)]
pub struct SynthesisOptions {
    pub filter: Option<RecordFilter>,
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    /// Completed job indexes, ascending.
    completed: Vec<u64>,
    records: Vec<SyntheticRecord>,
    dropped: Vec<DroppedItem>,
    /// Jobs still to run, with the attempt they resume at.
    pending: BTreeMap<u64, u32>,
    usage: UsageTotals,
}

fn load_checkpoint(path: &Path) -> Result<Option<Checkpoint>, SynthesisError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| SynthesisError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map(Some).map_err(|e| SynthesisError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), SynthesisError> {
    let text = serde_json::to_string_pretty(cp).expect("checkpoint serializes");
    write_text(path, &text).map_err(|e| SynthesisError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

struct JobSpec<'a> {
    job_index: u64,
    target: Option<&'a Example>,
    exemplars: Vec<&'a Example>,
}

struct Candidate {
    record: SyntheticRecord,
    norm_input: String,
    attempt: u32,
}

enum JobResult {
    Candidate(Candidate),
    Dropped(DroppedItem),
    Aborted(BackendError),
}

struct Runner<'a> {
    plan: &'a SynthesisPlan,
    task: &'a TaskSpec,
    teacher: &'a Teacher,
    mode: Mode,
    temperature: f64,
    max_tokens: u32,
    source_norms: HashSet<String>,
    filter: Option<RecordFilter>,
}

impl Runner<'_> {
    fn validate(&self, input: &str, output: &str) -> Result<String, String> {
        if input.trim().is_empty() {
            return Err("empty input".into());
        }
        if contains_tag_literal(input) || contains_tag_literal(output) {
            return Err("tag literal in field".into());
        }
        if self.task.is_classification() {
            return canonical_label(output, self.task.labels())
                .map(str::to_string)
                .ok_or_else(|| format!("output {output:?} not in label set"));
        }
        Ok(output.to_string())
    }

    /// Runs attempts `start..=max_resamples` for one job.
    fn run_job(&self, job: &JobSpec<'_>, start: u32, accepted: &HashSet<String>, usage: &mut UsageTotals) -> JobResult {
        let prompt = match render_prompt(self.task, &job.exemplars, self.mode, job.target) {
            Ok(p) => p,
            Err(e) => {
                return JobResult::Dropped(self.dropped(job, start, e.to_string()));
            }
        };
        let mut reason = String::from("no attempts left");
        let mut attempts = start;
        for attempt in start..=self.plan.max_resamples {
            attempts = attempt + 1;
            let req = CompletionRequest {
                prompt: prompt.text.clone(),
                temperature: self.temperature,
                max_tokens: self.max_tokens,
                stop: vec![INPUT_TAG.to_string()],
                request_id: format!("{}-{:06}-{}", self.mode, job.job_index, attempt),
                seed: sub_seed(self.plan.seed, &format!("{}/request/{}", self.mode, job.job_index), attempt as u64),
                job_index: job.job_index,
                attempt,
            };
            let completion = match self.teacher.complete(&req) {
                Ok(c) => c,
                Err(e @ (BackendError::Rejected { .. } | BackendError::LookupMiss(_))) => {
                    return JobResult::Dropped(self.dropped(job, attempts, e.to_string()));
                }
                Err(e) => return JobResult::Aborted(e),
            };
            usage.requests += 1;
            usage.transport_attempts += completion.usage.attempts as u64;
            usage.prompt_chars += completion.usage.prompt_chars as u64;
            usage.completion_chars += completion.usage.completion_chars as u64;

            let parsed = match parse_completion(&completion.text, self.mode) {
                Ok(p) => p,
                Err(e) => {
                    reason = e.to_string();
                    continue;
                }
            };
            let input = match (self.mode, job.target) {
                (Mode::Annotate, Some(t)) => t.input.clone(),
                _ => parsed.input.unwrap_or_default(),
            };
            let output = match self.validate(&input, &parsed.output) {
                Ok(o) => o,
                Err(r) => {
                    reason = r;
                    continue;
                }
            };
            let norm_input = normalize_for_dedup(&input);
            if self.mode == Mode::Generate {
                if self.source_norms.contains(&norm_input) {
                    reason = "input duplicates the exemplar source".into();
                    continue;
                }
                if accepted.contains(&norm_input) {
                    reason = "input duplicates an earlier synthetic record".into();
                    continue;
                }
            }
            let record = SyntheticRecord {
                input,
                output,
                mode: self.mode,
                source_id: job.target.map(|t| t.id.clone()),
                teacher: self.teacher.model_name().to_string(),
                temperature: self.temperature,
                prompt_hash: prompt.prompt_hash.clone(),
                job_index: job.job_index,
                seed: self.plan.seed,
                exemplar_ids: prompt.exemplar_ids.clone(),
            };
            if let Some(filter) = &self.filter {
                if !filter(&record) {
                    reason = "rejected by record filter".into();
                    continue;
                }
            }
            return JobResult::Candidate(Candidate {
                record,
                norm_input,
                attempt,
            });
        }
        JobResult::Dropped(self.dropped(job, attempts, reason))
    }

    fn dropped(&self, job: &JobSpec<'_>, attempts: u32, reason: String) -> DroppedItem {
        let item = DroppedItem {
            job_index: job.job_index,
            mode: self.mode,
            source_id: job.target.map(|t| t.id.clone()),
            attempts,
            reason,
        };
        log::warn!(
            "dropped {} job {} after {} attempts: {}",
            item.mode,
            item.job_index,
            item.attempts,
            item.reason
        );
        item
    }
}

/// Runs `work` over `items` on up to `workers` threads. Stops handing out
/// new items once `abort` is set; unstarted items yield `None`.
fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    abort: &AtomicBool,
    work: impl Fn(&T) -> R + Sync,
) -> Vec<Option<R>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results poisoned")
}

fn fingerprint(plan: &SynthesisPlan, mode: Mode, task: &TaskSpec, jobs: &[JobSpec<'_>]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(plan).expect("plan serializes"));
    h.update(mode.to_string());
    h.update(serde_json::to_vec(task).expect("task serializes"));
    for j in jobs {
        h.update(j.job_index.to_le_bytes());
        if let Some(t) = j.target {
            h.update(t.id.as_bytes());
            h.update([0]);
        }
        for e in &j.exemplars {
            h.update(e.id.as_bytes());
            h.update([1]);
        }
    }
    hex::encode(h.finalize())
}

fn usable_exemplars(source: &Dataset) -> Vec<Example> {
    let mut out = Vec::with_capacity(source.len());
    for e in &source.examples {
        match &e.output {
            Some(o) if !contains_tag_literal(&e.input) && !contains_tag_literal(o) => out.push(e.clone()),
            Some(_) => log::warn!("exemplar {} contains a tag literal; excluded", e.id),
            None => log::warn!("exemplar {} has no output; excluded", e.id),
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn execute(
    plan: &SynthesisPlan,
    mode: Mode,
    task: &TaskSpec,
    teacher: &Teacher,
    jobs: Vec<JobSpec<'_>>,
    pre_dropped: Vec<DroppedItem>,
    source: &[Example],
    requested: usize,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    let dedup = mode == Mode::Generate;
    let runner = Runner {
        plan,
        task,
        teacher,
        mode,
        temperature: plan.temperature_for(mode),
        max_tokens: plan.max_tokens.unwrap_or_else(|| default_max_tokens(task.kind)),
        source_norms: if dedup {
            source.iter().map(|e| normalize_for_dedup(&e.input)).collect()
        } else {
            HashSet::new()
        },
        filter: options.filter.clone(),
    };
    let fp = fingerprint(plan, mode, task, &jobs);
    let cp_path = options.checkpoint.as_deref();

    let mut state = match cp_path.filter(|_| options.resume).map(load_checkpoint).transpose()?.flatten() {
        Some(cp) if cp.fingerprint == fp => {
            log::info!("resuming {mode}: {} jobs already complete", cp.completed.len());
            cp
        }
        Some(_) => {
            return Err(SynthesisError::Checkpoint {
                path: cp_path.expect("resume implies a path").to_path_buf(),
                message: "checkpoint belongs to a different plan or input".into(),
            })
        }
        None => {
            let mut cp = Checkpoint {
                fingerprint: fp,
                ..Default::default()
            };
            for d in pre_dropped {
                cp.completed.push(d.job_index);
                cp.dropped.push(d);
            }
            cp.pending = jobs
                .iter()
                .filter(|j| !cp.completed.contains(&j.job_index))
                .map(|j| (j.job_index, 0))
                .collect();
            cp
        }
    };
    let mut accepted: HashSet<String> = state.records.iter().map(|r| normalize_for_dedup(&r.input)).collect();
    let by_index: BTreeMap<u64, &JobSpec<'_>> = jobs.iter().map(|j| (j.job_index, j)).collect();

    while !state.pending.is_empty() {
        let wave: Vec<(u64, u32)> = state.pending.iter().map(|(&j, &a)| (j, a)).collect();
        let snapshot = accepted.clone();
        let abort = AtomicBool::new(false);
        let results = run_parallel(&wave, teacher.parallelism(), &abort, |&(job, start)| {
            let mut usage = UsageTotals::default();
            let r = runner.run_job(by_index[&job], start, &snapshot, &mut usage);
            if matches!(r, JobResult::Aborted(_)) {
                abort.store(true, Ordering::SeqCst);
            }
            (r, usage)
        });

        let failure = results.iter().flatten().find_map(|(r, _)| match r {
            JobResult::Aborted(e) => Some(e.clone()),
            _ => None,
        });
        if let Some(err) = failure {
            // Annotation jobs are independent, so finished ones are kept.
            // Generation waves are all-or-nothing to keep dedup order exact.
            if !dedup {
                for (&(job, _), res) in wave.iter().zip(results) {
                    if let Some((r, usage)) = res {
                        match r {
                            JobResult::Candidate(c) => state.records.push(c.record),
                            JobResult::Dropped(d) => state.dropped.push(d),
                            JobResult::Aborted(_) => continue,
                        }
                        state.usage.add(&usage);
                        state.completed.push(job);
                        state.pending.remove(&job);
                    }
                }
                state.completed.sort_unstable();
            }
            if let Some(p) = cp_path {
                save_checkpoint(p, &state)?;
            }
            return Err(SynthesisError::Backend {
                source: err,
                completed: state.completed.len(),
                checkpoint: cp_path.map(Path::to_path_buf),
            });
        }

        let mut next_pending = BTreeMap::new();
        for (&(job, _), res) in wave.iter().zip(results) {
            let (r, usage) = res.expect("every job ran when nothing aborted");
            state.usage.add(&usage);
            match r {
                JobResult::Candidate(c) => {
                    if dedup && !accepted.insert(c.norm_input.clone()) {
                        if c.attempt < plan.max_resamples {
                            next_pending.insert(job, c.attempt + 1);
                        } else {
                            state.completed.push(job);
                            state.dropped.push(runner.dropped(
                                by_index[&job],
                                c.attempt + 1,
                                "input duplicates an earlier synthetic record".into(),
                            ));
                        }
                        continue;
                    }
                    state.completed.push(job);
                    state.records.push(c.record);
                }
                JobResult::Dropped(d) => {
                    state.completed.push(job);
                    state.dropped.push(d);
                }
                JobResult::Aborted(_) => unreachable!("aborts handled above"),
            }
        }
        state.completed.sort_unstable();
        state.pending = next_pending;
        if let Some(p) = cp_path {
            save_checkpoint(p, &state)?;
        }
    }

    state.records.sort_by_key(|r| r.job_index);
    state.dropped.sort_by_key(|d| d.job_index);
    let produced = state.records.len();
    let shortfalls = if produced < requested {
        log::warn!("{mode}: produced {produced} of {requested} requested records");
        vec![Shortfall {
            mode,
            requested,
            produced,
        }]
    } else {
        Vec::new()
    };
    Ok(SynthesisOutput {
        records: state.records,
        dropped: state.dropped,
        shortfalls,
        usage: state.usage,
    })
}

fn annotate_jobs<'a>(
    plan: &SynthesisPlan,
    pool: &'a Dataset,
    exemplars: &'a [Example],
    count: usize,
    offset: u64,
) -> Result<(Vec<JobSpec<'a>>, Vec<DroppedItem>), SynthesisError> {
    if pool.is_empty() {
        return Err(SynthesisError::EmptyPool);
    }
    if count > pool.len() {
        return Err(SynthesisError::PoolTooSmall {
            requested: count,
            available: pool.len(),
        });
    }
    let picks = SeededRng::new(sub_seed(plan.seed, "annotate/pool", 0)).choose_indices(pool.len(), count);
    let mut jobs = Vec::with_capacity(count);
    let mut dropped = Vec::new();
    for (i, idx) in picks.into_iter().enumerate() {
        let job_index = offset + i as u64;
        let target = &pool.examples[idx];
        if contains_tag_literal(&target.input) {
            log::warn!("pool item {} contains a tag literal; dropped", target.id);
            dropped.push(DroppedItem {
                job_index,
                mode: Mode::Annotate,
                source_id: Some(target.id.clone()),
                attempts: 0,
                reason: "input contains a tag literal".into(),
            });
            continue;
        }
        jobs.push(JobSpec {
            job_index,
            target: Some(target),
            exemplars: plan.exemplar_policy.select(exemplars, job_index)?,
        });
    }
    Ok((jobs, dropped))
}

fn generate_jobs<'a>(
    plan: &SynthesisPlan,
    exemplars: &'a [Example],
    count: usize,
    offset: u64,
) -> Result<Vec<JobSpec<'a>>, SynthesisError> {
    (0..count as u64)
        .map(|i| {
            let job_index = offset + i;
            Ok(JobSpec {
                job_index,
                target: None,
                exemplars: plan.exemplar_policy.select(exemplars, job_index)?,
            })
        })
        .collect()
}

fn with_checkpoint_suffix(options: &SynthesisOptions, suffix: &str) -> SynthesisOptions {
    let mut o = options.clone();
    o.checkpoint = options.checkpoint.as_ref().map(|p| {
        let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(suffix);
        p.with_file_name(name)
    });
    o
}

fn expect_mode(plan: &SynthesisPlan, expected: PlanMode) -> Result<(), SynthesisError> {
    plan.validate()?;
    if plan.mode != expected {
        return Err(SynthesisError::WrongMode {
            expected,
            found: plan.mode,
        });
    }
    Ok(())
}

/// Labels `plan.counts.annotate` pool items selected without replacement.
pub fn run_annotation(
    plan: &SynthesisPlan,
    pool: &Dataset,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    expect_mode(plan, PlanMode::Annotate)?;
    annotate_stage(plan, pool, exemplar_source, task, teacher, options, 0)
}

fn annotate_stage(
    plan: &SynthesisPlan,
    pool: &Dataset,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
    offset: u64,
) -> Result<SynthesisOutput, SynthesisError> {
    let exemplars = usable_exemplars(exemplar_source);
    let count = plan.counts.annotate;
    let (jobs, dropped) = annotate_jobs(plan, pool, &exemplars, count, offset)?;
    execute(plan, Mode::Annotate, task, teacher, jobs, dropped, &exemplars, count, options)
}

/// Generates `plan.counts.generate` new input-output pairs.
pub fn run_generation(
    plan: &SynthesisPlan,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    expect_mode(plan, PlanMode::Generate)?;
    generate_stage(plan, exemplar_source, task, teacher, options, 0)
}

fn generate_stage(
    plan: &SynthesisPlan,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
    offset: u64,
) -> Result<SynthesisOutput, SynthesisError> {
    let count = plan.counts.generate;
    let exemplars = usable_exemplars(exemplar_source);
    if count > 0 && plan.exemplar_policy.k > exemplars.len() {
        return Err(PromptError::NotEnoughExemplars {
            k: plan.exemplar_policy.k,
            available: exemplars.len(),
        }
        .into());
    }
    let jobs = generate_jobs(plan, &exemplars, count, offset)?;
    // Dedup covers every input of the source, including excluded exemplars.
    let all_inputs: Vec<Example> = exemplar_source.examples.clone();
    execute(plan, Mode::Generate, task, teacher, jobs, Vec::new(), &all_inputs, count, options)
}

/// Annotation records followed by generation records. Generation job
/// indexes continue after the annotation ones.
pub fn run_combine(
    plan: &SynthesisPlan,
    pool: &Dataset,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    expect_mode(plan, PlanMode::Combine)?;
    let mut out = SynthesisOutput::default();
    if plan.counts.annotate > 0 {
        out.append(annotate_stage(
            plan,
            pool,
            exemplar_source,
            task,
            teacher,
            &with_checkpoint_suffix(options, ".annotate"),
            0,
        )?);
    }
    if plan.counts.generate > 0 {
        out.append(generate_stage(
            plan,
            exemplar_source,
            task,
            teacher,
            &with_checkpoint_suffix(options, ".generate"),
            plan.counts.annotate as u64,
        )?);
    }
    Ok(out)
}

/// Dispatches on `plan.mode`.
pub fn run_plan(
    plan: &SynthesisPlan,
    pool: &Dataset,
    exemplar_source: &Dataset,
    task: &TaskSpec,
    teacher: &Teacher,
    options: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    match plan.mode {
        PlanMode::Annotate => run_annotation(plan, pool, exemplar_source, task, teacher, options),
        PlanMode::Generate => run_generation(plan, exemplar_source, task, teacher, options),
        PlanMode::Combine => run_combine(plan, pool, exemplar_source, task, teacher, options),
    }
}

/// JSONL text of synthetic records, one per line.
pub fn records_to_jsonl(records: &[SyntheticRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<SyntheticRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
