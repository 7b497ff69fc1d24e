//! Manifest-driven runs: sample → synthesize → mix → export → train/evaluate,
//! with every artifact digested into a ledger, and comparison tables over
//! ledgers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendKind, Teacher};
use crate::corpus::{load_jsonl, sample_fraction, save_jsonl, write_text, Dataset, Split, TaskKind, TaskSpec};
use crate::metrics::MetricsReport;
use crate::mixing::{build_augmented, percent_label, AugmentedDataset, Composition, MixPlan};
use crate::prompting::{ExemplarPolicy, ExemplarSelection, Mode, DEFAULT_EXEMPLARS};
use crate::rng::{fraction_count, sub_seed, RNG_NAME};
use crate::synthesis::{
    records_to_jsonl, run_plan, DroppedItem, ModeCounts, PlanMode, Shortfall, SynthesisError, SynthesisOptions,
    SynthesisPlan, UsageTotals,
};
use crate::trainer::{
    baseline_student, export_training_set, invoke_trainer, metrics_json, MetricsKind, StudentResult, TrainerContract,
    TrainerError,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const LEDGER_FILE: &str = "ledger.json";
const CHECKPOINT_FILE: &str = "synthesis.checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Validation,
    Backend,
    Trainer,
    Io,
    Other,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: String,
        kind: FailureKind,
        message: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("report: {0}")]
    Report(String),
}

impl PipelineError {
    /// Process exit code: 2 validation, 3 backend, 4 trainer, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { kind, .. } => match kind {
                FailureKind::Validation => 2,
                FailureKind::Backend => 3,
                FailureKind::Trainer => 4,
                FailureKind::Io | FailureKind::Other => 1,
            },
            PipelineError::Report(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Annotation pool. Defaults to the training inputs outside the sampled subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSpec {
    pub k: usize,
    #[serde(flatten)]
    pub selection: ExemplarSelection,
}

impl Default for ExemplarSpec {
    fn default() -> Self {
        Self {
            k: DEFAULT_EXEMPLARS,
            selection: ExemplarSelection::SeededUniform,
        }
    }
}

fn default_resamples() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub mode: PlanMode,
    /// Defaults to round(synthetic_fraction · N), split evenly in combine mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotate_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub exemplars: ExemplarSpec,
    #[serde(default = "default_resamples")]
    pub max_resamples: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub original_fraction: f64,
    pub synthetic_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    /// Path to the task spec JSON.
    pub task: PathBuf,
    pub data: DataPaths,
    pub backend: BackendConfig,
    pub plan: PlanSpec,
    pub mix: MixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerContract>,
    pub output_dir: PathBuf,
    /// Keep original/synthetic markers in exported training files.
    #[serde(default)]
    pub export_markers: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub dry_run: bool,
    pub seed_override: Option<u64>,
}

/// The kind of synthetic data in a row, as labelled in comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowType {
    #[serde(rename = "-")]
    None,
    #[serde(rename = "X,Y")]
    Generation,
    #[serde(rename = "Y|X")]
    Annotation,
    #[serde(rename = "Y|X; X,Y")]
    Combined,
}

impl RowType {
    pub fn label(self) -> &'static str {
        match self {
            RowType::None => "-",
            RowType::Generation => "X,Y",
            RowType::Annotation => "Y|X",
            RowType::Combined => "Y|X; X,Y",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub original: String,
    #[serde(rename = "type")]
    pub row_type: RowType,
    pub synthetic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub digest: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolInfo {
    pub source: String,
    pub digest: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub plan: SynthesisPlan,
    pub pool: Option<PoolInfo>,
    pub records: ModeCounts,
    pub dropped: Vec<DroppedItem>,
    pub shortfalls: Vec<Shortfall>,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dev: MetricsReport,
    pub test: MetricsReport,
    pub trainer_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherInfo {
    pub kind: BackendKind,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub schema_version: u32,
    pub tool_version: String,
    pub task_id: String,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub rng: String,
    pub sub_seeds: BTreeMap<String, u64>,
    pub manifest_digest: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub teacher: TeacherInfo,
    pub base_n: usize,
    pub row: RowKey,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<Composition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisSummary>,
    /// Artifact path (relative to the output directory) → SHA-256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalSummary>,
}

impl Ledger {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a run needs, loaded and checked before any side effect.
pub struct PreparedRun {
    pub manifest: RunManifest,
    pub manifest_digest: String,
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub unlabeled: Option<Dataset>,
    pub teacher: Teacher,
    pub inputs: BTreeMap<String, InputRecord>,
    pub seed: u64,
    pub plan: SynthesisPlan,
    pub mix: MixPlan,
    pub row: RowKey,
}

impl PreparedRun {
    pub fn sub_seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("sample".to_string(), sub_seed(self.seed, "sample", 0)),
            ("synthesis".to_string(), self.plan.seed),
            ("mix".to_string(), self.mix.seed),
        ])
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Validation(msg.into())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_input(
    base: &Path,
    rel: &Path,
    split: Split,
    task: &TaskSpec,
    inputs: &mut BTreeMap<String, InputRecord>,
) -> Result<Dataset, PipelineError> {
    let path = resolve(base, rel);
    if !path.is_file() {
        return Err(invalid(format!("{split} file {} does not exist", path.display())));
    }
    let bytes = std::fs::read(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let ds = load_jsonl(&path, split, task).map_err(|e| invalid(format!("{split} file {}: {e}", path.display())))?;
    inputs.insert(
        split.to_string(),
        InputRecord {
            path: rel.to_string_lossy().into_owned(),
            digest: sha256_hex(&bytes),
            examples: ds.len(),
        },
    );
    Ok(ds)
}

fn synthetic_label(plan: &SynthesisPlan, base_n: usize) -> String {
    match plan.mode {
        PlanMode::Annotate => percent_label(plan.counts.annotate, base_n),
        PlanMode::Generate => percent_label(plan.counts.generate, base_n),
        PlanMode::Combine if plan.counts.annotate == plan.counts.generate => {
            format!("{} each", percent_label(plan.counts.annotate, base_n))
        }
        PlanMode::Combine => format!(
            "{} + {}",
            percent_label(plan.counts.annotate, base_n),
            percent_label(plan.counts.generate, base_n)
        ),
    }
}

/// Parses and validates a manifest, loading every input it references.
pub fn prepare_run(manifest_path: &Path, options: &RunOptions) -> Result<PreparedRun, PipelineError> {
    let text = std::fs::read(manifest_path).map_err(|e| invalid(format!("{}: {e}", manifest_path.display())))?;
    let manifest: RunManifest = serde_json::from_slice(&text).map_err(|e| invalid(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(invalid(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let base_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let seed = options.seed_override.unwrap_or(manifest.seed);

    let task_path = resolve(&base_dir, &manifest.task);
    if !task_path.is_file() {
        return Err(invalid(format!("task file {} does not exist", task_path.display())));
    }
    let task = TaskSpec::load(&task_path).map_err(|e| invalid(format!("task: {e}")))?;

    let mut inputs = BTreeMap::new();
    let train = load_input(&base_dir, &manifest.data.train, Split::Train, &task, &mut inputs)?;
    let dev = load_input(&base_dir, &manifest.data.dev, Split::Dev, &task, &mut inputs)?;
    let test = load_input(&base_dir, &manifest.data.test, Split::Test, &task, &mut inputs)?;
    let unlabeled = match &manifest.data.unlabeled {
        Some(p) => Some(load_input(&base_dir, p, Split::Unlabeled, &task, &mut inputs)?),
        None => None,
    };

    let mix_spec = &manifest.mix;
    let mix = MixPlan {
        original_fraction: mix_spec.original_fraction,
        synthetic_fraction: mix_spec.synthetic_fraction,
        base_n: train.len(),
        seed: sub_seed(seed, "mix", 0),
        sample_original: false,
    };
    mix.validate().map_err(|e| invalid(e.to_string()))?;

    let n_s = mix.synthetic_count();
    let spec = &manifest.plan;
    let counts = match spec.mode {
        PlanMode::Annotate => ModeCounts {
            annotate: spec.annotate_count.unwrap_or(n_s),
            generate: 0,
        },
        PlanMode::Generate => ModeCounts {
            annotate: 0,
            generate: spec.generate_count.unwrap_or(n_s),
        },
        PlanMode::Combine => {
            let half = n_s.div_ceil(2);
            ModeCounts {
                annotate: spec.annotate_count.unwrap_or(half),
                generate: spec.generate_count.unwrap_or(half),
            }
        }
    };
    if counts.annotate + counts.generate < n_s {
        return Err(invalid(format!(
            "plan produces at most {} records but the mix needs {n_s}",
            counts.annotate + counts.generate
        )));
    }
    let synthesis_seed = sub_seed(seed, "synthesis", 0);
    let plan = SynthesisPlan {
        mode: spec.mode,
        counts,
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
        exemplar_policy: ExemplarPolicy {
            k: spec.exemplars.k,
            selection: spec.exemplars.selection.clone(),
            seed: synthesis_seed,
        },
        max_resamples: spec.max_resamples,
        seed: synthesis_seed,
        source: format!("train sample {}", percent_label(mix.original_count(), train.len())),
    };
    plan.validate().map_err(|e| invalid(e.to_string()))?;
    let n_o = mix.original_count();
    if counts.annotate + counts.generate > 0 && plan.exemplar_policy.k > n_o {
        return Err(invalid(format!(
            "exemplar k = {} exceeds the {n_o} sampled original examples",
            plan.exemplar_policy.k
        )));
    }
    if counts.annotate > 0 {
        let pool_size = unlabeled.as_ref().map_or(train.len() - n_o, Dataset::len);
        if counts.annotate > pool_size {
            return Err(invalid(format!(
                "{} annotations requested but the pool has {pool_size} items",
                counts.annotate
            )));
        }
    }

    if let Some(p) = &manifest.backend.lookup_path {
        let path = resolve(&base_dir, p);
        if !path.is_file() {
            return Err(invalid(format!("lookup table {} does not exist", path.display())));
        }
    }
    let teacher = Teacher::from_config(&manifest.backend, &base_dir).map_err(|e| invalid(e.to_string()))?;

    if let Some(contract) = &manifest.trainer {
        contract.validate().map_err(|e| invalid(e.to_string()))?;
        if contract.expected_metrics != MetricsKind::for_task(task.kind) {
            return Err(invalid("trainer expected_metrics does not match the task kind"));
        }
    }

    let row_type = if n_s == 0 {
        RowType::None
    } else {
        match plan.mode {
            PlanMode::Annotate => RowType::Annotation,
            PlanMode::Generate => RowType::Generation,
            PlanMode::Combine => RowType::Combined,
        }
    };
    let row = RowKey {
        original: percent_label(n_o, train.len()),
        row_type,
        synthetic: if n_s == 0 {
            percent_label(0, train.len())
        } else {
            synthetic_label(&plan, train.len())
        },
    };

    Ok(PreparedRun {
        output_dir: resolve(&base_dir, &manifest.output_dir),
        manifest_digest: sha256_hex(&text),
        manifest,
        base_dir,
        task,
        train,
        dev,
        test,
        unlabeled,
        teacher,
        inputs,
        seed,
        plan,
        mix,
        row,
    })
}

struct Stages {
    records: Vec<StageRecord>,
}

impl Stages {
    fn ok(&mut self, name: &str) {
        self.records.push(StageRecord {
            name: name.into(),
            status: "ok".into(),
            error: None,
        });
    }
}

fn stage_err(stage: &str, kind: FailureKind, message: impl ToString) -> PipelineError {
    PipelineError::Stage {
        stage: stage.into(),
        kind,
        message: message.to_string(),
        checkpoint: None,
    }
}

fn new_ledger(run: &PreparedRun) -> Ledger {
    Ledger {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        task_id: run.task.task_id.clone(),
        task_kind: run.task.kind,
        seed: run.seed,
        rng: RNG_NAME.into(),
        sub_seeds: run.sub_seeds(),
        manifest_digest: run.manifest_digest.clone(),
        inputs: run.inputs.clone(),
        teacher: TeacherInfo {
            kind: run.manifest.backend.kind,
            model_name: run.manifest.backend.model_name.clone(),
            endpoint: run.manifest.backend.endpoint.clone(),
        },
        base_n: run.train.len(),
        row: run.row.clone(),
        stages: Vec::new(),
        composition: None,
        synthesis: None,
        artifacts: BTreeMap::new(),
        metrics: None,
    }
}

fn write_artifact(run_dir: &Path, rel: &str, text: &str, ledger: &mut Ledger, stage: &str) -> Result<(), PipelineError> {
    let path = run_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| stage_err(stage, FailureKind::Io, e))?;
    }
    write_text(&path, text).map_err(|e| stage_err(stage, FailureKind::Io, e))?;
    ledger.artifacts.insert(rel.to_string(), sha256_hex(text.as_bytes()));
    Ok(())
}

fn digest_file(run_dir: &Path, rel: &str, ledger: &mut Ledger, stage: &str) -> Result<(), PipelineError> {
    let bytes = std::fs::read(run_dir.join(rel)).map_err(|e| stage_err(stage, FailureKind::Io, e))?;
    ledger.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
    Ok(())
}

fn write_ledger(dir: &Path, ledger: &Ledger) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(ledger).expect("ledger serializes") + "\n";
    write_text(&dir.join(LEDGER_FILE), &text).map_err(|e| stage_err("ledger", FailureKind::Io, e))
}

fn checkpoint_files(dir: &Path) -> Vec<PathBuf> {
    let base = dir.join(CHECKPOINT_FILE);
    let mut v = vec![base.clone()];
    for suffix in [".annotate", ".generate"] {
        let mut name = base.file_name().expect("file name").to_os_string();
        name.push(suffix);
        v.push(base.with_file_name(name));
    }
    v
}

/// Executes a validated run. Writes all artifacts and the ledger into the
/// output directory; on a stage failure the ledger records the failed stage.
pub fn execute_run(run: &PreparedRun, options: &RunOptions) -> Result<Ledger, PipelineError> {
    let out = &run.output_dir;
    let mut ledger = new_ledger(run);
    let result = execute_stages(run, options, &mut ledger);
    if let Err(PipelineError::Stage { stage, message, .. }) = &result {
        ledger.stages.push(StageRecord {
            name: stage.clone(),
            status: "failed".into(),
            error: Some(message.clone()),
        });
    }
    if std::fs::create_dir_all(out).is_ok() {
        write_ledger(out, &ledger)?;
    }
    result.map(|_| ledger)
}

fn execute_stages(run: &PreparedRun, options: &RunOptions, ledger: &mut Ledger) -> Result<(), PipelineError> {
    let out = &run.output_dir;
    std::fs::create_dir_all(out).map_err(|e| stage_err("sample", FailureKind::Io, e))?;
    let mut stages = Stages { records: Vec::new() };

    // sample
    let original = sample_fraction(&run.train, run.mix.original_fraction, sub_seed(run.seed, "sample", 0))
        .map_err(|e| stage_err("sample", FailureKind::Other, e))?;
    save_jsonl(&original, &out.join("original.jsonl")).map_err(|e| stage_err("sample", FailureKind::Io, e))?;
    digest_file(out, "original.jsonl", ledger, "sample")?;
    stages.ok("sample");
    ledger.stages = stages.records.clone();

    // synthesize
    let (pool, pool_info) = match &run.unlabeled {
        Some(u) => {
            let info = run.inputs.get("unlabeled").expect("recorded at load");
            (
                u.clone(),
                PoolInfo {
                    source: format!("unlabeled file {}", info.path),
                    digest: info.digest.clone(),
                    examples: u.len(),
                },
            )
        }
        None => {
            let taken = original.examples.iter().map(|e| e.id.as_str()).collect();
            let pool = run.train.excluding(&taken, Split::Unlabeled).without_outputs();
            let digest = sha256_hex(crate::corpus::to_jsonl(&pool.examples).as_bytes());
            let info = PoolInfo {
                source: "held-out training inputs".into(),
                digest,
                examples: pool.len(),
            };
            (pool, info)
        }
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    let synth_opts = SynthesisOptions {
        filter: None,
        checkpoint: Some(checkpoint.clone()),
        resume: options.resume,
    };
    let output = run_plan(&run.plan, &pool, &original, &run.task, &run.teacher, &synth_opts).map_err(|e| match e {
        SynthesisError::Backend { ref checkpoint, .. } => PipelineError::Stage {
            stage: "synthesize".into(),
            kind: FailureKind::Backend,
            message: e.to_string(),
            checkpoint: checkpoint.clone(),
        },
        other => stage_err("synthesize", FailureKind::Other, other),
    })?;
    for cp in checkpoint_files(out) {
        if cp.exists() {
            std::fs::remove_file(&cp).map_err(|e| stage_err("synthesize", FailureKind::Io, e))?;
        }
    }
    write_artifact(out, "synthetic.jsonl", &records_to_jsonl(&output.records), ledger, "synthesize")?;
    ledger.synthesis = Some(SynthesisSummary {
        plan: run.plan.clone(),
        pool: (run.plan.counts.annotate > 0).then_some(pool_info),
        records: ModeCounts {
            annotate: output.count(Mode::Annotate),
            generate: output.count(Mode::Generate),
        },
        dropped: output.dropped.clone(),
        shortfalls: output.shortfalls.clone(),
        usage: output.usage,
    });
    stages.ok("synthesize");
    ledger.stages = stages.records.clone();

    // mix
    let augmented: AugmentedDataset =
        build_augmented(&original, &output.records, &run.mix).map_err(|e| stage_err("mix", FailureKind::Other, e))?;
    augmented
        .save(&out.join("augmented.jsonl"), run.manifest.export_markers)
        .map_err(|e| stage_err("mix", FailureKind::Io, e))?;
    digest_file(out, "augmented.jsonl", ledger, "mix")?;
    digest_file(out, "augmented.provenance.json", ledger, "mix")?;
    ledger.composition = Some(augmented.composition);
    stages.ok("mix");
    ledger.stages = stages.records.clone();

    // export
    let export_dir = out.join("export");
    let files = export_training_set(
        &augmented,
        &run.dev,
        &run.test,
        &run.task,
        &export_dir,
        run.manifest.export_markers,
    )
    .map_err(|e| stage_err("export", FailureKind::Io, e))?;
    for (name, digest) in &files.digests {
        ledger.artifacts.insert(format!("export/{name}"), digest.clone());
    }
    stages.ok("export");
    ledger.stages = stages.records.clone();

    // train + evaluate
    let result: StudentResult = match &run.manifest.trainer {
        Some(contract) => {
            let r = invoke_trainer(contract, &files).map_err(|e| {
                let kind = match e {
                    TrainerError::InvalidContract(_) => FailureKind::Validation,
                    _ => FailureKind::Trainer,
                };
                stage_err("train", kind, e)
            })?;
            digest_file(out, "export/student/metrics.json", ledger, "train")?;
            stages.ok("train");
            r
        }
        None => {
            let train = augmented.to_dataset(&run.task.task_id);
            let eval = |ds: &Dataset| baseline_student(&train, ds, &run.task).map_err(|e| stage_err("evaluate", FailureKind::Trainer, e));
            StudentResult {
                dev_metrics: eval(&run.dev)?,
                test_metrics: eval(&run.test)?,
                wall_time: Default::default(),
                trainer_id: "baseline-nn".into(),
            }
        }
    };
    write_artifact(
        out,
        "metrics.json",
        &metrics_json(&result.dev_metrics, &result.test_metrics, &result.trainer_id),
        ledger,
        "evaluate",
    )?;
    ledger.metrics = Some(EvalSummary {
        dev: result.dev_metrics,
        test: result.test_metrics,
        trainer_id: result.trainer_id,
    });
    stages.ok("evaluate");
    ledger.stages = stages.records;
    Ok(())
}

/// Validates the manifest and, unless `dry_run`, executes it.
pub fn cmd_run(manifest_path: &Path, options: &RunOptions) -> Result<Ledger, PipelineError> {
    let run = prepare_run(manifest_path, options)?;
    if options.dry_run {
        let mut ledger = new_ledger(&run);
        ledger.stages = ["sample", "synthesize", "mix", "export", "evaluate"]
            .iter()
            .map(|s| StageRecord {
                name: s.to_string(),
                status: "planned".into(),
                error: None,
            })
            .collect();
        return Ok(ledger);
    }
    execute_run(&run, options)
}

fn original_sort_key(l: &Ledger) -> usize {
    l.composition
        .map(|c| c.original)
        .unwrap_or_else(|| fraction_count(0.0, l.base_n))
}

/// Comparison table over ledgers: one group per (task, original %), rows
/// ordered by type then synthetic amount, best value per column per group
/// marked with `*` (ties marked jointly).
pub fn cmd_report(ledgers: &[Ledger]) -> Result<String, PipelineError> {
    let first = ledgers
        .first()
        .ok_or_else(|| PipelineError::Report("no ledgers given".into()))?;
    if ledgers.iter().any(|l| l.task_kind != first.task_kind) {
        return Err(PipelineError::Report(
            "ledgers mix classification and generation tasks".into(),
        ));
    }
    let is_acc = first.task_kind == TaskKind::Classification;
    let metric_headers: Vec<&str> = if is_acc {
        vec!["Dev Acc", "Test Acc"]
    } else {
        vec!["Dev R-1", "Dev R-2", "Dev R-L", "Test R-1", "Test R-2", "Test R-L"]
    };

    let mut groups: BTreeMap<(String, usize, String), Vec<&Ledger>> = BTreeMap::new();
    for l in ledgers {
        groups
            .entry((l.task_id.clone(), original_sort_key(l), l.row.original.clone()))
            .or_default()
            .push(l);
    }

    let mut table: Vec<Vec<String>> = Vec::new();
    let mut group_breaks = Vec::new();
    for rows in groups.values_mut() {
        rows.sort_by_key(|l| (l.row.row_type, l.composition.map(|c| c.synthetic).unwrap_or(0)));
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|l| match &l.metrics {
                Some(m) => {
                    let mut v = m.dev.percent_columns();
                    v.extend(m.test.percent_columns());
                    v
                }
                None => vec!["n/a".to_string(); metric_headers.len()],
            })
            .collect();
        let best: Vec<Option<f64>> = (0..metric_headers.len())
            .map(|c| {
                cells
                    .iter()
                    .filter_map(|r| r.get(c).and_then(|v| v.parse::<f64>().ok()))
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            })
            .collect();
        for (l, row_cells) in rows.iter().zip(cells) {
            let mut line = vec![
                l.task_id.clone(),
                l.row.row_type.label().to_string(),
                l.row.original.clone(),
                l.row.synthetic.clone(),
            ];
            for (c, v) in row_cells.into_iter().enumerate() {
                let is_best = v.parse::<f64>().ok().is_some_and(|x| Some(x) == best[c]);
                line.push(if is_best { format!("{v}*") } else { v });
            }
            table.push(line);
        }
        group_breaks.push(table.len());
    }

    let mut headers = vec!["Dataset", "Type", "Original", "Synthetic"];
    headers.extend(metric_headers.iter());
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            table
                .iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(headers[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let render = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = String::new();
    let header_cells: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    writeln!(out, "{}", render(&header_cells)).expect("string write");
    writeln!(out, "{rule}").expect("string write");
    for (i, row) in table.iter().enumerate() {
        writeln!(out, "{}", render(row)).expect("string write");
        if group_breaks.contains(&(i + 1)) && i + 1 < table.len() {
            writeln!(out, "{rule}").expect("string write");
        }
    }
    Ok(out)
}
