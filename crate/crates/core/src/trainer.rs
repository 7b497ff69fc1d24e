//! Student side: export of training files, the subprocess trainer
//! contract, and a built-in nearest-neighbour baseline student.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_jsonl, to_jsonl, write_text, CorpusError, Dataset, Example, Split, TaskKind, TaskSpec};
use crate::metrics::{evaluate, tokenize, AccuracyReport, MetricsError, MetricsReport, RougeScore};
use crate::mixing::AugmentedDataset;

pub const TASK_CARD: &str = "task_card.json";
pub const METRICS_FILE: &str = "metrics.json";
/// Command name that runs [`baseline_student`] in-process instead of a subprocess.
pub const BUILTIN_BASELINE: &str = "builtin:baseline";
const PLACEHOLDERS: [&str; 4] = ["{train}", "{dev}", "{test}", "{out}"];

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("baseline student needs at least one training example")]
    EmptyTrain,
    #[error("invalid trainer contract: {0}")]
    InvalidContract(String),
    #[error("could not start trainer {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trainer exited with {status}: {stderr}")]
    TrainerFailed { status: String, stderr: String },
    #[error("trainer exceeded its {0:?} timeout")]
    TrainerTimeout(Duration),
    #[error("{path}: {message}")]
    MalformedMetrics { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsKind {
    Accuracy,
    Rouge,
}

impl MetricsKind {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => MetricsKind::Accuracy,
            TaskKind::Generation => MetricsKind::Rouge,
        }
    }
}

fn default_timeout_secs() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerContract {
    /// Executable followed by its argument template.
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    pub expected_metrics: MetricsKind,
}

impl TrainerContract {
    pub fn builtin_baseline(expected_metrics: MetricsKind) -> Self {
        Self {
            command: vec![
                BUILTIN_BASELINE.into(),
                "{train}".into(),
                "{dev}".into(),
                "{test}".into(),
                "{out}".into(),
            ],
            workdir: None,
            timeout_secs: default_timeout_secs(),
            expected_metrics,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let Some(program) = self.command.first() else {
            return Err(TrainerError::InvalidContract("command is empty".into()));
        };
        if program.is_empty() {
            return Err(TrainerError::InvalidContract("executable is empty".into()));
        }
        let joined = self.command[1..].join(" ");
        for p in PLACEHOLDERS {
            if !joined.contains(p) {
                return Err(TrainerError::InvalidContract(format!(
                    "argument template lacks placeholder {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_builtin(&self) -> bool {
        self.command.first().map(String::as_str) == Some(BUILTIN_BASELINE)
    }
}

/// Student fine-tuning defaults carried to trainer adapters in the task card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub student: String,
    pub optimizer: String,
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<String>,
    pub checkpoint_selection: String,
}

impl Hyperparameters {
    pub fn defaults_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => Self {
                student: "roberta-large".into(),
                optimizer: "adam".into(),
                epochs: 320,
                batch_size: 50,
                learning_rate: 1e-5,
                lr_schedule: None,
                checkpoint_selection: "best_validation_loss".into(),
            },
            TaskKind::Generation => Self {
                student: "bart-large".into(),
                optimizer: "adam".into(),
                epochs: 5,
                batch_size: 32,
                learning_rate: 5e-5,
                lr_schedule: Some("linear".into()),
                checkpoint_selection: "best_validation_loss".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCard {
    pub task: TaskSpec,
    pub label_set: Vec<String>,
    pub metrics: MetricsKind,
    pub hyperparameters: Hyperparameters,
    pub files: BTreeMap<String, String>,
}

impl TaskCard {
    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainerError::MalformedMetrics {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| TrainerError::MalformedMetrics {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Files written by [`export_training_set`]. Names are relative to `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub dir: PathBuf,
    pub train: String,
    pub dev: String,
    pub test: String,
    pub task_card: String,
    pub out: String,
    /// SHA-256 of each written file, keyed by file name.
    pub digests: BTreeMap<String, String>,
}

impl ExportManifest {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and the task card.
/// Output bytes depend only on the inputs.
pub fn export_training_set(
    augmented: &AugmentedDataset,
    dev: &Dataset,
    test: &Dataset,
    task: &TaskSpec,
    dir: &Path,
    markers: bool,
) -> Result<ExportManifest, TrainerError> {
    export_files(augmented.to_jsonl(markers), dev, test, task, dir)
}

/// Same as [`export_training_set`] for a plain training set.
pub fn export_dataset(
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    task: &TaskSpec,
    dir: &Path,
) -> Result<ExportManifest, TrainerError> {
    export_files(to_jsonl(&train.examples), dev, test, task, dir)
}

fn export_files(
    train_text: String,
    dev: &Dataset,
    test: &Dataset,
    task: &TaskSpec,
    dir: &Path,
) -> Result<ExportManifest, TrainerError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        ("train.jsonl", train_text),
        ("dev.jsonl", to_jsonl(&dev.examples)),
        ("test.jsonl", to_jsonl(&test.examples)),
    ];
    let mut digests = BTreeMap::new();
    for (name, text) in &files {
        write_text(&dir.join(name), text)?;
        digests.insert(name.to_string(), hex::encode(Sha256::digest(text.as_bytes())));
    }
    let card = TaskCard {
        task: task.clone(),
        label_set: task.labels().to_vec(),
        metrics: MetricsKind::for_task(task.kind),
        hyperparameters: Hyperparameters::defaults_for(task.kind),
        files: files.iter().map(|(n, _)| (n.trim_end_matches(".jsonl").to_string(), n.to_string())).collect(),
    };
    let card_text = serde_json::to_string_pretty(&card).expect("task card serializes");
    write_text(&dir.join(TASK_CARD), &card_text)?;
    digests.insert(TASK_CARD.to_string(), hex::encode(Sha256::digest(card_text.as_bytes())));
    Ok(ExportManifest {
        dir: dir.to_path_buf(),
        train: "train.jsonl".into(),
        dev: "dev.jsonl".into(),
        test: "test.jsonl".into(),
        task_card: TASK_CARD.into(),
        out: "student".into(),
        digests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub dev_metrics: MetricsReport,
    pub test_metrics: MetricsReport,
    #[serde(skip)]
    pub wall_time: Duration,
    pub trainer_id: String,
}

/// Parses a trainer's `metrics.json`: `{"dev": <report>, "test": <report>, "trainer_id"?}`.
pub fn parse_metrics(text: &str, expected: MetricsKind, path: &Path) -> Result<(MetricsReport, MetricsReport, Option<String>), TrainerError> {
    let bad = |message: String| TrainerError::MalformedMetrics {
        path: path.to_path_buf(),
        message,
    };
    let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut reports = Vec::with_capacity(2);
    for split in ["dev", "test"] {
        let block = v.get(split).ok_or_else(|| bad(format!("missing field `{split}`")))?;
        let report = match expected {
            MetricsKind::Accuracy => serde_json::from_value::<AccuracyReport>(block.clone()).map(MetricsReport::Accuracy),
            MetricsKind::Rouge => serde_json::from_value::<RougeScore>(block.clone()).map(MetricsReport::Rouge),
        }
        .map_err(|e| bad(format!("{split}: {e}")))?;
        reports.push(report);
    }
    let trainer_id = v.get("trainer_id").and_then(Value::as_str).map(str::to_string);
    let test = reports.pop().expect("two reports");
    let dev = reports.pop().expect("two reports");
    Ok((dev, test, trainer_id))
}

pub fn metrics_json(dev: &MetricsReport, test: &MetricsReport, trainer_id: &str) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "dev": dev,
        "test": test,
        "trainer_id": trainer_id,
    }))
    .expect("metrics serialize")
}

fn substitute(arg: &str, files: &ExportManifest) -> String {
    arg.replace("{train}", &files.path(&files.train).to_string_lossy())
        .replace("{dev}", &files.path(&files.dev).to_string_lossy())
        .replace("{test}", &files.path(&files.test).to_string_lossy())
        .replace("{out}", &files.path(&files.out).to_string_lossy())
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut s = String::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_string(&mut s);
        }
        s
    })
}

/// Runs the trainer on exported files and reads back `{out}/metrics.json`.
pub fn invoke_trainer(contract: &TrainerContract, files: &ExportManifest) -> Result<StudentResult, TrainerError> {
    contract.validate()?;
    let out_dir = files.path(&files.out);
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(io_err(&metrics_path))?;
    }
    let started = Instant::now();
    let args: Vec<String> = contract.command[1..].iter().map(|a| substitute(a, files)).collect();

    if contract.is_builtin() {
        let [train, dev, test, out] = args.as_slice() else {
            return Err(TrainerError::InvalidContract(
                "builtin baseline takes exactly {train} {dev} {test} {out}".into(),
            ));
        };
        run_baseline_trainer(Path::new(train), Path::new(dev), Path::new(test), Path::new(out))?;
    } else {
        let program = &contract.command[0];
        let mut cmd = Command::new(program);
        cmd.args(&args).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
        if let Some(wd) = &contract.workdir {
            cmd.current_dir(wd);
        }
        let mut child = cmd.spawn().map_err(|source| TrainerError::Spawn {
            command: program.clone(),
            source,
        })?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        let timeout = Duration::from_secs(contract.timeout_secs);
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|source| TrainerError::Spawn {
                command: program.clone(),
                source,
            })? {
                break status;
            }
            if started.elapsed() >= timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(TrainerError::TrainerTimeout(timeout));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let _ = stdout.join();
        let stderr = stderr.join().unwrap_or_default();
        if !status.success() {
            return Err(TrainerError::TrainerFailed {
                status: status.to_string(),
                stderr,
            });
        }
    }

    let text = std::fs::read_to_string(&metrics_path).map_err(|e| TrainerError::MalformedMetrics {
        path: metrics_path.clone(),
        message: e.to_string(),
    })?;
    let (dev_metrics, test_metrics, trainer_id) = parse_metrics(&text, contract.expected_metrics, &metrics_path)?;
    Ok(StudentResult {
        dev_metrics,
        test_metrics,
        wall_time: started.elapsed(),
        trainer_id: trainer_id.unwrap_or_else(|| contract.command[0].clone()),
    })
}

fn token_set(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Nearest-neighbour predictions: each eval item gets the output of the
/// training example with the highest token Jaccard similarity, ties going
/// to the earliest training index.
pub fn baseline_predict(train: &Dataset, eval: &Dataset) -> Result<Vec<Example>, TrainerError> {
    if train.is_empty() {
        return Err(TrainerError::EmptyTrain);
    }
    let train_sets: Vec<HashSet<String>> = train.examples.iter().map(|e| token_set(&e.input)).collect();
    Ok(eval
        .examples
        .iter()
        .map(|item| {
            let q = token_set(&item.input);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, t) in train_sets.iter().enumerate() {
                let s = jaccard(&q, t);
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            Example {
                id: item.id.clone(),
                input: item.input.clone(),
                output: train.examples[best].output.clone(),
            }
        })
        .collect())
}

pub fn baseline_student(train: &Dataset, eval: &Dataset, task: &TaskSpec) -> Result<MetricsReport, TrainerError> {
    let predictions = baseline_predict(train, eval)?;
    Ok(evaluate(&predictions, &eval.examples, task.kind)?)
}

/// The baseline as a trainer: reads the task card next to `train`, scores
/// dev and test, writes `out/metrics.json`.
pub fn run_baseline_trainer(train: &Path, dev: &Path, test: &Path, out: &Path) -> Result<(), TrainerError> {
    let card_path = train.parent().unwrap_or(Path::new(".")).join(TASK_CARD);
    let card = TaskCard::load(&card_path)?;
    let train_ds = load_jsonl(train, Split::Train, &card.task)?;
    let dev_ds = load_jsonl(dev, Split::Dev, &card.task)?;
    let test_ds = load_jsonl(test, Split::Test, &card.task)?;
    let dev_m = baseline_student(&train_ds, &dev_ds, &card.task)?;
    let test_m = baseline_student(&train_ds, &test_ds, &card.task)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join(METRICS_FILE), &metrics_json(&dev_m, &test_m, "baseline-nn"))?;
    Ok(())
}
