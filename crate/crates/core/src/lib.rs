//! Teacher-student synthetic data pipeline: a large teacher model annotates
//! unlabeled inputs or generates new input/output pairs from a few labeled
//! exemplars, the synthetic data is mixed with a small original subset, and a
//! student is trained and evaluated on the result.

pub mod backend;
pub mod corpus;
pub mod metrics;
pub mod mixing;
pub mod pipeline;
pub mod prompting;
pub mod rng;
pub mod synthesis;
pub mod trainer;

pub use backend::{BackendConfig, BackendError, CompletionRequest, Teacher};
pub use corpus::{Dataset, Example, Split, TaskKind, TaskSpec};
pub use metrics::{accuracy, corpus_rouge, MetricsReport, RougeScore};
pub use mixing::{build_augmented, AugmentedDataset, MixPlan};
pub use pipeline::{cmd_report, cmd_run, Ledger, PipelineError, RunManifest, RunOptions};
pub use prompting::{parse_completion, render_prompt, ExemplarPolicy, Mode, RenderedPrompt};
pub use synthesis::{SynthesisOutput, SynthesisPlan, SyntheticRecord};
pub use trainer::{StudentResult, TrainerContract};
