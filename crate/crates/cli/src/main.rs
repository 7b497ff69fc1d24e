use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distilkit::backend::{BackendConfig, Teacher};
use distilkit::corpus::{label_histogram, load_jsonl, sample_fraction, save_jsonl, Split, TaskSpec};
use distilkit::metrics::evaluate;
use distilkit::mixing::{build_augmented, composition_report, MixPlan};
use distilkit::pipeline::{cmd_report, cmd_run, Ledger, PipelineError, RunOptions};
use distilkit::synthesis::{records_from_jsonl, records_to_jsonl, run_plan, SynthesisError, SynthesisOptions, SynthesisPlan};
use distilkit::trainer::{export_dataset, run_baseline_trainer};

#[derive(Parser)]
#[command(name = "distilkit", version, about = "Teacher-student synthetic data pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full manifest: sample, synthesize, mix, export, train, evaluate.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue synthesis from the checkpoint of an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Validate and print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Comparison table over run ledgers.
    Report {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a JSONL split; optionally write it back with assigned ids.
    Ingest {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Seeded subset of a split.
    Sample {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Query the teacher according to a synthesis plan.
    Synthesize {
        #[arg(long)]
        task: PathBuf,
        /// Backend config JSON.
        #[arg(long)]
        backend: PathBuf,
        /// Synthesis plan JSON.
        #[arg(long)]
        plan: PathBuf,
        /// Labeled examples used as in-context exemplars.
        #[arg(long)]
        exemplars: PathBuf,
        /// Unlabeled inputs to annotate.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Combine an original subset with synthetic records.
    Mix {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        original: PathBuf,
        /// Synthetic records JSONL, as written by `synthesize`.
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        original_fraction: f64,
        #[arg(long)]
        synthetic_fraction: f64,
        /// Size of the full original training set.
        #[arg(long)]
        base_n: usize,
        #[arg(long)]
        seed: u64,
        /// Treat `--original` as the full set and sample the subset here.
        #[arg(long)]
        sample_original: bool,
        /// Keep origin markers in the output.
        #[arg(long)]
        markers: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write train/dev/test and the task card for a trainer.
    Export {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Score predictions against gold outputs, aligned by id.
    Evaluate {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Nearest-neighbour baseline trainer, usable as a trainer command.
    Baseline {
        train: PathBuf,
        dev: PathBuf,
        test: PathBuf,
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let mut message = e.to_string();
        if let PipelineError::Stage {
            checkpoint: Some(cp), ..
        } = &e
        {
            message.push_str(&format!("\ncheckpoint: {} (rerun with --resume)", cp.display()));
        }
        Failure {
            code: e.exit_code() as u8,
            message,
        }
    }
}

fn load_task(path: &Path) -> Result<TaskSpec, Failure> {
    TaskSpec::load(path).map_err(validation)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        "unlabeled" => Ok(Split::Unlabeled),
        other => Err(validation(format!("unknown split {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            manifest,
            resume,
            dry_run,
            seed_override,
        } => {
            let opts = RunOptions {
                resume,
                dry_run,
                seed_override,
            };
            let ledger = cmd_run(&manifest, &opts)?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&ledger).expect("ledger serializes"));
                return Ok(());
            }
            if let Some(c) = ledger.composition {
                println!("composition: {} original + {} synthetic", c.original, c.synthetic);
            }
            if let Some(m) = &ledger.metrics {
                println!("dev:  {}", m.dev);
                println!("test: {}", m.test);
            }
        }
        Command::Report { ledgers, output } => {
            let loaded = ledgers.iter().map(|p| Ledger::load(p)).collect::<Result<Vec<_>, _>>()?;
            let table = cmd_report(&loaded)?;
            match output {
                Some(p) => std::fs::write(&p, &table).map_err(io_failure)?,
                None => print!("{table}"),
            }
        }
        Command::Ingest {
            task,
            input,
            split,
            output,
        } => {
            let task = load_task(&task)?;
            let ds = load_jsonl(&input, parse_split(&split)?, &task).map_err(validation)?;
            println!("{} examples", ds.len());
            if task.is_classification() {
                let h = label_histogram(&ds, &task).map_err(validation)?;
                for (label, n) in &h.counts {
                    println!("  {label}: {n}");
                }
                if h.out_of_set > 0 {
                    println!("  (out of label set): {}", h.out_of_set);
                }
            }
            if let Some(out) = output {
                save_jsonl(&ds, &out).map_err(io_failure)?;
            }
        }
        Command::Sample {
            task,
            input,
            fraction,
            seed,
            output,
        } => {
            let task = load_task(&task)?;
            let ds = load_jsonl(&input, Split::Train, &task).map_err(validation)?;
            let sub = sample_fraction(&ds, fraction, seed).map_err(validation)?;
            save_jsonl(&sub, &output).map_err(io_failure)?;
            println!("{} of {} examples", sub.len(), ds.len());
        }
        Command::Synthesize {
            task,
            backend,
            plan,
            exemplars,
            pool,
            output,
            checkpoint,
            resume,
        } => {
            let task = load_task(&task)?;
            let cfg: BackendConfig = read_json(&backend)?;
            let plan: SynthesisPlan = read_json(&plan)?;
            let base = backend.parent().unwrap_or(Path::new("."));
            let teacher = Teacher::from_config(&cfg, base).map_err(validation)?;
            let source = load_jsonl(&exemplars, Split::Train, &task).map_err(validation)?;
            let pool = match pool {
                Some(p) => load_jsonl(&p, Split::Unlabeled, &task).map_err(validation)?,
                None => source.without_outputs(),
            };
            let opts = SynthesisOptions {
                filter: None,
                checkpoint,
                resume,
            };
            let out = run_plan(&plan, &pool, &source, &task, &teacher, &opts).map_err(|e| match e {
                SynthesisError::Backend { .. } => Failure {
                    code: 3,
                    message: e.to_string(),
                },
                other => validation(other),
            })?;
            std::fs::write(&output, records_to_jsonl(&out.records)).map_err(io_failure)?;
            println!(
                "{} records, {} dropped, {} teacher requests",
                out.records.len(),
                out.dropped.len(),
                out.usage.requests
            );
            for s in &out.shortfalls {
                println!("shortfall: {} requested {} produced {}", s.mode, s.requested, s.produced);
            }
        }
        Command::Mix {
            task,
            original,
            synthetic,
            original_fraction,
            synthetic_fraction,
            base_n,
            seed,
            sample_original,
            markers,
            output,
        } => {
            let task = load_task(&task)?;
            let original = load_jsonl(&original, Split::Train, &task).map_err(validation)?;
            let text = std::fs::read_to_string(&synthetic).map_err(validation)?;
            let records = records_from_jsonl(&text).map_err(validation)?;
            let plan = MixPlan {
                original_fraction,
                synthetic_fraction,
                base_n,
                seed,
                sample_original,
            };
            let aug = build_augmented(&original, &records, &plan).map_err(validation)?;
            aug.save(&output, markers).map_err(io_failure)?;
            print!("{}", composition_report(&aug));
        }
        Command::Export {
            task,
            train,
            dev,
            test,
            dir,
        } => {
            let task = load_task(&task)?;
            let train = load_jsonl(&train, Split::Train, &task).map_err(validation)?;
            let dev = load_jsonl(&dev, Split::Dev, &task).map_err(validation)?;
            let test = load_jsonl(&test, Split::Test, &task).map_err(validation)?;
            let files = export_dataset(&train, &dev, &test, &task, &dir).map_err(io_failure)?;
            for (name, digest) in &files.digests {
                println!("{digest}  {name}");
            }
        }
        Command::Evaluate {
            task,
            predictions,
            gold,
        } => {
            let task = load_task(&task)?;
            let preds = load_jsonl(&predictions, Split::Test, &task).map_err(validation)?;
            let gold = load_jsonl(&gold, Split::Test, &task).map_err(validation)?;
            let report = evaluate(&preds.examples, &gold.examples, task.kind).map_err(validation)?;
            println!("{report}");
        }
        Command::Baseline { train, dev, test, out } => {
            run_baseline_trainer(&train, &dev, &test, &out).map_err(|e| Failure {
                code: 4,
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
