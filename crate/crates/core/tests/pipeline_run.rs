mod common;

use std::path::Path;

use distilkit::corpus::Example;
use distilkit::pipeline::{cmd_report, cmd_run, Ledger, PipelineError, RowType, RunOptions, LEDGER_FILE};
use distilkit::prompting::Mode;
use distilkit::synthesis::records_from_jsonl;
use serde_json::json;

fn run(manifest: &Path) -> Ledger {
    cmd_run(manifest, &RunOptions::default()).unwrap()
}

fn out(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("out").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn quick_retry() -> serde_json::Value {
    json!({"max_attempts": 2, "base_backoff_ms": 1, "backoff_multiplier": 2.0})
}

#[test]
fn toy_run_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::parity_run_dir(dir.path(), 300, 40, |_| {});
    let ledger = run(&m);
    assert!(ledger.stages.iter().all(|s| s.status == "ok"));
    let names: Vec<&str> = ledger.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["sample", "synthesize", "mix", "export", "evaluate"]);
    assert!(ledger.metrics.is_some());
    let c = ledger.composition.unwrap();
    assert_eq!((c.original, c.synthetic), (3, 60));
    assert_eq!((ledger.row.original.as_str(), ledger.row.row_type, ledger.row.synthetic.as_str()), ("1%", RowType::Annotation, "20%"));
    let synth = ledger.synthesis.as_ref().unwrap();
    assert_eq!(synth.records.annotate, 60);
    assert_eq!(synth.usage.requests, 60);
    assert_eq!(synth.pool.as_ref().unwrap().examples, 297);

    for f in [
        "original.jsonl",
        "synthetic.jsonl",
        "augmented.jsonl",
        "augmented.provenance.json",
        "export/train.jsonl",
        "export/dev.jsonl",
        "export/test.jsonl",
        "export/task_card.json",
        "metrics.json",
        LEDGER_FILE,
    ] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join("out/synthesis.checkpoint.json").exists());
    let on_disk: Ledger = serde_json::from_slice(&out(dir.path(), LEDGER_FILE)).unwrap();
    assert_eq!(on_disk, ledger);
    let records = records_from_jsonl(&String::from_utf8(out(dir.path(), "synthetic.jsonl")).unwrap()).unwrap();
    assert!(records.iter().all(|r| r.temperature == 0.1 && r.mode == Mode::Annotate));
}

#[test]
fn identical_manifests_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = common::parity_run_dir(a.path(), 300, 40, |v| v["plan"]["mode"] = json!("combine"));
    let mb = common::parity_run_dir(b.path(), 300, 40, |v| {
        v["plan"]["mode"] = json!("combine");
        v["backend"]["parallelism"] = json!(1);
    });
    run(&ma);
    let first: Vec<Vec<u8>> = common::list_files(&a.path().join("out")).iter().map(|f| out(a.path(), f)).collect();
    run(&ma);
    let second: Vec<Vec<u8>> = common::list_files(&a.path().join("out")).iter().map(|f| out(a.path(), f)).collect();
    assert_eq!(first, second);

    run(&mb);
    for f in ["synthetic.jsonl", "augmented.jsonl", "metrics.json", "export/train.jsonl"] {
        assert_eq!(out(a.path(), f), out(b.path(), f), "{f}");
    }
}

#[test]
fn missing_dataset_fails_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::parity_run_dir(dir.path(), 50, 10, |v| v["data"]["dev"] = json!("nope.jsonl"));
    let err = cmd_run(&m, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.jsonl"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_manifests_are_validation_errors() {
    let edits: Vec<Box<dyn Fn(&mut serde_json::Value)>> = vec![
        Box::new(|v| v["schema_version"] = json!(2)),
        Box::new(|v| v["surprise"] = json!(true)),
        Box::new(|v| v.as_object_mut().unwrap().remove("seed").map(|_| ()).unwrap()),
        Box::new(|v| v["mix"]["original_fraction"] = json!(1.5)),
        Box::new(|v| v["backend"]["lookup_path"] = json!("missing.jsonl")),
        Box::new(|v| v["plan"]["exemplars"] = json!({"k": 50, "selection": "seeded-uniform"})),
        Box::new(|v| v["plan"]["temperature"] = json!(3.0)),
        Box::new(|v| v["mix"]["synthetic_fraction"] = json!(1.5)),
        Box::new(|v| v["trainer"] = json!({"command": ["x", "{train}"], "expected_metrics": "accuracy"})),
        Box::new(|v| v["trainer"] = json!({"command": ["builtin:baseline", "{train}", "{dev}", "{test}", "{out}"], "expected_metrics": "rouge"})),
    ];
    for (i, edit) in edits.iter().enumerate() {
        let dir = tempfile::tempdir().unwrap();
        let m = common::parity_run_dir(dir.path(), 100, 10, |v| edit(v));
        match cmd_run(&m, &RunOptions::default()) {
            Err(e @ PipelineError::Validation(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("edit {i}: expected a validation error, got {:?}", other.map(|_| ())),
        }
        assert!(!dir.path().join("out").exists(), "edit {i} wrote output");
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::parity_run_dir(dir.path(), 100, 10, |_| {});
    let ledger = cmd_run(&m, &RunOptions { dry_run: true, ..Default::default() }).unwrap();
    assert!(ledger.stages.iter().all(|s| s.status == "planned"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn seed_override_changes_derived_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::parity_run_dir(dir.path(), 200, 10, |_| {});
    let a = run(&m);
    let b = cmd_run(&m, &RunOptions { seed_override: Some(8), ..Default::default() }).unwrap();
    assert_eq!(b.seed, 8);
    assert_ne!(a.sub_seeds, b.sub_seeds);
    assert_ne!(a.artifacts["original.jsonl"], b.artifacts["original.jsonl"]);
}

#[test]
fn backend_outage_is_resumable() {
    let scripted = |fail: Vec<u64>| {
        move |v: &mut serde_json::Value| {
            v["backend"] = json!({
                "kind": "mock-scripted", "model_name": "s", "script": [" even", " odd", " Odd."],
                "fail_jobs": fail, "parallelism": 2, "retry": quick_retry()
            });
        }
    };
    let clean_dir = tempfile::tempdir().unwrap();
    run(&common::parity_run_dir(clean_dir.path(), 200, 10, scripted(vec![])));

    let dir = tempfile::tempdir().unwrap();
    let broken = common::parity_run_dir(dir.path(), 200, 10, scripted(vec![17, 30]));
    let err = cmd_run(&broken, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    match &err {
        PipelineError::Stage { stage, checkpoint, .. } => {
            assert_eq!(stage, "synthesize");
            assert!(checkpoint.as_ref().unwrap().exists());
        }
        other => panic!("unexpected {other:?}"),
    }
    let failed: Ledger = serde_json::from_slice(&out(dir.path(), LEDGER_FILE)).unwrap();
    assert_eq!(failed.stages.last().unwrap().status, "failed");

    let fixed = common::parity_run_dir(dir.path(), 200, 10, scripted(vec![]));
    cmd_run(&fixed, &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(out(dir.path(), "synthetic.jsonl"), out(clean_dir.path(), "synthetic.jsonl"));
    assert_eq!(out(dir.path(), "augmented.jsonl"), out(clean_dir.path(), "augmented.jsonl"));
}

#[test]
fn trainer_failure_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::parity_run_dir(dir.path(), 100, 10, |v| {
        v["trainer"] = json!({
            "command": ["sh", "-c", "echo boom >&2; exit 1", "stub", "{train}", "{dev}", "{test}", "{out}"],
            "expected_metrics": "accuracy"
        });
    });
    let err = cmd_run(&m, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("boom"));
}

#[test]
fn builtin_trainer_matches_in_process_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let plain = run(&common::parity_run_dir(dir.path(), 200, 20, |_| {}));
    let via = run(&common::parity_run_dir(dir.path(), 200, 20, |v| {
        v["trainer"] = json!({
            "command": ["builtin:baseline", "{train}", "{dev}", "{test}", "{out}"],
            "expected_metrics": "accuracy"
        });
    }));
    assert_eq!(plain.metrics, via.metrics);
    assert!(via.stages.iter().any(|s| s.name == "train"));
}

#[test]
fn explicit_unlabeled_pool() {
    let dir = tempfile::tempdir().unwrap();
    let pool: Vec<Example> = common::parity_examples(80, 44, "u", 900_000)
        .into_iter()
        .map(|e| Example::unlabeled(e.id, e.input))
        .collect();
    common::write_jsonl(&dir.path().join("pool.jsonl"), &pool);
    let mut table = common::parity_examples(80, 44, "u", 900_000);
    table.extend(common::parity_examples(100, 11, "tr", 0));
    common::write_jsonl(&dir.path().join("oracle.jsonl"), &table);
    let m = common::parity_run_dir(dir.path(), 100, 10, |v| {
        v["data"]["unlabeled"] = json!("pool.jsonl");
        v["backend"]["lookup_path"] = json!("oracle.jsonl");
        v["mix"]["synthetic_fraction"] = json!(0.5);
    });
    let ledger = run(&m);
    let pool_info = ledger.synthesis.unwrap().pool.unwrap();
    assert_eq!(pool_info.examples, 80);
    assert!(pool_info.source.contains("pool.jsonl"));
}

#[test]
fn generation_run_reports_rouge() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = run(&common::webnlg_run_dir(dir.path(), |_| {}));
    let m = ledger.metrics.unwrap();
    assert!(!m.dev.is_accuracy());
    let records = records_from_jsonl(&String::from_utf8(out(dir.path(), "synthetic.jsonl")).unwrap()).unwrap();
    assert!(records.iter().all(|r| r.temperature == 0.8 && r.mode == Mode::Generate));
    assert_eq!(ledger.row.row_type, RowType::Generation);
    let card: serde_json::Value = serde_json::from_slice(&out(dir.path(), "export/task_card.json")).unwrap();
    assert_eq!(card["metrics"], "rouge");
    assert_eq!(card["hyperparameters"]["student"], "bart-large");
}

#[test]
fn combine_five_percent_each() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = run(&common::webnlg_run_dir(dir.path(), |v| v["plan"]["mode"] = json!("combine")));
    let s = ledger.synthesis.as_ref().unwrap();
    assert_eq!((s.records.annotate, s.records.generate), (20, 20));
    assert_eq!(ledger.row.row_type, RowType::Combined);
    assert_eq!(ledger.row.synthetic, "5% each");
    let table = cmd_report(&[ledger]).unwrap();
    let row = table.lines().nth(2).unwrap();
    assert!(row.contains("Y|X; X,Y") && row.contains("5% each"), "{row}");
    assert!(table.lines().next().unwrap().contains("Dev R-1"));
}

#[test]
fn report_over_three_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut ledgers = Vec::new();
    for (mode, sf) in [("annotate", 0.0), ("annotate", 0.1), ("generate", 0.1)] {
        let sub = dir.path().join(format!("{mode}{sf}"));
        std::fs::create_dir_all(&sub).unwrap();
        let m = common::parity_run_dir(&sub, 500, 50, |v| {
            v["plan"]["mode"] = json!(mode);
            v["mix"]["synthetic_fraction"] = json!(sf);
        });
        run(&m);
        ledgers.push(Ledger::load(&sub.join("out").join(LEDGER_FILE)).unwrap());
    }
    let table = cmd_report(&ledgers).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[2].contains(" -  "));
    assert!(lines[3].contains("X,Y"));
    assert!(lines[4].contains("Y|X"));
    assert!(table.contains('*'));
}
