mod common;

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use distilkit::backend::{BackendConfig, BackendKind, RetryPolicy, Teacher};
use distilkit::corpus::{Dataset, Example, Split, TaskSpec};
use distilkit::prompting::Mode;
use distilkit::synthesis::{
    normalize_for_dedup, records_from_jsonl, records_to_jsonl, run_annotation, run_combine, run_generation, run_plan,
    SynthesisError, SynthesisOptions, SynthesisPlan,
};

fn yes_no() -> TaskSpec {
    TaskSpec::classification("boolq", "Answer the question with yes or no.", &["yes", "no"])
}

fn webnlg() -> TaskSpec {
    TaskSpec::generation("webnlg", "Verbalize the RDF triples as English text.")
        .with_field_template(&[("context", "[CONTEXT]"), ("data", "[DATA]")])
}

fn quick_retry(mut cfg: BackendConfig) -> BackendConfig {
    cfg.retry = RetryPolicy {
        max_attempts: 2,
        base_backoff_ms: 1,
        backoff_multiplier: 2.0,
    };
    cfg
}

fn scripted(script: &[&str]) -> Teacher {
    let mut cfg = BackendConfig::mock(BackendKind::MockScripted, "scripted");
    cfg.script = Some(script.iter().map(|s| s.to_string()).collect());
    Teacher::from_config(&quick_retry(cfg), Path::new(".")).unwrap()
}

fn questions(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example::labeled(format!("q{i:03}"), format!("is {i} an even number"), if i % 2 == 0 { "yes" } else { "no" }))
        .collect()
}

fn k(plan: SynthesisPlan, k: usize) -> SynthesisPlan {
    let mut plan = plan;
    plan.exemplar_policy.k = k;
    plan.seed = 3;
    plan.exemplar_policy.seed = 3;
    plan
}

#[test]
fn lookup_gold_annotation() {
    let all = questions(40);
    let exemplars = common::dataset(all[..8].to_vec(), Split::Train);
    let pool = common::dataset(all[8..].to_vec(), Split::Train).without_outputs();
    let mut cfg = BackendConfig::mock(BackendKind::MockLookup, "oracle");
    cfg.lookup = Some(all.iter().map(|e| (e.input.clone(), e.output.clone().unwrap())).collect());
    let teacher = Teacher::from_config(&cfg, Path::new(".")).unwrap();
    let plan = k(SynthesisPlan::annotate(10), 4);
    let out = run_annotation(&plan, &pool, &exemplars, &yes_no(), &teacher, &SynthesisOptions::default()).unwrap();
    assert_eq!(out.records.len(), 10);
    for r in &out.records {
        let gold = all.iter().find(|e| e.input == r.input).unwrap();
        assert_eq!(Some(&r.output), gold.output.as_ref());
        assert_eq!(r.mode, Mode::Annotate);
        assert_eq!(r.temperature, 0.1);
        assert_eq!(r.teacher, "oracle");
        assert_eq!(r.exemplar_ids.len(), 4);
        assert!(r.source_id.is_some());
    }
    let ids: HashSet<_> = out.records.iter().map(|r| r.source_id.clone()).collect();
    assert_eq!(ids.len(), 10);
    assert!(out.shortfalls.is_empty());
}

#[test]
fn out_of_set_labels_are_dropped_after_resampling() {
    let all = questions(20);
    let exemplars = common::dataset(all[..4].to_vec(), Split::Train);
    let pool = common::dataset(all[4..].to_vec(), Split::Train).without_outputs();
    let mut plan = k(SynthesisPlan::annotate(6), 2);
    plan.max_resamples = 2;
    let out = run_annotation(&plan, &pool, &exemplars, &yes_no(), &scripted(&[" maybe"]), &SynthesisOptions::default())
        .unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.dropped.len(), 6);
    assert!(out.dropped.iter().all(|d| d.attempts == 3 && d.reason.contains("label set")));
    assert_eq!(out.shortfalls[0].missing(), 6);
}

#[test]
fn near_miss_labels_map_to_canonical() {
    let all = questions(10);
    let exemplars = common::dataset(all[..2].to_vec(), Split::Train);
    let pool = common::dataset(all[2..].to_vec(), Split::Train).without_outputs();
    let plan = k(SynthesisPlan::annotate(3), 2);
    let out = run_annotation(&plan, &pool, &exemplars, &yes_no(), &scripted(&[" Yes.", " NO ", " yes!"]), &SynthesisOptions::default())
        .unwrap();
    let outs: Vec<&str> = out.records.iter().map(|r| r.output.as_str()).collect();
    assert_eq!(outs, ["yes", "no", "yes"]);
}

#[test]
fn webnlg_scripted_annotation() {
    let exemplars = common::dataset(
        vec![
            Example::labeled(
                "w1",
                "[CONTEXT] WrittenWork [DATA] A_Loyal_Character_Dancer | publisher | Soho_Press",
                "A Loyal Character Dancer is published by Soho Press.",
            ),
            Example::labeled(
                "w2",
                "[CONTEXT] Food [DATA] Bakso | country | Indonesia",
                "Bakso is a food found in Indonesia.",
            ),
        ],
        Split::Train,
    );
    let target = "[CONTEXT] Airport [DATA] Al_Asad_Airbase | operatingOrganisation | United_States_Air_Force";
    let pool = common::dataset(vec![Example::unlabeled("p1", target)], Split::Unlabeled);
    let plan = k(SynthesisPlan::annotate(1), 2);
    let teacher = scripted(&[" Al Asad Airbase is operated by the United States Air Force.\n[INPUT] junk"]);
    let out = run_annotation(&plan, &pool, &exemplars, &webnlg(), &teacher, &SynthesisOptions::default()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].input, target);
    assert_eq!(out.records[0].output, "Al Asad Airbase is operated by the United States Air Force.");
}

#[test]
fn tag_literal_pool_items_are_dropped() {
    let exemplars = common::dataset(questions(2), Split::Train);
    let pool = common::dataset(vec![Example::unlabeled("bad", "has [OUTPUT] inside")], Split::Unlabeled);
    let out = run_annotation(&k(SynthesisPlan::annotate(1), 1), &pool, &exemplars, &yes_no(), &scripted(&[" yes"]), &SynthesisOptions::default())
        .unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.dropped[0].attempts, 0);
}

#[test]
fn pool_errors() {
    let exemplars = common::dataset(questions(2), Split::Train);
    let empty = common::dataset(vec![], Split::Unlabeled);
    let plan = k(SynthesisPlan::annotate(1), 1);
    assert!(matches!(
        run_annotation(&plan, &empty, &exemplars, &yes_no(), &scripted(&[" yes"]), &SynthesisOptions::default()),
        Err(SynthesisError::EmptyPool)
    ));
    let pool = common::dataset(questions(2), Split::Train).without_outputs();
    assert!(matches!(
        run_annotation(&k(SynthesisPlan::annotate(3), 1), &pool, &exemplars, &yes_no(), &scripted(&[" yes"]), &SynthesisOptions::default()),
        Err(SynthesisError::PoolTooSmall { requested: 3, available: 2 })
    ));
}

#[test]
fn cycling_script_yields_its_pairs() {
    let exemplars = common::dataset(common::labeled(&[("seed one", "a"), ("seed two", "b")]), Split::Train);
    let script = [" first input\n[OUTPUT] out one", " second input\n[OUTPUT] out two", " third input\n[OUTPUT] out three"];
    let out = run_generation(&k(SynthesisPlan::generate(3), 2), &exemplars, &webnlg(), &scripted(&script), &SynthesisOptions::default())
        .unwrap();
    let got: Vec<(&str, &str)> = out.records.iter().map(|r| (r.input.as_str(), r.output.as_str())).collect();
    assert_eq!(got, [("first input", "out one"), ("second input", "out two"), ("third input", "out three")]);
    assert!(out.records.iter().all(|r| r.temperature == 0.8 && r.source_id.is_none()));
}

#[test]
fn identical_pair_gives_one_record_and_shortfall() {
    let exemplars = common::dataset(common::labeled(&[("seed one", "a")]), Split::Train);
    let mut plan = k(SynthesisPlan::generate(5), 1);
    plan.max_resamples = 1;
    let out = run_generation(&plan, &exemplars, &webnlg(), &scripted(&[" same input\n[OUTPUT] same output"]), &SynthesisOptions::default())
        .unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].job_index, 0);
    assert_eq!(out.shortfalls.len(), 1);
    assert_eq!(out.shortfalls[0].missing(), 4);
    assert_eq!(out.dropped.len(), 4);
    assert!(out.dropped.iter().all(|d| d.attempts == 2));
}

#[test]
fn echoing_an_exemplar_is_rejected() {
    let exemplars = common::dataset(common::labeled(&[("seed one", "a"), ("seed two", "b")]), Split::Train);
    let teacher = Teacher::from_config(&BackendConfig::mock(BackendKind::MockEcho, "echo"), Path::new(".")).unwrap();
    let out = run_generation(&k(SynthesisPlan::generate(2), 2), &exemplars, &webnlg(), &teacher, &SynthesisOptions::default())
        .unwrap();
    assert!(out.records.is_empty());
    assert!(out.dropped.iter().all(|d| d.attempts == 3 && d.reason.contains("exemplar source")));
    assert_eq!(out.usage.requests, 6);
}

#[test]
fn combine_counts() {
    let all = questions(40);
    let exemplars = common::dataset(all[..8].to_vec(), Split::Train);
    let pool = common::dataset(all[8..].to_vec(), Split::Train).without_outputs();
    let mut cfg = BackendConfig::mock(BackendKind::MockLookup, "oracle");
    cfg.lookup = Some((0..200).map(|i| (format!("is {i} odd or even"), if i % 2 == 0 { "yes" } else { "no" }.to_string())).collect());
    cfg.lookup.as_mut().unwrap().extend(all.iter().map(|e| (e.input.clone(), e.output.clone().unwrap())));
    let teacher = Teacher::from_config(&cfg, Path::new(".")).unwrap();
    let opts = SynthesisOptions::default();

    let out = run_combine(&k(SynthesisPlan::combine(5, 5), 4), &pool, &exemplars, &yes_no(), &teacher, &opts).unwrap();
    assert_eq!(out.count(Mode::Annotate), 5);
    assert_eq!(out.count(Mode::Generate), 5);
    let gen_jobs: Vec<u64> = out.records.iter().filter(|r| r.mode == Mode::Generate).map(|r| r.job_index).collect();
    assert!(gen_jobs.iter().all(|&j| j >= 5));

    let only_gen = run_combine(&k(SynthesisPlan::combine(0, 4), 4), &pool, &exemplars, &yes_no(), &teacher, &opts).unwrap();
    assert_eq!((only_gen.count(Mode::Annotate), only_gen.count(Mode::Generate)), (0, 4));
    let empty = run_plan(&k(SynthesisPlan::combine(0, 0), 4), &pool, &exemplars, &yes_no(), &teacher, &opts).unwrap();
    assert!(empty.records.is_empty() && empty.dropped.is_empty());
}

#[test]
fn wrong_mode_is_refused() {
    let ex = common::dataset(questions(2), Split::Train);
    assert!(matches!(
        run_generation(&SynthesisPlan::annotate(1), &ex, &yes_no(), &scripted(&[" yes"]), &SynthesisOptions::default()),
        Err(SynthesisError::WrongMode { .. })
    ));
}

fn varied_generator(parallelism: usize) -> Teacher {
    // 30 distinct pairs plus repeats, so dedup has work to do.
    let mut script: Vec<String> = (0..30).map(|i| format!(" generated item {}\n[OUTPUT] label {}", i % 17, i % 3)).collect();
    script.push(" The  Generated item 3 \n[OUTPUT] x".into());
    script.push(" seed one\n[OUTPUT] copy".into());
    let mut cfg = BackendConfig::mock(BackendKind::MockScripted, "scripted");
    cfg.script = Some(script);
    cfg.parallelism = parallelism;
    Teacher::from_config(&quick_retry(cfg), Path::new(".")).unwrap()
}

#[test]
fn generation_is_independent_of_parallelism_and_dedups() {
    let exemplars = common::dataset(common::labeled(&[("seed one", "a"), ("seed two", "b"), ("seed three", "c")]), Split::Train);
    let plan = k(SynthesisPlan::generate(25), 2);
    let reference = run_generation(&plan, &exemplars, &webnlg(), &varied_generator(1), &SynthesisOptions::default()).unwrap();
    for p in [2, 4, 16] {
        let out = run_generation(&plan, &exemplars, &webnlg(), &varied_generator(p), &SynthesisOptions::default()).unwrap();
        assert_eq!(out.records, reference.records, "parallelism {p}");
        assert_eq!(out.dropped, reference.dropped, "parallelism {p}");
    }
    let mut seen = HashSet::new();
    for r in &reference.records {
        let n = normalize_for_dedup(&r.input);
        assert!(exemplars.examples.iter().all(|e| normalize_for_dedup(&e.input) != n));
        assert!(seen.insert(n), "duplicate {}", r.input);
    }
    assert_eq!(reference.records.len(), 17);
}

#[test]
fn filter_rejections_are_resampled() {
    let exemplars = common::dataset(common::labeled(&[("seed one", "a")]), Split::Train);
    let script = [" keep a\n[OUTPUT] y", " drop b\n[OUTPUT] y", " keep c\n[OUTPUT] y"];
    let opts = SynthesisOptions {
        filter: Some(Arc::new(|r| r.input.starts_with("keep"))),
        ..Default::default()
    };
    let out = run_generation(&k(SynthesisPlan::generate(2), 1), &exemplars, &webnlg(), &scripted(&script), &opts).unwrap();
    let inputs: Vec<&str> = out.records.iter().map(|r| r.input.as_str()).collect();
    assert_eq!(inputs, ["keep a", "keep c"]);
}

fn failing_generator(fail: Vec<u64>) -> Teacher {
    let script: Vec<String> = (0..50).map(|i| format!(" generated item {i}\n[OUTPUT] {}", if i % 3 == 0 { "yes" } else { "no" })).collect();
    let mut cfg = BackendConfig::mock(BackendKind::MockScripted, "scripted");
    cfg.script = Some(script);
    cfg.fail_jobs = fail;
    cfg.parallelism = 3;
    Teacher::from_config(&quick_retry(cfg), Path::new(".")).unwrap()
}

fn annotator(fail: Vec<u64>) -> Teacher {
    let mut cfg = BackendConfig::mock(BackendKind::MockScripted, "scripted");
    cfg.script = Some(vec![" yes".into(), " no".into(), " Yes".into()]);
    cfg.fail_jobs = fail;
    cfg.parallelism = 2;
    Teacher::from_config(&quick_retry(cfg), Path::new(".")).unwrap()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let exemplars = common::dataset(questions(6), Split::Train);
    let pool: Dataset = common::dataset(questions(40), Split::Train).without_outputs();
    let task = yes_no();

    for (plan, good, bad) in [
        (k(SynthesisPlan::generate(20), 3), failing_generator(vec![]), failing_generator(vec![13])),
        (k(SynthesisPlan::annotate(20), 3), annotator(vec![]), annotator(vec![7, 15])),
    ] {
        let clean = run_plan(&plan, &pool, &exemplars, &task, &good, &SynthesisOptions::default()).unwrap();
        let cp = dir.path().join(format!("{:?}.checkpoint.json", plan.mode));
        let opts = SynthesisOptions {
            filter: None,
            checkpoint: Some(cp.clone()),
            resume: false,
        };
        match run_plan(&plan, &pool, &exemplars, &task, &bad, &opts) {
            Err(SynthesisError::Backend { checkpoint, .. }) => assert_eq!(checkpoint.as_deref(), Some(cp.as_path())),
            other => panic!("expected an abort, got {:?}", other.map(|o| o.records.len())),
        }
        assert!(cp.exists());
        let resumed = run_plan(&plan, &pool, &exemplars, &task, &good, &SynthesisOptions { resume: true, ..opts }).unwrap();
        assert!(clean.records.len() >= 15, "{}", clean.records.len());
        assert_eq!(resumed.records, clean.records);
        assert_eq!(resumed.dropped, clean.dropped);
    }
}

#[test]
fn checkpoint_from_another_plan_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let exemplars = common::dataset(questions(6), Split::Train);
    let pool = common::dataset(questions(40), Split::Train).without_outputs();
    let cp = dir.path().join("cp.json");
    let opts = SynthesisOptions {
        filter: None,
        checkpoint: Some(cp.clone()),
        resume: true,
    };
    run_plan(&k(SynthesisPlan::annotate(5), 2), &pool, &exemplars, &yes_no(), &annotator(vec![]), &opts).unwrap();
    assert!(matches!(
        run_plan(&k(SynthesisPlan::annotate(6), 2), &pool, &exemplars, &yes_no(), &annotator(vec![]), &opts),
        Err(SynthesisError::Checkpoint { .. })
    ));
}

#[test]
fn records_serialize_round_trip() {
    let exemplars = common::dataset(questions(6), Split::Train);
    let out = run_generation(&k(SynthesisPlan::generate(5), 2), &exemplars, &yes_no(), &failing_generator(vec![]), &SynthesisOptions::default())
        .unwrap();
    assert_eq!(out.records.len(), 5);
    let text = records_to_jsonl(&out.records);
    assert_eq!(records_from_jsonl(&text).unwrap(), out.records);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["input", "output", "mode", "teacher", "temperature", "prompt_hash", "job_index", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
