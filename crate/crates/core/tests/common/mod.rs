#![allow(dead_code)]

use std::path::{Path, PathBuf};

use distilkit::corpus::{to_jsonl, Dataset, Example, Split, TaskSpec};
use distilkit::rng::SeededRng;
use serde_json::{json, Value};

/// Token-count parity task. Inputs of length `len` are `p1 .. p{len-1}`
/// followed by one serial token, so nearest neighbours under Jaccard are the
/// inputs of the same (or nearest) length.
pub fn parity_task() -> TaskSpec {
    TaskSpec::classification("parity", "Is the number of tokens even or odd?", &["even", "odd"])
}

pub fn parity_input(len: usize, serial: usize) -> String {
    let mut toks: Vec<String> = (1..len).map(|i| format!("p{i}")).collect();
    toks.push(format!("n{serial}"));
    toks.join(" ")
}

pub fn parity_label(len: usize) -> &'static str {
    if len % 2 == 0 {
        "even"
    } else {
        "odd"
    }
}

/// `n` labeled parity items with lengths drawn from 2..=31.
pub fn parity_examples(n: usize, seed: u64, prefix: &str, serial_base: usize) -> Vec<Example> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let len = 2 + rng.below(30) as usize;
            Example::labeled(
                format!("{prefix}{i:05}"),
                parity_input(len, serial_base + i),
                parity_label(len),
            )
        })
        .collect()
}

pub fn dataset(examples: Vec<Example>, split: Split) -> Dataset {
    Dataset::new(examples, split, "t").expect("valid dataset")
}

pub fn labeled(items: &[(&str, &str)]) -> Vec<Example> {
    items
        .iter()
        .enumerate()
        .map(|(i, (x, y))| Example::labeled(format!("e{i}"), *x, *y))
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) {
    std::fs::write(path, to_jsonl(examples)).expect("write fixture");
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).expect("write fixture");
}

/// Writes a parity-task run directory: task, splits, and a manifest using a
/// lookup-oracle teacher over the training file. `edit` adjusts the manifest.
pub fn parity_run_dir(dir: &Path, train_n: usize, eval_n: usize, edit: impl FnOnce(&mut Value)) -> PathBuf {
    write_json(&dir.join("task.json"), &parity_task());
    write_jsonl(&dir.join("train.jsonl"), &parity_examples(train_n, 11, "tr", 0));
    write_jsonl(&dir.join("dev.jsonl"), &parity_examples(eval_n, 12, "dv", 100_000));
    write_jsonl(&dir.join("test.jsonl"), &parity_examples(eval_n, 13, "te", 200_000));
    let mut manifest = json!({
        "schema_version": 1,
        "seed": 7,
        "task": "task.json",
        "data": {"train": "train.jsonl", "dev": "dev.jsonl", "test": "test.jsonl"},
        "backend": {"kind": "mock-lookup", "model_name": "oracle", "lookup_path": "train.jsonl", "parallelism": 4},
        "plan": {"mode": "annotate", "exemplars": {"k": 1, "selection": "seeded-uniform"}},
        "mix": {"original_fraction": 0.01, "synthetic_fraction": 0.2},
        "output_dir": "out"
    });
    edit(&mut manifest);
    let path = dir.join("manifest.json");
    write_json(&path, &manifest);
    path
}

/// Run directory for a WebNLG-shaped generation task with 400 train items
/// and a lookup-oracle teacher. `edit` adjusts the manifest.
pub fn webnlg_run_dir(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let task = TaskSpec::generation("webnlg", "Verbalize the RDF triples as English text.");
    let item = |i: usize, p: &str| {
        Example::labeled(
            format!("{p}{i}"),
            format!("[CONTEXT] City [DATA] City_{i} | country | Country_{}", i % 7),
            format!("City {i} is located in Country {}.", i % 7),
        )
    };
    write_json(&dir.join("task.json"), &task);
    write_jsonl(&dir.join("train.jsonl"), &(0..400).map(|i| item(i, "tr")).collect::<Vec<_>>());
    write_jsonl(&dir.join("dev.jsonl"), &(400..420).map(|i| item(i, "dv")).collect::<Vec<_>>());
    write_jsonl(&dir.join("test.jsonl"), &(420..440).map(|i| item(i, "te")).collect::<Vec<_>>());
    let mut v = json!({
        "schema_version": 1,
        "seed": 3,
        "task": "task.json",
        "data": {"train": "train.jsonl", "dev": "dev.jsonl", "test": "test.jsonl"},
        "backend": {"kind": "mock-lookup", "model_name": "oracle", "lookup_path": "train.jsonl"},
        "plan": {"mode": "generate", "exemplars": {"k": 4, "selection": "seeded-uniform"}},
        "mix": {"original_fraction": 0.05, "synthetic_fraction": 0.1},
        "output_dir": "out"
    });
    edit(&mut v);
    let p = dir.join("manifest.json");
    write_json(&p, &v);
    p
}

/// Files under `dir`, relative, sorted.
pub fn list_files(dir: &Path) -> Vec<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Independent Rouge reimplementation over whitespace-separated tokens:
/// quadratic multiset matching for n-grams, subsequence enumeration for LCS.
pub mod oracle {
    pub fn grams(tokens: &[&str], n: usize) -> Vec<Vec<String>> {
        if tokens.len() < n {
            return Vec::new();
        }
        (0..=tokens.len() - n)
            .map(|i| tokens[i..i + n].iter().map(|t| t.to_string()).collect())
            .collect()
    }

    pub fn prf(overlap: usize, c: usize, r: usize) -> [f64; 3] {
        let p = if c == 0 { 0.0 } else { overlap as f64 / c as f64 };
        let rc = if r == 0 { 0.0 } else { overlap as f64 / r as f64 };
        let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        [p, rc, f]
    }

    pub fn rouge_n(cand: &str, reference: &str, n: usize) -> [f64; 3] {
        let c: Vec<&str> = cand.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let cg = grams(&c, n);
        let rg = grams(&r, n);
        let mut used = vec![false; rg.len()];
        let mut overlap = 0;
        for g in &cg {
            if let Some(j) = (0..rg.len()).find(|&j| !used[j] && &rg[j] == g) {
                used[j] = true;
                overlap += 1;
            }
        }
        prf(overlap, cg.len(), rg.len())
    }

    fn is_subsequence(sub: &[&str], seq: &[&str]) -> bool {
        let mut it = seq.iter();
        sub.iter().all(|s| it.any(|t| t == s))
    }

    /// Longest common subsequence by trying every subsequence of `a`.
    pub fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
        assert!(a.len() <= 16, "exponential oracle");
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let len = mask.count_ones() as usize;
            if len <= best {
                continue;
            }
            let sub: Vec<&str> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            if is_subsequence(&sub, b) {
                best = len;
            }
        }
        best
    }

    pub fn rouge_l(cand: &str, reference: &str) -> [f64; 3] {
        let c: Vec<&str> = cand.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        prf(lcs_brute(&c, &r), c.len(), r.len())
    }
}

/// Random lowercase token sequence of length `0..=max_len` over `alphabet`.
pub fn random_sentence(rng: &mut SeededRng, alphabet: &[&str], max_len: usize) -> String {
    let len = rng.below(max_len as u64 + 1) as usize;
    (0..len)
        .map(|_| alphabet[rng.below(alphabet.len() as u64) as usize])
        .collect::<Vec<_>>()
        .join(" ")
}
