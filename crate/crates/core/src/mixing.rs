//! Augmented training sets: a sampled slice of the original data plus a
//! prefix of the synthetic records, both sized relative to the full original
//! training set.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{sample_fraction, to_jsonl, write_text, CorpusError, Dataset, Example, Split};
use crate::rng::{fraction_count, sub_seed, SeededRng, RNG_NAME};
use crate::synthesis::{records_to_jsonl, SyntheticRecord};

#[derive(Debug, Error)]
pub enum MixError {
    #[error("need {needed} synthetic records but only {available} are available (short by {})", needed - available)]
    InsufficientSynthetic { needed: usize, available: usize },
    #[error("original subset has {actual} examples, expected round({fraction} * {base_n}) = {expected}")]
    OriginalSizeMismatch {
        actual: usize,
        expected: usize,
        fraction: f64,
        base_n: usize,
    },
    #[error("invalid mix plan: {0}")]
    InvalidPlan(String),
    #[error("example id {0:?} occurs twice in the augmented set")]
    IdClash(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub original_fraction: f64,
    /// May exceed 1.
    pub synthetic_fraction: f64,
    /// Size of the full original training set.
    pub base_n: usize,
    pub seed: u64,
    /// When set, `original` is the full training set and the subset is
    /// sampled here; otherwise `original` must already be the subset.
    #[serde(default)]
    pub sample_original: bool,
}

impl MixPlan {
    pub fn original_count(&self) -> usize {
        fraction_count(self.original_fraction, self.base_n)
    }

    pub fn synthetic_count(&self) -> usize {
        fraction_count(self.synthetic_fraction, self.base_n)
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if !(0.0..=1.0).contains(&self.original_fraction) {
            return Err(MixError::InvalidPlan(format!(
                "original_fraction {} outside [0, 1]",
                self.original_fraction
            )));
        }
        if !(self.synthetic_fraction >= 0.0 && self.synthetic_fraction.is_finite()) {
            return Err(MixError::InvalidPlan(format!(
                "synthetic_fraction {} must be a finite value >= 0",
                self.synthetic_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub original: usize,
    pub synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub plan: MixPlan,
    pub rng: String,
    pub original_digest: String,
    pub synthetic_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub examples: Vec<Example>,
    /// Parallel to `examples`.
    pub origins: Vec<Origin>,
    pub composition: Composition,
    pub provenance: MixProvenance,
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn build_augmented(
    original: &Dataset,
    synthetic: &[SyntheticRecord],
    plan: &MixPlan,
) -> Result<AugmentedDataset, MixError> {
    plan.validate()?;
    let n_o = plan.original_count();
    let originals = if plan.sample_original {
        if original.len() != plan.base_n {
            return Err(MixError::InvalidPlan(format!(
                "sample_original expects the full set of {} examples, got {}",
                plan.base_n,
                original.len()
            )));
        }
        sample_fraction(original, plan.original_fraction, sub_seed(plan.seed, "mix/original", 0))?
    } else {
        original.clone()
    };
    if originals.len() != n_o {
        return Err(MixError::OriginalSizeMismatch {
            actual: originals.len(),
            expected: n_o,
            fraction: plan.original_fraction,
            base_n: plan.base_n,
        });
    }

    let n_s = plan.synthetic_count();
    if synthetic.len() < n_s {
        return Err(MixError::InsufficientSynthetic {
            needed: n_s,
            available: synthetic.len(),
        });
    }
    let mut by_job: Vec<&SyntheticRecord> = synthetic.iter().collect();
    by_job.sort_by_key(|r| r.job_index);
    let chosen: Vec<SyntheticRecord> = by_job.into_iter().take(n_s).cloned().collect();

    let mut rows: Vec<(Example, Origin)> = originals
        .examples
        .iter()
        .cloned()
        .map(|e| (e, Origin::Original))
        .chain(chosen.iter().map(|r| (r.to_example(), Origin::Synthetic)))
        .collect();
    let mut ids = HashSet::new();
    for (e, _) in &rows {
        if !ids.insert(e.id.as_str()) {
            return Err(MixError::IdClash(e.id.clone()));
        }
    }
    SeededRng::new(sub_seed(plan.seed, "mix/shuffle", 0)).shuffle(&mut rows);
    let (examples, origins) = rows.into_iter().unzip();

    Ok(AugmentedDataset {
        examples,
        origins,
        composition: Composition {
            original: n_o,
            synthetic: n_s,
        },
        provenance: MixProvenance {
            plan: plan.clone(),
            rng: RNG_NAME.to_string(),
            original_digest: digest(&to_jsonl(&originals.examples)),
            synthetic_digest: digest(&records_to_jsonl(&chosen)),
        },
    })
}

impl AugmentedDataset {
    pub fn to_dataset(&self, task_id: &str) -> Dataset {
        Dataset {
            examples: self.examples.clone(),
            split: Split::Train,
            task_id: task_id.to_string(),
            assigned_ids: 0,
        }
    }

    /// JSONL of the examples; with `markers`, each line also carries its origin.
    pub fn to_jsonl(&self, markers: bool) -> String {
        if !markers {
            return to_jsonl(&self.examples);
        }
        #[derive(Serialize)]
        struct Marked<'a> {
            #[serde(flatten)]
            example: &'a Example,
            origin: Origin,
        }
        let mut out = String::new();
        for (example, &origin) in self.examples.iter().zip(&self.origins) {
            out.push_str(&serde_json::to_string(&Marked { example, origin }).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn provenance_path(jsonl: &Path) -> PathBuf {
        jsonl.with_extension("provenance.json")
    }

    /// Writes the JSONL file plus a `.provenance.json` sidecar.
    pub fn save(&self, path: &Path, markers: bool) -> Result<(), MixError> {
        write_text(path, &self.to_jsonl(markers))?;
        let sidecar = serde_json::json!({
            "composition": self.composition,
            "provenance": self.provenance,
        });
        write_text(
            &Self::provenance_path(path),
            &serde_json::to_string_pretty(&sidecar).expect("serializes"),
        )?;
        Ok(())
    }
}

/// `"p%"` when `count` is exactly what the rounding rule yields for an
/// integer percentage `p` of `base_n`, otherwise the exact percentage with
/// two decimals.
pub fn percent_label(count: usize, base_n: usize) -> String {
    if base_n == 0 {
        return if count == 0 { "0%".into() } else { "n/a".into() };
    }
    let exact = count as f64 * 100.0 / base_n as f64;
    let p = exact.round();
    if fraction_count(p / 100.0, base_n) == count {
        format!("{}%", p as u64)
    } else {
        format!("{exact:.2}%")
    }
}

/// First line is `"<original%> / <synthetic%>"`; absolute counts follow.
pub fn composition_report(a: &AugmentedDataset) -> String {
    composition_text(a.composition, a.provenance.plan.base_n)
}

pub fn composition_text(c: Composition, base_n: usize) -> String {
    let o = percent_label(c.original, base_n);
    let s = percent_label(c.synthetic, base_n);
    let mut out = format!("{o} / {s}\n");
    out.push_str(&format!("{:<10} {:>9} {:>9}\n", "part", "percent", "count"));
    out.push_str(&format!("{:<10} {:>9} {:>9}\n", "original", o, c.original));
    out.push_str(&format!("{:<10} {:>9} {:>9}\n", "synthetic", s, c.synthetic));
    out.push_str(&format!(
        "{:<10} {:>9} {:>9}\n",
        "total",
        percent_label(c.original + c.synthetic, base_n),
        c.original + c.synthetic
    ));
    out
}
