//! Corpus metrics over (generated, reference) report pairs.

mod bleu;
mod cider;
mod clinical;
mod meteor;
mod report;
mod rouge;

use std::collections::BTreeMap;

pub use bleu::{bleu, bleu_all, BleuOptions};
pub use cider::{cider_d, cider_d_samples, CIDER_SCALE, CIDER_SIGMA};
pub use clinical::{clinical_f1, ClinicalScore, KeywordLabeler};
pub use meteor::{meteor_lite, meteor_sample};
pub use report::{evaluate_corpus, read_id_lines, read_pairs, write_id_lines, MetricReport, SampleMetrics, METRIC_SCHEMA_VERSION};
pub use rouge::{lcs_len, rouge_l, rouge_l_sample, ROUGE_BETA};

use crate::error::{Error, Result};
use crate::generator::normalize_words;

/// One candidate/reference pair of normalized tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, candidate: &str, reference: &str) -> Self {
        Self {
            id: id.into(),
            candidate: normalize_words(candidate),
            reference: normalize_words(reference),
        }
    }
}

pub(crate) fn nonempty(corpus: &[EvalPair], metric: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Invalid(format!("{metric}: empty corpus")));
    }
    Ok(())
}

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Mean that does not depend on the order of `values`.
pub(crate) fn order_free_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}
