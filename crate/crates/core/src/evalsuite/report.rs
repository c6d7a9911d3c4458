use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bleu::{bleu_all, BleuOptions};
use super::cider::cider_d_samples;
use super::clinical::{clinical_f1, ClinicalScore, KeywordLabeler};
use super::meteor::meteor_sample;
use super::rouge::rouge_l_sample;
use super::{order_free_mean, EvalPair};
use crate::error::{Error, Result};

pub const METRIC_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider_d: f64,
    pub clinical: ClinicalScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub samples_evaluated: usize,
    pub bleu_smoothing: bool,
    /// Corpus scores keyed by metric name. CIDEr-D is on the conventional x10 scale.
    pub corpus: BTreeMap<String, f64>,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.corpus.get(metric).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Every metric over one corpus.
pub fn evaluate_corpus(corpus: &[EvalPair], labeler: &KeywordLabeler, opts: BleuOptions) -> Result<MetricReport> {
    super::nonempty(corpus, "evaluate")?;
    let bleu = bleu_all(corpus, opts)?;
    let cider = cider_d_samples(corpus)?;
    let clinical = clinical_f1(corpus, labeler)?;
    let samples: Vec<SampleMetrics> = corpus
        .iter()
        .zip(&cider)
        .map(|(pair, &c)| {
            Ok(SampleMetrics {
                id: pair.id.clone(),
                bleu: bleu_all(std::slice::from_ref(pair), opts)?,
                rouge_l: rouge_l_sample(pair),
                meteor_lite: meteor_sample(pair),
                cider_d: c,
                clinical: ClinicalScore::for_pair(labeler, pair),
            })
        })
        .collect::<Result<_>>()?;
    let mut scores = BTreeMap::new();
    for (n, b) in bleu.iter().enumerate() {
        scores.insert(format!("bleu_{}", n + 1), *b);
    }
    scores.insert("rouge_l".into(), order_free_mean(samples.iter().map(|s| s.rouge_l).collect()));
    scores.insert("meteor_lite".into(), order_free_mean(samples.iter().map(|s| s.meteor_lite).collect()));
    scores.insert("cider_d".into(), order_free_mean(cider));
    scores.insert("clinical_precision".into(), clinical.precision);
    scores.insert("clinical_recall".into(), clinical.recall);
    scores.insert("clinical_f1".into(), clinical.f1);
    Ok(MetricReport {
        schema_version: METRIC_SCHEMA_VERSION,
        samples_evaluated: corpus.len(),
        bleu_smoothing: opts.smoothing,
        corpus: scores,
        samples,
    })
}

/// Parses `id<TAB>text` lines (a single space also separates the id).
pub fn read_id_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .or_else(|| line.split_once(' '))
            .unwrap_or((line, ""));
        let id = id.trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Dataset(format!("{}:{}: duplicate id {id}", path.display(), n + 1)));
        }
        out.push((id, body.trim().to_string()));
    }
    Ok(out)
}

pub fn write_id_lines(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (id, body) in rows {
        if id.contains(['\t', '\n']) || body.contains('\n') {
            return Err(Error::Invalid(format!("id line for {id:?} would not round-trip")));
        }
        text.push_str(id);
        text.push('\t');
        text.push_str(body);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Pairs candidate and reference files by id, in reference order.
pub fn read_pairs(candidates: &Path, references: &Path) -> Result<Vec<EvalPair>> {
    let cands: BTreeMap<String, String> = read_id_lines(candidates)?.into_iter().collect();
    let refs = read_id_lines(references)?;
    if cands.len() != refs.len() {
        return Err(Error::Dataset(format!(
            "{} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    refs.into_iter()
        .map(|(id, reference)| {
            let cand = cands
                .get(&id)
                .ok_or_else(|| Error::Dataset(format!("no candidate for id {id}")))?;
            Ok(EvalPair::new(id, cand, &reference))
        })
        .collect()
}
