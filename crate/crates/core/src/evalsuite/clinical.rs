use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{nonempty, EvalPair};
use crate::error::{Error, Result};
use crate::generator::normalize_words;
use crate::templates::DISEASE_TRIGGERS;

/// Reads disease labels out of report text by trigger phrases.
#[derive(Clone, Debug)]
pub struct KeywordLabeler {
    triggers: Vec<Vec<Vec<String>>>,
}

impl KeywordLabeler {
    pub fn new(triggers: Vec<Vec<String>>) -> Result<Self> {
        if triggers.iter().all(Vec::is_empty) {
            return Err(Error::Invalid("keyword labeler has no trigger phrases".into()));
        }
        let triggers = triggers
            .into_iter()
            .map(|phrases| phrases.iter().map(|p| normalize_words(p)).filter(|t| !t.is_empty()).collect())
            .collect();
        Ok(Self { triggers })
    }

    /// Trigger table for the synthetic report templates.
    pub fn template_bank() -> Self {
        let table = DISEASE_TRIGGERS
            .iter()
            .map(|phrases| phrases.iter().map(|p| p.to_string()).collect())
            .collect();
        Self::new(table).expect("template triggers are nonempty")
    }

    pub fn num_labels(&self) -> usize {
        self.triggers.len()
    }

    pub fn labels(&self, tokens: &[String]) -> BTreeSet<usize> {
        self.triggers
            .iter()
            .enumerate()
            .filter(|(_, phrases)| phrases.iter().any(|p| tokens.windows(p.len()).any(|w| w == p.as_slice())))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels_of_text(&self, text: &str) -> BTreeSet<usize> {
        self.labels(&normalize_words(text))
    }
}

impl Default for KeywordLabeler {
    fn default() -> Self {
        Self::template_bank()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClinicalScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        // nothing predicted and nothing to find counts as full agreement
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                ..Self::default()
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }

    pub fn for_pair(labeler: &KeywordLabeler, pair: &EvalPair) -> Self {
        let c = labeler.labels(&pair.candidate);
        let r = labeler.labels(&pair.reference);
        Self::from_counts(c.intersection(&r).count(), c.difference(&r).count(), r.difference(&c).count())
    }
}

/// Micro-averaged precision, recall and F1 of the extracted label sets.
pub fn clinical_f1(corpus: &[EvalPair], labeler: &KeywordLabeler) -> Result<ClinicalScore> {
    nonempty(corpus, "clinical_f1")?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for pair in corpus {
        let s = ClinicalScore::for_pair(labeler, pair);
        tp += s.true_positives;
        fp += s.false_positives;
        fn_ += s.false_negatives;
    }
    Ok(ClinicalScore::from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgraph::NUM_ENTITIES;
    use crate::templates::DISEASE_PHRASES;

    #[test]
    fn every_template_phrase_yields_its_own_label() {
        let labeler = KeywordLabeler::template_bank();
        assert_eq!(labeler.num_labels(), NUM_ENTITIES);
        for (k, phrases) in DISEASE_PHRASES.iter().enumerate() {
            for p in *phrases {
                assert_eq!(labeler.labels_of_text(p), BTreeSet::from([k]), "{p}");
            }
        }
        for s in crate::templates::NORMAL_SENTENCES {
            assert!(labeler.labels_of_text(s).is_empty(), "{s}");
        }
    }

    #[test]
    fn exact_and_empty_mentions() {
        let labeler = KeywordLabeler::template_bank();
        let exact = [EvalPair::new("a", "there is mild cardiomegaly .", "the heart is moderately enlarged .")];
        assert_eq!(clinical_f1(&exact, &labeler).unwrap().f1, 1.0);
        let none = [EvalPair::new("a", "the trachea is midline .", "there is mild cardiomegaly .")];
        let s = clinical_f1(&none, &labeler).unwrap();
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
    }

    #[test]
    fn empty_labeler_is_rejected() {
        assert!(KeywordLabeler::new(vec![vec![]; 3]).is_err());
    }
}
