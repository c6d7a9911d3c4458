use std::collections::{BTreeMap, HashSet};

use super::{ngram_counts, nonempty, order_free_mean, EvalPair};
use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

type Vector<'a> = BTreeMap<&'a [String], f64>;

/// TF-IDF vector (raw counts times `log N - log max(1, df)`) and its norm.
fn tfidf<'a>(tokens: &'a [String], n: usize, df: &BTreeMap<&[String], usize>, log_docs: f64) -> (Vector<'a>, f64) {
    let mut norm = 0.0;
    let vec: Vector<'a> = ngram_counts(tokens, n)
        .into_iter()
        .map(|(gram, tf)| {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            norm += w * w;
            (gram, w)
        })
        .collect();
    (vec, norm.sqrt())
}

/// Per-sample CIDEr-D (already scaled by 10). Document frequencies come from
/// the references, one document per sample.
pub fn cider_d_samples(corpus: &[EvalPair]) -> Result<Vec<f64>> {
    nonempty(corpus, "cider")?;
    let distinct: HashSet<&Vec<String>> = corpus.iter().map(|p| &p.reference).collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid(
            "cider: needs at least two distinct references for document frequencies".into(),
        ));
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut df: Vec<BTreeMap<&[String], usize>> = vec![BTreeMap::new(); 4];
    for pair in corpus {
        for n in 1..=4 {
            for gram in ngram_counts(&pair.reference, n).into_keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for pair in corpus {
        let delta = pair.candidate.len() as f64 - pair.reference.len() as f64;
        let length_penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 1..=4 {
            let (hyp, hyp_norm) = tfidf(&pair.candidate, n, &df[n - 1], log_docs);
            let (reference, ref_norm) = tfidf(&pair.reference, n, &df[n - 1], log_docs);
            let mut dot = 0.0;
            for (gram, h) in &hyp {
                if let Some(r) = reference.get(gram) {
                    dot += h.min(*r) * r;
                }
            }
            if hyp_norm != 0.0 && ref_norm != 0.0 {
                dot /= hyp_norm * ref_norm;
            }
            total += dot * length_penalty;
        }
        scores.push(total / 4.0 * CIDER_SCALE);
    }
    Ok(scores)
}

/// Corpus CIDEr-D: the mean of [`cider_d_samples`].
pub fn cider_d(corpus: &[EvalPair]) -> Result<f64> {
    Ok(order_free_mean(cider_d_samples(corpus)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_reference_corpus_is_rejected() {
        let corpus = [EvalPair::new("a", "x", "a b"), EvalPair::new("b", "y", "a b")];
        assert!(cider_d(&corpus).is_err());
        assert!(cider_d(&[]).is_err());
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let corpus = [EvalPair::new("a", "x y z", "a b c"), EvalPair::new("b", "d e f", "d e f")];
        let s = cider_d_samples(&corpus).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
    }
}
