use super::{ngram_counts, nonempty, EvalPair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuOptions {
    /// Add one to matched and total n-gram counts of every order.
    pub smoothing: bool,
}

/// Clipped matches and candidate n-gram totals for orders `1..=max_n`.
fn corpus_counts(corpus: &[EvalPair], max_n: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let mut matched = vec![0; max_n];
    let mut total = vec![0; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for pair in corpus {
        cand_len += pair.candidate.len();
        ref_len += pair.reference.len();
        for n in 1..=max_n {
            let reference = ngram_counts(&pair.reference, n);
            for (gram, count) in ngram_counts(&pair.candidate, n) {
                matched[n - 1] += count.min(reference.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    (matched, total, cand_len, ref_len)
}

fn bleu_from_counts(matched: &[usize], total: &[usize], cand_len: usize, ref_len: usize, n: usize, opts: BleuOptions) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    for k in 0..n {
        let (m, t) = if opts.smoothing {
            (matched[k] + 1, total[k] + 1)
        } else {
            (matched[k], total[k])
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    bp * (log_sum / n as f64).exp()
}

/// Corpus BLEU-`n`: geometric mean of clipped n-gram precisions for orders
/// `1..=n` times the brevity penalty.
pub fn bleu(corpus: &[EvalPair], n: usize, opts: BleuOptions) -> Result<f64> {
    nonempty(corpus, "bleu")?;
    if !(1..=4).contains(&n) {
        return Err(Error::Invalid(format!("bleu: order {n} outside 1..=4")));
    }
    let (m, t, c, r) = corpus_counts(corpus, n);
    Ok(bleu_from_counts(&m, &t, c, r, n, opts))
}

/// BLEU-1 through BLEU-4.
pub fn bleu_all(corpus: &[EvalPair], opts: BleuOptions) -> Result<[f64; 4]> {
    nonempty(corpus, "bleu")?;
    let (m, t, c, r) = corpus_counts(corpus, 4);
    Ok([1, 2, 3, 4].map(|n| bleu_from_counts(&m, &t, c, r, n, opts)))
}
