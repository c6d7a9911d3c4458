use super::{nonempty, order_free_mean, EvalPair};
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1 + b^2) P R / (R + b^2 P)`.
pub fn rouge_l_sample(pair: &EvalPair) -> f64 {
    let lcs = lcs_len(&pair.candidate, &pair.reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pair.candidate.len() as f64;
    let r = lcs as f64 / pair.reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    nonempty(corpus, "rouge_l")?;
    Ok(order_free_mean(corpus.iter().map(rouge_l_sample).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_len(&['a', 'b', 'c', 'd'], &['a', 'c', 'd']), 3);
        assert_eq!(lcs_len::<char>(&[], &['a']), 0);
        assert_eq!(lcs_len(&[1, 3, 2, 4], &[3, 4, 1, 2]), 2);
    }

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(rouge_l(&[EvalPair::new("a", "a b c", "a b c")]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[EvalPair::new("a", "a b c", "x y")]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[EvalPair::new("a", "", "x y")]).unwrap(), 0.0);
    }
}
