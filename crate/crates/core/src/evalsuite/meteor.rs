use super::{nonempty, order_free_mean, EvalPair};
use crate::error::Result;

/// Greedy exact-match alignment: candidate position -> reference position.
/// Each candidate token takes the reference slot that extends the current
/// chunk when possible, otherwise the earliest unused match.
fn align(candidate: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<Option<usize>> = Vec::with_capacity(candidate.len());
    for (i, word) in candidate.iter().enumerate() {
        let follow = i
            .checked_sub(1)
            .and_then(|p| out[p])
            .map(|r| r + 1)
            .filter(|&r| r < reference.len() && !used[r] && &reference[r] == word);
        let slot = follow.or_else(|| (0..reference.len()).find(|&r| !used[r] && &reference[r] == word));
        if let Some(r) = slot {
            used[r] = true;
        }
        out.push(slot);
    }
    out
}

/// `Fmean * (1 - 0.5 (chunks / m)^3)` with `Fmean = 10PR / (R + 9P)`.
pub fn meteor_sample(pair: &EvalPair) -> f64 {
    let alignment = align(&pair.candidate, &pair.reference);
    let m = alignment.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for slot in &alignment {
        match (*slot, prev) {
            (Some(r), Some(p)) if r == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *slot;
    }
    let p = m as f64 / pair.candidate.len() as f64;
    let r = m as f64 / pair.reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Mean per-sample METEOR restricted to exact matches.
pub fn meteor_lite(corpus: &[EvalPair]) -> Result<f64> {
    nonempty(corpus, "meteor_lite")?;
    Ok(order_free_mean(corpus.iter().map(meteor_sample).collect()))
}
