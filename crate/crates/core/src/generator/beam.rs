use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::EOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank by mean instead of summed log-probability.
    pub length_norm: bool,
    pub eos: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 3,
            max_len: 96,
            length_norm: false,
            eos: EOS,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_len == 0 {
            return Err(Error::Config(format!(
                "beam width ({}) and max_len ({}) must be at least 1",
                self.width, self.max_len
            )));
        }
        Ok(())
    }
}

/// Source of next-token log-probabilities for a prefix of generated tokens.
pub trait NextTokenScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, EOS included when terminated.
    pub tokens: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    /// Ranking score: `log_prob`, or its per-token mean with length normalization.
    pub score: f64,
    pub terminated: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            step_log_probs: Vec::new(),
            log_prob: 0.0,
            score: 0.0,
            terminated: false,
        }
    }

    fn extend(&self, token: usize, lp: f64, cfg: &BeamConfig) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut steps = self.step_log_probs.clone();
        steps.push(lp);
        let log_prob = self.log_prob + lp;
        let score = if cfg.length_norm {
            log_prob / tokens.len() as f64
        } else {
            log_prob
        };
        Self {
            terminated: token == cfg.eos,
            tokens,
            step_log_probs: steps,
            log_prob,
            score,
        }
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((_, rest)) if self.terminated => rest,
            _ => &self.tokens,
        }
    }
}

/// Higher score first, ties broken by lexicographic token order.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `width` best expansions of all live beams per step. Hypotheses
/// ending in EOS are retired; those still live at `max_len` are returned
/// unterminated. The result is sorted best first.
pub fn beam_search<S: NextTokenScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut live = vec![Hypothesis::root()];
    let mut done = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates = Vec::new();
        for beam in &live {
            let lps = scorer.log_probs(&beam.tokens)?;
            if lps.is_empty() {
                return Err(Error::Invalid("scorer returned no log-probabilities".into()));
            }
            for (token, &lp) in lps.iter().enumerate() {
                if lp.is_nan() {
                    return Err(Error::Diverged(format!("NaN log-probability for token {token}")));
                }
                if lp > f64::NEG_INFINITY {
                    candidates.push(beam.extend(token, lp, cfg));
                }
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.width);
        live.clear();
        for c in candidates {
            if c.terminated {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    Ok(done)
}

/// Argmax decoding, first token id on ties.
pub fn greedy<S: NextTokenScorer + ?Sized>(scorer: &mut S, max_len: usize, eos: usize) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let lps = scorer.log_probs(&tokens)?;
        let best = lps
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            })
            .ok_or_else(|| Error::Invalid("scorer returned no log-probabilities".into()))?
            .0;
        tokens.push(best);
        if best == eos {
            break;
        }
    }
    Ok(tokens)
}

/// `log_softmax` in f64.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}
