//! Golden metric corpus with hand-derived expected values.

#![allow(dead_code)]

use kgreport_core::evalsuite::{bleu, cider_d, clinical_f1, meteor_lite, rouge_l, BleuOptions, EvalPair, KeywordLabeler};

const CORPUS: &str = include_str!("../fixtures/golden_corpus.tsv");

fn group(metric: &str) -> Vec<EvalPair> {
    CORPUS
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .filter(|f| f[0] == metric)
        .map(|f| EvalPair::new(f[1], f[2], f[3]))
        .collect()
}

pub struct GoldenCase {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

/// ROUGE-L F with beta = 1.2.
fn rouge_f(p: f64, r: f64) -> f64 {
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// METEOR-lite from matches, chunks and lengths.
fn meteor(m: f64, chunks: f64, cand: f64, reference: f64) -> f64 {
    let (p, r) = (m / cand, m / reference);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks / m).powi(3))
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let plain = BleuOptions { smoothing: false };
    let ln2 = std::f64::consts::LN_2;
    // sample c1 scores 1 on unigrams and bigrams; sample c2 shares one
    // unigram of weight ln 2 against norms sqrt(2) ln 2 and ln 2
    let c2 = (ln2 * ln2) / (2f64.sqrt() * ln2 * ln2);
    let cider_want = ((2.0 / 4.0) * 10.0 + (c2 / 4.0) * 10.0) / 2.0;
    // tp 3, fp 1, fn 2
    let (p, r) = (3.0 / 4.0, 3.0 / 5.0);
    vec![
        GoldenCase { name: "bleu_1 brevity penalty", got: bleu(&group("bleu1_bp"), 1, plain).unwrap(), want: (1.0f64 - 6.0 / 3.0).exp() },
        GoldenCase { name: "bleu_4", got: bleu(&group("bleu4"), 4, plain).unwrap(), want: (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25) },
        GoldenCase { name: "rouge_l", got: rouge_l(&group("rouge")).unwrap(), want: rouge_f(3.0 / 4.0, 1.0) },
        GoldenCase { name: "meteor_lite identical", got: meteor_lite(&group("meteor_same")).unwrap(), want: meteor(4.0, 1.0, 4.0, 4.0) },
        GoldenCase { name: "meteor_lite two chunks", got: meteor_lite(&group("meteor_swap")).unwrap(), want: meteor(4.0, 2.0, 4.0, 4.0) },
        GoldenCase { name: "meteor_lite gap", got: meteor_lite(&group("meteor_gap")).unwrap(), want: meteor(2.0, 2.0, 3.0, 3.0) },
        GoldenCase { name: "cider_d", got: cider_d(&group("cider")).unwrap(), want: cider_want },
        GoldenCase { name: "clinical_f1", got: clinical_f1(&group("clinical"), &KeywordLabeler::template_bank()).unwrap().f1, want: 2.0 * p * r / (p + r) },
    ]
}
