mod common;

use common::golden::golden_cases;
use kgreport_core::evalsuite::{bleu, cider_d, clinical_f1, meteor_lite, rouge_l, BleuOptions, EvalPair, KeywordLabeler};

#[test]
fn golden_corpus_matches_hand_values() {
    for c in golden_cases() {
        assert!((c.got - c.want).abs() < 1e-9, "{}: got {}, want {}", c.name, c.got, c.want);
    }
}

#[test]
fn hand_values_spot_check() {
    // exp(1 - 6/3)
    let bp = golden_cases().into_iter().find(|c| c.name.starts_with("bleu_1")).unwrap();
    assert!((bp.want - 0.36787944117144233).abs() < 1e-15);
    // 2.44 * 0.75 / 2.08
    let r = golden_cases().into_iter().find(|c| c.name == "rouge_l").unwrap();
    assert!((r.want - 0.8798076923076923).abs() < 1e-15);
}

fn corpus() -> Vec<EvalPair> {
    vec![
        EvalPair::new("1", "there is mild cardiomegaly .", "the heart is moderately enlarged ."),
        EvalPair::new("2", "a small left effusion is seen .", "there is a small left pleural effusion ."),
        EvalPair::new("3", "the lungs are clear .", "no acute cardiopulmonary process ."),
        EvalPair::new("4", "findings suggest pneumonia .", "findings are concerning for pneumonia ."),
    ]
}

#[test]
fn every_metric_ignores_sample_order() {
    let labeler = KeywordLabeler::template_bank();
    let opts = BleuOptions::default();
    let score = |c: &[EvalPair]| {
        vec![
            bleu(c, 4, BleuOptions { smoothing: true }).unwrap(),
            bleu(c, 2, opts).unwrap(),
            rouge_l(c).unwrap(),
            meteor_lite(c).unwrap(),
            cider_d(c).unwrap(),
            clinical_f1(c, &labeler).unwrap().f1,
        ]
    };
    let base = score(&corpus());
    let mut reversed = corpus();
    reversed.reverse();
    let mut rotated = corpus();
    rotated.rotate_left(1);
    assert_eq!(score(&reversed), base);
    assert_eq!(score(&rotated), base);
}

#[test]
fn disjoint_pairs_score_zero() {
    let c = [EvalPair::new("1", "x y z", "a b c"), EvalPair::new("2", "u v", "d e")];
    let plain = BleuOptions { smoothing: false };
    assert_eq!(bleu(&c, 1, plain).unwrap(), 0.0);
    assert_eq!(rouge_l(&c).unwrap(), 0.0);
    assert_eq!(meteor_lite(&c).unwrap(), 0.0);
    assert_eq!(cider_d(&c).unwrap(), 0.0);
}
