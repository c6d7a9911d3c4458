//! The six-row component ablation: each row switches off or swaps one part
//! of the full model, trained and evaluated on the same data per seed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::order_free_mean;
use crate::fusion::FusionStrategy;

use super::config::TrainConfig;
use super::data::{generate_dataset, Dataset, Split};
use super::evaluate::{evaluate, EvalOptions};
use super::train::{build_model, load_graph, train};

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

/// Metrics carried into the table.
pub const TABLE_METRICS: [&str; 5] = ["bleu_4", "rouge_l", "meteor_lite", "cider_d", "clinical_f1"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: char,
    pub fusion: FusionStrategy,
    pub use_gcn: bool,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow { label: 'a', fusion: FusionStrategy::None, use_gcn: false },
        AblationRow { label: 'b', fusion: FusionStrategy::Disease, use_gcn: true },
        AblationRow { label: 'c', fusion: FusionStrategy::Average, use_gcn: true },
        AblationRow { label: 'd', fusion: FusionStrategy::Element, use_gcn: true },
        AblationRow { label: 'e', fusion: FusionStrategy::Modality, use_gcn: false },
        AblationRow { label: 'f', fusion: FusionStrategy::Modality, use_gcn: true },
    ];

    pub fn full() -> Self {
        Self::ALL[5]
    }

    pub fn description(&self) -> &'static str {
        match self.label {
            'a' => "regional features only",
            'b' => "disease features only, with GCN",
            'c' => "average fusion, with GCN",
            'd' => "element-wise fusion, with GCN",
            'e' => "modality-wise fusion, without GCN",
            _ => "modality-wise fusion, with GCN",
        }
    }

    /// Config keys this row must change relative to the full model.
    pub fn intended_diff(&self) -> Vec<&'static str> {
        let full = Self::full();
        let mut keys = Vec::new();
        if self.fusion != full.fusion {
            keys.push("fusion");
        }
        if self.use_gcn != full.use_gcn {
            keys.push("use_gcn");
        }
        keys
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            fusion: self.fusion,
            use_gcn: self.use_gcn,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Table metrics, absent when the row failed.
    pub metrics: Option<BTreeMap<String, f64>>,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub gcn_calls: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub description: String,
    pub config_diff: Vec<String>,
    /// Mean over the seeds that completed.
    pub mean: BTreeMap<String, f64>,
    pub per_seed: Vec<SeedResult>,
}

/// Outcome of the directional check of the full model against row (a).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub full_clinical_f1: Option<f64>,
    pub baseline_clinical_f1: Option<f64>,
    pub full_per_seed: Vec<Option<f64>>,
    pub baseline_per_seed: Vec<Option<f64>>,
    pub passed: bool,
    pub diagnostic: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub base_config: String,
    pub rows: Vec<RowResult>,
    pub directional: DirectionalCheck,
}

impl AblationTable {
    pub fn row(&self, label: char) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table of the seed means.
    pub fn render(&self) -> String {
        let mut out = format!("{:<4}{:<36}", "row", "configuration");
        for m in TABLE_METRICS {
            out.push_str(&format!("{m:>13}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("({}) {:<36}", r.row.label, r.description));
            for m in TABLE_METRICS {
                match r.mean.get(m) {
                    Some(v) => out.push_str(&format!("{v:>13.4}")),
                    None => out.push_str(&format!("{:>13}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates one row for one seed on the given data.
fn run_one(row: AblationRow, cfg: &TrainConfig, data: &Dataset) -> SeedResult {
    let mut result = SeedResult {
        seed: cfg.seed,
        metrics: None,
        initial_train_loss: None,
        final_train_loss: None,
        gcn_calls: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let mut model = build_model(cfg)?;
        let curve = train(&mut model, data, cfg, |_| {})?;
        result.initial_train_loss = Some(curve.initial_train_loss);
        result.final_train_loss = curve.final_train_loss();
        let calls = model.encoder.gcn_calls();
        result.gcn_calls = Some(calls);
        if !row.use_gcn && calls != 0 {
            return Err(Error::Invalid(format!("row ({}) ran {calls} GCN layers", row.label)));
        }
        let ev = evaluate(&model, data, Split::Test, cfg, EvalOptions::default())?;
        let metrics = TABLE_METRICS
            .iter()
            .map(|m| {
                let v = ev.metrics.get(m).ok_or_else(|| Error::Invalid(format!("metric {m} missing")))?;
                Ok((m.to_string(), v))
            })
            .collect::<Result<_>>()?;
        result.metrics = Some(metrics);
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
    }
    result
}

fn seed_mean(results: &[SeedResult]) -> BTreeMap<String, f64> {
    TABLE_METRICS
        .iter()
        .filter_map(|m| {
            let vals: Vec<f64> = results.iter().filter_map(|r| r.metrics.as_ref()?.get(*m).copied()).collect();
            (!vals.is_empty()).then(|| (m.to_string(), order_free_mean(vals)))
        })
        .collect()
}

fn directional(rows: &[RowResult]) -> DirectionalCheck {
    let per_seed = |label: char| -> Vec<Option<f64>> {
        rows.iter()
            .find(|r| r.row.label == label)
            .map(|r| {
                r.per_seed
                    .iter()
                    .map(|s| s.metrics.as_ref().and_then(|m| m.get("clinical_f1").copied()))
                    .collect()
            })
            .unwrap_or_default()
    };
    let mean = |label: char| rows.iter().find(|r| r.row.label == label).and_then(|r| r.mean.get("clinical_f1").copied());
    let (full, base) = (mean('f'), mean('a'));
    let (full_seeds, base_seeds) = (per_seed('f'), per_seed('a'));
    let complete = full_seeds.iter().chain(&base_seeds).all(Option::is_some);
    let passed = complete && matches!((full, base), (Some(f), Some(b)) if f >= b);
    let list = |v: &[Option<f64>]| v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:.4}"))).collect::<Vec<_>>().join(" ");
    let seeds = format!("per seed full [{}], baseline [{}]", list(&full_seeds), list(&base_seeds));
    let diagnostic = match (full, base) {
        (Some(f), Some(b)) if passed => format!("full {f:.4} >= baseline {b:.4}; {seeds}"),
        (Some(f), Some(b)) if !complete => format!("some seeds failed; full {f:.4}, baseline {b:.4}; {seeds}"),
        (Some(f), Some(b)) => format!("full model below baseline: {f:.4} < {b:.4}; {seeds}"),
        _ => "row (a) or (f) produced no metrics".to_string(),
    };
    DirectionalCheck {
        full_clinical_f1: full,
        baseline_clinical_f1: base,
        full_per_seed: full_seeds,
        baseline_per_seed: base_seeds,
        passed,
        diagnostic,
    }
}

/// Runs every row for every seed. Each seed gets its own dataset, shared by
/// all six rows. Row failures are recorded and the remaining rows still run.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let full_base = AblationRow::full().apply(base);
    let mut rows: Vec<RowResult> = Vec::new();
    for row in AblationRow::ALL {
        let diff: Vec<String> = row.apply(&full_base).diff(&full_base).into_iter().map(String::from).collect();
        if diff != row.intended_diff() {
            return Err(Error::Config(format!(
                "row ({}) differs from the full model in {diff:?}, expected {:?}",
                row.label,
                row.intended_diff()
            )));
        }
        rows.push(RowResult {
            row,
            description: row.description().to_string(),
            config_diff: diff,
            mean: BTreeMap::new(),
            per_seed: Vec::new(),
        });
    }
    let graph = load_graph(base)?;
    let datasets = seeds
        .iter()
        .map(|&seed| generate_dataset(&TrainConfig { seed, ..full_base.clone() }, &graph))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..seeds.len()).map(move |s| (r, s))).collect();
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(r, s)| {
            let row = AblationRow::ALL[r];
            let cfg = row.apply(&TrainConfig { seed: seeds[s], ..full_base.clone() });
            run_one(row, &cfg, &datasets[s])
        })
        .collect();
    for (&(r, _), res) in jobs.iter().zip(results) {
        rows[r].per_seed.push(res);
    }
    for row in &mut rows {
        row.mean = seed_mean(&row.per_seed);
    }
    let directional = directional(&rows);
    Ok(AblationTable {
        schema_version: ABLATION_SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        base_config: full_base.to_text(),
        rows,
        directional,
    })
}
