use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Tensor};
use crate::error::{Error, Result};
use crate::generator::Tokenizer;
use crate::kgraph::{build_chexpert_graph, KnowledgeGraph};
use crate::model::ReportModel;
use crate::nn::ParamStore;
use crate::rng::SeedTree;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::data::{Dataset, SampleRecord, Split};

pub const CURVE_SCHEMA_VERSION: u32 = 1;

/// The knowledge graph named by the config, or the built-in one.
pub fn load_graph(cfg: &TrainConfig) -> Result<KnowledgeGraph> {
    match &cfg.graph_file {
        Some(path) => KnowledgeGraph::parse_override(&std::fs::read_to_string(path)?),
        None => Ok(build_chexpert_graph()),
    }
}

/// Fresh model for `cfg`, initialised from its seed.
pub fn build_model(cfg: &TrainConfig) -> Result<ReportModel<f32>> {
    cfg.validate()?;
    ReportModel::new(
        cfg.model(),
        Tokenizer::from_template_bank(),
        load_graph(cfg)?,
        &SeedTree::new(cfg.seed).child("model"),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub schema_version: u32,
    /// Mean training-set loss before the first update.
    pub initial_train_loss: f64,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
}

impl LossCurve {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Adam without weight decay or schedule.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients times `grad_scale`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grad_scale: f32) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((_, param), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(grad) = param.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (((w, g), mi), vi) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * grad_scale;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}

/// Image tensor and target ids of one sample.
pub struct Prepared {
    pub image: Tensor<f32>,
    pub targets: Vec<usize>,
}

pub fn prepare(model: &ReportModel<f32>, records: &[&SampleRecord]) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            Ok(Prepared {
                image: r.image(model.config.patches, model.config.patch_dim)?,
                targets: model.target_ids(&r.report),
            })
        })
        .collect()
}

fn checked(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged(format!("{what} loss is {loss}")))
    }
}

/// Mean per-sample loss without updating anything.
pub fn mean_loss(model: &ReportModel<f32>, samples: &[Prepared], reduction: Reduction) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += model.eval_loss(&s.image, &s.targets, reduction)?;
    }
    checked(total / samples.len() as f64, "evaluation")
}

/// Trains `model` in place on the train split with shuffled mini-batches.
/// The batch loss is the mean of the per-sample losses.
pub fn train(
    model: &mut ReportModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<LossCurve> {
    cfg.validate()?;
    let train_set = prepare(model, &data.split(Split::Train))?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let val_set = prepare(model, &data.split(Split::Val))?;
    let initial = mean_loss(model, &train_set, cfg.loss_reduction)?;
    let mut shuffle_rng = SeedTree::new(cfg.seed).child("train").stream("shuffle");
    let mut adam = Adam::new(&model.params, cfg);
    model.params.zero_grads();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train_set[i];
                let tape = Tape::new();
                let p = model.params.bind(&tape, true);
                let loss = model.loss(&p, &tape, &s.image, &s.targets, cfg.loss_reduction)?;
                batch_loss += checked(loss.item() as f64, &format!("epoch {epoch} step {steps}"))?;
                tape.backward(loss)?;
                model.params.accumulate_grads(&p);
            }
            adam.step(&mut model.params, 1.0 / batch.len() as f32);
            steps += 1;
            loss_sum += batch_loss / batch.len() as f64;
            batches += 1;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(model, &val_set, cfg.loss_reduction)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    Ok(LossCurve {
        schema_version: CURVE_SCHEMA_VERSION,
        initial_train_loss: initial,
        steps,
        epochs,
    })
}
