//! Finite-difference checks of every differentiable op and of the composed
//! model at tiny dimensions, all in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Reduction, Tape, Tensor, Var};
use crate::error::Result;
use crate::fusion::FusionStrategy;
use crate::generator::Tokenizer;
use crate::kgraph::build_chexpert_graph;
use crate::model::{ModelConfig, ReportModel};
use crate::nn::Bound;
use crate::rng::SeedTree;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

type Case = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fixed random weights so a tensor-valued op reduces to a scalar.
fn readout<'t>(x: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&x.shape(), &mut rng);
    Ok(x.mul(x.tape().constant(w))?.sum())
}

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("matmul", vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], Box::new(|_, v| readout(v[0].matmul(v[1])?, 1))),
        ("matmul_nt", vec![random(&[3, 4], &mut rng), random(&[2, 4], &mut rng)], Box::new(|_, v| readout(v[0].matmul_nt(v[1])?, 1))),
        ("matmul_tn", vec![random(&[4, 3], &mut rng), random(&[4, 2], &mut rng)], Box::new(|_, v| readout(v[0].matmul_ex(v[1], true, false)?, 1))),
        ("matmul_tt", vec![random(&[4, 3], &mut rng), random(&[2, 4], &mut rng)], Box::new(|_, v| readout(v[0].matmul_ex(v[1], true, true)?, 1))),
        ("add_sub_mul", vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)], Box::new(|_, v| readout(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?, 2))),
        ("add_row", vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)], Box::new(|_, v| readout(v[0].add_row(v[1])?.gelu(), 3))),
        ("affine", vec![random(&[5], &mut rng)], Box::new(|_, v| readout(v[0].affine(-1.5, 0.3).sigmoid(), 4))),
        ("scale_by", vec![random(&[2, 3], &mut rng), random(&[1], &mut rng)], Box::new(|_, v| readout(v[0].scale_by(v[1])?, 5))),
        ("softmax_rows", vec![random(&[3, 4], &mut rng)], Box::new(|_, v| readout(v[0].softmax(1)?, 6))),
        ("softmax_cols", vec![random(&[3, 4], &mut rng)], Box::new(|_, v| readout(v[0].softmax(0)?, 6))),
        ("softmax_causal", vec![random(&[3, 3], &mut rng)], Box::new(|_, v| readout(v[0].softmax_causal()?, 7))),
        (
            "layer_norm",
            vec![random(&[3, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)],
            Box::new(|_, v| readout(v[0].layer_norm(v[1], v[2], 1e-5)?, 8)),
        ),
        ("gelu", vec![random(&[7], &mut rng)], Box::new(|_, v| readout(v[0].gelu(), 9))),
        ("sigmoid", vec![random(&[7], &mut rng)], Box::new(|_, v| readout(v[0].sigmoid(), 10))),
        ("narrow", vec![random(&[4, 5], &mut rng)], Box::new(|_, v| readout(v[0].narrow(1, 1, 3)?.narrow(0, 2, 2)?, 11))),
        ("gather", vec![random(&[5, 3], &mut rng)], Box::new(|t, v| readout(t.gather(v[0], &[4, 0, 4, 2])?, 12))),
        ("mean_rows", vec![random(&[4, 3], &mut rng)], Box::new(|_, v| readout(v[0].mean_rows()?, 13))),
        (
            "concat",
            vec![random(&[2, 3], &mut rng), random(&[2, 2], &mut rng)],
            Box::new(|_, v| readout(crate::autodiff::concat(&[v[0], v[1]], 1)?, 14)),
        ),
        (
            "cross_entropy",
            vec![random(&[4, 6], &mut rng)],
            Box::new(|_, v| v[0].cross_entropy(&[5, 0, 1, 3], &[true, true, false, true], Reduction::Sum)),
        ),
    ]
}

fn tiny_model_config(fusion: FusionStrategy, use_gcn: bool) -> ModelConfig {
    ModelConfig {
        patches: 4,
        patch_dim: 3,
        d_model: 8,
        heads: 2,
        gcn_layers: 3,
        allow_gcn_override: false,
        decoder_layers: 1,
        max_context: 48,
        fusion,
        use_gcn,
        instruction: "diagnosis report .".into(),
    }
}

/// Gradient of the report loss with respect to every model parameter.
fn model_case(fusion: FusionStrategy, use_gcn: bool, seed: u64) -> Result<f64> {
    let cfg = tiny_model_config(fusion, use_gcn);
    let model = ReportModel::<f64>::new(cfg.clone(), Tokenizer::from_template_bank(), build_chexpert_graph(), &SeedTree::new(seed))?;
    let mut rng = SeedTree::new(seed).stream("image");
    let n = cfg.patches * cfg.patch_dim;
    let image = Tensor::new(vec![cfg.patches, cfg.patch_dim], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let targets = model.target_ids("there is mild cardiomegaly .");
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    // the larger step keeps round-off below the truncation error of the stencil
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            model.loss(&p, tape, &image, &targets, Reduction::Mean)
        },
        &inputs,
        5e-3,
    )
}

fn record(name: impl Into<String>, err: f64) -> GradCase {
    GradCase {
        name: name.into(),
        max_relative_error: err,
        passed: err < GRAD_TOLERANCE,
    }
}

/// Every op case, then the composed model under each fusion strategy.
/// `seed` fixes the random inputs and model weights.
pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(seed) {
        out.push(record(name, grad_check(|t, v| f(t, v), &inputs, 1e-4)?));
    }
    let models = [
        (FusionStrategy::Modality, true),
        (FusionStrategy::Element, true),
        (FusionStrategy::Average, true),
        (FusionStrategy::Disease, true),
        (FusionStrategy::Modality, false),
        (FusionStrategy::None, false),
    ];
    for (fusion, gcn) in models {
        let name = format!("model/{fusion}{}", if gcn { "+gcn" } else { "" });
        out.push(record(name, model_case(fusion, gcn, seed)?));
    }
    Ok(out)
}
