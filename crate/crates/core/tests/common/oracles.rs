//! Independent dense-loop versions of the model equations, written against
//! nested `Vec`s with no use of the library's tensor ops.

#![allow(dead_code)]

use std::collections::HashMap;

use kgreport_core::autodiff::Tensor;
use kgreport_core::nn::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::new(vec![m.len(), m[0].len()], flat).unwrap()
}

/// Parameter values by name.
pub fn params(store: &ParamStore<f64>) -> HashMap<String, Vec<f64>> {
    store.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

pub fn param_mat(store: &ParamStore<f64>, name: &str) -> Mat {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    mat(store.get(id))
}

pub fn param_vec(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|row| row.iter().map(|&x| f(x)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, x)| (x - mean) / denom * gamma[j] + beta[j]).collect()
        })
        .collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention with head `h` on columns `h*dk..(h+1)*dk`, followed by `W^O`.
/// Returns the output and the per-head weight matrices.
pub fn mha(query: &Mat, kv: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let (q, k, v) = (matmul(query, wq), matmul(kv, wk), matmul(kv, wv));
    let d = wq[0].len();
    let dk = d / heads;
    let mut concat = vec![vec![0.0; d]; query.len()];
    let mut all = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut weights = Vec::new();
        for i in 0..query.len() {
            let scores: Vec<f64> = (0..kv.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let w = softmax_row(&scores);
            for c in cols.clone() {
                concat[i][c] = (0..kv.len()).map(|j| w[j] * v[j][c]).sum();
            }
            weights.push(w);
        }
        all.push(weights);
    }
    (matmul(&concat, wo), all)
}

/// One GCN layer: propagate then update, each through LN and GELU.
pub fn gcn_layer(nodes: &Mat, a_norm: &Mat, store: &ParamStore<f64>, name: &str) -> (Mat, Mat) {
    let wp = param_mat(store, &format!("{name}.w_propagate"));
    let wu = param_mat(store, &format!("{name}.w_update"));
    let m = nodes.len();
    let messages = matmul(nodes, &wp);
    let mut aggregated = vec![vec![0.0; messages[0].len()]; m];
    for i in 0..m {
        for j in 0..m {
            for c in 0..messages[0].len() {
                aggregated[i][c] += a_norm[i][j] * messages[j][c];
            }
        }
    }
    let phase1 = map(
        &layer_norm(
            &aggregated,
            &param_vec(store, &format!("{name}.ln_propagate.gamma")),
            &param_vec(store, &format!("{name}.ln_propagate.beta")),
        ),
        gelu,
    );
    let updated = add(&matmul(&add(nodes, &phase1), &wu), nodes);
    let out = map(
        &layer_norm(
            &updated,
            &param_vec(store, &format!("{name}.ln_update.gamma")),
            &param_vec(store, &format!("{name}.ln_update.beta")),
        ),
        gelu,
    );
    (phase1, out)
}

pub fn mha_named(query: &Mat, kv: &Mat, store: &ParamStore<f64>, name: &str, heads: usize) -> (Mat, Vec<Mat>) {
    mha(
        query,
        kv,
        &param_mat(store, &format!("{name}.w_q")),
        &param_mat(store, &format!("{name}.w_k")),
        &param_mat(store, &format!("{name}.w_v")),
        &param_mat(store, &format!("{name}.w_o")),
        heads,
    )
}

/// Gate and fused output of the element-wise fusion.
pub fn element_fuse(zv: &Mat, zg: &Mat, store: &ParamStore<f64>) -> (Mat, Mat) {
    let w = param_mat(store, "fusion.gate.w");
    let cat: Mat = zv.iter().zip(zg).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    let gate = map(&matmul(&cat, &w), sigmoid);
    let fused = (0..zv.len())
        .map(|i| (0..zv[0].len()).map(|j| gate[i][j] * zv[i][j] + (1.0 - gate[i][j]) * zg[i][j]).collect())
        .collect();
    (gate, fused)
}

fn linear(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    add_bias(&matmul(x, &param_mat(store, &format!("{name}.weight"))), &param_vec(store, &format!("{name}.bias")))
}

fn ln_named(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    layer_norm(x, &param_vec(store, &format!("{name}.gamma")), &param_vec(store, &format!("{name}.beta")))
}

/// Router weights and fused output of the modality-wise fusion.
pub fn modality_fuse(zv: &Mat, zg: &Mat, store: &ParamStore<f64>) -> ([f64; 2], Mat) {
    let mean = |z: &Mat| -> Vec<f64> { (0..z[0].len()).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64).collect() };
    let pooled = vec![mean(zv).into_iter().chain(mean(zg)).collect::<Vec<_>>()];
    let hidden = map(&linear(&pooled, store, "fusion.moe.router_hidden"), gelu);
    let logits = linear(&hidden, store, "fusion.moe.router_out");
    let g = softmax_row(&logits[0]);
    let e1 = ln_named(&linear(zv, store, "fusion.moe.expert_visual"), store, "fusion.moe.expert_visual_ln");
    let e2 = ln_named(&linear(zg, store, "fusion.moe.expert_disease"), store, "fusion.moe.expert_disease_ln");
    let fused = (0..zv.len())
        .map(|i| (0..zv[0].len()).map(|j| g[0] * e1[i][j] + g[1] * e2[i][j]).collect())
        .collect();
    ([g[0], g[1]], fused)
}

/// `D^{-1/2} A D^{-1/2}` by explicit loops.
pub fn normalize_dense(a: &Mat) -> Mat {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        d[i][i] = 1.0 / deg[i].sqrt();
    }
    matmul(&matmul(&d, a), &d)
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
