mod common;

use common::oracles::{self, Mat};
use kgreport_core::autodiff::{Tape, Tensor};
use kgreport_core::encoder::{Encoder, EncoderConfig, GcnLayer};
use kgreport_core::fusion::FusionModule;
use kgreport_core::kgraph::normalize_adjacency;
use kgreport_core::nn::{MhaBlock, ParamStore};
use kgreport_core::rng::SeedTree;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect()
}

/// Moves layer-norm affine parameters off identity so they are exercised.
fn perturb_norms(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.5);
            }
        }
    }
}

fn random_graph(m: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut a = vec![vec![0.0; m]; m];
    for i in 0..m {
        a[i][i] = 1.0;
        for j in 0..i {
            if rng.gen_bool(0.4) {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    a
}

#[test]
fn gcn_layer_matches_dense_loop_oracle() {
    for k in 0..INSTANCES {
        let mut rng = SeedTree::new(k).stream("gcn");
        let (m, d) = (rng.gen_range(2..7), [4, 6, 8][k as usize % 3]);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn.0", d, &mut rng);
        perturb_norms(&mut store, &mut rng);
        let nodes = random_mat(m, d, &mut rng);
        let a_norm = oracles::mat(&normalize_adjacency(&oracles::to_tensor(&random_graph(m, &mut rng))).unwrap());

        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let phases = layer
            .phases(&p, tape.constant(oracles::to_tensor(&nodes)), tape.constant(oracles::to_tensor(&a_norm)))
            .unwrap();
        let (phase1, out) = oracles::gcn_layer(&nodes, &a_norm, &store, "gcn.0");
        assert!(oracles::max_diff(&oracles::mat(&phases.propagated.value()), &phase1) < 1e-9, "instance {k}");
        assert!(oracles::max_diff(&oracles::mat(&phases.output.value()), &out) < 1e-9, "instance {k}");
    }
}

#[test]
fn node_init_matches_attention_oracle() {
    for k in 0..INSTANCES {
        let mut rng = SeedTree::new(k).stream("node_init");
        let heads = [1, 2, 4][k as usize % 3];
        let d = 4 * heads;
        let (s, m) = (rng.gen_range(1..6), rng.gen_range(1..15));
        let cfg = EncoderConfig {
            patches: s,
            patch_dim: 3,
            d_model: d,
            heads,
            gcn_layers: 3,
            allow_layer_override: false,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let (e, zv) = (random_mat(m, d, &mut rng), random_mat(s, d, &mut rng));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let got = enc
            .node_init(&p, tape.constant(oracles::to_tensor(&e)), tape.constant(oracles::to_tensor(&zv)))
            .unwrap()
            .value();
        let (want, _) = oracles::mha_named(&e, &zv, &store, "node_init", heads);
        assert_eq!(got.shape(), [m, d]);
        assert!(oracles::max_diff(&oracles::mat(&got), &want) < 1e-9, "instance {k}");
    }
}

fn fusion_instance(k: u64, label: &str) -> (ParamStore<f64>, FusionModule, Mat, Mat, usize) {
    let mut rng = SeedTree::new(k).stream(label);
    let heads = [1, 2][k as usize % 2];
    let d = 4 * heads;
    let (s, m) = (rng.gen_range(1..6), rng.gen_range(1..15));
    let mut store = ParamStore::new();
    let module = FusionModule::new(&mut store, d, heads, &mut rng).unwrap();
    perturb_norms(&mut store, &mut rng);
    let (zv, zg) = (random_mat(s, d, &mut rng), random_mat(m, d, &mut rng));
    (store, module, zv, zg, heads)
}

#[test]
fn align_matches_attention_oracle() {
    for k in 0..INSTANCES {
        let (store, module, zv, zg, heads) = fusion_instance(k, "align");
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let got = module
            .align(&p, tape.constant(oracles::to_tensor(&zv)), tape.constant(oracles::to_tensor(&zg)))
            .unwrap()
            .value();
        let (want, _) = oracles::mha_named(&zv, &zg, &store, "fusion.align", heads);
        assert_eq!(got.shape(), [zv.len(), zv[0].len()]);
        assert!(oracles::max_diff(&oracles::mat(&got), &want) < 1e-9, "instance {k}");
    }
}

#[test]
fn element_fuse_matches_gate_oracle() {
    for k in 0..INSTANCES {
        let (store, module, zv, _, _) = fusion_instance(k, "element");
        let mut rng = SeedTree::new(k).stream("aligned");
        let zg = random_mat(zv.len(), zv[0].len(), &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (v, g) = (tape.constant(oracles::to_tensor(&zv)), tape.constant(oracles::to_tensor(&zg)));
        let gate = module.gate.gate(&p, v, g).unwrap().value();
        let fused = module.gate.forward(&p, v, g).unwrap().value();
        let (want_gate, want) = oracles::element_fuse(&zv, &zg, &store);
        assert!(oracles::max_diff(&oracles::mat(&gate), &want_gate) < 1e-9, "instance {k}");
        assert!(oracles::max_diff(&oracles::mat(&fused), &want) < 1e-9, "instance {k}");
    }
}

#[test]
fn modality_fuse_matches_router_oracle() {
    for k in 0..INSTANCES {
        let (store, module, zv, _, _) = fusion_instance(k, "modality");
        let mut rng = SeedTree::new(k).stream("aligned");
        let zg = random_mat(zv.len(), zv[0].len(), &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (v, g) = (tape.constant(oracles::to_tensor(&zv)), tape.constant(oracles::to_tensor(&zg)));
        let route = module.moe.route(&p, v, g).unwrap().to_vec();
        let fused = module.moe.forward(&p, v, g).unwrap().value();
        let (want_route, want) = oracles::modality_fuse(&zv, &zg, &store);
        assert!((route[0] - want_route[0]).abs() < 1e-9 && (route[1] - want_route[1]).abs() < 1e-9);
        assert!(oracles::max_diff(&oracles::mat(&fused), &want) < 1e-9, "instance {k}");
    }
}

fn permute(a: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| a[i].clone()).collect()
}

fn permute_sym(a: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| perm.iter().map(|&j| a[i][j]).collect()).collect()
}

#[test]
fn gcn_layer_is_permutation_equivariant() {
    let mut rng = SeedTree::new(7).stream("perm");
    let (m, d) = (6, 8);
    let mut store = ParamStore::new();
    let layer = GcnLayer::new(&mut store, "gcn.0", d, &mut rng);
    perturb_norms(&mut store, &mut rng);
    let nodes = random_mat(m, d, &mut rng);
    let a = oracles::mat(&normalize_adjacency(&oracles::to_tensor(&random_graph(m, &mut rng))).unwrap());
    let run = |n: &Mat, a: &Mat| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = layer
            .forward(&p, tape.constant(oracles::to_tensor(n)), tape.constant(oracles::to_tensor(a)))
            .unwrap()
            .value();
        oracles::mat(&out)
    };
    let base = run(&nodes, &a);
    for _ in 0..50 {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let out = run(&permute(&nodes, &perm), &permute_sym(&a, &perm));
        assert!(oracles::max_diff(&out, &permute(&base, &perm)) < 1e-10);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = SeedTree::new(8).stream("rows");
    let mut store = ParamStore::new();
    let block = MhaBlock::new(&mut store, "mha", 8, 8, 8, 4, &mut rng).unwrap();
    for _ in 0..10 {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let q = tape.constant(oracles::to_tensor(&random_mat(14, 8, &mut rng)));
        let kv = tape.constant(oracles::to_tensor(&random_mat(16, 8, &mut rng)));
        for causal in [false, true] {
            let q = if causal { kv } else { q };
            for w in block.forward(&p, q, kv, causal).unwrap().weights {
                let w: Tensor<f64> = w.value();
                for r in 0..w.rows() {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gate_is_open_interval_and_router_is_a_distribution() {
    for k in 0..100 {
        let (store, module, zv, _, _) = fusion_instance(k, "bounds");
        let mut rng = SeedTree::new(k).stream("aligned");
        let zg = random_mat(zv.len(), zv[0].len(), &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (v, g) = (tape.constant(oracles::to_tensor(&zv)), tape.constant(oracles::to_tensor(&zg)));
        assert!(module.gate.gate(&p, v, g).unwrap().to_vec().iter().all(|&x| x > 0.0 && x < 1.0));
        let r = module.moe.route(&p, v, g).unwrap().to_vec();
        assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        let fused = oracles::mat(&module.gate.forward(&p, v, g).unwrap().value());
        for i in 0..zv.len() {
            for j in 0..zv[0].len() {
                let (lo, hi) = (zv[i][j].min(zg[i][j]), zv[i][j].max(zg[i][j]));
                assert!(fused[i][j] >= lo - 1e-12 && fused[i][j] <= hi + 1e-12);
            }
        }
    }
}
