//! Regional features, graph node initialization and graph distillation.
//!
//! `Z_v` comes from a trainable patch projection. Each of the 14 disease
//! entities queries `Z_v` by cross-attention, seeded with the mean decoder
//! embedding of its name, and the resulting node features are propagated
//! through the knowledge graph by a stack of two-phase GCN layers.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::Tokenizer;
use crate::kgraph::CHEXPERT_LABELS;
use crate::nn::{Bound, LayerNorm, MhaBlock, ParamId, ParamStore};

/// Layer count used by the reference configuration.
pub const DEFAULT_GCN_LAYERS: usize = 3;

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub w_patch: ParamId,
    pub positions: ParamId,
    pub patches: usize,
    pub patch_dim: usize,
    pub d_v: usize,
}

impl VisualEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, patches: usize, patch_dim: usize, d_v: usize, rng: &mut R) -> Self {
        Self {
            w_patch: store.uniform("visual.w_patch", &[patch_dim, d_v], patch_dim, rng),
            positions: store.uniform("visual.positions", &[patches, d_v], d_v, rng),
            patches,
            patch_dim,
            d_v,
        }
    }

    /// `Z_v = patches * W_patch + positions`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
        if image.shape() != [self.patches, self.patch_dim] {
            return Err(Error::Shape {
                op: "visual_encode",
                lhs: image.shape().to_vec(),
                rhs: vec![self.patches, self.patch_dim],
            });
        }
        let x = tape.constant(image.clone());
        x.matmul(p[self.w_patch])?.add(p[self.positions])
    }
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w_propagate: ParamId,
    pub w_update: ParamId,
    pub ln_propagate: LayerNorm,
    pub ln_update: LayerNorm,
}

/// Intermediate results of one GCN layer.
pub struct GcnPhases<'t, T: Real> {
    pub propagated: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl GcnLayer {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w_propagate: store.uniform(format!("{name}.w_propagate"), &[dim, dim], dim, rng),
            w_update: store.uniform(format!("{name}.w_update"), &[dim, dim], dim, rng),
            ln_propagate: LayerNorm::new(store, &format!("{name}.ln_propagate"), dim),
            ln_update: LayerNorm::new(store, &format!("{name}.ln_update"), dim),
        }
    }

    /// Propagation `GELU(LN(A' (N W)))` followed by the update
    /// `GELU(LN((N + phase1) W_update + N))`. `A'` aggregates over the node axis.
    pub fn phases<'t, T: Real>(&self, p: &Bound<'t, T>, nodes: Var<'t, T>, a_norm: Var<'t, T>) -> Result<GcnPhases<'t, T>> {
        let (ns, as_) = (nodes.shape(), a_norm.shape());
        if ns.len() != 2 || as_ != [ns[0], ns[0]] {
            return Err(Error::Shape {
                op: "gcn_layer",
                lhs: ns,
                rhs: as_,
            });
        }
        let messages = nodes.matmul(p[self.w_propagate])?;
        let aggregated = a_norm.matmul(messages)?;
        let propagated = self.ln_propagate.forward(p, aggregated)?.gelu();
        let updated = nodes
            .add(propagated)?
            .matmul(p[self.w_update])?
            .add(nodes)?;
        let output = self.ln_update.forward(p, updated)?.gelu();
        Ok(GcnPhases { propagated, output })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, nodes: Var<'t, T>, a_norm: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.phases(p, nodes, a_norm)?.output)
    }
}

/// Row `i` is the mean one-hot of the tokens in entity `i`'s name, so
/// `pool * embedding_table` yields the entity embeddings `E` from the live
/// decoder table.
#[derive(Clone, Debug)]
pub struct EntityEmbeddings {
    pool: Vec<Vec<usize>>,
    vocab: usize,
}

impl EntityEmbeddings {
    pub fn new(tokenizer: &Tokenizer) -> Result<Self> {
        let pool = CHEXPERT_LABELS
            .iter()
            .map(|name| {
                let enc = tokenizer.encode(name);
                if enc.ids.is_empty() || enc.unk_count > 0 {
                    return Err(Error::Config(format!("entity name {name:?} is not covered by the vocabulary")));
                }
                Ok(enc.ids)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pool,
            vocab: tokenizer.vocab_size(),
        })
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn token_ids(&self, entity: usize) -> &[usize] {
        &self.pool[entity]
    }

    pub fn pooling_matrix<T: Real>(&self) -> Tensor<T> {
        let mut m = Tensor::zeros(&[self.pool.len(), self.vocab]);
        for (i, ids) in self.pool.iter().enumerate() {
            let w = T::one() / T::lit(ids.len() as f64);
            for &id in ids {
                m.data_mut()[i * self.vocab + id] += w;
            }
        }
        m
    }

    /// `E` (`M x d_w`) read from the decoder embedding table.
    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, table: Var<'t, T>) -> Result<Var<'t, T>> {
        tape.constant(self.pooling_matrix()).matmul(table)
    }
}

#[derive(Debug)]
pub struct Encoder {
    pub visual: VisualEncoder,
    pub node_init: MhaBlock,
    pub gcn: Vec<GcnLayer>,
    gcn_calls: AtomicUsize,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            visual: self.visual.clone(),
            node_init: self.node_init.clone(),
            gcn: self.gcn.clone(),
            gcn_calls: AtomicUsize::new(self.gcn_calls()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub patches: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    /// Permits a layer count other than [`DEFAULT_GCN_LAYERS`].
    pub allow_layer_override: bool,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.gcn_layers != DEFAULT_GCN_LAYERS && !cfg.allow_layer_override {
            return Err(Error::Config(format!(
                "gcn_layers = {} but {DEFAULT_GCN_LAYERS} are required unless the override flag is set",
                cfg.gcn_layers
            )));
        }
        let visual = VisualEncoder::new(store, cfg.patches, cfg.patch_dim, cfg.d_model, rng);
        let node_init = MhaBlock::new(store, "node_init", cfg.d_model, cfg.d_model, cfg.d_model, cfg.heads, rng)?;
        let gcn = (0..cfg.gcn_layers)
            .map(|l| GcnLayer::new(store, &format!("gcn.{l}"), cfg.d_model, rng))
            .collect();
        Ok(Self {
            visual,
            node_init,
            gcn,
            gcn_calls: AtomicUsize::new(0),
        })
    }

    /// `N^0 = MHA(E, Z_v)`: entity embeddings query the regional features.
    pub fn node_init<'t, T: Real>(&self, p: &Bound<'t, T>, entities: Var<'t, T>, z_v: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.node_init.forward(p, entities, z_v, false)?.output)
    }

    /// `Z_g`: node initialization followed by every GCN layer, or the
    /// initialized nodes alone when `use_gcn` is false.
    pub fn distill<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        z_v: Var<'t, T>,
        entities: Var<'t, T>,
        a_norm: Var<'t, T>,
        use_gcn: bool,
    ) -> Result<Var<'t, T>> {
        let mut nodes = self.node_init(p, entities, z_v)?;
        if use_gcn {
            for layer in &self.gcn {
                self.gcn_calls.fetch_add(1, Ordering::Relaxed);
                nodes = layer.forward(p, nodes, a_norm)?;
            }
        }
        Ok(nodes)
    }

    /// Number of GCN layer evaluations since construction or the last reset.
    pub fn gcn_calls(&self) -> usize {
        self.gcn_calls.load(Ordering::Relaxed)
    }

    pub fn reset_gcn_calls(&self) {
        self.gcn_calls.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::kgraph::build_chexpert_graph;
    use crate::rng::SeedTree;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
    }

    fn cfg(d: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            patches: 4,
            patch_dim: 6,
            d_model: d,
            heads,
            gcn_layers: 3,
            allow_layer_override: false,
        }
    }

    #[test]
    fn zero_image_and_positions_give_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(0).stream("init");
        let enc = VisualEncoder::new(&mut store, 16, 32, 32, &mut rng);
        store.set("visual.positions", Tensor::zeros(&[16, 32])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let z = enc.forward(&p, &tape, &Tensor::zeros(&[16, 32])).unwrap();
        assert_eq!(z.shape(), vec![16, 32]);
        assert!(z.to_vec().iter().all(|&v| v == 0.0));
        assert!(enc.forward(&p, &tape, &Tensor::zeros(&[15, 32])).is_err());
        assert!(enc.forward(&p, &tape, &Tensor::zeros(&[16, 31])).is_err());
    }

    #[test]
    fn visual_encoder_gradient() {
        let mut rng = SeedTree::new(1).stream("t");
        let image = random(&[4, 3], &mut rng);
        let inputs = vec![random(&[3, 5], &mut rng), random(&[4, 5], &mut rng)];
        let err = grad_check(
            |t, v| {
                let x = t.constant(image.clone());
                Ok(x.matmul(v[0])?.add(v[1])?.gelu().sum())
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(2).stream("init");
        let enc = Encoder::new(&mut store, &cfg(8, 2), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let z = tape.constant(random(&[1, 8], &mut rng));
        let e1 = tape.constant(random(&[14, 8], &mut rng));
        let e2 = tape.constant(random(&[14, 8], &mut rng));
        let n1 = enc.node_init(&p, e1, z).unwrap().value();
        let n2 = enc.node_init(&p, e2, z).unwrap().value();
        assert_eq!(n1.shape(), &[14, 8]);
        assert!(n1.max_abs_diff(&n2) < 1e-15);
        for r in 1..14 {
            for c in 0..8 {
                assert!((n1.at(r, c) - n1.at(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_head_node_init_matches_formula() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(3).stream("init");
        let enc = Encoder::new(&mut store, &cfg(4, 1), &mut rng).unwrap();
        let e = random(&[1, 4], &mut rng);
        let z = random(&[2, 4], &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let got = enc.node_init(&p, tape.constant(e.clone()), tape.constant(z.clone())).unwrap().value();

        let w = |id| rows(store.get(id));
        let q = matmul(&rows(&e), &w(enc.node_init.w_q));
        let k = matmul(&rows(&z), &w(enc.node_init.w_k));
        let v = matmul(&rows(&z), &w(enc.node_init.w_v));
        let s: Vec<f64> = (0..2).map(|j| (0..4).map(|c| q[0][c] * k[j][c]).sum::<f64>() / 2.0).collect();
        let z0 = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z0, s[1].exp() / z0];
        let head: Vec<f64> = (0..4).map(|c| a[0] * v[0][c] + a[1] * v[1][c]).collect();
        let expected = matmul(&[head], &w(enc.node_init.w_o));
        for c in 0..4 {
            assert!((got.at(0, c) - expected[0][c]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(4).stream("init");
        let enc = Encoder::new(&mut store, &cfg(8, 4), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = enc
            .node_init
            .forward(&p, tape.constant(random(&[14, 8], &mut rng)), tape.constant(random(&[4, 8], &mut rng)), false)
            .unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in out.weights {
            let w = w.value();
            for r in 0..14 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn gcn_oracle(n: &[Vec<f64>], a: &[Vec<f64>], w: &[Vec<f64>], wu: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let ln = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect()
        };
        let nw = matmul(n, w);
        let agg = matmul(a, &nw);
        let phase1: Vec<Vec<f64>> = agg.iter().map(|r| ln(r).into_iter().map(gelu).collect()).collect();
        let sum: Vec<Vec<f64>> = n.iter().zip(&phase1).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
        let upd = matmul(&sum, wu);
        upd.iter()
            .zip(n)
            .map(|(u, x)| {
                let r: Vec<f64> = u.iter().zip(x).map(|(a, b)| a + b).collect();
                ln(&r).into_iter().map(gelu).collect()
            })
            .collect()
    }

    #[test]
    fn gcn_layer_matches_dense_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(5).stream("init");
        let layer = GcnLayer::new(&mut store, "g", 4, &mut rng);
        let n = random(&[3, 4], &mut rng);
        let a = crate::kgraph::normalize_adjacency(&Tensor::from_rows(&[&[1.0, 1.0, 0.0], &[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0]])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let got = layer.forward(&p, tape.constant(n.clone()), tape.constant(a.clone())).unwrap().value();
        assert_eq!(got.shape(), &[3, 4]);
        let expected = gcn_oracle(&rows(&n), &rows(&a), &rows(store.get(layer.w_propagate)), &rows(store.get(layer.w_update)));
        for r in 0..3 {
            for c in 0..4 {
                assert!((got.at(r, c) - expected[r][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_graph_has_no_cross_node_leakage() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(6).stream("init");
        let layer = GcnLayer::new(&mut store, "g", 4, &mut rng);
        let n = random(&[5, 4], &mut rng);
        let mut perturbed = n.clone();
        perturbed.data_mut()[2 * 4 + 1] += 0.7;
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let eye = tape.constant(Tensor::identity(5));
        let a = layer.phases(&p, tape.constant(n), eye).unwrap().propagated.value();
        let b = layer.phases(&p, tape.constant(perturbed), eye).unwrap().propagated.value();
        for r in 0..5 {
            let diff: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).sum();
            if r == 2 {
                assert!(diff > 0.0);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn layer_count_is_enforced() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(7).stream("init");
        let mut c = cfg(8, 2);
        c.gcn_layers = 2;
        assert!(Encoder::new(&mut store, &c, &mut rng).is_err());
        c.allow_layer_override = true;
        assert_eq!(Encoder::new(&mut store, &c, &mut rng).unwrap().gcn.len(), 2);
    }

    #[test]
    fn distill_shape_determinism_and_counter() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(8).stream("init");
        let enc = Encoder::new(&mut store, &cfg(8, 2), &mut rng).unwrap();
        assert_eq!(enc.gcn.len(), DEFAULT_GCN_LAYERS);
        let graph = build_chexpert_graph();
        let z = random(&[4, 8], &mut rng);
        let e = random(&[14, 8], &mut rng);
        let run = |use_gcn| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let a = tape.constant(graph.normalized().clone());
            enc.distill(&p, tape.constant(z.clone()), tape.constant(e.clone()), a, use_gcn).unwrap().to_vec()
        };
        let first = run(true);
        assert_eq!(first.len(), 14 * 8);
        assert_eq!(enc.gcn_calls(), 3);
        let second = run(true);
        assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
        enc.reset_gcn_calls();
        run(false);
        assert_eq!(enc.gcn_calls(), 0);
    }

    #[test]
    fn distill_gradient_wrt_entities_and_features() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(9).stream("init");
        let enc = Encoder::new(&mut store, &cfg(4, 2), &mut rng).unwrap();
        let graph = build_chexpert_graph();
        let readout = random(&[14, 4], &mut rng);
        let inputs = vec![random(&[4, 4], &mut rng), random(&[14, 4], &mut rng)];
        let err = grad_check(
            |t, v| {
                let p = store.bind(t, false);
                let a = t.constant(graph.normalized().clone());
                let zg = enc.distill(&p, v[0], v[1], a, true)?;
                Ok(zg.mul(t.constant(readout.clone()))?.sum())
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn entity_embeddings_average_name_tokens() {
        let tok = Tokenizer::from_template_bank();
        let ents = EntityEmbeddings::new(&tok).unwrap();
        assert_eq!(ents.len(), 14);
        let pool = ents.pooling_matrix::<f64>();
        for i in 0..14 {
            assert!((pool.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let name = ents.token_ids(1);
        assert_eq!(name.len(), 2);
        assert_eq!(pool.at(1, name[0]), 0.5);
    }
}
