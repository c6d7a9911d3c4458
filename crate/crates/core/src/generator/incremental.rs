//! Tape-free decoder for generation: one row at a time in f64, keeping the
//! per-layer keys and values of everything seen so far.

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore};

use super::decoder::ToyDecoder;

#[derive(Clone, Debug)]
struct Dense {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    d_in: usize,
    d_out: usize,
}

impl Dense {
    fn load<T: Real>(store: &ParamStore<T>, w: ParamId, b: Option<ParamId>) -> Self {
        let wt = store.get(w);
        Self {
            w: wt.to_f64_vec(),
            b: b.map(|b| store.get(b).to_f64_vec()),
            d_in: wt.shape()[0],
            d_out: wt.shape()[1],
        }
    }

    fn linear<T: Real>(store: &ParamStore<T>, l: &Linear) -> Self {
        Self::load(store, l.weight, l.bias)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone().unwrap_or_else(|| vec![0.0; self.d_out]);
        for (i, &xi) in x.iter().enumerate().take(self.d_in) {
            let row = &self.w[i * self.d_out..(i + 1) * self.d_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
}

impl Norm {
    fn load<T: Real>(store: &ParamStore<T>, ln: &LayerNorm) -> Self {
        Self {
            gamma: store.get(ln.gamma).to_f64_vec(),
            beta: store.get(ln.beta).to_f64_vec(),
            eps: ln.eps,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| g * (v - mean) * inv + b)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: Norm,
    w_q: Dense,
    w_k: Dense,
    w_v: Dense,
    w_o: Dense,
    heads: usize,
    ln_mlp: Norm,
    mlp_in: Dense,
    mlp_out: Dense,
}

/// Keys and values of every processed position, per layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct CachedDecoder {
    d: usize,
    vocab: usize,
    max_context: usize,
    embedding: Vec<f64>,
    positions: Vec<f64>,
    blocks: Vec<Block>,
    ln_final: Norm,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

impl CachedDecoder {
    pub fn new<T: Real>(decoder: &ToyDecoder, store: &ParamStore<T>) -> Self {
        let blocks = decoder
            .blocks
            .iter()
            .map(|b| Block {
                ln_attn: Norm::load(store, &b.ln_attn),
                w_q: Dense::load(store, b.attn.w_q, None),
                w_k: Dense::load(store, b.attn.w_k, None),
                w_v: Dense::load(store, b.attn.w_v, None),
                w_o: Dense::load(store, b.attn.w_o, None),
                heads: b.attn.heads,
                ln_mlp: Norm::load(store, &b.ln_mlp),
                mlp_in: Dense::linear(store, &b.mlp_in),
                mlp_out: Dense::linear(store, &b.mlp_out),
            })
            .collect();
        Self {
            d: decoder.config.d_model,
            vocab: decoder.config.vocab_size,
            max_context: decoder.config.max_context,
            embedding: store.get(decoder.embedding).to_f64_vec(),
            positions: store.get(decoder.positions).to_f64_vec(),
            blocks,
            ln_final: Norm::load(store, &decoder.ln_final),
        }
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    pub fn token_embedding(&self, token: usize) -> Result<&[f64]> {
        if token >= self.vocab {
            return Err(Error::Invalid(format!("token {token} out of range for vocabulary {}", self.vocab)));
        }
        Ok(&self.embedding[token * self.d..(token + 1) * self.d])
    }

    /// Appends one embedded input row and returns the final hidden state at
    /// its position.
    pub fn push_row(&self, cache: &mut KvCache, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.d {
            return Err(Error::Shape {
                op: "decoder_step",
                lhs: vec![row.len()],
                rhs: vec![self.d],
            });
        }
        let t = cache.len;
        if t >= self.max_context {
            return Err(Error::Invalid(format!(
                "decoder: sequence of {} tokens exceeds context {}",
                t + 1,
                self.max_context
            )));
        }
        let d = self.d;
        let mut x: Vec<f64> = row.iter().zip(&self.positions[t * d..(t + 1) * d]).map(|(a, b)| a + b).collect();
        for (l, block) in self.blocks.iter().enumerate() {
            let n = block.ln_attn.apply(&x);
            let q = block.w_q.apply(&n);
            cache.keys[l].extend(block.w_k.apply(&n));
            cache.values[l].extend(block.w_v.apply(&n));
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let dk = d / block.heads;
            let scale = 1.0 / (dk as f64).sqrt();
            let mut merged = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..block.heads {
                let qh = &q[h * dk..(h + 1) * dk];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + h * dk..j * d + (h + 1) * dk];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut merged[h * dk..(h + 1) * dk];
                for (j, s) in scores.iter().enumerate() {
                    let a = s / z;
                    let vh = &values[j * d + h * dk..j * d + (h + 1) * dk];
                    for (o, v) in out.iter_mut().zip(vh) {
                        *o += a * v;
                    }
                }
            }
            for (xi, a) in x.iter_mut().zip(block.w_o.apply(&merged)) {
                *xi += a;
            }
            let hidden: Vec<f64> = block.mlp_in.apply(&block.ln_mlp.apply(&x)).into_iter().map(gelu).collect();
            for (xi, m) in x.iter_mut().zip(block.mlp_out.apply(&hidden)) {
                *xi += m;
            }
        }
        cache.len += 1;
        Ok(self.ln_final.apply(&x))
    }

    pub fn push_token(&self, cache: &mut KvCache, token: usize) -> Result<Vec<f64>> {
        let row = self.token_embedding(token)?.to_vec();
        self.push_row(cache, &row)
    }

    /// Output projection through the tied embedding table.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.embedding
            .chunks_exact(self.d)
            .map(|e| e.iter().zip(hidden).map(|(a, b)| a * b).sum())
            .collect()
    }
}
