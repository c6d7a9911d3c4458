//! Parameter storage and the small set of layers shared by the encoder,
//! fusion and decoder.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns every learnable tensor of a model under a unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    /// Same names and ids at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                let t = Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("consistent tensor");
                tape.leaf(t.with_requires_grad(trainable))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients collected on a bound tape into the stored tensors.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>) {
        for (value, var) in self.values.iter_mut().zip(&bound.vars) {
            if let Some(g) = var.grad() {
                value.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.values.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the value of a parameter, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps vars already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), &[d_out], d_in, rng));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add_row(p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self {
            gamma,
            beta,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p[self.gamma], p[self.beta], T::lit(self.eps))
    }
}

/// Multi-head scaled dot-product attention. Head `h` uses columns
/// `[h*d_k, (h+1)*d_k)` of the fused query/key/value projections.
#[derive(Clone, Debug)]
pub struct MhaBlock {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_query: usize,
    pub d_kv: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

pub struct MhaOutput<'t, T: Real> {
    pub output: Var<'t, T>,
    /// Attention weights, one `queries x keys` matrix per head.
    pub weights: Vec<Var<'t, T>>,
}

impl MhaBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide d_model {d_model}")));
        }
        Ok(Self {
            heads,
            d_model,
            d_k: d_model / heads,
            d_query,
            d_kv,
            w_q: store.uniform(format!("{name}.w_q"), &[d_query, d_model], d_query, rng),
            w_k: store.uniform(format!("{name}.w_k"), &[d_kv, d_model], d_kv, rng),
            w_v: store.uniform(format!("{name}.w_v"), &[d_kv, d_model], d_kv, rng),
            w_o: store.uniform(format!("{name}.w_o"), &[d_model, d_model], d_model, rng),
        })
    }

    /// `Concat(head_1..head_h) W^O` with `head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i`,
    /// queries projected from `query_src` and keys/values from `kv_src`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        query_src: Var<'t, T>,
        kv_src: Var<'t, T>,
        causal: bool,
    ) -> Result<MhaOutput<'t, T>> {
        let (qs, ks) = (query_src.shape(), kv_src.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.d_query || ks[1] != self.d_kv {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let q = query_src.matmul(p[self.w_q])?;
        let k = kv_src.matmul(p[self.w_k])?;
        let v = kv_src.matmul(p[self.w_v])?;
        let scale = T::one() / T::lit(self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.d_k;
            let qh = q.narrow(1, start, self.d_k)?;
            let kh = k.narrow(1, start, self.d_k)?;
            let vh = v.narrow(1, start, self.d_k)?;
            let scores = qh.matmul_nt(kh)?.scale(scale);
            let attn = if causal { scores.softmax_causal()? } else { scores.softmax(1)? };
            heads.push(attn.matmul(vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            crate::autodiff::concat(&heads, 1)?
        };
        Ok(MhaOutput {
            output: merged.matmul(p[self.w_o])?,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn uniform_init_respects_bound() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(1).stream("init");
        let id = store.uniform("w", &[16, 8], 16, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.id_of("w"), Some(id));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(1).stream("init");
        assert!(MhaBlock::new(&mut store, "mha", 8, 8, 10, 4, &mut rng).is_err());
    }

    #[test]
    fn bound_gradients_flow_back_to_store() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(2).stream("init");
        let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let x = tape.constant(Tensor::filled(&[4, 3], 1.0));
        let loss = lin.forward(&p, x).unwrap().sum();
        tape.backward(loss).unwrap();
        store.accumulate_grads(&p);
        assert_eq!(store.get(lin.bias.unwrap()).grad().unwrap(), &[4.0, 4.0]);
        assert_eq!(store.get(lin.weight).grad().unwrap(), &[4.0; 6]);
    }
}
