use rand::Rng;

use crate::autodiff::{concat, Real, Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, MhaBlock, ParamId, ParamStore};

use super::prompt::shifted_targets;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_context: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MhaBlock,
    pub ln_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl DecoderBlock {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MhaBlock::new(store, &format!("{name}.attn"), d, d, d, heads, rng)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), d, 4 * d, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), 4 * d, d, true, rng),
        })
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let normed = self.ln_attn.forward(p, x)?;
        let x = x.add(self.attn.forward(p, normed, normed, true)?.output)?;
        let hidden = self.mlp_in.forward(p, self.ln_mlp.forward(p, x)?)?.gelu();
        x.add(self.mlp_out.forward(p, hidden)?)
    }
}

/// Pre-norm causal transformer with a token table tied to the output projection.
#[derive(Clone, Debug)]
pub struct ToyDecoder {
    pub config: DecoderConfig,
    pub embedding: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_final: LayerNorm,
}

impl ToyDecoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if config.vocab_size == 0 || d == 0 || config.max_context == 0 {
            return Err(Error::Config(format!("decoder: degenerate config {config:?}")));
        }
        let embedding = store.uniform("decoder.embedding", &[config.vocab_size, d], d, rng);
        let positions = store.uniform("decoder.positions", &[config.max_context, d], d, rng);
        let blocks = (0..config.layers)
            .map(|l| DecoderBlock::new(store, &format!("decoder.block{l}"), d, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "decoder.ln_final", d);
        Ok(Self {
            config,
            embedding,
            positions,
            blocks,
            ln_final,
        })
    }

    /// Final hidden states (`T x d`) for an already-embedded sequence.
    pub fn hidden<'t, T: Real>(&self, p: &Bound<'t, T>, inputs: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::Shape {
                op: "decoder",
                lhs: shape,
                rhs: vec![self.config.max_context, self.config.d_model],
            });
        }
        if shape[0] > self.config.max_context {
            return Err(Error::Invalid(format!(
                "decoder: sequence of {} tokens exceeds context {}",
                shape[0], self.config.max_context
            )));
        }
        let mut x = inputs.add(p[self.positions].narrow(0, 0, shape[0])?)?;
        for block in &self.blocks {
            x = block.forward(p, x)?;
        }
        self.ln_final.forward(p, x)
    }

    /// Prompt rows followed by the embedded `targets`.
    pub fn embed_sequence<'t, T: Real>(&self, p: &Bound<'t, T>, prompt: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
        if targets.is_empty() {
            return Ok(prompt);
        }
        let tape: &'t Tape<T> = prompt.tape();
        concat(&[prompt, tape.gather(p[self.embedding], targets)?], 0)
    }

    /// Logits (`(prompt_len + targets.len()) x V`) at every position.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, prompt: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
        let h = self.hidden(p, self.embed_sequence(p, prompt, targets)?)?;
        h.matmul_nt(p[self.embedding])
    }

    /// Logits for the next token after `prompt + prefix` (`1 x V`).
    pub fn forward_last<'t, T: Real>(&self, p: &Bound<'t, T>, prompt: Var<'t, T>, prefix: &[usize]) -> Result<Var<'t, T>> {
        let h = self.hidden(p, self.embed_sequence(p, prompt, prefix)?)?;
        let rows = h.shape()[0];
        h.narrow(0, rows - 1, 1)?.matmul_nt(p[self.embedding])
    }
}

/// Cross-entropy of the report tokens given logits over `prompt + targets`.
pub fn report_loss<'t, T: Real>(logits: Var<'t, T>, prompt_len: usize, targets: &[usize], reduction: Reduction) -> Result<Var<'t, T>> {
    if prompt_len == 0 {
        return Err(Error::Invalid("report_loss: empty prompt".into()));
    }
    let (labels, mask) = shifted_targets(prompt_len, targets);
    logits.cross_entropy(&labels, &mask, reduction)
}
