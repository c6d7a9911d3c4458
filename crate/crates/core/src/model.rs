//! The full report generator: visual features, graph distillation, fusion,
//! prompt assembly and the causal decoder, with all weights in one store.

use std::collections::HashMap;

use crate::autodiff::{Real, Reduction, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, EntityEmbeddings, DEFAULT_GCN_LAYERS};
use crate::error::{Error, Result};
use crate::fusion::{FusionModule, FusionStrategy};
use crate::generator::tokenizer::EOS;
use crate::generator::{
    assemble_prompt, beam_search, log_softmax, report_loss, BeamConfig, CachedDecoder, DecoderConfig, Hypothesis, KvCache,
    NextTokenScorer, PromptSequence, Tokenizer, ToyDecoder,
};
use crate::kgraph::KnowledgeGraph;
use crate::nn::{Bound, ParamStore};
use crate::rng::SeedTree;
use crate::templates::INSTRUCTION;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patches: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    pub allow_gcn_override: bool,
    pub decoder_layers: usize,
    pub max_context: usize,
    pub fusion: FusionStrategy,
    pub use_gcn: bool,
    pub instruction: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            patch_dim: 32,
            d_model: 128,
            heads: 4,
            gcn_layers: DEFAULT_GCN_LAYERS,
            allow_gcn_override: false,
            decoder_layers: 2,
            max_context: 128,
            fusion: FusionStrategy::Modality,
            use_gcn: true,
            instruction: INSTRUCTION.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportModel<T: Real> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub graph: KnowledgeGraph,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub fusion: FusionModule,
    pub decoder: ToyDecoder,
    entities: EntityEmbeddings,
    instruction: Vec<usize>,
    a_norm: Tensor<T>,
}

impl<T: Real> ReportModel<T> {
    /// Every parameter is created regardless of the fusion strategy, so two
    /// models built from one seed start from identical weights.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, graph: KnowledgeGraph, seed: &SeedTree) -> Result<Self> {
        let enc = tokenizer.encode(&config.instruction);
        if enc.unk_count > 0 {
            return Err(Error::Config(format!(
                "instruction has {} out-of-vocabulary words",
                enc.unk_count
            )));
        }
        let mut params = ParamStore::new();
        let mut rng = seed.stream("init");
        let encoder = Encoder::new(
            &mut params,
            &EncoderConfig {
                patches: config.patches,
                patch_dim: config.patch_dim,
                d_model: config.d_model,
                heads: config.heads,
                gcn_layers: config.gcn_layers,
                allow_layer_override: config.allow_gcn_override,
            },
            &mut rng,
        )?;
        let fusion = FusionModule::new(&mut params, config.d_model, config.heads, &mut rng)?;
        let decoder = ToyDecoder::new(
            &mut params,
            DecoderConfig {
                vocab_size: tokenizer.vocab_size(),
                d_model: config.d_model,
                heads: config.heads,
                layers: config.decoder_layers,
                max_context: config.max_context,
            },
            &mut rng,
        )?;
        let entities = EntityEmbeddings::new(&tokenizer)?;
        let a_norm = graph.normalized().cast();
        Ok(Self {
            config,
            tokenizer,
            graph,
            params,
            encoder,
            fusion,
            decoder,
            entities,
            instruction: enc.ids,
            a_norm,
        })
    }

    pub fn cast<U: Real>(&self) -> ReportModel<U> {
        ReportModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            graph: self.graph.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            entities: self.entities.clone(),
            instruction: self.instruction.clone(),
            a_norm: self.a_norm.cast(),
        }
    }

    pub fn instruction_ids(&self) -> &[usize] {
        &self.instruction
    }

    /// Report tokens followed by EOS.
    pub fn target_ids(&self, report: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.tokenize(report);
        ids.push(EOS);
        ids
    }

    pub fn prompt_len(&self) -> usize {
        crate::generator::prompt_len(self.instruction.len(), self.config.patches)
    }

    /// `Z_f` for one image.
    pub fn fused_features<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
        let z_v = self.encoder.visual.forward(p, tape, image)?;
        let strategy = self.config.fusion;
        if !strategy.uses_disease_branch() {
            return Ok(z_v);
        }
        let entities = self.entities.forward(tape, p[self.decoder.embedding])?;
        let a = tape.constant(self.a_norm.clone());
        let z_g = self.encoder.distill(p, z_v, entities, a, self.config.use_gcn)?;
        let aligned = self.fusion.align(p, z_v, z_g)?;
        self.fusion.fuse(p, strategy, z_v, Some(aligned))
    }

    pub fn prompt<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, image: &Tensor<T>) -> Result<PromptSequence<'t, T>> {
        let z_f = self.fused_features(p, tape, image)?;
        assemble_prompt(tape, p[self.decoder.embedding], z_f, &self.instruction)
    }

    pub fn logits<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, image: &Tensor<T>, targets: &[usize]) -> Result<Var<'t, T>> {
        let prompt = self.prompt(p, tape, image)?;
        self.decoder.forward(p, prompt.embeddings, targets)
    }

    pub fn loss<'t>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        image: &Tensor<T>,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var<'t, T>> {
        let logits = self.logits(p, tape, image, targets)?;
        report_loss(logits, self.prompt_len(), targets, reduction)
    }

    /// Loss without gradient bookkeeping.
    pub fn eval_loss(&self, image: &Tensor<T>, targets: &[usize], reduction: Reduction) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.loss(&p, &tape, image, targets, reduction)?.item().to_f64().unwrap_or(f64::NAN))
    }

    /// Per-step log-probabilities of `tokens` from one full forward pass.
    pub fn sequence_log_probs(&self, image: &Tensor<T>, tokens: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let logits = self.logits(&p, &tape, image, tokens)?.value();
        let start = self.prompt_len() - 1;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let row: Vec<f64> = logits.row(start + j).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                log_softmax(&row)[t]
            })
            .collect())
    }

    /// Generation-time view of the decoder weights.
    pub fn cached_decoder(&self) -> CachedDecoder {
        CachedDecoder::new(&self.decoder, &self.params)
    }

    pub fn scorer<'m>(&'m self, decoder: &'m CachedDecoder, image: &Tensor<T>) -> Result<PromptScorer<'m>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let prompt = self.prompt(&p, &tape, image)?.embeddings.value();
        PromptScorer::new(decoder, &prompt.to_f64_vec(), prompt.cols())
    }

    /// Decodes in f64 whatever the training precision.
    pub fn generate(&self, image: &Tensor<T>, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
        let model = self.cast::<f64>();
        let decoder = model.cached_decoder();
        let mut scorer = model.scorer(&decoder, &image.cast())?;
        beam_search(&mut scorer, cfg)
    }
}

/// Beam-search scorer over a fixed embedded prompt. Caches decoder state
/// per prefix so each expansion costs one decoder row.
pub struct PromptScorer<'m> {
    decoder: &'m CachedDecoder,
    root: KvCache,
    root_log_probs: Vec<f64>,
    states: HashMap<Vec<usize>, KvCache>,
}

impl<'m> PromptScorer<'m> {
    pub fn new(decoder: &'m CachedDecoder, prompt: &[f64], d: usize) -> Result<Self> {
        if d == 0 || prompt.is_empty() || prompt.len() % d != 0 {
            return Err(Error::Invalid("empty prompt".into()));
        }
        let mut root = decoder.empty_cache();
        let mut hidden = Vec::new();
        for row in prompt.chunks_exact(d) {
            hidden = decoder.push_row(&mut root, row)?;
        }
        let root_log_probs = log_softmax(&decoder.logits(&hidden));
        Ok(Self {
            decoder,
            root,
            root_log_probs,
            states: HashMap::new(),
        })
    }

    fn state_for(&mut self, prefix: &[usize]) -> Result<KvCache> {
        if prefix.is_empty() {
            return Ok(self.root.clone());
        }
        if let Some(s) = self.states.get(prefix) {
            return Ok(s.clone());
        }
        let mut state = self.state_for(&prefix[..prefix.len() - 1])?;
        self.decoder.push_token(&mut state, prefix[prefix.len() - 1])?;
        Ok(state)
    }
}

impl NextTokenScorer for PromptScorer<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let Some((&last, parent)) = prefix.split_last() else {
            return Ok(self.root_log_probs.clone());
        };
        let mut state = self.state_for(parent)?;
        let hidden = self.decoder.push_token(&mut state, last)?;
        // beams only ever extend prefixes of the previous step
        self.states.retain(|k, _| k.len() + 1 >= prefix.len());
        self.states.insert(prefix.to_vec(), state);
        Ok(log_softmax(&self.decoder.logits(&hidden)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::kgraph::build_chexpert_graph;
    use rand::Rng;

    fn tiny_config(fusion: FusionStrategy) -> ModelConfig {
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
            use_gcn: true,
            instruction: "diagnosis report .".into(),
        }
    }

    fn image<T: Real>(cfg: &ModelConfig, seed: u64) -> Tensor<T> {
        let mut rng = SeedTree::new(seed).stream("img");
        let n = cfg.patches * cfg.patch_dim;
        Tensor::from_f64(&[cfg.patches, cfg.patch_dim], &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prompt_length_follows_layout() {
        let m = ReportModel::<f32>::new(ModelConfig::default(), Tokenizer::from_template_bank(), build_chexpert_graph(), &SeedTree::new(1)).unwrap();
        assert_eq!(m.instruction_ids().len(), 12);
        assert_eq!(m.prompt_len(), 33);
    }

    #[test]
    fn all_strategies_share_initial_weights() {
        let tok = Tokenizer::from_template_bank();
        let a = ReportModel::<f32>::new(tiny_config(FusionStrategy::None), tok.clone(), build_chexpert_graph(), &SeedTree::new(5)).unwrap();
        let b = ReportModel::<f32>::new(tiny_config(FusionStrategy::Modality), tok, build_chexpert_graph(), &SeedTree::new(5)).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn gcn_counter_tracks_configuration() {
        let tok = Tokenizer::from_template_bank();
        let mut cfg = tiny_config(FusionStrategy::Modality);
        let with = ReportModel::<f64>::new(cfg.clone(), tok.clone(), build_chexpert_graph(), &SeedTree::new(2)).unwrap();
        let img = image::<f64>(&cfg, 2);
        with.eval_loss(&img, &[9, 3], Reduction::Mean).unwrap();
        assert_eq!(with.encoder.gcn_calls(), 3);
        cfg.use_gcn = false;
        let without = ReportModel::<f64>::new(cfg, tok, build_chexpert_graph(), &SeedTree::new(2)).unwrap();
        without.eval_loss(&img, &[9, 3], Reduction::Mean).unwrap();
        assert_eq!(without.encoder.gcn_calls(), 0);
    }

    #[test]
    fn beam_scores_match_fresh_forward() {
        let tok = Tokenizer::from_template_bank();
        let cfg = tiny_config(FusionStrategy::Element);
        let m = ReportModel::<f64>::new(cfg.clone(), tok, build_chexpert_graph(), &SeedTree::new(3)).unwrap();
        let img = image::<f64>(&cfg, 3);
        let beam = BeamConfig {
            max_len: 12,
            ..BeamConfig::default()
        };
        let out = m.generate(&img, &beam).unwrap();
        assert!(!out.is_empty());
        for h in &out {
            let fresh: f64 = m.sequence_log_probs(&img, &h.tokens).unwrap().iter().sum();
            assert!((fresh - h.log_prob).abs() < 1e-6, "{fresh} vs {}", h.log_prob);
        }
        assert_eq!(m.generate(&img, &beam).unwrap(), out);
    }

    #[test]
    fn composed_model_passes_gradient_check() {
        let tok = Tokenizer::from_template_bank();
        let cfg = tiny_config(FusionStrategy::Modality);
        let m = ReportModel::<f64>::new(cfg.clone(), tok, build_chexpert_graph(), &SeedTree::new(4)).unwrap();
        let img = image::<f64>(&cfg, 4);
        let targets = m.target_ids("there is mild cardiomegaly .");
        let inputs: Vec<Tensor<f64>> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                m.loss(&p, tape, &img, &targets, Reduction::Mean)
            },
            &inputs,
            3e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
