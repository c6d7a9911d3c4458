//! Tokenizer, prompt assembly, the causal decoder and beam search.

pub mod beam;
pub mod decoder;
pub mod incremental;
pub mod prompt;
pub mod tokenizer;

pub use beam::{beam_search, greedy, log_softmax, BeamConfig, Hypothesis, NextTokenScorer};
pub use decoder::{report_loss, DecoderConfig, ToyDecoder};
pub use incremental::{CachedDecoder, KvCache};
pub use prompt::{assemble_prompt, prompt_head_ids, prompt_len, shifted_targets, PromptSequence, PROMPT_TAIL_IDS};
pub use tokenizer::{normalize, normalize_words, Encoded, Tokenizer};
