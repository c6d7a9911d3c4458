use std::collections::{BTreeSet, HashMap};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const INST: usize = 4;
pub const INST_END: usize = 5;
pub const FEATS: usize = 6;
pub const FEATS_END: usize = 7;

pub const SPECIAL_TOKENS: [&str; 8] = ["<pad>", "<unk>", "<s>", "</s>", "[INST]", "[/INST]", "<feats>", "</feats>"];

/// Lowercases and splits on whitespace; inside a word, every character that
/// is not alphanumeric becomes its own token.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Normalized form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unk_count: usize,
}

/// Word-level vocabulary with reserved control tokens at ids `0..8`.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize_words).collect();
        let vocab: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .skip(SPECIAL_TOKENS.len())
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { vocab, index }
    }

    /// Vocabulary over the built-in report template bank.
    pub fn from_template_bank() -> Self {
        Self::from_corpus(crate::templates::corpus_texts())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let mut unk_count = 0;
        let ids = normalize_words(text)
            .iter()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    unk_count += 1;
                    UNK
                })
            })
            .collect();
        Encoded { ids, unk_count }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.encode(text).ids
    }

    /// Joins word tokens with spaces. Control tokens other than `<unk>` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK || id >= SPECIAL_TOKENS.len())
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable hash of the vocabulary, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.vocab.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, w| {
            w.bytes()
                .chain(std::iter::once(0u8))
                .fold(h, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
        })
    }
}
