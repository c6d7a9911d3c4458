use std::ops::Range;

use crate::autodiff::{concat, Real, Tape, Var};
use crate::error::{Error, Result};

use super::tokenizer::{BOS, FEATS, FEATS_END, INST, INST_END};

/// Control tokens wrapped around the instruction and features, BOS included.
pub const PROMPT_SPECIALS: usize = 5;

/// `BOS [INST] instruction.. <feats>`: the token part before the features.
pub fn prompt_head_ids(instruction: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(instruction.len() + 3);
    ids.extend([BOS, INST]);
    ids.extend_from_slice(instruction);
    ids.push(FEATS);
    ids
}

/// `</feats> [/INST]`.
pub const PROMPT_TAIL_IDS: [usize; 2] = [FEATS_END, INST_END];

pub fn prompt_len(instruction_len: usize, slots: usize) -> usize {
    PROMPT_SPECIALS + instruction_len + slots
}

/// An embedded prompt ready for the decoder.
pub struct PromptSequence<'t, T: Real> {
    /// `prompt_len x d_model`.
    pub embeddings: Var<'t, T>,
    /// Rows holding the fused feature vectors.
    pub feature_slots: Range<usize>,
    /// Loss-mask template for the prompt rows; always false.
    pub loss_mask: Vec<bool>,
}

impl<'t, T: Real> PromptSequence<'t, T> {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }
}

/// Embeds `BOS [INST] instruction <feats> Z_f </feats> [/INST]` with the
/// decoder's token table and splices the fused features in between.
pub fn assemble_prompt<'t, T: Real>(
    tape: &'t Tape<T>,
    table: Var<'t, T>,
    z_f: Var<'t, T>,
    instruction: &[usize],
) -> Result<PromptSequence<'t, T>> {
    let fs = z_f.shape();
    let ts = table.shape();
    if fs.len() != 2 || fs[0] == 0 {
        return Err(Error::Invalid(format!("prompt: fused features must be a non-empty matrix, got {fs:?}")));
    }
    if fs[1] != ts[1] {
        return Err(Error::Shape {
            op: "assemble_prompt",
            lhs: fs,
            rhs: ts,
        });
    }
    let head_ids = prompt_head_ids(instruction);
    let head = tape.gather(table, &head_ids)?;
    let tail = tape.gather(table, &PROMPT_TAIL_IDS)?;
    let embeddings = concat(&[head, z_f, tail], 0)?;
    let total = head_ids.len() + fs[0] + PROMPT_TAIL_IDS.len();
    Ok(PromptSequence {
        embeddings,
        feature_slots: head_ids.len()..head_ids.len() + fs[0],
        loss_mask: vec![false; total],
    })
}

/// Labels and mask for logits over `prompt + targets`: row `i` predicts
/// token `i + 1`, so the scored rows are `prompt_len - 1 .. prompt_len - 1 + targets.len()`.
pub fn shifted_targets(prompt_len: usize, targets: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let total = prompt_len + targets.len();
    let mut labels = vec![0; total];
    let mut mask = vec![false; total];
    for (j, &t) in targets.iter().enumerate() {
        labels[prompt_len - 1 + j] = t;
        mask[prompt_len - 1 + j] = true;
    }
    (labels, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::generator::Tokenizer;
    use crate::templates::INSTRUCTION;

    #[test]
    fn layout_and_length() {
        let tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::new(vec![40, 3], (0..120).map(|v| v as f64).collect()).unwrap());
        let z = tape.constant(Tensor::filled(&[16, 3], -1.0));
        let instr: Vec<usize> = (10..21).collect();
        let prompt = assemble_prompt(&tape, table, z, &instr).unwrap();
        assert_eq!(prompt.len(), 32);
        assert_eq!(prompt_len(11, 16), 32);
        assert_eq!(prompt.feature_slots, 14..30);
        assert!(prompt.loss_mask.iter().all(|&m| !m));
        let e = prompt.embeddings.value();
        let expect_ids = [BOS, INST];
        for (r, &id) in expect_ids.iter().chain(&instr).chain(&[FEATS]).enumerate() {
            assert_eq!(e.row(r), table.value().row(id));
        }
        for r in 14..30 {
            assert_eq!(e.row(r), &[-1.0, -1.0, -1.0]);
        }
        assert_eq!(e.row(30), table.value().row(FEATS_END));
        assert_eq!(e.row(31), table.value().row(INST_END));
    }

    #[test]
    fn default_instruction_is_in_vocabulary() {
        let tok = Tokenizer::from_template_bank();
        let enc = tok.encode(INSTRUCTION);
        assert_eq!(enc.unk_count, 0);
        assert_eq!(tok.detokenize(&enc.ids), crate::generator::normalize(INSTRUCTION));
    }

    #[test]
    fn rejects_bad_features() {
        let tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[10, 4]));
        assert!(assemble_prompt(&tape, table, tape.constant(Tensor::zeros(&[0, 4])), &[8]).is_err());
        assert!(assemble_prompt(&tape, table, tape.constant(Tensor::zeros(&[2, 3])), &[8]).is_err());
    }

    #[test]
    fn shifted_targets_score_only_report_tokens() {
        let (labels, mask) = shifted_targets(4, &[9, 8, 3]);
        assert_eq!(mask, vec![false, false, false, true, true, true, false]);
        assert_eq!(&labels[3..6], &[9, 8, 3]);
    }
}
