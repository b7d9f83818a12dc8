//! Tokenization and the contextual encoder.
//!
//! The encoder is a small transformer trained from scratch. It is run twice
//! per example with the same weights: once over the joint sequence
//! `[CLS] q [SEP] p [SEP]` (rows p) and once over `[CLS] q [SEP]`, whose
//! `[CLS]` row is the pure-question vector q_cls.

mod transformer;
mod vocab;

use std::ops::Range;

pub(crate) use transformer::xavier;
pub use transformer::{
    question_input, transformer_layer, Dropout, Encoder, EncoderConfig, JointInput, LayerOutput,
    LayerParams,
};
pub use vocab::{char_slice, tokenize, Token, Tokenized, Vocab, CLS, PAD, RESERVED, SEP, UNK};

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Position of `[CLS]` in the joint sequence; doubles as the no-answer
/// sentinel.
pub const SENTINEL: usize = 0;

/// Output of both encoder passes for one example.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// `L x h` joint representation.
    pub p: Var,
    /// `h` pure-question vector.
    pub q_cls: Var,
    pub mask: Vec<bool>,
    pub passage: Range<usize>,
    pub sentinel: usize,
}

impl Encoder {
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        input: &JointInput,
        question: &[usize],
        mut drop: Option<&mut Dropout>,
    ) -> Result<EncodedPair> {
        let p = self.encode_joint(g, input, drop.as_deref_mut())?;
        let q_cls = self.encode_question(g, question, drop)?;
        Ok(EncodedPair {
            p,
            q_cls,
            mask: input.mask.clone(),
            passage: input.passage.clone(),
            sentinel: SENTINEL,
        })
    }
}
