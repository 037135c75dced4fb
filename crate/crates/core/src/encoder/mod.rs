//! Tiny pre-norm transformer that accepts any additive attention mask.

mod forward;
mod params;
mod vocab;

use serde::{Deserialize, Serialize};

pub use forward::{
    encode_modality_prefix, extract_embedding, forward, forward_packed, gather_embeddings, sinusoid, HiddenStates,
    PackedHidden, PrefixInput, SeqInput, SeqLayout, PREFIX_ROWS,
};
pub use params::{LayerParams, ModelParams};
pub use vocab::{
    count_token, render_answer, render_template, tabular_token, ModalitySpan, TokenSequence, Vocab, EOS, INSTRUCTION,
    MAX_COUNT, QUERY_WORDS, TAB_BUCKETS, USER,
};

use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_modalities: usize,
    pub seed: u64,
    pub tabular_dim: usize,
    pub modality_prefix: bool,
    /// Amplitude of the sinusoidal position signal.
    pub pos_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::builtin(4).len(),
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 128,
            n_modalities: 6,
            seed: 7,
            tabular_dim: 4,
            modality_prefix: true,
            pos_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.tabular_dim == 0 {
            return bad("vocab_size, d_ff and tabular_dim must be positive".into());
        }
        if self.n_modalities != 6 {
            return bad(format!("n_modalities is fixed at 6, got {}", self.n_modalities));
        }
        if !(self.pos_scale >= 0.0 && self.pos_scale.is_finite()) {
            return bad(format!("pos_scale must be a finite non-negative number, got {}", self.pos_scale));
        }
        if self.max_len < 14 {
            return bad(format!("max_len {} cannot hold the empty template", self.max_len));
        }
        Ok(())
    }
}
