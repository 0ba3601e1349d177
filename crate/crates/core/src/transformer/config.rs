use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Vocabulary sizes; run configs may leave them out and take them from
    /// the data.
    #[serde(default)]
    pub src_vocab: usize,
    #[serde(default)]
    pub tgt_vocab: usize,
    /// Share the source embedding, target embedding and pre-softmax weight.
    /// Requires a joint vocabulary.
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("model.{path}"),
                message,
            })
        };
        if self.encoder_layers < 1 {
            return fail("encoder_layers", "at least one encoder layer required".into());
        }
        if self.decoder_layers < 1 {
            return fail("decoder_layers", "at least one decoder layer required".into());
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(
                "heads",
                format!("{} heads must divide d_model {}", self.heads, self.d_model),
            );
        }
        if self.d_ff == 0 {
            return fail("d_ff", "must be positive".into());
        }
        if self.src_vocab < 4 {
            return fail("src_vocab", "at least the 4 reserved tokens required".into());
        }
        if self.tgt_vocab < 4 {
            return fail("tgt_vocab", "at least the 4 reserved tokens required".into());
        }
        if self.tie_embeddings && self.src_vocab != self.tgt_vocab {
            return fail(
                "tie_embeddings",
                "tied embeddings need a joint vocabulary (src_vocab == tgt_vocab)".into(),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("max_len", "must be at least 2".into());
        }
        Ok(())
    }
}
