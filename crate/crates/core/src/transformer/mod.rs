//! Post-norm encoder-decoder Transformer that exposes every encoder layer.

mod attention;
pub mod checkpoint;
mod config;
mod model;

pub use attention::{multi_head_attention, AttentionMask, Linear, MultiHeadAttention};
pub use config::ModelConfig;
pub use model::{DecodeState, Outputs, Seq2Seq};

use crate::autograd::Var;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outputs of the encoder for one sentence, detached from any graph.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    /// `X[0] ..= X[N]`, each `[I, D]`; `X[0]` includes position embeddings.
    pub layers: Vec<Tensor>,
    /// Scaled word embeddings without position embeddings, `[I, D]`.
    pub x_emb: Tensor,
    /// Number of real source positions.
    pub src_len: usize,
}

/// Encoder outputs recorded on a graph for a padded batch.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub layers: Vec<Var>,
    pub x_emb: Var,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

/// A batch of token sequences right-padded with [`PAD`] to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    /// `batch * len` token ids, row-major.
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl Padded {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch without sequences".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lens.contains(&0) {
            return Err(Error::Empty("empty sequence in batch".into()));
        }
        let len = *lens.iter().max().unwrap();
        let mut tokens = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            tokens[b * len..b * len + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Self {
            tokens,
            batch: seqs.len(),
            len,
            lens,
        })
    }

    /// Sequence `b` without padding.
    pub fn get(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.len..b * self.len + self.lens[b]]
    }
}

/// Sinusoidal position table `[max_len, width]`.
pub fn sinusoidal_positions(max_len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; max_len * width];
    for pos in 0..max_len {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[max_len, width], data).expect("consistent shape")
}
