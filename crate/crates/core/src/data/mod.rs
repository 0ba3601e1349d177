//! Vocabularies, batching and the synthetic tasks.

mod tasks;
mod text;

pub use tasks::{gen_cipher, gen_copy, CipherTask};
pub use text::{load_parallel_text, read_dictionary, write_dictionary, write_side, ParallelText};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::transformer::Padded;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token strings indexed by id; ids 0..4 are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` in order (duplicates dropped).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// The vocabulary of a synthetic task with `content` tokens `w0, w1, ...`;
    /// token `w{t}` has id `4 + t`.
    pub fn synthetic(content: usize) -> Self {
        Self::from_tokens((0..content).map(|t| format!("w{t}")))
    }

    /// Tokens seen at least `min_count` times, most frequent first and ties in
    /// lexicographic order.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, stopping at EOS and skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A source/target pair without BOS or EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Padded model inputs for a set of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Padded,
    /// BOS followed by the target.
    pub tgt_in: Padded,
    /// The target followed by EOS, padded like `tgt_in` and flattened.
    pub tgt_out: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let src: Vec<&[usize]> = examples.iter().map(|e| e.src.as_slice()).collect();
        let tgt_in: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let tgt_in = Padded::new(&tgt_in)?;
        let mut tgt_out = vec![PAD; tgt_in.batch * tgt_in.len];
        for (b, e) in examples.iter().enumerate() {
            let row = &mut tgt_out[b * tgt_in.len..];
            row[..e.tgt.len()].copy_from_slice(&e.tgt);
            row[e.tgt.len()] = EOS;
        }
        Ok(Self {
            src: Padded::new(&src)?,
            tgt_in,
            tgt_out,
        })
    }

    /// Number of scored target tokens (including EOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

fn padded_cost(e: &Example) -> usize {
    e.src.len().max(e.tgt.len() + 1)
}

/// Groups example indices into batches of at most `max_tokens` padded tokens
/// per side (a single over-long example forms its own batch). With an `rng`
/// the examples are shuffled, bucketed by length and the batch order is
/// shuffled; without one, the grouping is deterministic by length.
pub fn token_batches(examples: &[Example], max_tokens: usize, rng: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if max_tokens == 0 {
        return Err(Error::param("max_tokens must be positive"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng;
    if let Some(r) = rng.as_deref_mut() {
        r.shuffle(&mut order);
    }
    order.sort_by_key(|&i| padded_cost(&examples[i]));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let cost = padded_cost(&examples[i]);
        let width = longest.max(cost);
        if !current.is_empty() && (current.len() + 1) * width > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(cost);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if let Some(r) = rng {
        r.shuffle(&mut batches);
    }
    Ok(batches)
}
