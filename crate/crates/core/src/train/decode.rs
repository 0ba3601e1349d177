use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::Seq2Seq;

fn default_beam() -> usize {
    1
}

fn default_alpha() -> f64 {
    1.0
}

fn default_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// 1 decodes greedily.
    #[serde(default = "default_beam")]
    pub beam: usize,
    /// Length normalization exponent: hypotheses rank by `score / len^alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Output length cap; `None` uses the model's position limit.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Sentences per greedy batch.
    #[serde(default = "default_batch")]
    pub batch: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: default_beam(),
            alpha: default_alpha(),
            max_len: None,
            batch: default_batch(),
        }
    }
}

/// Highest-scoring token of a row, lowest id on ties; PAD and BOS are never
/// produced.
fn best_token(row: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (t, &s) in row.iter().enumerate() {
        if t != PAD && t != BOS && best.is_none_or(|b| s > row[b]) {
            best = Some(t);
        }
    }
    best.unwrap_or(EOS)
}

fn step_limit(model: &Seq2Seq, max_len: Option<usize>) -> usize {
    let cap = model.config.max_len;
    max_len.map_or(cap, |m| m.min(cap))
}

/// Greedy decoding of a batch; outputs exclude BOS and EOS.
pub fn greedy<S: AsRef<[usize]>>(model: &Seq2Seq, sources: &[S], max_len: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let limit = step_limit(model, max_len);
    let mut state = model.start_decode(sources)?;
    let n = sources.len();
    let mut outputs = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut feed = vec![BOS; n];
    while state.steps() < limit && done.iter().any(|d| !d) {
        let scores = model.step(&mut state, &feed)?;
        for b in 0..n {
            if done[b] {
                feed[b] = EOS;
                continue;
            }
            let t = best_token(scores.row(b));
            if t == EOS {
                done[b] = true;
            } else {
                outputs[b].push(t);
            }
            feed[b] = t;
        }
    }
    Ok(outputs)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

fn normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Beam search for one source. Each step expands every live hypothesis,
/// keeps the best `2k` candidates (ties by parent, then token id), moves
/// those ending in EOS among the top `k` to the finished set and continues with the best `k`
/// others. Search stops once `k` hypotheses have finished or the length cap
/// is reached; the result maximizes `score / len^alpha`, with `len`
/// counting EOS.
pub fn beam_search(model: &Seq2Seq, src: &[usize], k: usize, alpha: f64, max_len: Option<usize>) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::param("beam size must be at least 1"));
    }
    let limit = step_limit(model, max_len);
    let mut state = model.start_decode(&[src])?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut feed = vec![BOS];
    while !live.is_empty() && finished.len() < k && state.steps() < limit {
        let scores: Tensor = model.step(&mut state, &feed)?;
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (p, h) in live.iter().enumerate() {
            for (t, &s) in scores.row(p).iter().enumerate() {
                if t != PAD && t != BOS {
                    cand.push((h.score + s, p, t));
                }
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        let mut parents = Vec::with_capacity(k);
        for (rank, &(score, p, t)) in cand.iter().take(2 * k).enumerate() {
            let mut tokens = live[p].tokens.clone();
            if t == EOS {
                if rank < k {
                    finished.push(Hyp { tokens, score });
                }
            } else if next.len() < k {
                tokens.push(t);
                next.push(Hyp { tokens, score });
                parents.push(p);
            }
        }
        if finished.len() >= k || next.is_empty() {
            break;
        }
        state.reorder(&parents)?;
        feed = next.iter().map(|h| *h.tokens.last().unwrap()).collect();
        live = next;
    }
    if finished.len() < k {
        finished.extend(live);
    }
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            let (la, lb) = (a.tokens.len() + 1, b.tokens.len() + 1);
            normalized(a.score, la, alpha)
                .total_cmp(&normalized(b.score, lb, alpha))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h.tokens.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Decodes every source with the configured strategy.
pub fn decode_all(model: &Seq2Seq, sources: &[Vec<usize>], config: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    if config.beam <= 1 {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(config.batch.max(1)) {
            out.extend(greedy(model, chunk, config.max_len)?);
        }
        Ok(out)
    } else {
        sources
            .iter()
            .map(|s| beam_search(model, s, config.beam, config.alpha, config.max_len))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface_fusion::{FusionConfig, FusionMode};
    use crate::transformer::ModelConfig;

    fn model(mode: FusionMode, seed: u64) -> Seq2Seq {
        let config = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            src_vocab: 10,
            tgt_vocab: 10,
            tie_embeddings: true,
            dropout: 0.0,
            max_len: 12,
        };
        Seq2Seq::new(config, FusionConfig::new(mode), seed).unwrap()
    }

    #[test]
    fn best_token_ties_and_exclusions() {
        assert_eq!(best_token(&[9.0, 9.0, 1.0, 1.0]), 2);
        assert_eq!(best_token(&[0.0, 0.0, 1.0, 1.0, 3.0, 3.0]), 4);
        assert_eq!(best_token(&[0.0, 0.0, 1.0, 2.0, 1.0]), 3);
    }

    #[test]
    fn greedy_matches_unbatched_argmax() {
        let m = model(FusionMode::SurfaceSoft, 1);
        let sources = vec![vec![4, 5, 6], vec![7], vec![8, 9]];
        let out = greedy(&m, &sources, Some(6)).unwrap();
        for (src, hyp) in sources.iter().zip(&out) {
            // Rebuild by repeated full forward passes.
            let mut prefix = vec![BOS];
            let mut expected = Vec::new();
            while prefix.len() <= 6 {
                let s = m.score_prefix(src, &prefix).unwrap();
                let t = best_token(s.row(prefix.len() - 1));
                if t == EOS {
                    break;
                }
                expected.push(t);
                prefix.push(t);
            }
            assert_eq!(hyp, &expected);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        for (seed, mode) in [(2, FusionMode::None), (3, FusionMode::Fine), (4, FusionMode::SurfaceHard)] {
            let m = model(mode, seed);
            let sources = vec![vec![4, 5, 6, 7], vec![9, 8], vec![5]];
            let g = greedy(&m, &sources, None).unwrap();
            for (s, h) in sources.iter().zip(&g) {
                assert_eq!(&beam_search(&m, s, 1, 1.0, None).unwrap(), h);
            }
        }
    }

    #[test]
    fn alpha_zero_is_sum_of_log_probs() {
        assert_eq!(normalized(-3.0, 7, 0.0), -3.0);
        assert_eq!(normalized(-3.0, 3, 1.0), -1.0);
    }

    #[test]
    fn outputs_respect_cap() {
        let m = model(FusionMode::None, 6);
        let out = decode_all(&m, &[vec![4, 5]], &DecodeConfig { max_len: Some(3), ..Default::default() }).unwrap();
        assert!(out[0].len() <= 3);
        assert!(beam_search(&m, &[4], 0, 1.0, None).is_err());
    }
}
