//! Diagnostics over trained models: layer attention heatmaps, layer masking
//! sweeps, embedding spectra and aligned-embedding similarity.

mod report;
mod svd;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Example, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::layer_fusion::DecoderSource;
use crate::tensor::{Rng, Tensor};
use crate::train::{avg_output_length, corpus_bleu, decode_all, evaluate, DecodeConfig};
use crate::transformer::Seq2Seq;

pub use report::{write_json, write_pgm, write_spectrum_csv, TensorDump};
pub use svd::{normalized_spectrum, singular_values};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SURFACEFUSE_THREADS";

/// Worker threads to use: the available parallelism, capped by
/// `SURFACEFUSE_THREADS` when set.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) => available.min(cap.max(1)),
        None => available,
    }
}

fn layer_label(n: usize) -> String {
    if n == 0 {
        "emb".into()
    } else {
        n.to_string()
    }
}

/// Mean layer attention of every decoder layer over the encoder layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    /// `[M][N + 1]`; entry `(m, n)` averages the weight on encoder layer `n`
    /// over all dimensions.
    pub matrix: Vec<Vec<f64>>,
    /// Decoder layers, bottom to top.
    pub rows: Vec<String>,
    /// Encoder layers, `emb` first.
    pub cols: Vec<String>,
}

/// Averages normalized `[M, L, D]` weights over the dimension axis.
pub fn mean_over_dims(weights: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [m, l, d] = *weights.shape() else {
        return Err(Error::shape(format!("expected [M, L, D] weights, got {:?}", weights.shape())));
    };
    Ok((0..m)
        .map(|i| {
            (0..l)
                .map(|n| (0..d).map(|k| weights.at(&[i, n, k])).sum::<f64>() / d as f64)
                .collect()
        })
        .collect())
}

/// Heatmap of a model with layer attention. Decoder layers that read the
/// final encoder layer directly put all of their weight on it.
pub fn heatmap(model: &Seq2Seq) -> Result<HeatmapReport> {
    let weights = model.layer_weights()?;
    let wiring = model.fusion_wiring().expect("layer attention has wiring");
    let means = mean_over_dims(&weights)?;
    let n = model.config.encoder_layers;
    let matrix = wiring
        .iter()
        .map(|source| {
            let mut row = vec![0.0; n + 1];
            match source {
                DecoderSource::Final => row[n] = 1.0,
                DecoderSource::Fused { slot, layers } => {
                    for (pos, &layer) in layers.iter().enumerate() {
                        row[layer] = means[*slot][pos];
                    }
                }
            }
            row
        })
        .collect();
    Ok(HeatmapReport {
        matrix,
        rows: (1..=wiring.len()).map(|m| m.to_string()).collect(),
        cols: (0..=n).map(layer_label).collect(),
    })
}

/// Evaluation of one masking configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Masked encoder layer; `none` for the unmasked control.
    pub layer: String,
    pub token_acc: Option<f64>,
    pub bleu: Option<f64>,
    pub mean_len: Option<f64>,
    /// Relative changes against the unmasked baseline.
    pub rel_acc: Option<f64>,
    pub rel_bleu: Option<f64>,
    pub rel_len: Option<f64>,
    /// Set when the mask could not be applied.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSweepReport {
    pub baseline: SweepRow,
    /// The unmasked configuration evaluated again.
    pub control: SweepRow,
    /// One row per encoder layer, `emb` first.
    pub layers: Vec<SweepRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Metrics {
    token_acc: f64,
    bleu: f64,
    mean_len: f64,
}

fn measure(model: &Seq2Seq, examples: &[Example], max_tokens: usize, decode: &DecodeConfig) -> Result<Metrics> {
    let eval = evaluate(model, examples, max_tokens)?;
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let hyps = decode_all(model, &sources, decode)?;
    Ok(Metrics {
        token_acc: eval.token_acc,
        bleu: corpus_bleu(&hyps, &refs)?,
        mean_len: avg_output_length(&hyps)?,
    })
}

fn relative(value: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (value - base) / base)
}

fn sweep_row(layer: String, result: Result<Metrics>, base: Option<Metrics>) -> SweepRow {
    match result {
        Ok(m) => SweepRow {
            layer,
            token_acc: Some(m.token_acc),
            bleu: Some(m.bleu),
            mean_len: Some(m.mean_len),
            rel_acc: base.and_then(|b| relative(m.token_acc, b.token_acc)),
            rel_bleu: base.and_then(|b| relative(m.bleu, b.bleu)),
            rel_len: base.and_then(|b| relative(m.mean_len, b.mean_len)),
            error: None,
        },
        Err(e) => SweepRow {
            layer,
            token_acc: None,
            bleu: None,
            mean_len: None,
            rel_acc: None,
            rel_bleu: None,
            rel_len: None,
            error: Some(e.to_string()),
        },
    }
}

/// Evaluates the model with each encoder layer masked out of the layer
/// attention in turn. Layers are evaluated in parallel on model copies;
/// a layer whose mask is degenerate reports its error instead of metrics.
pub fn mask_sweep(
    model: &Seq2Seq,
    examples: &[Example],
    max_tokens: usize,
    decode: &DecodeConfig,
) -> Result<MaskSweepReport> {
    model.layer_weights()?;
    let mut plain = model.clone();
    plain.fusion_mask = None;
    let base = measure(&plain, examples, max_tokens, decode)?;
    let n = model.config.encoder_layers;
    // Job 0 is the control; job k masks layer k - 1.
    let jobs: Vec<usize> = (0..=n + 1).collect();
    let threads = worker_threads().min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<Metrics>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..threads).map(|t| jobs.iter().copied().skip(t).step_by(threads).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let plain = &plain;
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|job| {
                            let mut copy = plain.clone();
                            copy.fusion_mask = job.checked_sub(1);
                            (job, measure(&copy, examples, max_tokens, decode))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (job, r) in h.join().expect("sweep worker panicked") {
                results[job] = Some(r);
            }
        }
    });
    let mut results = results.into_iter().map(|r| r.expect("every job ran"));
    let control = sweep_row("none".into(), results.next().unwrap(), Some(base));
    let layers = results
        .enumerate()
        .map(|(k, r)| sweep_row(layer_label(k), r, Some(base)))
        .collect();
    Ok(MaskSweepReport {
        baseline: sweep_row("none".into(), Ok(base), None),
        control,
        layers,
    })
}

/// Which half of the embedding dimensions a spectrum describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumLabel {
    FullEmbedding,
    MoreAttended,
    Random,
    LessAttended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub label: SpectrumLabel,
    /// Normalized singular values, descending, the first being 1.
    pub sigma: Vec<f64>,
    /// Natural logs of `sigma`.
    pub log_sigma: Vec<f64>,
    /// Sum of `log_sigma`; larger means a flatter spectrum.
    pub log_sum: f64,
}

/// Normalized spectrum of `matrix`.
pub fn svd_spectrum(matrix: &Tensor, label: SpectrumLabel) -> Result<SpectrumReport> {
    let (sigma, log_sigma) = normalized_spectrum(matrix)?;
    let log_sum = log_sigma.iter().sum();
    Ok(SpectrumReport {
        label,
        sigma,
        log_sigma,
        log_sum,
    })
}

/// Column indices of the embedding halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimSplit {
    pub more_attended: Vec<usize>,
    pub less_attended: Vec<usize>,
    pub random: Vec<usize>,
}

/// Orders dimensions by descending attention weight (ties by ascending
/// index) and halves them; the random half is drawn with `seed`.
pub fn split_dims_by_attention(weights: &[f64], seed: u64) -> Result<DimSplit> {
    let d = weights.len();
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::param(format!("cannot halve {d} dimensions")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut random: Vec<usize> = (0..d).collect();
    Rng::new(seed).shuffle(&mut random);
    random.truncate(d / 2);
    random.sort_unstable();
    Ok(DimSplit {
        more_attended: order[..d / 2].to_vec(),
        less_attended: order[d / 2..].to_vec(),
        random,
    })
}

/// Per-dimension weight that decoder layer `m` (1-based) puts on the
/// embedding layer.
pub fn embedding_attention(model: &Seq2Seq, m: usize) -> Result<Vec<f64>> {
    let weights = model.layer_weights()?;
    let wiring = model.fusion_wiring().expect("layer attention has wiring");
    if m == 0 || m > wiring.len() {
        return Err(Error::Index(format!("decoder layer {m} of {}", wiring.len())));
    }
    match &wiring[m - 1] {
        DecoderSource::Fused { slot, layers } if layers.first() == Some(&0) => {
            let d = model.config.d_model;
            Ok((0..d).map(|k| weights.at(&[*slot, 0, k])).collect())
        }
        _ => Err(Error::ModeMismatch(format!(
            "decoder layer {m} does not attend to the embedding layer"
        ))),
    }
}

/// Word rows of the source embedding table (reserved tokens excluded).
pub fn word_embeddings(model: &Seq2Seq) -> Result<Tensor> {
    let table = model.src_embedding();
    let rows: Vec<usize> = (RESERVED.len()..table.rows()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("vocabulary has no words".into()));
    }
    table.select_rows(&rows)
}

/// Spectra of the full source word embedding and of its more-attended,
/// random and less-attended halves, as seen from decoder layer `m`.
pub fn expressivity(model: &Seq2Seq, m: usize, seed: u64) -> Result<Vec<SpectrumReport>> {
    let split = split_dims_by_attention(&embedding_attention(model, m)?, seed)?;
    let words = word_embeddings(model)?;
    Ok(vec![
        svd_spectrum(&words, SpectrumLabel::FullEmbedding)?,
        svd_spectrum(&words.select_columns(&split.more_attended)?, SpectrumLabel::MoreAttended)?,
        svd_spectrum(&words.select_columns(&split.random)?, SpectrumLabel::Random)?,
        svd_spectrum(&words.select_columns(&split.less_attended)?, SpectrumLabel::LessAttended)?,
    ])
}

/// Dictionary subset used for embedding similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    All,
    /// Pairs whose source and target words differ.
    NonShared,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "non-shared" => Ok(Split::NonShared),
            other => Err(Error::param(format!("unknown split `{other}` (all, non-shared)"))),
        }
    }
}

/// Keeps the dictionary pairs belonging to `split`; words are compared as
/// strings so separate vocabularies work.
pub fn split_pairs(pairs: &[(usize, usize)], src: &Vocabulary, tgt: &Vocabulary, split: Split) -> Vec<(usize, usize)> {
    pairs
        .iter()
        .copied()
        .filter(|&(s, t)| split == Split::All || src.token(s) != tgt.token(t))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between the source embedding of each pair's
/// source word and the target embedding of its aligned word.
pub fn embed_cosine(src_emb: &Tensor, tgt_emb: &Tensor, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no aligned pairs in the selected split".into()));
    }
    if src_emb.rank() != 2 || tgt_emb.rank() != 2 || src_emb.last_dim() != tgt_emb.last_dim() {
        return Err(Error::shape("embedding tables must be matrices of equal width"));
    }
    let mut total = 0.0;
    for &(s, t) in pairs {
        if s >= src_emb.rows() || t >= tgt_emb.rows() {
            return Err(Error::Index(format!("pair ({s}, {t}) outside the embedding tables")));
        }
        total += cosine(src_emb.row(s), tgt_emb.row(t));
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub split: Split,
    pub pairs: usize,
    pub mean_cosine: f64,
}

/// Aligned-embedding similarity of a model over a dictionary split.
pub fn model_cosine(
    model: &Seq2Seq,
    dictionary: &[(usize, usize)],
    src: &Vocabulary,
    tgt: &Vocabulary,
    split: Split,
) -> Result<CosineReport> {
    let pairs = split_pairs(dictionary, src, tgt, split);
    Ok(CosineReport {
        split,
        pairs: pairs.len(),
        mean_cosine: embed_cosine(model.src_embedding(), model.tgt_embedding(), &pairs)?,
    })
}

/// Gold-token log-probabilities of one teacher-forced sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub tokens: Vec<usize>,
    /// Scores the model decodes with.
    pub fused: Vec<f64>,
    /// Decoder distribution alone.
    pub base: Vec<f64>,
    /// Surface distribution, in surface modes.
    pub surface: Option<Vec<f64>>,
}

/// Per-token fused, decoder and surface log-probabilities of the reference
/// (EOS included).
pub fn token_scores(model: &Seq2Seq, example: &Example) -> Result<TokenScores> {
    use crate::data::{Batch, PAD};
    let batch = Batch::new(&[example])?;
    let (g, out) = model.evaluate(&batch.src, &batch.tgt_in)?;
    let tokens: Vec<usize> = batch.tgt_out.iter().copied().filter(|&t| t != PAD).collect();
    let pick = |v| -> Vec<f64> {
        let t: &Tensor = g.value(v);
        tokens.iter().enumerate().map(|(j, &tok)| t.row(j)[tok]).collect()
    };
    Ok(TokenScores {
        fused: pick(out.scores),
        base: pick(out.base),
        surface: out.surface.map(pick),
        tokens,
    })
}

#[cfg(test)]
mod tests;
