use std::collections::HashMap;
use std::hash::Hash;

use crate::data::EOS;
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 100]`: clipped n-gram precisions for
/// `n = 1..=4` summed over the corpus, their geometric mean, and a brevity
/// penalty. No smoothing, so any zero precision gives 0.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU over an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

/// Tokens before the first EOS.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

/// Mean output length, counting tokens before the first EOS.
pub fn avg_output_length(hyps: &[Vec<usize>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("no outputs".into()));
    }
    let total: usize = hyps.iter().map(|h| strip_eos(h).len()).sum();
    Ok(total as f64 / hyps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = vec![toks("a b c d e f"), toks("x y z w")];
        assert!((corpus_bleu(&a, &a).unwrap() - 100.0).abs() < 1e-12);
        let b = vec![toks("a b c d"), toks("x y z w")];
        let c = vec![toks("a b c e"), toks("x y z v")];
        assert_eq!(corpus_bleu(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_by_hand() {
        // 1-grams 4/5, 2-grams 3/4, 3-grams 2/3, 4-grams 1/2; equal lengths.
        let h = vec![toks("a b c d e")];
        let r = vec![toks("a b c d f")];
        let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((corpus_bleu(&h, &r).unwrap() - expected).abs() < 1e-10);
        assert!((expected - 66.874).abs() < 1e-3);
    }

    #[test]
    fn clipping_and_brevity() {
        // Hypothesis "a a a a a" against "a b c d e f": only one "a" counts.
        let h = vec![toks("the the the the")];
        let r = vec![toks("the cat")];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
        // Shorter hypothesis, all n-grams matching: only the brevity penalty.
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e f g h")];
        let expected = 100.0 * (1.0f64 - 8.0 / 4.0).exp();
        assert!((corpus_bleu(&h, &r).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn errors() {
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn lengths() {
        assert_eq!(avg_output_length(&[vec![4; 2], vec![4; 4], vec![4; 6]]).unwrap(), 4.0);
        assert_eq!(avg_output_length(&[vec![5, 6, 7]]).unwrap(), 3.0);
        // [5, EOS, 7] -> 1 token, [5, 6, 7, EOS] -> 3, [EOS] -> 0: mean 4/3.
        let mixed = [vec![5, EOS, 7], vec![5, 6, 7, EOS], vec![EOS]];
        assert!((avg_output_length(&mixed).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(avg_output_length(&[]).is_err());
    }
}
