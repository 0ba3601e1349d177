use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::Example;

/// First id of a content token in the synthetic vocabularies.
const FIRST: usize = 4;

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::param(format!("length range [{min_len}, {max_len}]")));
    }
    Ok(())
}

fn random_sequence(rng: &mut Rng, content: usize, min_len: usize, max_len: usize) -> Vec<usize> {
    let len = rng.range_inclusive(min_len, max_len);
    (0..len).map(|_| FIRST + rng.below(content)).collect()
}

/// `n` random sequences over `content` tokens whose target is the source.
pub fn gen_copy(n: usize, min_len: usize, max_len: usize, content: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    check_lengths(min_len, max_len)?;
    if content == 0 {
        return Err(Error::param("copy task needs at least one content token"));
    }
    Ok((0..n)
        .map(|_| {
            let src = random_sequence(rng, content, min_len, max_len);
            Example { tgt: src.clone(), src }
        })
        .collect())
}

/// Translation through a fixed bijection of the content tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherTask {
    /// `permutation[t]` is the image of content token `t`.
    pub permutation: Vec<usize>,
    /// Swap adjacent target tokens pairwise after substitution.
    pub reorder: bool,
}

impl CipherTask {
    /// A random cipher in which exactly `round(shared_fraction * content)`
    /// tokens map to themselves and every other token is moved.
    pub fn new(content: usize, shared_fraction: f64, reorder: bool, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&shared_fraction) {
            return Err(Error::param(format!("shared_fraction {shared_fraction} not in [0, 1]")));
        }
        if content < 20 {
            return Err(Error::param(format!("cipher needs at least 20 content tokens, got {content}")));
        }
        let shared = (shared_fraction * content as f64).round() as usize;
        if content - shared == 1 {
            return Err(Error::param("a single non-shared token cannot be moved"));
        }
        let mut tokens: Vec<usize> = (0..content).collect();
        rng.shuffle(&mut tokens);
        let moved = &tokens[shared..];
        let mut permutation: Vec<usize> = (0..content).collect();
        // Sattolo's algorithm: a uniformly random single cycle, which has no
        // fixed points.
        let mut cycle = moved.to_vec();
        for i in (1..cycle.len()).rev() {
            let j = rng.below(i);
            cycle.swap(i, j);
        }
        for (&from, &to) in moved.iter().zip(&cycle) {
            permutation[from] = to;
        }
        Ok(Self { permutation, reorder })
    }

    pub fn identity(content: usize) -> Self {
        Self {
            permutation: (0..content).collect(),
            reorder: false,
        }
    }

    pub fn from_permutation(permutation: Vec<usize>, reorder: bool) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::param("cipher permutation is not a bijection"));
            }
        }
        Ok(Self { permutation, reorder })
    }

    pub fn content(&self) -> usize {
        self.permutation.len()
    }

    /// Number of tokens that map to themselves.
    pub fn shared(&self) -> usize {
        self.permutation.iter().enumerate().filter(|&(t, &p)| t == p).count()
    }

    /// Enciphers a sequence of token ids.
    pub fn apply(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src.iter().map(|&t| FIRST + self.permutation[t - FIRST]).collect();
        if self.reorder {
            for pair in out.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
        }
        out
    }

    /// Inverse substitution (before any reordering).
    pub fn invert(&self, tgt: &[usize]) -> Vec<usize> {
        let mut inverse = vec![0; self.content()];
        for (t, &p) in self.permutation.iter().enumerate() {
            inverse[p] = t;
        }
        tgt.iter().map(|&t| FIRST + inverse[t - FIRST]).collect()
    }

    /// Gold alignment pairs `(source id, target id)`; with `non_shared` the
    /// pairs whose source and target token are the same are dropped.
    pub fn dictionary(&self, non_shared: bool) -> Vec<(usize, usize)> {
        self.permutation
            .iter()
            .enumerate()
            .filter(|&(t, &p)| !non_shared || t != p)
            .map(|(t, &p)| (FIRST + t, FIRST + p))
            .collect()
    }
}

/// `n` random sentences and their encipherment.
pub fn gen_cipher(task: &CipherTask, n: usize, min_len: usize, max_len: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    check_lengths(min_len, max_len)?;
    Ok((0..n)
        .map(|_| {
            let src = random_sequence(rng, task.content(), min_len, max_len);
            Example { tgt: task.apply(&src), src }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_equal_sources() {
        let mut rng = Rng::new(1);
        let data = gen_copy(100, 3, 3, 10, &mut rng).unwrap();
        assert!(data.iter().all(|e| e.src == e.tgt && e.src.len() == 3));
        assert!(data.iter().flat_map(|e| &e.src).all(|&t| (4..14).contains(&t)));
        assert_eq!(data, gen_copy(100, 3, 3, 10, &mut Rng::new(1)).unwrap());
        assert!(gen_copy(1, 0, 3, 10, &mut rng).is_err());
        assert!(gen_copy(1, 4, 3, 10, &mut rng).is_err());
    }

    #[test]
    fn identity_cipher_is_copy() {
        let task = CipherTask::identity(20);
        let a = gen_cipher(&task, 50, 2, 6, &mut Rng::new(2)).unwrap();
        let b = gen_copy(50, 2, 6, 20, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_fraction_gives_exact_fixed_points() {
        for seed in 0..20 {
            let task = CipherTask::new(40, 0.25, false, &mut Rng::new(seed)).unwrap();
            let fixed = task.permutation.iter().enumerate().filter(|&(t, &p)| t == p).count();
            assert_eq!(fixed, 10);
            let mut sorted = task.permutation.clone();
            sorted.sort();
            assert_eq!(sorted, (0..40).collect::<Vec<_>>());
        }
    }

    #[test]
    fn derangement_dictionaries_coincide() {
        let task = CipherTask::new(30, 0.0, false, &mut Rng::new(4)).unwrap();
        assert_eq!(task.shared(), 0);
        assert_eq!(task.dictionary(false), task.dictionary(true));
        let half = CipherTask::new(30, 0.5, false, &mut Rng::new(4)).unwrap();
        assert_eq!(half.dictionary(true).len(), 15);
    }

    #[test]
    fn cipher_is_invertible() {
        let task = CipherTask::new(24, 0.25, false, &mut Rng::new(5)).unwrap();
        for e in gen_cipher(&task, 40, 1, 9, &mut Rng::new(6)).unwrap() {
            assert_eq!(task.invert(&e.tgt), e.src);
        }
    }

    #[test]
    fn reorder_swaps_adjacent_pairs() {
        let task = CipherTask::from_permutation((0..20).collect(), true).unwrap();
        assert_eq!(task.apply(&[4, 5, 6, 7, 8]), vec![5, 4, 7, 6, 8]);
    }

    #[test]
    fn invalid_ciphers_rejected() {
        let mut rng = Rng::new(7);
        assert!(CipherTask::new(40, 1.5, false, &mut rng).is_err());
        assert!(CipherTask::new(40, -0.1, false, &mut rng).is_err());
        assert!(CipherTask::new(10, 0.25, false, &mut rng).is_err());
        assert!(CipherTask::from_permutation(vec![0, 0], false).is_err());
    }
}
