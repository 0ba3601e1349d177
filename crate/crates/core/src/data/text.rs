use std::path::Path;

use crate::error::{Error, Result};

use super::{Example, Vocabulary};

/// A tokenized parallel corpus with its vocabularies.
#[derive(Clone, Debug)]
pub struct ParallelText {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub examples: Vec<Example>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(lines)
}

/// Reads whitespace-tokenized sentences, one per line, and builds
/// vocabularies with a frequency cutoff (shared when `joint`). Tokens below
/// the cutoff map to UNK. Empty line pairs are rejected.
pub fn load_parallel_text(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    min_count: usize,
    joint: bool,
) -> Result<ParallelText> {
    let (src_path, tgt_path) = (src_path.as_ref(), tgt_path.as_ref());
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let (src_vocab, tgt_vocab) = if joint {
        let v = Vocabulary::build(src.iter().chain(&tgt).map(String::as_str), min_count);
        (v.clone(), v)
    } else {
        (
            Vocabulary::build(src.iter().map(String::as_str), min_count),
            Vocabulary::build(tgt.iter().map(String::as_str), min_count),
        )
    };
    let mut examples = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let example = Example {
            src: src_vocab.encode(s),
            tgt: tgt_vocab.encode(t),
        };
        if example.src.is_empty() || example.tgt.is_empty() {
            return Err(Error::Data(format!("line {} has an empty side", i + 1)));
        }
        examples.push(example);
    }
    Ok(ParallelText {
        src_vocab,
        tgt_vocab,
        examples,
    })
}

/// Writes one side of a dataset as text, one sentence per line.
pub fn write_side(path: impl AsRef<Path>, examples: &[Example], target: bool, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&vocab.decode(if target { &e.tgt } else { &e.src }));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes an alignment dictionary as a JSON list of `[src, tgt]` token pairs.
pub fn write_dictionary(path: impl AsRef<Path>, pairs: &[(usize, usize)], src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
    let list: Vec<[&str; 2]> = pairs.iter().map(|&(s, t)| [src.token(s), tgt.token(t)]).collect();
    std::fs::write(path, serde_json::to_string_pretty(&list)?)?;
    Ok(())
}

/// Reads a JSON alignment dictionary, mapping tokens to ids.
pub fn read_dictionary(path: impl AsRef<Path>, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<(usize, usize)>> {
    let list: Vec<[String; 2]> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(list.iter().map(|[s, t]| (src.id(s), tgt.id(t))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNK;

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        std::fs::write(&s, "the cat sat\nthe dog\n").unwrap();
        std::fs::write(&t, "le chat\nle chien assis\n").unwrap();
        let data = load_parallel_text(&s, &t, 1, false).unwrap();
        assert_eq!(data.examples.len(), 2);
        assert_eq!(data.src_vocab.decode(&data.examples[0].src), "the cat sat");
        assert_eq!(data.tgt_vocab.decode(&data.examples[1].tgt), "le chien assis");

        let out = dir.path().join("b.src");
        write_side(&out, &data.examples, false, &data.src_vocab).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "the cat sat\nthe dog\n");
    }

    #[test]
    fn cutoff_maps_rare_tokens_to_unk() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        std::fs::write(&s, "a a b\na c\n").unwrap();
        std::fs::write(&t, "x\ny\n").unwrap();
        let data = load_parallel_text(&s, &t, 2, true).unwrap();
        assert_eq!(data.src_vocab.len(), 5);
        assert_eq!(data.examples[0].src, vec![4, 4, UNK]);
        assert_eq!(data.src_vocab, data.tgt_vocab);
    }

    #[test]
    fn malformed_corpora_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t, e) = (dir.path().join("s"), dir.path().join("t"), dir.path().join("e"));
        std::fs::write(&s, "a\nb\n").unwrap();
        std::fs::write(&t, "a\n").unwrap();
        std::fs::write(&e, "").unwrap();
        assert!(matches!(load_parallel_text(&s, &t, 1, false), Err(Error::Data(_))));
        assert!(matches!(load_parallel_text(&e, &e, 1, false), Err(Error::Data(_))));
    }

    #[test]
    fn dictionary_round_trip() {
        let v = Vocabulary::synthetic(5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        write_dictionary(&p, &[(4, 6), (5, 5)], &v, &v).unwrap();
        assert_eq!(read_dictionary(&p, &v, &v).unwrap(), vec![(4, 6), (5, 5)]);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(raw[0][0], "w0");
        assert_eq!(raw[0][1], "w2");
    }
}
