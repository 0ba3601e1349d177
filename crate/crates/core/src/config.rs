//! Run configuration files and dataset preparation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_cipher, gen_copy, load_parallel_text, read_dictionary, CipherTask, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::surface_fusion::FusionConfig;
use crate::tensor::Rng;
use crate::train::{DecodeConfig, TrainConfig};
use crate::transformer::ModelConfig;

/// Random stream used for dataset generation.
const DATA_STREAM: u64 = 3 << 32;

fn one() -> usize {
    1
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Random sequences whose target is the source.
    Copy {
        content: usize,
        min_len: usize,
        max_len: usize,
        train: usize,
        valid: usize,
        test: usize,
    },
    /// Random sequences enciphered by a token bijection.
    Cipher {
        content: usize,
        shared_fraction: f64,
        #[serde(default)]
        reorder: bool,
        min_len: usize,
        max_len: usize,
        train: usize,
        valid: usize,
        test: usize,
    },
    /// A directory with `train`, `valid` and optionally `test` `.src`/`.tgt`
    /// files and an optional `alignment.json`.
    Files {
        dir: PathBuf,
        #[serde(default = "one")]
        min_count: usize,
        #[serde(default)]
        joint: bool,
    },
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Run directory; the command line may override it.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses JSON, reporting errors with the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path,
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills the vocabulary sizes from prepared data and validates.
    pub fn resolve(&mut self, data: &Prepared) -> Result<()> {
        self.model.src_vocab = data.src_vocab.len();
        self.model.tgt_vocab = data.tgt_vocab.len();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.decode.beam == 0 {
            return Err(Error::Config {
                path: "decode.beam".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Tokenized splits with their vocabularies.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Gold word alignments `(source id, target id)`, when known.
    pub dictionary: Option<Vec<(usize, usize)>>,
}

/// Generates or loads the data described by `config`.
pub fn prepare(config: &DataConfig, seed: u64) -> Result<Prepared> {
    let mut rng = Rng::derive(seed, DATA_STREAM);
    match config {
        DataConfig::Copy {
            content,
            min_len,
            max_len,
            train,
            valid,
            test,
        } => {
            let mut split = |n| gen_copy(n, *min_len, *max_len, *content, &mut rng);
            let (train, valid, test) = (split(*train)?, split(*valid)?, split(*test)?);
            let vocab = Vocabulary::synthetic(*content);
            Ok(Prepared {
                src_vocab: vocab.clone(),
                tgt_vocab: vocab,
                train,
                valid,
                test,
                dictionary: None,
            })
        }
        DataConfig::Cipher {
            content,
            shared_fraction,
            reorder,
            min_len,
            max_len,
            train,
            valid,
            test,
        } => {
            let task = CipherTask::new(*content, *shared_fraction, *reorder, &mut rng)?;
            let mut split = |n| gen_cipher(&task, n, *min_len, *max_len, &mut rng);
            let (train, valid, test) = (split(*train)?, split(*valid)?, split(*test)?);
            let vocab = Vocabulary::synthetic(*content);
            Ok(Prepared {
                src_vocab: vocab.clone(),
                tgt_vocab: vocab,
                train,
                valid,
                test,
                dictionary: Some(task.dictionary(false)),
            })
        }
        DataConfig::Files { dir, min_count, joint } => {
            let corpus = load_parallel_text(dir.join("train.src"), dir.join("train.tgt"), *min_count, *joint)?;
            let encode = |name: &str| -> Result<Vec<Example>> {
                let (s, t) = (dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")));
                if !s.exists() {
                    return Ok(Vec::new());
                }
                let (src, tgt) = (std::fs::read_to_string(s)?, std::fs::read_to_string(t)?);
                let (src, tgt): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
                if src.len() != tgt.len() {
                    return Err(Error::Data(format!("{name} split sides differ in length")));
                }
                Ok(src
                    .iter()
                    .zip(&tgt)
                    .map(|(s, t)| Example {
                        src: corpus.src_vocab.encode(s),
                        tgt: corpus.tgt_vocab.encode(t),
                    })
                    .filter(|e| !e.src.is_empty() && !e.tgt.is_empty())
                    .collect())
            };
            let (valid, test) = (encode("valid")?, encode("test")?);
            let align = dir.join("alignment.json");
            let dictionary = if align.exists() {
                Some(read_dictionary(align, &corpus.src_vocab, &corpus.tgt_vocab)?)
            } else {
                None
            };
            Ok(Prepared {
                src_vocab: corpus.src_vocab,
                tgt_vocab: corpus.tgt_vocab,
                train: corpus.examples,
                valid,
                test,
                dictionary,
            })
        }
    }
}
