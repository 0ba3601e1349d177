//! Little-endian binary checkpoints.
//!
//! Layout: the magic bytes `SFCK`, a `u32` version, a `u32` record count and
//! then one record per entry: `u32` name length, UTF-8 name, `u8` dtype tag,
//! `u32` rank, `rank` dimensions as `u64`, and the raw payload. Dtype tags are
//! 0 for `f64`, 1 for `u64` and 2 for UTF-8 text (rank 1, length in bytes).

use std::path::Path;

use crate::error::{Error, Result};
use crate::surface_fusion::FusionConfig;
use crate::tensor::Tensor;

use super::{ModelConfig, Seq2Seq};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F64(Tensor),
    U64(Vec<u64>),
    Text(String),
}

/// An ordered list of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Record)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, record: Record) {
        self.records.push((name.into(), record));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Record::F64(t)) => Ok(t),
            _ => Err(Error::Format(format!("missing tensor record `{name}`"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Record::Text(s)) => Ok(s),
            _ => Err(Error::Format(format!("missing text record `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Record::U64(v)) => Ok(v),
            _ => Err(Error::Format(format!("missing integer record `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, record) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, dims): (u8, Vec<usize>) = match record {
                Record::F64(t) => (0, t.shape().to_vec()),
                Record::U64(v) => (1, vec![v.len()]),
                Record::Text(s) => (2, vec![s.len()]),
            };
            out.push(tag);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match record {
                Record::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Record::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Record::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
            let record = match tag {
                0 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Record::F64(Tensor::new(&dims, data)?)
                }
                1 | 2 if rank != 1 => {
                    return Err(Error::Format(format!("record `{name}` must have rank 1")));
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
                    Record::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                2 => Record::Text(
                    String::from_utf8(r.take(numel)?.to_vec())
                        .map_err(|_| Error::Format(format!("record `{name}` is not UTF-8")))?,
                ),
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            records.push((name, record));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Model configuration, fusion configuration and every parameter.
pub fn model_to_checkpoint(model: &Seq2Seq) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.push(
        "meta.model",
        Record::Text(serde_json::to_string(&model.config).expect("config serializes")),
    );
    ck.push(
        "meta.fusion",
        Record::Text(serde_json::to_string(&model.fusion).expect("config serializes")),
    );
    for (_, p) in model.store.iter() {
        ck.push(format!("param.{}", p.name), Record::F64(p.value.clone()));
    }
    ck
}

/// Rebuilds a model from [`model_to_checkpoint`] output.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Seq2Seq> {
    let config: ModelConfig = serde_json::from_str(ck.text("meta.model")?)?;
    let fusion: FusionConfig = serde_json::from_str(ck.text("meta.fusion")?)?;
    let mut model = Seq2Seq::new(config, fusion, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = format!("param.{}", model.store.name(id));
        let t = ck.tensor(&name)?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::Format(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface_fusion::FusionMode;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a", Record::F64(Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        ck.push("step", Record::U64(vec![42]));
        ck.push("note", Record::Text("héllo".into()));
        ck.push("s", Record::F64(Tensor::scalar(2.0)));
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SFCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn model_round_trip_through_file() {
        let config = ModelConfig {
            encoder_layers: 2,
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
        let model = Seq2Seq::new(config, FusionConfig::new(FusionMode::SurfaceSoft), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        model_to_checkpoint(&model).save(&p1).unwrap();
        let loaded = model_from_checkpoint(&Checkpoint::load(&p1).unwrap()).unwrap();
        model_to_checkpoint(&loaded).save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let a = model.score_prefix(&[4, 5], &[1, 6]).unwrap();
        let b = loaded.score_prefix(&[4, 5], &[1, 6]).unwrap();
        assert_eq!(a, b);
    }
}
