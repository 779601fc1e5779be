//! Binary checkpoints: model parameters, batch-norm buffers, hyperparameters
//! and optimizer moments.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "PSTCKPT1" count record*count optimizer_count record*optimizer_count
//! record = name_len name dtype:u8 rank extent*rank values
//! ```
//!
//! Buffers are stored as `buffer.<name>`, hyperparameters as rank-0 f64
//! `meta.<key>` records.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffarray::{DType, Float, Tensor};
use crate::error::ParseError;
use crate::params::ParamStore;
use crate::trainer::AdamState;
use crate::{Error, Result};

use super::{ModelConfig, PsTransformer};

const MAGIC: &[u8; 8] = b"PSTCKPT1";
const BUFFER_PREFIX: &str = "buffer.";
const META_PREFIX: &str = "meta.";

/// A model snapshot with optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub model: PsTransformer<T>,
    pub optimizer: Option<AdamState<T>>,
}

/// One stored tensor in its on-disk element type.
#[derive(Clone, Debug, PartialEq)]
enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Record {
    fn cast<T: Float>(&self) -> Tensor<T> {
        match self {
            Record::F32(t) => t.cast(),
            Record::F64(t) => t.cast(),
        }
    }

    fn scalar(&self) -> Option<f64> {
        match self {
            Record::F32(t) if t.len() == 1 => Some(t.data()[0] as f64),
            Record::F64(t) if t.len() == 1 => Some(t.data()[0]),
            _ => None,
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u64(out, t.rank() as u64);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    T::to_le_bytes_vec(t.data(), out);
}

fn put_meta(out: &mut Vec<u8>, key: &str, v: f64) {
    put_record(out, &format!("{META_PREFIX}{key}"), &Tensor::scalar(v));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let end = self.pos.checked_add(n).ok_or(ParseError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ParseError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ParseError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, ParseError> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| ParseError::Malformed(format!("length {v}")))?;
        if v > self.bytes.len() {
            return Err(ParseError::Truncated);
        }
        Ok(v)
    }

    fn record(&mut self) -> Result<(String, Record), ParseError> {
        let n = self.len()?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| ParseError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| ParseError::Malformed(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| ParseError::Malformed(format!("{name}: extents overflow")))?;
        let bytes = self.take(
            count
                .checked_mul(dtype.size())
                .ok_or(ParseError::Truncated)?,
        )?;
        let bad = |_| ParseError::Malformed(format!("{name}: extents do not match values"));
        let rec = match dtype {
            DType::F32 => Record::F32(Tensor::new(shape, f32::from_le_bytes_slice(bytes)).map_err(bad)?),
            DType::F64 => Record::F64(Tensor::new(shape, f64::from_le_bytes_slice(bytes)).map_err(bad)?),
        };
        Ok((name, rec))
    }

    fn section(&mut self) -> Result<Vec<(String, Record)>, ParseError> {
        let n = self.len()?;
        (0..n).map(|_| self.record()).collect()
    }
}

pub fn encode_checkpoint<T: Float>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let model = &ckpt.model;
    let cfg = &model.config;
    let mut body = Vec::new();
    let meta = [
        ("channels", cfg.channels as f64),
        ("d", cfg.d as f64),
        ("heads", cfg.heads as f64),
        ("blocks", cfg.blocks as f64),
        ("feat", cfg.feat as f64),
        ("dropout", cfg.dropout),
    ];
    let count = model.params.len() + model.params.buffers().count() + meta.len();
    for (name, t) in model.params.params() {
        put_record(&mut body, name, t);
    }
    for (name, t) in model.params.buffers() {
        put_record(&mut body, &format!("{BUFFER_PREFIX}{name}"), t);
    }
    for (key, v) in meta {
        put_meta(&mut body, key, v);
    }

    let mut out = Vec::with_capacity(body.len() + 64);
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, count as u64);
    out.extend_from_slice(&body);

    match &ckpt.optimizer {
        None => put_u64(&mut out, 0),
        Some(state) => {
            put_u64(&mut out, (1 + state.m.len() + state.v.len()) as u64);
            put_record(&mut out, "adam.step", &Tensor::scalar(state.step as f64));
            for (name, t) in &state.m {
                put_record(&mut out, &format!("adam.m.{name}"), t);
            }
            for (name, t) in &state.v {
                put_record(&mut out, &format!("adam.v.{name}"), t);
            }
        }
    }
    out
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>, ParseError> {
    if bytes.len() < MAGIC.len() {
        return Err(ParseError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..7] == &MAGIC[..7] {
            return Err(ParseError::VersionMismatch(
                String::from_utf8_lossy(&bytes[..8]).into_owned(),
            ));
        }
        return Err(ParseError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let main = r.section()?;
    let optim = r.section()?;
    if r.pos != bytes.len() {
        return Err(ParseError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut meta = BTreeMap::new();
    let mut store = ParamStore::<T>::new();
    for (name, rec) in main {
        if let Some(key) = name.strip_prefix(META_PREFIX) {
            let v = rec
                .scalar()
                .ok_or_else(|| ParseError::Malformed(format!("{name} is not a scalar")))?;
            meta.insert(key.to_string(), v);
        } else if let Some(buf) = name.strip_prefix(BUFFER_PREFIX) {
            store.insert_buffer(buf, rec.cast());
        } else {
            store.insert(name, rec.cast());
        }
    }
    let get = |key: &str| {
        meta.get(key)
            .copied()
            .ok_or_else(|| ParseError::Malformed(format!("missing hyperparameter {key}")))
    };
    let count = |key: &str| -> Result<usize, ParseError> {
        let v = get(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(ParseError::Malformed(format!("hyperparameter {key} = {v}")));
        }
        Ok(v as usize)
    };
    let config = ModelConfig {
        channels: count("channels")?,
        d: count("d")?,
        heads: count("heads")?,
        blocks: count("blocks")?,
        feat: count("feat")?,
        dropout: get("dropout")?,
    };
    let model =
        PsTransformer::from_parts(config, store).map_err(|e| ParseError::Malformed(e.to_string()))?;

    let optimizer = if optim.is_empty() {
        None
    } else {
        let mut state = AdamState::default();
        let mut step = None;
        for (name, rec) in optim {
            if name == "adam.step" {
                step = rec.scalar();
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                state.m.insert(p.to_string(), rec.cast());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                state.v.insert(p.to_string(), rec.cast());
            } else {
                return Err(ParseError::Malformed(format!("unknown optimizer record {name}")));
            }
        }
        state.step = step.ok_or_else(|| ParseError::Malformed("missing adam.step".into()))? as u64;
        Some(state)
    };
    Ok(Checkpoint { model, optimizer })
}

pub fn write_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|k| Error::parse(path, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PsTransformer<f32> {
        PsTransformer::new(ModelConfig::tiny(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        m.params
            .set_running_stats(
                "branch2.phi.bn0",
                &crate::diffarray::RunningStats {
                    mean: vec![0.1, -0.2, 0.3, 1e-7],
                    var: vec![1.5, 2.5, 0.25, 3.0],
                },
            )
            .unwrap();
        let mut state = AdamState::default();
        state.step = 17;
        for (name, t) in m.params.params() {
            state.m.insert(name.clone(), t.clone());
            state.v.insert(name.clone(), Tensor::full(t.shape().to_vec(), 0.5));
        }
        let ck = Checkpoint {
            model: m,
            optimizer: Some(state),
        };
        let bytes = encode_checkpoint(&ck);
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn damaged_files() {
        let ck = Checkpoint {
            model: model(),
            optimizer: None,
        };
        let bytes = encode_checkpoint(&ck);
        assert_eq!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).unwrap_err(),
            ParseError::Truncated
        );
        let mut v = bytes.clone();
        v[7] = b'2';
        assert!(matches!(
            decode_checkpoint::<f32>(&v).unwrap_err(),
            ParseError::VersionMismatch(_)
        ));
        v[0] = b'X';
        assert_eq!(decode_checkpoint::<f32>(&v).unwrap_err(), ParseError::BadMagic);
    }

    #[test]
    fn precision_widening_is_lossless() {
        let ck = Checkpoint {
            model: model(),
            optimizer: None,
        };
        let wide: Checkpoint<f64> = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        let narrow: PsTransformer<f32> = wide.model.cast();
        assert_eq!(narrow, ck.model);
    }
}
