//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes   "BCAP"
//! version    u32       currently 1
//! config     u32 len + UTF-8 text, one `key=value` line per model-config key
//! epoch      u64       completed training epochs
//! losses     u32 n + n × f64   per-epoch training loss history
//! vocab      u32 n + n × (u32 len + UTF-8 token)   n = 0 when absent
//! params     u32 n + n × record
//! record     u32 name len, name bytes, u32 rows, u32 cols, rows×cols f64 row-major
//! ```
//!
//! Parameter records are written in name order, so a save → load → save
//! cycle reproduces the file byte for byte. Trailing bytes are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, ParamSet};

use super::{Model, ModelConfig, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epoch: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub meta: TrainingMeta,
    /// Token list of the vocabulary the model was trained with.
    pub vocab: Option<Vec<String>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainingMeta, vocab: Option<Vec<String>>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.param_set(),
            meta,
            vocab,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_param_set(&self.config, &self.params)
    }

    /// Like [`Checkpoint::model`], but rejects a checkpoint of another variant.
    pub fn model_as(&self, variant: Variant) -> Result<Model> {
        if self.config.variant != variant {
            return Err(Error::Schema(format!(
                "checkpoint holds a {} model, expected {variant}",
                self.config.variant
            )));
        }
        self.model()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let config: String = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &config);
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        put_u32(&mut out, self.meta.loss_history.len() as u32);
        for v in &self.meta.loss_history {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let vocab = self.vocab.as_deref().unwrap_or(&[]);
        put_u32(&mut out, vocab.len() as u32);
        for tok in vocab {
            put_str(&mut out, tok);
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, m) in &self.params {
            put_str(&mut out, name);
            put_u32(&mut out, m.rows() as u32);
            put_u32(&mut out, m.cols() as u32);
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint"));
        }
        let at = r.pos as u64;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let at = r.pos as u64;
        let text = r.string()?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("malformed config line `{line}`")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let config = ModelConfig::from_pairs(&pairs)?;

        let epoch = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n_loss = r.u32()? as usize;
        let mut loss_history = Vec::with_capacity(n_loss.min(1 << 16));
        for _ in 0..n_loss {
            loss_history.push(r.f64()?);
        }
        let n_vocab = r.u32()? as usize;
        let vocab = if n_vocab == 0 {
            None
        } else {
            let mut toks = Vec::with_capacity(n_vocab.min(1 << 16));
            for _ in 0..n_vocab {
                toks.push(r.string()?);
            }
            Some(toks)
        };

        let n_params = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let at = r.pos as u64;
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::format(r.pos as u64, format!("parameter `{name}` ({rows}x{cols}) overruns the file"))
                })?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64()?);
            }
            let m = Matrix::from_vec(rows, cols, data).expect("length checked");
            if params.insert(name.clone(), m).is_some() {
                return Err(Error::format(at, format!("duplicate parameter `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos as u64, "trailing bytes after last record"));
        }
        let ckpt = Checkpoint {
            config,
            params,
            meta: TrainingMeta { epoch, loss_history },
            vocab,
        };
        // Schema check: names and shapes must match the config exactly.
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, TrainingMeta::default(), None).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::load(path)?.model()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            feature_dim: 3,
            hidden: 2,
            uni_first_hidden: 4,
            embed_dim: 2,
            merge_dim: 2,
            vocab_size: 5,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let model = Model::new(&cfg(Variant::JointReinforced)).unwrap();
        let ck = Checkpoint::from_model(
            &model,
            TrainingMeta {
                epoch: 3,
                loss_history: vec![2.5, 1.25, f64::MIN_POSITIVE],
            },
            Some(vec!["<PAD>".into(), "<BOS>".into(), "<EOS>".into(), "<UNK>".into(), "dog".into()]),
        );
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model().unwrap(), model);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let model = Model::new(&cfg(Variant::S2vtBi)).unwrap();
        let bytes = Checkpoint::from_model(&model, TrainingMeta::default(), None).to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. } | Error::Schema(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let model = Model::new(&cfg(Variant::JointUni)).unwrap();
        let mut bytes = Checkpoint::from_model(&model, TrainingMeta::default(), None).to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn variant_guard() {
        let model = Model::new(&cfg(Variant::JointBi)).unwrap();
        let ck = Checkpoint::from_model(&model, TrainingMeta::default(), None);
        let err = ck.model_as(Variant::S2vtUni).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(ck.model_as(Variant::JointBi).is_ok());
    }

    #[test]
    fn missing_parameter_is_named() {
        let model = Model::new(&cfg(Variant::JointBi)).unwrap();
        let mut ck = Checkpoint::from_model(&model, TrainingMeta::default(), None);
        ck.params.remove("merge_w");
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("merge_w"), "{err}");
    }
}
