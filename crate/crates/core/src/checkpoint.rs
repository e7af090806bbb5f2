//! Binary checkpoints: parameters, optimizer moments, hyperparameters and
//! the vocabulary hash they were trained against.
//!
//! Layout: `b"SPGLCKPT"`, format version (u32 LE), SHA-256 of the body,
//! then the body: header length (u64 LE), JSON header, and every tensor's
//! values followed by every Adam first and second moment, all as f64 LE in
//! canonical parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPGLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: Hyperparams,
    pub vocab_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub params: ModelParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: Hyperparams,
    vocab_hash: String,
    n_items: usize,
    epoch: usize,
    best_metric: Option<f64>,
    adam_config: AdamConfig,
    adam_step: u64,
    shapes: Vec<(String, usize, usize)>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let header = Header {
            hyper: self.hyper.clone(),
            vocab_hash: self.vocab_hash.clone(),
            n_items: self.params.n_items(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            adam_config: self.adam.config.clone(),
            adam_step: self.adam.step,
            shapes: named
                .iter()
                .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut body = Vec::new();
        body.extend_from_slice(&(header.len() as u64).to_le_bytes());
        body.extend_from_slice(&header);
        let arrays = named
            .iter()
            .map(|(_, t)| t.data())
            .chain(self.adam.m.iter().map(Vec::as_slice))
            .chain(self.adam.v.iter().map(Vec::as_slice));
        for a in arrays {
            for v in a {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(body.len() + 44);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 44 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(
                path,
                format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let body = &bytes[44..];
        if Sha256::digest(body).as_slice() != &bytes[12..44] {
            return Err(bad(path, "checksum mismatch (corrupted checkpoint)"));
        }
        let header_len = u64::from_le_bytes(
            body.get(..8)
                .ok_or_else(|| bad(path, "truncated"))?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let header_bytes = body
            .get(8..8 + header_len)
            .ok_or_else(|| bad(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| bad(path, e.to_string()))?;

        let mut floats = body[8 + header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(len).collect();
            if v.len() != len {
                return Err(bad(path, "truncated tensor data"));
            }
            Ok(v)
        };

        let mut params = ModelParams::zeros(header.n_items, &header.hyper);
        let expected: Vec<(String, usize, usize)> = params
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
            .collect();
        if expected != header.shapes {
            return Err(bad(path, "parameter shapes disagree with hyperparameters"));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for (_, r, c) in &expected {
            tensors.push(Tensor::from_vec(*r, *c, take(r * c)?)?);
        }
        params.assign_tensors(tensors)?;
        let sizes: Vec<usize> = expected.iter().map(|(_, r, c)| r * c).collect();
        let m = sizes.iter().map(|&s| take(s)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&s| take(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hyper: header.hyper,
            vocab_hash: header.vocab_hash,
            epoch: header.epoch,
            best_metric: header.best_metric,
            params,
            adam: AdamState {
                config: header.adam_config,
                step: header.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and refuses a checkpoint trained against another vocabulary.
    pub fn load_for_vocab(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: ck.vocab_hash,
                found: vocab_hash.to_string(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let hyper = Hyperparams {
            dim: 4,
            layers: 2,
            max_session_len: 5,
            ..Hyperparams::default()
        };
        let params = init_params(7, &hyper, 11);
        let mut adam = AdamState::new(params.named().into_iter().map(|(_, t)| t), AdamConfig::default());
        adam.step = 3;
        adam.m[0][1] = -0.25;
        adam.v[2][0] = 1e-300;
        Checkpoint {
            hyper,
            vocab_hash: "abc".into(),
            epoch: 2,
            best_metric: Some(0.5),
            params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn vocab_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_for_vocab(&path, "abc").is_ok());
        assert!(matches!(
            Checkpoint::load_for_vocab(&path, "zzz"),
            Err(Error::VocabMismatch { .. })
        ));
    }
}
