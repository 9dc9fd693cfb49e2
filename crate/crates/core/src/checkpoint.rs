//! Model checkpoints: `TSCKPT1\n`, u64 LE header length, JSON header
//! (config, alphabet, tensor table, corpus fingerprint), f32 LE tensors in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{Alphabet, Model, ModelConfig, ModelParams};

const CHECKPOINT_MAGIC: &[u8] = b"TSCKPT1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    alphabet: Alphabet,
    tensors: Vec<TensorEntry>,
    corpus_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub corpus_fingerprint: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::with_capacity(self.model.params.n_scalars());
        for (name, t) in self.model.params.tensors() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset: 4 * payload.len(),
            });
            payload.extend(t.data.iter().map(|&v| v as f32));
        }
        let header = Header {
            config: self.model.config.clone(),
            alphabet: self.model.alphabet.clone(),
            tensors,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
        };
        container::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (Header, Vec<f32>) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        header.config.validate()?;
        let mut params = ModelParams::zeros(&header.config, header.alphabet.size());
        let slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, tensor), entry) in slots.into_iter().zip(&header.tensors) {
            if entry.name != name || entry.shape != tensor.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    entry.name, entry.shape, name, tensor.shape
                )));
            }
            let start = entry.offset / 4;
            let values = payload
                .get(start..start + tensor.len())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
            for (dst, &v) in tensor.data.iter_mut().zip(values) {
                *dst = f64::from(v);
            }
        }
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                alphabet: header.alphabet,
                params,
            },
            corpus_fingerprint: header.corpus_fingerprint,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&container::read_file(path.as_ref())?)
    }
}

pub fn config_fingerprint(config: &ModelConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

/// Digest of the model as it would be checkpointed, independent of the
/// corpus it was trained on.
pub fn model_fingerprint(model: &Model) -> Result<String> {
    let bytes = Checkpoint {
        model: model.clone(),
        corpus_fingerprint: String::new(),
    }
    .to_bytes()?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuestionEncoderKind;

    fn model(use_char: bool, kind: QuestionEncoderKind) -> Model {
        let config = ModelConfig {
            word_dim: 5,
            char_dim: 3,
            use_char,
            question_encoder: kind,
            column_intermediate_dim: 7,
            mlp_hidden_dims: vec![6, 4],
            question_mlp_dims: vec![5, 4],
            word_lstm_dim: 4,
            margin: 0.5,
        };
        Model::init(config, Alphabet::from_chars("abcxyz".chars()), 17).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for use_char in [false, true] {
            for kind in [QuestionEncoderKind::Bow, QuestionEncoderKind::Lstm] {
                let ck = Checkpoint {
                    model: model(use_char, kind),
                    corpus_fingerprint: "abc".into(),
                };
                let bytes = ck.to_bytes().unwrap();
                assert!(bytes.starts_with(b"TSCKPT1\n"));
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ck = Checkpoint {
            model: model(false, QuestionEncoderKind::Bow),
            corpus_fingerprint: String::new(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
    }

    #[test]
    fn fingerprint_tracks_params() {
        let a = model(false, QuestionEncoderKind::Bow);
        let mut b = a.clone();
        assert_eq!(model_fingerprint(&a).unwrap(), model_fingerprint(&b).unwrap());
        b.params.word_unk.data[0] = 1.0;
        assert_ne!(model_fingerprint(&a).unwrap(), model_fingerprint(&b).unwrap());
    }
}
