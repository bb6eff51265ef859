//! Self-describing binary checkpoint.
//!
//! ```text
//! "WWHCKPT1" | u64 LE header length | JSON header | parameters, little-endian
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DecodeConfig, Generation, ModelConfig, ModelError, TrainConfig, Transformer};
use crate::corpus::{Demographics, DialogueContext, Rtl};
use crate::eval::IdfTable;
use crate::scalar::Scalar;
use crate::serialize::{encode_prompt, LayoutConfig, SerializeError, TrainingInstance};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"WWHCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub scalar: String,
    pub model: ModelConfig,
    pub layout: LayoutConfig,
    pub vocab: Vec<String>,
    pub vocab_sha256: String,
    pub idf: IdfTable,
    pub step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub n_params: usize,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint stores {found} parameters, this build reads {expected}")]
    ScalarMismatch { expected: &'static str, found: String },
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, data {data}")]
    VocabMismatch { checkpoint: String, data: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
}

/// A trained model with everything needed to serve it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: Transformer<T>,
    pub vocab: Vocab,
    pub layout: LayoutConfig,
    pub idf: IdfTable,
    pub step: u64,
    pub train: Option<TrainConfig>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            scalar: T::NAME.into(),
            model: self.model.config,
            layout: self.layout,
            vocab: self.vocab.tokens().to_vec(),
            vocab_sha256: self.vocab.sha256(),
            idf: self.idf.clone(),
            step: self.step,
            train: self.train,
            n_params: self.model.n_params(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.model.params.len() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in &self.model.params {
            p.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
        if header.scalar != T::NAME {
            return Err(CheckpointError::ScalarMismatch {
                expected: T::NAME,
                found: header.scalar,
            });
        }
        let vocab = Vocab::from_list(header.vocab.clone()).map_err(|e| fmt(&e.to_string()))?;
        if vocab.sha256() != header.vocab_sha256 {
            return Err(CheckpointError::VocabMismatch {
                checkpoint: header.vocab_sha256,
                data: vocab.sha256(),
            });
        }
        if vocab.len() != header.model.vocab_size {
            return Err(fmt("vocabulary size disagrees with the model config"));
        }
        let data = &bytes[16 + hlen..];
        if data.len() != header.n_params * T::BYTES {
            return Err(fmt("parameter block has the wrong length"));
        }
        let params = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self {
            model: Transformer::from_params(header.model, params)?,
            vocab,
            layout: header.layout,
            idf: header.idf,
            step: header.step,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless data built with vocabulary hash `sha` can be fed to this model.
    pub fn check_vocab(&self, sha: &str) -> Result<(), CheckpointError> {
        let own = self.vocab.sha256();
        if own == sha {
            Ok(())
        } else {
            Err(CheckpointError::VocabMismatch {
                checkpoint: own,
                data: sha.to_string(),
            })
        }
    }

    /// Teacher-forced log-probabilities of the masked tokens.
    pub fn score(&self, inst: &TrainingInstance) -> Result<Vec<T>, CheckpointError> {
        Ok(self.model.score(&inst.input_ids, &inst.loss_mask)?)
    }

    /// Generates a reply; the response text is in canonical form.
    pub fn generate(
        &self,
        demographics: &Demographics,
        persona: &[String],
        context: &DialogueContext,
        force: Option<Rtl>,
        cfg: &DecodeConfig,
    ) -> Result<(Generation, String), CheckpointError> {
        let reserve = (cfg.max_new_tokens + 2).min(self.layout.max_seq_len / 2);
        let max = self.layout.max_seq_len.min(self.model.config.max_seq_len);
        let prompt = encode_prompt(demographics, persona, context, &self.vocab, max, reserve)?;
        let g = self.model.generate_ids(&prompt, self.layout.rtl_slot, force, cfg)?;
        let text = self.vocab.decode(&g.token_ids);
        Ok((g, text))
    }
}
