use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wwh_core::corpus::{Demographics, DialogueContext, Rtl};
use wwh_core::eval::IdfTable;
use wwh_core::model::{Checkpoint, DecodeConfig};
use wwh_core::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub demographics: Demographics,
    pub persona: Vec<String>,
    /// Ends with the user turn being answered.
    pub context: DialogueContext,
    pub force: Option<Rtl>,
    /// Zero-based agent turn number within the session; seeds sampling.
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub rtl: Option<Rtl>,
    pub text: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("generation failed: {0}")]
pub struct GenerateError(pub String);

pub trait Generator: Send + Sync + 'static {
    fn generate(&self, req: &GenerateRequest) -> Result<Reply, GenerateError>;
    /// IDF table used for P-Cover diagnostics.
    fn idf(&self) -> &IdfTable;
    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

pub struct CheckpointGenerator<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub decode: DecodeConfig,
}

impl<T: Scalar> Generator for CheckpointGenerator<T> {
    fn generate(&self, req: &GenerateRequest) -> Result<Reply, GenerateError> {
        let cfg = DecodeConfig {
            seed: self.decode.seed.wrapping_add(req.turn_index as u64),
            ..self.decode
        };
        let (g, text) = self
            .checkpoint
            .generate(&req.demographics, &req.persona, &req.context, req.force, &cfg)
            .map_err(|e| GenerateError(e.to_string()))?;
        Ok(Reply { rtl: g.rtl, text })
    }

    fn idf(&self) -> &IdfTable {
        &self.checkpoint.idf
    }

    fn describe(&self) -> serde_json::Value {
        let ck = &self.checkpoint;
        serde_json::json!({
            "scalar": T::NAME,
            "n_params": ck.model.n_params(),
            "step": ck.step,
            "vocab_size": ck.vocab.len(),
            "rtl_slot": ck.layout.rtl_slot,
            "decode": self.decode,
        })
    }
}

/// Wraps a generator and fails the calls whose zero-based numbers are in
/// the failure set.
pub struct FaultyGenerator<G> {
    pub inner: G,
    fail_on: Mutex<BTreeSet<usize>>,
    calls: AtomicUsize,
}

impl<G: Generator> FaultyGenerator<G> {
    pub fn new(inner: G, fail_on: impl IntoIterator<Item = usize>) -> Self {
        Self {
            inner,
            fail_on: Mutex::new(fail_on.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn fail_next(&self) {
        let n = self.calls();
        self.fail_on.lock().expect("fault set lock").insert(n);
    }
}

impl<G: Generator> Generator for FaultyGenerator<G> {
    fn generate(&self, req: &GenerateRequest) -> Result<Reply, GenerateError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.lock().expect("fault set lock").contains(&n) {
            return Err(GenerateError(format!("injected fault on call {n}")));
        }
        self.inner.generate(req)
    }

    fn idf(&self) -> &IdfTable {
        self.inner.idf()
    }

    fn describe(&self) -> serde_json::Value {
        self.inner.describe()
    }
}
