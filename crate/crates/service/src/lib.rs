//! Chat sessions over a trained checkpoint: persona retrieval, generation
//! with optional forced response type, per-turn diagnostics and a JSONL
//! journal that survives restarts.

mod engine;
mod generator;
mod http;
mod journal;

pub use engine::{Diagnostics, Engine, EngineConfig, GroundingView, ServiceError, SessionLog, TurnLog};
pub use generator::{CheckpointGenerator, FaultyGenerator, GenerateError, GenerateRequest, Generator, Reply};
pub use http::router;
pub use journal::{Journal, JournalError, Record};
