use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex as AsyncMutex;
use wwh_core::corpus::{Demographics, DialogueContext, PersonaAttribute, Rtl, Speaker};
use wwh_core::eval::{judge_grounding, p_cover, persona_f1, GroundingLevel};
use wwh_core::retrieval::{PersonaStore, Retrieved, RetrievalError, DEFAULT_TOP_K};

use crate::generator::{GenerateError, GenerateRequest, Generator};
use crate::journal::{Journal, JournalError, Record};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("{0}")]
    BadRequest(String),
    #[error("journal replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingView {
    pub level: GroundingLevel,
    pub similarity: f64,
    pub matched_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub f1: f64,
    pub p_cover: f64,
    pub grounding: GroundingView,
}

/// One exchange: the user text, what was retrieved, and the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub index: usize,
    pub user_text: String,
    pub force_rtl: Option<Rtl>,
    pub retrieved: Vec<Retrieved>,
    pub rtl: Option<Rtl>,
    pub response: String,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: String,
    pub user_id: String,
    pub demographics: Demographics,
    pub context: DialogueContext,
    pub turns: Vec<TurnLog>,
}

impl SessionLog {
    fn push(&mut self, turn: TurnLog) {
        self.context.turns.push((Speaker::User, turn.user_text.clone()));
        self.context.turns.push((Speaker::Agent, turn.response.clone()));
        self.turns.push(turn);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub top_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K }
    }
}

/// Session and persona state shared by all requests.
///
/// Turns within a session are serialized by the session's lock; persona
/// mutations take the store's write lock. Every change is journaled before
/// it becomes visible.
pub struct Engine {
    generator: Arc<dyn Generator>,
    config: EngineConfig,
    personas: RwLock<PersonaStore>,
    sessions: RwLock<HashMap<String, Arc<AsyncMutex<SessionLog>>>>,
    journal: Mutex<Option<Journal>>,
}

impl Engine {
    /// State kept in memory only.
    pub fn in_memory(generator: Arc<dyn Generator>, config: EngineConfig) -> Self {
        Self {
            generator,
            config,
            personas: RwLock::new(PersonaStore::new()),
            sessions: RwLock::new(HashMap::new()),
            journal: Mutex::new(None),
        }
    }

    /// Restores state from the journal at `path`, creating it if absent.
    pub fn open(generator: Arc<dyn Generator>, config: EngineConfig, path: &Path) -> Result<Self, ServiceError> {
        let (journal, records) = Journal::open(path)?;
        let engine = Self::in_memory(generator, config);
        {
            let mut personas = engine.personas.write().expect("persona lock");
            let mut sessions = engine.sessions.write().expect("session lock");
            let mut logs: HashMap<String, SessionLog> = HashMap::new();
            let mut order = Vec::new();
            for r in records {
                match r {
                    Record::Session {
                        session_id,
                        user_id,
                        demographics,
                    } => {
                        personas.ensure_user(&user_id);
                        order.push(session_id.clone());
                        logs.insert(
                            session_id.clone(),
                            SessionLog {
                                session_id,
                                user_id,
                                demographics,
                                context: DialogueContext::default(),
                                turns: Vec::new(),
                            },
                        );
                    }
                    Record::Turn { session_id, turn } => logs
                        .get_mut(&session_id)
                        .ok_or_else(|| ServiceError::Replay(format!("turn for unknown session {session_id}")))?
                        .push(turn),
                    Record::PersonaAdd { user_id, attribute } => {
                        personas.add(&user_id, Some(&attribute.id), &attribute.text)?;
                    }
                    Record::PersonaDelete { user_id, id } => {
                        personas.delete(&user_id, &id)?;
                    }
                }
            }
            for id in order {
                let log = logs.remove(&id).expect("session recorded");
                sessions.insert(id, Arc::new(AsyncMutex::new(log)));
            }
        }
        *engine.journal.lock().expect("journal lock") = Some(journal);
        Ok(engine)
    }

    pub fn generator(&self) -> &dyn Generator {
        self.generator.as_ref()
    }

    fn record(&self, r: &Record) -> Result<(), ServiceError> {
        match self.journal.lock().expect("journal lock").as_mut() {
            Some(j) => Ok(j.append(r)?),
            None => Ok(()),
        }
    }

    pub fn create_session(&self, user_id: &str, demographics: Demographics) -> Result<String, ServiceError> {
        if user_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("user_id must not be empty".into()));
        }
        let mut sessions = self.sessions.write().expect("session lock");
        let session_id = format!("s{:06}", sessions.len() + 1);
        self.record(&Record::Session {
            session_id: session_id.clone(),
            user_id: user_id.to_string(),
            demographics: demographics.clone(),
        })?;
        self.personas.write().expect("persona lock").ensure_user(user_id);
        sessions.insert(
            session_id.clone(),
            Arc::new(AsyncMutex::new(SessionLog {
                session_id: session_id.clone(),
                user_id: user_id.to_string(),
                demographics,
                context: DialogueContext::default(),
                turns: Vec::new(),
            })),
        );
        Ok(session_id)
    }

    fn session(&self, id: &str) -> Result<Arc<AsyncMutex<SessionLog>>, ServiceError> {
        self.sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub async fn log(&self, id: &str) -> Result<SessionLog, ServiceError> {
        Ok(self.session(id)?.lock().await.clone())
    }

    /// Retrieves, generates and records one exchange. On any failure the
    /// session is left exactly as it was.
    pub async fn post_message(&self, id: &str, text: &str, force: Option<Rtl>) -> Result<TurnLog, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::BadRequest("message text must not be empty".into()));
        }
        let session = self.session(id)?;
        let mut log = session.lock().await;
        let mut context = log.context.clone();
        context.turns.push((Speaker::User, text.to_string()));
        let retrieved = self
            .personas
            .read()
            .expect("persona lock")
            .retrieve(&log.user_id, &context, self.config.top_k)?;
        let req = GenerateRequest {
            demographics: log.demographics.clone(),
            persona: retrieved.iter().map(|r| r.text.clone()).collect(),
            context,
            force,
            turn_index: log.turns.len(),
        };
        let generator = Arc::clone(&self.generator);
        let reply = tokio::task::spawn_blocking(move || generator.generate(&req))
            .await
            .map_err(|e| GenerateError(format!("generator task: {e}")))??;
        let diagnostics = self.diagnose(&reply.text, &retrieved, reply.rtl);
        let turn = TurnLog {
            index: log.turns.len(),
            user_text: text.to_string(),
            force_rtl: force,
            retrieved,
            rtl: reply.rtl,
            response: reply.text,
            diagnostics,
        };
        self.record(&Record::Turn {
            session_id: id.to_string(),
            turn: turn.clone(),
        })?;
        log.push(turn.clone());
        Ok(turn)
    }

    fn diagnose(&self, response: &str, retrieved: &[Retrieved], rtl: Option<Rtl>) -> Diagnostics {
        let texts: Vec<&str> = retrieved.iter().map(|r| r.text.as_str()).collect();
        let attrs: Vec<PersonaAttribute> = retrieved.iter().map(|r| PersonaAttribute::new(&r.id, &r.text)).collect();
        let j = judge_grounding(response, &attrs, rtl);
        Diagnostics {
            f1: persona_f1(response, &texts),
            p_cover: p_cover(response, &texts, self.generator.idf()),
            grounding: GroundingView {
                level: j.level,
                similarity: j.similarity,
                matched_id: j.matched_persona_id,
            },
        }
    }

    pub fn list_personas(&self, user_id: &str) -> Result<Vec<PersonaAttribute>, ServiceError> {
        Ok(self.personas.read().expect("persona lock").list(user_id)?.to_vec())
    }

    pub fn add_persona(&self, user_id: &str, id: Option<&str>, text: &str) -> Result<PersonaAttribute, ServiceError> {
        let mut store = self.personas.write().expect("persona lock");
        let mut next = store.clone();
        let attribute = next.add(user_id, id, text)?;
        self.record(&Record::PersonaAdd {
            user_id: user_id.to_string(),
            attribute: attribute.clone(),
        })?;
        *store = next;
        Ok(attribute)
    }

    pub fn delete_persona(&self, user_id: &str, id: &str) -> Result<PersonaAttribute, ServiceError> {
        let mut store = self.personas.write().expect("persona lock");
        let mut next = store.clone();
        let removed = next.delete(user_id, id)?;
        self.record(&Record::PersonaDelete {
            user_id: user_id.to_string(),
            id: id.to_string(),
        })?;
        *store = next;
        Ok(removed)
    }

    /// Seeds pools for users the journal does not know yet.
    pub fn preload(&self, pools: impl IntoIterator<Item = (String, Vec<PersonaAttribute>)>) -> Result<usize, ServiceError> {
        let mut added = 0;
        for (user, pool) in pools {
            if self.personas.read().expect("persona lock").index(&user).is_ok() {
                continue;
            }
            for a in pool {
                self.add_persona(&user, Some(&a.id), &a.text)?;
                added += 1;
            }
        }
        Ok(added)
    }
}
