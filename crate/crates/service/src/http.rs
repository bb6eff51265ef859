//! `/v1` JSON routes.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use wwh_core::corpus::{Demographics, Rtl};
use wwh_core::retrieval::RetrievalError;

use crate::engine::{Engine, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSession(_)
            | ServiceError::Retrieval(RetrievalError::UnknownUser(_))
            | ServiceError::Retrieval(RetrievalError::UnknownAttribute { .. }) => StatusCode::NOT_FOUND,
            ServiceError::Retrieval(RetrievalError::DuplicateAttribute { .. }) => StatusCode::CONFLICT,
            ServiceError::Retrieval(RetrievalError::EmptyAttribute) | ServiceError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::Generate(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Journal(_) | ServiceError::Replay(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type AppState = Arc<Engine>;

#[derive(Deserialize)]
struct NewSession {
    user_id: String,
    demographics: Option<Demographics>,
}

#[derive(Deserialize)]
struct NewMessage {
    text: String,
    force_rtl: Option<Rtl>,
}

#[derive(Deserialize)]
struct NewPersona {
    id: Option<String>,
    text: String,
}

#[derive(Deserialize)]
struct DeletePersona {
    id: String,
}

async fn healthz(State(engine): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model": engine.generator().describe() }))
}

async fn create_session(
    State(engine): State<AppState>,
    Json(body): Json<NewSession>,
) -> Result<(StatusCode, Json<serde_json::Value>), ServiceError> {
    let demographics = body.demographics.unwrap_or(Demographics {
        gender: "unknown".into(),
        age_band: "unknown".into(),
    });
    let id = engine.create_session(&body.user_id, demographics)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn post_message(
    State(engine): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<NewMessage>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    let t = engine.post_message(&id, &body.text, body.force_rtl).await?;
    Ok(Json(json!({
        "index": t.index,
        "response": t.response,
        "rtl": t.rtl,
        "retrieved": t.retrieved,
        "diagnostics": t.diagnostics,
    })))
}

async fn session_log(
    State(engine): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<crate::engine::SessionLog>, ServiceError> {
    Ok(Json(engine.log(&id).await?))
}

async fn list_personas(
    State(engine): State<AppState>,
    Path(user): Path<String>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    let p = engine.list_personas(&user)?;
    Ok(Json(json!({ "user_id": user, "personas": p })))
}

async fn add_persona(
    State(engine): State<AppState>,
    Path(user): Path<String>,
    Json(body): Json<NewPersona>,
) -> Result<(StatusCode, Json<serde_json::Value>), ServiceError> {
    let a = engine.add_persona(&user, body.id.as_deref(), &body.text)?;
    Ok((StatusCode::CREATED, Json(json!(a))))
}

async fn delete_persona_body(
    State(engine): State<AppState>,
    Path(user): Path<String>,
    Json(body): Json<DeletePersona>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    Ok(Json(json!(engine.delete_persona(&user, &body.id)?)))
}

async fn delete_persona_path(
    State(engine): State<AppState>,
    Path((user, id)): Path<(String, String)>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    Ok(Json(json!(engine.delete_persona(&user, &id)?)))
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/:id/messages", post(post_message))
        .route("/v1/sessions/:id/log", get(session_log))
        .route(
            "/v1/users/:id/personas",
            get(list_personas).post(add_persona).delete(delete_persona_body),
        )
        .route("/v1/users/:id/personas/:pid", delete(delete_persona_path))
        .with_state(engine)
}
