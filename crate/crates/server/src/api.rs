//! Routes and the error-to-status mapping.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use exbank_core::ab::AbError;
use exbank_core::bank::BankError;
use exbank_core::curation::CurationError;
use serde::Deserialize;
use serde_json::json;

use crate::config::Role;
use crate::store::{
    AdjudicateRequest, AppState, ItemView, Principal, QueueEntry, RatingAck, RatingSession, RatingSubmission,
    RebuildOutcome, RebuildRequest, ReviewRequest,
};
use crate::ServerError;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/queue", get(queue))
        .route("/items/{id}", get(item))
        .route("/items/{id}/review", post(review))
        .route("/items/{id}/adjudicate", post(adjudicate))
        .route("/bank/rebuild", post(rebuild))
        .route("/rating/session", get(rating_session))
        .route("/rating/{item}", post(rate))
        .with_state(state)
}

impl ServerError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        use StatusCode as S;
        match self {
            ServerError::Unauthorized => (S::UNAUTHORIZED, "unauthorized"),
            ServerError::BadRequest(_) => (S::BAD_REQUEST, "bad_request"),
            ServerError::Forbidden(_) => (S::FORBIDDEN, "forbidden"),
            ServerError::NotFound(_) => (S::NOT_FOUND, "not_found"),
            ServerError::Busy(_) => (S::CONFLICT, "busy"),
            ServerError::Unavailable(_) => (S::SERVICE_UNAVAILABLE, "unavailable"),
            ServerError::Curation(e) => match e {
                CurationError::VersionConflict { .. } => (S::CONFLICT, "version_conflict"),
                CurationError::IllegalTransition { .. } => (S::CONFLICT, "illegal_transition"),
                CurationError::SelfAdjudication(_) => (S::FORBIDDEN, "self_adjudication"),
                CurationError::InvalidCorrection(_) => (S::UNPROCESSABLE_ENTITY, "invalid_correction"),
                CurationError::UnknownItem(_) => (S::NOT_FOUND, "unknown_item"),
                CurationError::DuplicateItem(_) => (S::CONFLICT, "duplicate_item"),
                CurationError::CorruptLog { .. } => (S::INTERNAL_SERVER_ERROR, "corrupt_log"),
            },
            ServerError::Bank(e) => match e {
                BankError::ContaminationAttempt(_) => (S::CONFLICT, "contamination_attempt"),
                BankError::DuplicateArticle(_) => (S::CONFLICT, "duplicate_article"),
                _ => (S::INTERNAL_SERVER_ERROR, "bank_error"),
            },
            ServerError::Ab(e) => match e {
                AbError::ItemNotInAssignment(_) => (S::NOT_FOUND, "item_not_in_assignment"),
                AbError::IncompleteItem(_) => (S::UNPROCESSABLE_ENTITY, "incomplete_scores"),
                AbError::ScoreOutOfRange { .. } => (S::UNPROCESSABLE_ENTITY, "score_out_of_range"),
                _ => (S::UNPROCESSABLE_ENTITY, "invalid_rating"),
            },
            ServerError::Config(_) | ServerError::Corrupt(_) | ServerError::Io(_) => {
                (S::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({"error": code, "message": self.to_string()}))).into_response()
    }
}

fn bad_body(rejection: JsonRejection) -> Response {
    (rejection.status(), Json(json!({"error": "bad_request", "message": rejection.body_text()}))).into_response()
}

impl FromRequestParts<Arc<AppState>> for Principal {
    type Rejection = ServerError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ServerError::Unauthorized)?;
        state.authenticate(token.trim()).ok_or(ServerError::Unauthorized)
    }
}

fn require_expert(p: &Principal) -> Result<(), ServerError> {
    if p.is_expert() {
        Ok(())
    } else {
        Err(ServerError::Forbidden("expert session required".into()))
    }
}

fn require_evaluator(p: &Principal) -> Result<(), ServerError> {
    if p.role == Role::Evaluator {
        Ok(())
    } else {
        Err(ServerError::Forbidden("evaluator session required".into()))
    }
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    lang: Option<String>,
}

async fn queue(
    State(state): State<Arc<AppState>>,
    who: Principal,
    Query(params): Query<QueueParams>,
) -> Result<Json<Vec<QueueEntry>>, ServerError> {
    require_expert(&who)?;
    let lang = params.lang.filter(|l| !l.is_empty());
    Ok(Json(state.queue(lang.as_deref())))
}

async fn item(
    State(state): State<Arc<AppState>>,
    who: Principal,
    Path(id): Path<String>,
) -> Result<Json<ItemView>, ServerError> {
    require_expert(&who)?;
    Ok(Json(state.item(&id, &who)?))
}

async fn review(
    State(state): State<Arc<AppState>>,
    who: Principal,
    Path(id): Path<String>,
    body: Result<Json<ReviewRequest>, JsonRejection>,
) -> Result<Response, ServerError> {
    require_expert(&who)?;
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return Ok(bad_body(r)),
    };
    Ok(Json(state.review(&id, &who, req)?).into_response())
}

async fn adjudicate(
    State(state): State<Arc<AppState>>,
    who: Principal,
    Path(id): Path<String>,
    body: Result<Json<AdjudicateRequest>, JsonRejection>,
) -> Result<Response, ServerError> {
    require_expert(&who)?;
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return Ok(bad_body(r)),
    };
    Ok(Json(state.adjudicate(&id, &who, req)?).into_response())
}

async fn rebuild(
    State(state): State<Arc<AppState>>,
    who: Principal,
    body: Bytes,
) -> Result<Json<RebuildOutcome>, ServerError> {
    if who.role != Role::Admin {
        return Err(ServerError::Forbidden("admin session required".into()));
    }
    let req: RebuildRequest = if body.iter().all(u8::is_ascii_whitespace) {
        RebuildRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ServerError::BadRequest(e.to_string()))?
    };
    let outcome = tokio::task::spawn_blocking(move || state.rebuild_bank(&req))
        .await
        .map_err(|e| ServerError::Io(format!("rebuild task failed: {e}")))??;
    Ok(Json(outcome))
}

async fn rating_session(
    State(state): State<Arc<AppState>>,
    who: Principal,
) -> Result<Json<RatingSession>, ServerError> {
    require_evaluator(&who)?;
    Ok(Json(state.rating_session(&who.id)?))
}

async fn rate(
    State(state): State<Arc<AppState>>,
    who: Principal,
    Path(item): Path<String>,
    body: Result<Json<RatingSubmission>, JsonRejection>,
) -> Result<Response, ServerError> {
    require_evaluator(&who)?;
    let Json(sub) = match body {
        Ok(b) => b,
        Err(r) => return Ok(bad_body(r)),
    };
    let ack: RatingAck = state.record_rating(&who.id, &item, sub)?;
    Ok(Json(ack).into_response())
}
