//! JSON-over-HTTP front of [`EvalService`], consumed by the rater UI.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalError, EvalService, PROTOCOL};
use crate::model::Answer;
use crate::prompt_bank::{BankError, Decision};
use crate::store::StoreError;

pub fn router(service: Arc<EvalService>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}/rating", post(submit))
        .route("/assets/{id}/image", get(image))
        .route("/protocol", get(protocol))
        .route("/verdicts/{asset_id}", get(verdict))
        .route("/report", get(report))
        .route("/bank/{category}/pending", get(pending))
        .route("/bank/entries/{id}/decision", post(decide))
        .with_state(service)
}

pub async fn serve(listener: tokio::net::TcpListener, service: Arc<EvalService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

/// Every failure, including an unparseable body, answers with the same JSON envelope.
pub enum ApiError {
    Eval(EvalError),
    Body(JsonRejection),
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        Self::Eval(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::Body(e)
    }
}

impl ApiError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        use EvalError::*;
        let e = match self {
            Self::Eval(e) => e,
            Self::Body(r) => return (r.status(), "bad_body"),
        };
        match e {
            EmptyRater | EmptyReviewer | NoRaters | AnswerCount(_) | InvalidPanel => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            UnknownAssets(_) | TaskNotFound(_) | NoBank | Store(StoreError::NotFound { .. }) | Bank(BankError::NotFound(_)) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            AlreadySubmitted(_) | AlreadyBatched(_) | IncompletePanel { .. } => (StatusCode::CONFLICT, "conflict"),
            Store(StoreError::BadPathComponent(_)) | Bank(BankError::EmptyCategory) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        let message = match &self {
            Self::Eval(e) => e.to_string(),
            Self::Body(r) => r.body_text(),
        };
        (status, Json(json!({ "error": { "code": code, "message": message } }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs file-touching service calls off the async workers.
async fn blocking<T, F>(service: Arc<EvalService>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&EvalService) -> Result<T, EvalError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service)).await.expect("eval handler panicked").map_err(ApiError::Eval)
}

#[derive(Deserialize)]
struct RaterQuery {
    #[serde(default)]
    rater: String,
}

async fn next_task(State(svc): State<Arc<EvalService>>, Query(q): Query<RaterQuery>) -> ApiResult<Response> {
    Ok(match blocking(svc, move |s| s.fetch_next_task(&q.rater)).await? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitBody {
    pub rater_id: String,
    pub answers: Vec<Answer>,
}

async fn submit(State(svc): State<Arc<EvalService>>, Path(id): Path<String>, body: Result<Json<SubmitBody>, JsonRejection>) -> ApiResult<Response> {
    let Json(body) = body?;
    let record = blocking(svc, move |s| s.submit_rating(&id, &body.rater_id, &body.answers)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn image(State(svc): State<Arc<EvalService>>, Path(id): Path<String>) -> ApiResult<Response> {
    let png = blocking(svc, move |s| Ok(s.store().raster_png(&id)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn protocol() -> Response {
    Json(PROTOCOL).into_response()
}

async fn verdict(State(svc): State<Arc<EvalService>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(svc, move |s| s.verdict(&id)).await?).into_response())
}

async fn report(State(svc): State<Arc<EvalService>>) -> ApiResult<Response> {
    Ok(Json(blocking(svc, |s| s.report()).await?).into_response())
}

async fn pending(State(svc): State<Arc<EvalService>>, Path(category): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(svc, move |s| Ok(s.bank()?.pending(&category)?)).await?).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionBody {
    pub decision: Decision,
    pub reviewer: String,
}

async fn decide(State(svc): State<Arc<EvalService>>, Path(id): Path<String>, body: Result<Json<DecisionBody>, JsonRejection>) -> ApiResult<Response> {
    let Json(body) = body?;
    if body.reviewer.trim().is_empty() {
        return Err(EvalError::EmptyReviewer.into());
    }
    Ok(Json(blocking(svc, move |s| Ok(s.bank()?.curate(&id, body.decision, &body.reviewer)?)).await?).into_response())
}
