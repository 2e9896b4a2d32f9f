//! HTTP routes. Request and response bodies are line-delimited JSON
//! (`application/x-ndjson`), one object per line.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use crate::error::{Rejection, StudyError};
use crate::export::write_records;
use crate::study::{Study, Submission};

pub const NDJSON: &str = "application/x-ndjson";
pub const ADMIN_HEADER: &str = "x-admin-token";

#[derive(Clone)]
pub struct AppState {
    pub study: Arc<Study>,
    pub admin_token: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    participant: String,
}

/// Body of `GET /sessions/{id}/next`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextImage {
    pub session_id: String,
    pub image_id: Option<u64>,
    pub image_url: Option<String>,
    pub index: usize,
    pub total: usize,
    pub done: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

fn ndjson(status: StatusCode, value: &impl Serialize) -> Response {
    let mut body = serde_json::to_vec(value).expect("response types serialize");
    body.push(b'\n');
    (status, [(header::CONTENT_TYPE, NDJSON)], body).into_response()
}

fn status_of(r: &Rejection) -> StatusCode {
    match r {
        Rejection::StudyFull { .. } | Rejection::Duplicate { .. } => StatusCode::CONFLICT,
        Rejection::UnknownStudy(_) | Rejection::UnknownSession(_) | Rejection::UnknownImage(_) => StatusCode::NOT_FOUND,
        Rejection::WrongImage { .. } | Rejection::InvalidBox(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Rejection::BadRequest(_) => StatusCode::BAD_REQUEST,
        Rejection::Unauthorized => StatusCode::UNAUTHORIZED,
        Rejection::ExportDisabled => StatusCode::FORBIDDEN,
        Rejection::EmptyStudy => StatusCode::CONFLICT,
    }
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            StudyError::Rejected(r) => (status_of(r), r.code()),
            _ => {
                log::error!("{self}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ndjson(
            status,
            &ErrorBody {
                error: code.into(),
                message: self.to_string(),
            },
        )
    }
}

/// Parses a single-object NDJSON body.
fn parse_line<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, StudyError> {
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Rejection::BadRequest("empty body".into()))?;
    if lines.next().is_some() {
        return Err(Rejection::BadRequest("expected exactly one record".into()).into());
    }
    serde_json::from_str(first).map_err(|e| Rejection::BadRequest(e.to_string()).into())
}

fn check_study(state: &AppState, id: &str) -> Result<(), StudyError> {
    if state.study.id() == id {
        Ok(())
    } else {
        Err(Rejection::UnknownStudy(id.into()).into())
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StudyError> + Send + 'static,
) -> Result<T, StudyError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudyError::Corrupt(format!("worker panicked: {e}")))?
}

async fn create_session(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    body: String,
) -> Result<Response, StudyError> {
    check_study(&state, &study_id)?;
    let req: NewSession = parse_line(&body)?;
    let study = state.study.clone();
    let session = blocking(move || study.create_session(&req.participant)).await?;
    Ok(ndjson(StatusCode::CREATED, &session))
}

async fn next_image(State(state): State<AppState>, Path(session_id): Path<String>) -> Result<Response, StudyError> {
    let p = state.study.progress(&session_id)?;
    Ok(ndjson(
        StatusCode::OK,
        &NextImage {
            session_id: p.session_id,
            image_id: p.next_image,
            image_url: p.next_image.map(|id| format!("/images/{id}")),
            index: p.cursor,
            total: p.total,
            done: p.next_image.is_none(),
        },
    ))
}

async fn image_bytes(State(state): State<AppState>, Path(image_id): Path<u64>) -> Result<Response, StudyError> {
    let img = state.study.image(image_id).ok_or(Rejection::UnknownImage(image_id))?;
    let path = img.path.clone();
    let bytes = tokio::fs::read(&path).await.map_err(|e| StudyError::io(&path, e))?;
    let mime = image::ImageFormat::from_path(&path)
        .map(|f| f.to_mime_type())
        .unwrap_or("application/octet-stream");
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn submit(
    State(state): State<AppState>,
    Path(session_id): Path<String>,
    body: String,
) -> Result<Response, StudyError> {
    let sub: Submission = parse_line(&body)?;
    let study = state.study.clone();
    let ack = blocking(move || study.submit(&session_id, sub)).await?;
    Ok(ndjson(StatusCode::CREATED, &ack))
}

async fn export(
    State(state): State<AppState>,
    Path(study_id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, StudyError> {
    check_study(&state, &study_id)?;
    let expected = state.admin_token.as_deref().ok_or(Rejection::ExportDisabled)?;
    let given = headers.get(ADMIN_HEADER).and_then(|v| v.to_str().ok());
    if given != Some(expected) {
        return Err(Rejection::Unauthorized.into());
    }
    let records = state.study.annotations();
    let mut body = Vec::new();
    write_records(&records, &mut body).map_err(|e| StudyError::io("<export>", e))?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, NDJSON)], Body::from(body)).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies/{id}/sessions", post(create_session))
        .route("/studies/{id}/export", get(export))
        .route("/sessions/{id}/next", get(next_image))
        .route("/sessions/{id}/annotations", post(submit))
        .route("/images/{id}", get(image_bytes))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
