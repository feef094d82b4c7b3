//! HTTP endpoints over the session hub.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::session::{Hub, PolicyRef, SessionError, SessionView, TurnResult};

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for SessionError {
    fn into_response(self) -> Response {
        let status = match &self {
            SessionError::NotFound(_) | SessionError::CheckpointMissing(_) => StatusCode::NOT_FOUND,
            SessionError::Closed | SessionError::OutOfTurn { .. } => StatusCode::CONFLICT,
            SessionError::EmptyUtterance => StatusCode::BAD_REQUEST,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UtteranceRequest {
    pub text: String,
    #[serde(default)]
    pub turn: Option<usize>,
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(view))
        .route("/sessions/{id}/utterance", post(utterance))
        .route("/sessions/{id}/events", get(events))
        .route("/arms", get(arms))
        .with_state(hub)
}

async fn create(
    State(hub): State<Arc<Hub>>,
    body: Option<Json<PolicyRef>>,
) -> Result<(StatusCode, Json<SessionView>), SessionError> {
    let r = body.map(|Json(r)| r).unwrap_or_default();
    let view = hub.create(&r)?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn view(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Result<Json<SessionView>, SessionError> {
    Ok(Json(hub.view(&id)?))
}

async fn utterance(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Json(req): Json<UtteranceRequest>,
) -> Result<Json<TurnResult>, SessionError> {
    let r = hub.speak(&id, &req.text, req.turn)?;
    Ok(Json(r))
}

async fn arms(State(hub): State<Arc<Hub>>) -> Json<Vec<String>> {
    Json(hub.arms())
}

fn event_of(v: &SessionView) -> Event {
    Event::default()
        .event("state")
        .json_data(v)
        .unwrap_or_else(|_| Event::default().event("error"))
}

/// The current view, then one event per update until the game ends.
async fn events(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, SessionError> {
    let (first, rx) = hub.subscribe(&id)?;
    let done = first.status.is_terminal();
    let stream = stream::unfold(
        (Some(first), rx, done),
        |(pending, mut rx, done)| async move {
            if let Some(v) = pending {
                return Some((Ok(event_of(&v)), (None, rx, done)));
            }
            if done {
                return None;
            }
            loop {
                match rx.recv().await {
                    Ok(v) => {
                        let done = v.status.is_terminal();
                        return Some((Ok(event_of(&v)), (None, rx, done)));
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

pub async fn serve(hub: Arc<Hub>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(hub)).await
}
