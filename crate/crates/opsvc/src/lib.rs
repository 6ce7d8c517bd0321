//! HTTP gateway over a paced simulation: state snapshots, the pending
//! decision inbox, verdict injection and a resumable event stream.

use std::convert::Infallible;
use std::future::Future;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use skydrop_core::sim::{DecideError, LiveHandle};
use skydrop_core::world::Verdict;
use tokio::net::TcpListener;

const POLL: Duration = Duration::from_millis(50);

pub fn router(handle: LiveHandle) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/decisions", get(decisions))
        .route("/decisions/{id}", post(decide))
        .route("/events", get(events))
        .with_state(handle)
}

/// Serves the gateway until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    handle: LiveHandle,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(handle)).with_graceful_shutdown(shutdown).await
}

fn error(status: StatusCode, code: &str) -> Response {
    (status, Json(json!({ "error": code }))).into_response()
}

fn not_started() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "not_started")
}

async fn state(State(h): State<LiveHandle>) -> Response {
    match h.snapshot() {
        Some(s) => Json(s).into_response(),
        None => not_started(),
    }
}

async fn decisions(State(h): State<LiveHandle>) -> Response {
    match h.snapshot() {
        Some(s) => Json(s.pending_decisions).into_response(),
        None => not_started(),
    }
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: Verdict,
}

async fn decide(State(h): State<LiveHandle>, Path(id): Path<String>, Json(body): Json<VerdictBody>) -> Response {
    let answer = {
        let id = id.clone();
        tokio::task::spawn_blocking(move || h.decide(&id, body.verdict)).await
    };
    match answer {
        Ok(Ok(())) => Json(json!({ "decision": id, "status": "accepted" })).into_response(),
        Ok(Err(e)) => {
            let status = match e {
                DecideError::NotFound => StatusCode::NOT_FOUND,
                DecideError::AlreadyDecided => StatusCode::CONFLICT,
                DecideError::Expired => StatusCode::GONE,
                DecideError::Stopped => StatusCode::SERVICE_UNAVAILABLE,
            };
            error(status, e.code())
        }
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

fn line_seq(line: &str) -> Option<u64> {
    let rest = line.strip_prefix("{\"seq\":")?;
    let end = rest.find(|c: char| !c.is_ascii_digit())?;
    rest[..end].parse().ok()
}

/// Newline-delimited log records after `since`, followed live until the run
/// stops and the buffer is drained.
async fn events(State(h): State<LiveHandle>, Query(q): Query<Since>) -> Response {
    let stream = futures::stream::unfold((h, q.since), |(h, cursor)| async move {
        loop {
            let stopped = h.is_stopped();
            let lines = h.events_since(cursor);
            if let Some(last) = lines.last().and_then(|l| line_seq(l)) {
                let mut chunk = lines.join("\n");
                chunk.push('\n');
                return Some((Ok::<_, Infallible>(Bytes::from(chunk)), (h, last)));
            }
            if stopped {
                return None;
            }
            tokio::time::sleep(POLL).await;
        }
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("static response parts")
}
