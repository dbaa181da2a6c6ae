//! HTTP/JSON routes over a [`Hub`].

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use taskfarm::engine::{Action, JobState, JournalRecord, Steer};
use taskfarm::time::SimDuration;
use tokio::sync::broadcast::error::RecvError;

use crate::hub::{CreateRequest, Hub, HubError, Subscription};

pub const CLIENT_HEADER: &str = "x-client-id";

impl IntoResponse for HubError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            HubError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            HubError::Conflict(m) => (StatusCode::CONFLICT, json!({ "error": m })),
            HubError::Invalid { message, diagnostics } => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": message, "diagnostics": diagnostics }))
            }
            HubError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, HubError>;

fn client_id(headers: &HeaderMap) -> Option<String> {
    headers.get(CLIENT_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string)
}

/// Runs blocking hub work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| HubError::Internal(e.to_string()))?
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/experiments", post(create).get(list))
        .route("/experiments/{id}", get(status))
        .route("/experiments/{id}/actions", post(action))
        .route("/experiments/{id}/constraints", patch(steer))
        .route("/experiments/{id}/jobs", get(jobs))
        .route("/experiments/{id}/resources", get(resources))
        .route("/experiments/{id}/decisions", get(decisions))
        .route("/experiments/{id}/ledger", get(ledger))
        .route("/experiments/{id}/events", get(events))
        .route("/fabric", get(fabric))
        .with_state(hub)
}

async fn create(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Json(req): Json<CreateRequest>,
) -> ApiResult<Response> {
    let client = client_id(&headers);
    let created = blocking(move || hub.create(req, client.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn list(State(hub): State<Arc<Hub>>) -> ApiResult<Json<serde_json::Value>> {
    let ids = hub.ids();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let s = hub.status(&id)?;
        out.push(json!({ "id": id, "phase": s.snapshot.phase, "total_jobs": s.snapshot.total_jobs }));
    }
    Ok(Json(json!({ "experiments": out })))
}

async fn status(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Json<crate::hub::Status>> {
    Ok(Json(hub.status(&id)?))
}

#[derive(Deserialize)]
struct ActionBody {
    action: Action,
}

async fn action(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<ActionBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let client = client_id(&headers);
    let phase = {
        let id = id.clone();
        blocking(move || hub.control(&id, body.action, client.as_deref())).await?
    };
    Ok(Json(json!({ "id": id, "phase": phase })))
}

async fn steer(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<Steer>,
) -> ApiResult<Json<crate::hub::Steered>> {
    let client = client_id(&headers);
    Ok(Json(blocking(move || hub.steer(&id, &body, client.as_deref())).await?))
}

#[derive(Deserialize)]
struct JobsQuery {
    state: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn jobs(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Query(q): Query<JobsQuery>,
) -> ApiResult<Json<crate::hub::JobsPage>> {
    let state = match q.state.as_deref().filter(|s| !s.is_empty()) {
        Some(s) => Some(s.parse::<JobState>().map_err(|e| HubError::Invalid { message: e, diagnostics: vec![] })?),
        None => None,
    };
    Ok(Json(hub.jobs(&id, state, q.page.unwrap_or(1), q.page_size.unwrap_or(50))?))
}

#[derive(Deserialize)]
struct ResourcesQuery {
    step: Option<String>,
}

async fn resources(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Query(q): Query<ResourcesQuery>,
) -> ApiResult<Json<crate::hub::Resources>> {
    let step = match q.step {
        Some(s) => s
            .parse::<SimDuration>()
            .map_err(|e| HubError::Invalid { message: format!("step: {e}"), diagnostics: vec![] })?,
        None => SimDuration::from_minutes(15),
    };
    Ok(Json(hub.resources(&id, step)?))
}

async fn decisions(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Json<Vec<serde_json::Value>>> {
    Ok(Json(hub.decisions(&id)?))
}

async fn ledger(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> ApiResult<Response> {
    let csv = hub.ledger_csv(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    from_seq: Option<u64>,
}

/// Every journal record after `from_seq` (or the `Last-Event-ID` header),
/// then live records as they are committed.
async fn events(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let last_event_id = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse().ok());
    let from = q.from_seq.or(last_event_id).unwrap_or(0);
    let sub = hub.subscribe(&id, from)?;
    Ok(Sse::new(record_stream(sub, from)).keep_alive(KeepAlive::default()))
}

fn record_stream(sub: Subscription, from: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold((sub, from), |(mut sub, mut last)| async move {
        loop {
            if let Some(r) = sub.backlog.pop_front() {
                if r.seq <= last {
                    continue;
                }
                last = r.seq;
                return Some((Ok(to_event(&r)), (sub, last)));
            }
            match sub.receiver.recv().await {
                Ok(r) => sub.backlog.push_back(r),
                Err(RecvError::Lagged(_)) => {
                    let since = sub.since(last);
                    sub.backlog = VecDeque::from(since);
                }
                Err(RecvError::Closed) => return None,
            }
        }
    })
}

fn to_event(r: &JournalRecord) -> Event {
    Event::default().id(r.seq.to_string()).event(r.event.kind()).data(r.encode())
}

async fn fabric(State(hub): State<Arc<Hub>>) -> Json<taskfarm::fabric::FabricConfig> {
    Json(hub.fabric().clone())
}

/// Serves the API on `listener`, advancing running experiments by `speed`
/// simulated seconds per wall-clock second.
pub async fn serve(hub: Arc<Hub>, listener: tokio::net::TcpListener, speed: f64) -> anyhow::Result<()> {
    const PERIOD: Duration = Duration::from_millis(200);
    let step = SimDuration::from_millis((PERIOD.as_millis() as f64 * speed).round().max(1.0) as i64);
    let driver = hub.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(PERIOD);
        loop {
            tick.tick().await;
            let hub = driver.clone();
            let _ = tokio::task::spawn_blocking(move || hub.advance_all(step)).await;
        }
    });
    axum::serve(listener, router(hub)).await?;
    Ok(())
}
