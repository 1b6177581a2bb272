//! HTTP front end for the reward service and a blocking client for it.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use uuid::Uuid;
use worldflow_core::rewardsvc::{Item, RewardClient, RewardService, TaskRecord};
use worldflow_core::{Error, Result};

use crate::wire::{ErrorBody, TaskCreated, TaskRequest, WireItem};

const MAX_BODY: usize = 512 << 20;

fn error_response(status: StatusCode, e: impl ToString) -> Response {
    (status, Json(ErrorBody { error: e.to_string() })).into_response()
}

async fn health(State(svc): State<Arc<RewardService>>) -> Response {
    Json(serde_json::json!({
        "status": "ok",
        "reward_types": svc.reward_types(),
        "in_flight": svc.in_flight(),
    }))
    .into_response()
}

async fn create(State(svc): State<Arc<RewardService>>, Json(req): Json<TaskRequest>) -> Response {
    let items: Result<Vec<Item>> = req.items.into_iter().map(WireItem::into_item).collect();
    let items = match items {
        Ok(items) => items,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    match svc.enqueue(items, &req.reward_types) {
        Ok(uuid) => (StatusCode::ACCEPTED, Json(TaskCreated { uuid })).into_response(),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e),
    }
}

async fn fetch(State(svc): State<Arc<RewardService>>, Path(uuid): Path<Uuid>) -> Response {
    match svc.poll(uuid) {
        Ok(rec) => Json(rec).into_response(),
        Err(Error::NotFound(m)) => error_response(StatusCode::NOT_FOUND, m),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(svc: Arc<RewardService>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/tasks", post(create))
        .route("/v1/tasks/{uuid}", get(fetch))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(svc)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    svc: Arc<RewardService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

/// [`RewardClient`] talking to a remote `serve-rewards` instance.
pub struct HttpRewardClient {
    base: String,
    agent: ureq::Agent,
}

fn transport(e: ureq::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

impl HttpRewardClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn healthz(&self) -> Result<serde_json::Value> {
        let mut resp = self.agent.get(format!("{}/healthz", self.base)).call().map_err(transport)?;
        resp.body_mut().read_json().map_err(transport)
    }
}

fn read_error(resp: &mut ureq::http::Response<ureq::Body>) -> String {
    resp.body_mut()
        .read_json::<ErrorBody>()
        .map(|b| b.error)
        .unwrap_or_else(|_| format!("HTTP {}", resp.status()))
}

impl RewardClient for HttpRewardClient {
    fn enqueue(&self, items: Vec<Item>, reward_types: &[String]) -> Result<Uuid> {
        let req = TaskRequest {
            items: items.iter().map(WireItem::from_item).collect(),
            reward_types: reward_types.to_vec(),
        };
        let mut resp = self
            .agent
            .post(format!("{}/v1/tasks", self.base))
            .send_json(&req)
            .map_err(transport)?;
        if !resp.status().is_success() {
            return Err(Error::InvalidArgument(read_error(&mut resp)));
        }
        let created: TaskCreated = resp.body_mut().read_json().map_err(transport)?;
        Ok(created.uuid)
    }

    fn poll(&self, uuid: Uuid) -> Result<TaskRecord> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/tasks/{uuid}", self.base))
            .call()
            .map_err(transport)?;
        match resp.status().as_u16() {
            200 => resp.body_mut().read_json().map_err(transport),
            404 => Err(Error::NotFound(read_error(&mut resp))),
            _ => Err(Error::Io(std::io::Error::other(read_error(&mut resp)))),
        }
    }
}
