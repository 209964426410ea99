//! Request handlers. Every error body is `{"error": "<message>"}`.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stableflow::checkpoint::Checkpoint;
use stableflow::dataset::{parse_trajectories, Dataset};
use stableflow::rollout::{vector_field_grid, Integrator, Simulator};
use stableflow::trainer::TrainConfig;
use stableflow::{verify_certificate, CompiledPolicy, Execution, StateVector};
use tokio::sync::broadcast::error::RecvError;

use crate::jobs::{self, JobRecord};
use crate::live::{Command, LiveEvent, LiveRollout, LiveStatus, DEFAULT_MAX_TIME, DEFAULT_TICK_HZ, MAX_TICK_HZ};
use crate::obs::{default_observation, parse_observation};
use crate::store::{new_id, DatasetRecord, ModelRecord};
use crate::AppState;

/// Largest field grid side served in one request.
pub const MAX_FIELD_RES: usize = 512;
pub const DEFAULT_FIELD_RES: usize = 20;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        log::error!("{message}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(ApiError::from)
}

fn load_dataset(state: &AppState, id: &str) -> ApiResult<(DatasetRecord, String)> {
    let record = state
        .store
        .dataset(id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found("dataset", id))?;
    let text = state.store.get_blob(&record.blob).map_err(ApiError::internal)?;
    Ok((record, text))
}

fn load_model(state: &AppState, id: &str) -> ApiResult<(ModelRecord, Arc<Checkpoint>)> {
    let record = state
        .store
        .model(id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found("model", id))?;
    if let Some(ckpt) = state.models.lock().expect("model cache poisoned").get(&record.blob) {
        return Ok((record, Arc::clone(ckpt)));
    }
    let text = state.store.get_blob(&record.blob).map_err(ApiError::internal)?;
    let ckpt = Arc::new(Checkpoint::from_json(&text).map_err(ApiError::internal)?);
    state
        .models
        .lock()
        .expect("model cache poisoned")
        .insert(record.blob.clone(), Arc::clone(&ckpt));
    Ok((record, ckpt))
}

fn live(state: &AppState, id: &str) -> ApiResult<Arc<LiveRollout>> {
    state.rollouts.get(id).ok_or_else(|| ApiError::not_found("rollout", id))
}

fn closed(id: &str) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, format!("rollout `{id}` has closed"))
}

// ---- datasets ----

pub async fn upload_dataset(State(state): State<AppState>, bytes: Bytes) -> ApiResult<(StatusCode, Json<DatasetRecord>)> {
    let text = std::str::from_utf8(&bytes).map_err(|e| ApiError::bad_request(format!("body is not UTF-8: {e}")))?;
    let trajectories = parse_trajectories(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let dataset = Dataset::new(trajectories).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let blob = state.store.put_blob(&bytes).map_err(ApiError::internal)?;
    let record = DatasetRecord {
        id: new_id(),
        blob,
        d_c: dataset.d_c(),
        trajectories: dataset.trajectories().len(),
        samples: dataset.samples().len(),
    };
    state.store.put_dataset(&record).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(record)))
}

pub async fn get_dataset(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<DatasetRecord>> {
    Ok(Json(load_dataset(&state, &id)?.0))
}

// ---- training ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    dataset_id: String,
    #[serde(default)]
    config: TrainConfig,
}

#[derive(Serialize)]
pub struct JobCreated {
    job_id: String,
    #[serde(flatten)]
    job: JobRecord,
}

pub async fn submit_training(
    State(state): State<AppState>,
    payload: Result<Json<TrainRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<JobCreated>)> {
    let req = body(payload)?;
    let (record, text) = load_dataset(&state, &req.dataset_id)?;
    req.config.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    // The stored blob already parsed at upload; this only checks the
    // network layout against the dataset's observations.
    let dataset = Dataset::new(parse_trajectories(&text).map_err(ApiError::internal)?).map_err(ApiError::internal)?;
    let template = dataset.observation_template();
    req.config
        .net_spec(template)
        .build(dataset.d_c(), template, req.config.n_systems)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let job = jobs::submit(&state.jobs, &state.store, Arc::clone(&state.job_slots), record.id, record.blob, req.config);
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id: job.id.clone(), job })))
}

pub async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    state.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

// ---- models ----

pub async fn get_model(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let (record, ckpt) = load_model(&state, &id)?;
    let certificate = verify_certificate(&ckpt.policy).map_err(ApiError::internal)?;
    let p = &ckpt.policy;
    Ok(Json(json!({
        "id": record.id,
        "dataset_id": record.dataset_id,
        "job_id": record.job_id,
        "d_c": p.d_c(),
        "n_systems": p.n_systems(),
        "attractor": p.attractor(),
        "observation": p.weight_net().config().obs_kind(),
        "certificate": certificate,
        "config": ckpt.config,
        "meta": {
            "final_loss": ckpt.meta.final_loss,
            "epochs": ckpt.meta.epochs,
            "loss_history": ckpt.meta.loss_history,
            "dataset_fingerprint": ckpt.meta.dataset_fingerprint,
            "demo_dt": ckpt.meta.demo_dt,
        },
    })))
}

/// The stored checkpoint file, loadable by the command-line tools.
pub async fn get_checkpoint(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = state
        .store
        .model(&id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found("model", &id))?;
    let text = state.store.get_blob(&record.blob).map_err(ApiError::internal)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], text).into_response())
}

#[derive(Deserialize)]
pub struct FieldQuery {
    obs: Option<String>,
    lo: String,
    hi: String,
    res: Option<String>,
}

fn pair(name: &str, s: &str) -> ApiResult<[f64; 2]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::unprocessable(format!("`{name}` must be two comma-separated numbers, got `{s}`")))?;
    match v[..] {
        [a, b] => Ok([a, b]),
        _ => Err(ApiError::unprocessable(format!("`{name}` must have two entries, got {}", v.len()))),
    }
}

fn resolution(s: Option<&str>) -> ApiResult<[usize; 2]> {
    let Some(s) = s else {
        return Ok([DEFAULT_FIELD_RES; 2]);
    };
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::unprocessable(format!("bad resolution `{s}`")))?;
    let res = match v[..] {
        [n] => [n, n],
        [nx, ny] => [nx, ny],
        _ => return Err(ApiError::unprocessable(format!("bad resolution `{s}`"))),
    };
    if res.iter().any(|&r| r > MAX_FIELD_RES) {
        return Err(ApiError::unprocessable(format!("resolution is capped at {MAX_FIELD_RES}")));
    }
    Ok(res)
}

pub async fn get_field(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<FieldQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (_, ckpt) = load_model(&state, &id)?;
    if ckpt.policy.d_c() != 2 {
        return Err(ApiError::unprocessable(format!(
            "vector fields need d_c = 2, model has d_c = {}",
            ckpt.policy.d_c()
        )));
    }
    let Query(q) = query.map_err(|r| ApiError::unprocessable(r.body_text()))?;
    let (lo, hi) = (pair("lo", &q.lo)?, pair("hi", &q.hi)?);
    let res = resolution(q.res.as_deref())?;
    let obs = match q.obs.as_deref() {
        Some(spec) => parse_observation(spec, &ckpt.policy).map_err(ApiError::unprocessable)?,
        None => default_observation(&ckpt.policy),
    };
    let grid = tokio::task::spawn_blocking(move || {
        vector_field_grid(&ckpt.policy, &obs, [(lo[0], hi[0]), (lo[1], hi[1])], res, Execution::Sequential)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    Ok(Json(grid).into_response())
}

// ---- live rollouts ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRequest {
    model_id: String,
    x0: Vec<f64>,
    obs: Option<String>,
    dt: Option<f64>,
    tick_hz: Option<f64>,
    method: Option<Integrator>,
    clamp: Option<f64>,
    max_time: Option<f64>,
}

#[derive(Serialize)]
pub struct RolloutCreated {
    rollout_id: String,
    #[serde(flatten)]
    status: LiveStatus,
}

pub async fn create_rollout(
    State(state): State<AppState>,
    payload: Result<Json<RolloutRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<RolloutCreated>)> {
    let req = body(payload)?;
    let (record, ckpt) = load_model(&state, &req.model_id)?;
    let tick_hz = req.tick_hz.unwrap_or(DEFAULT_TICK_HZ);
    if !(tick_hz > 0.0 && tick_hz <= MAX_TICK_HZ) {
        return Err(ApiError::unprocessable(format!("tick_hz must be in (0, {MAX_TICK_HZ}], got {tick_hz}")));
    }
    let max_time = req.max_time.unwrap_or(DEFAULT_MAX_TIME);
    if !(max_time > 0.0 && max_time.is_finite()) {
        return Err(ApiError::unprocessable(format!("max_time must be positive, got {max_time}")));
    }
    let obs = match req.obs.as_deref() {
        Some(spec) => parse_observation(spec, &ckpt.policy).map_err(ApiError::unprocessable)?,
        None => default_observation(&ckpt.policy),
    };
    let invalid = |e: stableflow::Error| ApiError::unprocessable(e.to_string());
    let x0 = StateVector::new(req.x0, obs).map_err(invalid)?;
    let policy = CompiledPolicy::new(&ckpt.policy).map_err(ApiError::internal)?;
    let dt = req.dt.unwrap_or(ckpt.meta.demo_dt);
    let sim = Simulator::owned(policy, &x0, dt, req.method.unwrap_or_default(), req.clamp).map_err(invalid)?;
    let id = new_id();
    let rollout = state.rollouts.create(id.clone(), record.id, sim, tick_hz, max_time);
    Ok((StatusCode::CREATED, Json(RolloutCreated { rollout_id: id, status: rollout.status() })))
}

pub async fn get_rollout(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<LiveStatus>> {
    Ok(Json(live(&state, &id)?.status()))
}

pub async fn stream_rollout(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let rollout = live(&state, &id)?;
    let rx = rollout.subscribe().ok_or_else(|| closed(&id))?;
    let events = stream::unfold((rx, false), |(mut rx, done)| async move {
        if done {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let terminal = ev.is_terminal();
                    return Some((Ok(to_sse(&ev)), (rx, terminal)));
                }
                Err(RecvError::Lagged(n)) => log::warn!("stream subscriber skipped {n} events"),
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

fn to_sse(ev: &LiveEvent) -> Event {
    Event::default().event(ev.name()).json_data(ev).expect("events serialize")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbRequest {
    delta: Vec<f64>,
}

pub async fn perturb_rollout(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<PerturbRequest>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let rollout = live(&state, &id)?;
    if rollout.is_closed() {
        return Err(closed(&id));
    }
    let req = body(payload)?;
    if req.delta.len() != rollout.d_c() {
        return Err(ApiError::unprocessable(format!(
            "delta has {} entries, rollout has d_c = {}",
            req.delta.len(),
            rollout.d_c()
        )));
    }
    if req.delta.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::unprocessable("delta must be finite"));
    }
    if !rollout.send(Command::Perturb(req.delta)) {
        return Err(closed(&id));
    }
    Ok(StatusCode::ACCEPTED)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsRequest {
    spec: String,
}

pub async fn switch_observation(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<ObsRequest>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let rollout = live(&state, &id)?;
    if rollout.is_closed() {
        return Err(closed(&id));
    }
    let req = body(payload)?;
    let (_, ckpt) = load_model(&state, &rollout.status().model_id)?;
    let observation = parse_observation(&req.spec, &ckpt.policy).map_err(ApiError::unprocessable)?;
    if !rollout.send(Command::Observe { spec: req.spec, observation }) {
        return Err(closed(&id));
    }
    Ok(StatusCode::ACCEPTED)
}
