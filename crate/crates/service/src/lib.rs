//! HTTP service: dataset upload, background training jobs, vector-field
//! queries and live rollouts streamed as server-sent events.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/datasets` | trajectory JSON body → 201 dataset record |
//! | GET | `/api/datasets/{id}` | dataset record |
//! | POST | `/api/train` | `{dataset_id, config}` → 202 job record |
//! | GET | `/api/jobs/{id}` | job record |
//! | GET | `/api/models/{id}` | certificate, config and training meta |
//! | GET | `/api/models/{id}/checkpoint` | checkpoint file |
//! | GET | `/api/models/{id}/field` | `obs`, `lo=a,b`, `hi=c,d`, `res=n[,m]` → grid |
//! | POST | `/api/rollouts` | `{model_id, x0, obs?, dt?, tick_hz?, method?, clamp?, max_time?}` → 201 |
//! | GET | `/api/rollouts/{id}` | status |
//! | GET | `/api/rollouts/{id}/stream` | event stream |
//! | POST | `/api/rollouts/{id}/perturb` | `{delta}` → 202 |
//! | POST | `/api/rollouts/{id}/obs` | `{spec}` → 202 |

mod api;
mod jobs;
mod live;
mod obs;
mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::DefaultBodyLimit;
use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::Router;
use stableflow::checkpoint::Checkpoint;
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

pub use jobs::{JobRecord, JobState, Progress};
pub use live::{LiveEvent, LiveStatus, DEFAULT_MAX_TIME, DEFAULT_TICK_HZ, MAX_TICK_HZ};
pub use obs::parse_observation;
pub use store::{DatasetRecord, ModelRecord, Store};

pub const DEFAULT_BODY_LIMIT: usize = 32 * 1024 * 1024;
pub const DEFAULT_MAX_JOBS: usize = 2;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub max_concurrent_jobs: usize,
    pub body_limit: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            max_concurrent_jobs: DEFAULT_MAX_JOBS,
            body_limit: DEFAULT_BODY_LIMIT,
            cors_origin: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    store: Store,
    jobs: jobs::JobRegistry,
    rollouts: live::LiveRegistry,
    job_slots: Arc<Semaphore>,
    /// Parsed checkpoints keyed by blob digest.
    models: Arc<Mutex<HashMap<String, Arc<Checkpoint>>>>,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> std::io::Result<Self> {
        Ok(Self {
            store: Store::open(&config.data_dir)?,
            jobs: Default::default(),
            rollouts: Default::default(),
            job_slots: Arc::new(Semaphore::new(config.max_concurrent_jobs.max(1))),
            models: Default::default(),
        })
    }
}

pub fn router(config: &ServiceConfig) -> std::io::Result<Router> {
    let state = AppState::new(config)?;
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(origin),
        Some(Err(e)) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, e)),
        None => cors.allow_origin(Any),
    };
    Ok(Router::new()
        .route("/api/datasets", post(api::upload_dataset))
        .route("/api/datasets/{id}", get(api::get_dataset))
        .route("/api/train", post(api::submit_training))
        .route("/api/jobs/{id}", get(api::get_job))
        .route("/api/models/{id}", get(api::get_model))
        .route("/api/models/{id}/checkpoint", get(api::get_checkpoint))
        .route("/api/models/{id}/field", get(api::get_field))
        .route("/api/rollouts", post(api::create_rollout))
        .route("/api/rollouts/{id}", get(api::get_rollout))
        .route("/api/rollouts/{id}/stream", get(api::stream_rollout))
        .route("/api/rollouts/{id}/perturb", post(api::perturb_rollout))
        .route("/api/rollouts/{id}/obs", post(api::switch_observation))
        .layer(DefaultBodyLimit::max(config.body_limit))
        .layer(cors)
        .with_state(state))
}

pub async fn serve(config: &ServiceConfig, bind: SocketAddr) -> std::io::Result<()> {
    let app = router(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
