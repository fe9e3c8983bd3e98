//! HTTP API over the trajectory engine.
//!
//! Every endpoint answers in JSON. Errors carry `{"error": {"code",
//! "message", "field"?}}` plus any code-specific details.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use latode::checkpoint::Checkpoint;
use latode::model::{IrregularSeries, SeriesDocument};
use latode::trajectory::{
    backward_traces, condition_on_point, export_ensemble, risk_curve, sample_ensemble, EnsembleExport, EnsembleOptions,
    HypotheticalPoint,
};
use latode::training::FRACTIONS;
use latode::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    /// Engine defaults; requests may override K and the horizon.
    pub ensemble: EnsembleOptions,
    /// Proposals per member when conditioning on a point.
    pub proposals_per_member: usize,
    /// Backward traces returned with a query.
    pub backward_traces: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { port: 8080, ensemble: EnsembleOptions::default(), proposals_per_member: 50, backward_traces: 5 }
    }
}

pub struct AppState {
    checkpoint: Checkpoint,
    checkpoint_hash: String,
    config: ServerConfig,
    registry: RwLock<BTreeMap<String, Arc<IrregularSeries>>>,
    next_id: AtomicU64,
    started: Instant,
}

impl AppState {
    /// `checkpoint_hash` should be the hash of the file the checkpoint was
    /// read from.
    pub fn new(checkpoint: Checkpoint, checkpoint_hash: String, config: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            checkpoint,
            checkpoint_hash,
            config,
            registry: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, config: ServerConfig) -> Arc<Self> {
        let hash = checkpoint.hash();
        Self::new(checkpoint, hash, config)
    }

    fn series(&self, id: &str) -> Result<Arc<IrregularSeries>, ApiError> {
        self.registry
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no series with id {:?}", id)))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/series", put(put_series))
        .route("/series/{id}/ensemble", get(get_ensemble))
        .route("/series/{id}/query", post(post_query))
        .route("/series/{id}/risk", get(get_risk))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": { "code": code, "message": message.into() } }) }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, "validation", message);
        e.body["error"]["field"] = json!(field);
        e
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body["error"][key] = value;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Validation { field, message } => ApiError::field(&field, message),
            Error::Contract(_) | Error::Parse { .. } => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", msg),
            Error::EmptyWindow { fraction } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_window", msg).with("fraction", json!(fraction))
            }
            Error::EnsembleDegenerate { dropped, requested } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ensemble_degenerate", msg)
                    .with("dropped", json!(dropped))
                    .with("requested", json!(requested))
            }
            Error::QueryInfeasible { ess, best_distance } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "query_infeasible", "the model considers this point implausible")
                    .with("ess", json!(ess))
                    .with("best_distance", json!(best_distance))
            }
            Error::Divergence { .. } | Error::Stiffness { .. } | Error::NumericDomain(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "solver_failure", msg)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

fn query_rejection(e: QueryRejection) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "invalid_query", e.body_text())
}

fn json_rejection(e: JsonRejection) -> ApiError {
    ApiError::new(e.status(), "invalid_body", e.body_text())
}

/// Runs engine work off the async executor.
async fn compute<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ready",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_hash": state.checkpoint_hash,
        "uptime_secs": state.started.elapsed().as_secs_f64(),
        "series_count": state.registry.read().expect("registry lock").len(),
    }))
}

/// Converts a submitted document into the checkpoint's normalization.
fn admit(doc: SeriesDocument, state: &AppState) -> Result<IrregularSeries, ApiError> {
    let stats = &state.checkpoint.norm_stats;
    if doc.feature_names != stats.feature_names {
        return Err(ApiError::field(
            "feature_names",
            format!("expected {:?}, got {:?}", stats.feature_names, doc.feature_names),
        ));
    }
    if doc.norm_stats.feature_names != doc.feature_names {
        return Err(ApiError::field("norm_stats.feature_names", "must match feature_names"));
    }
    if doc.norm_stats.stds.iter().any(|s| !(*s > 0.0)) || doc.norm_stats.means.len() != doc.feature_names.len() {
        return Err(ApiError::field("norm_stats", "needs one mean and one positive std per feature"));
    }
    let series = doc.into_series()?;
    Ok(series.renormalized(stats)?)
}

async fn put_series(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SeriesDocument>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(doc) = body.map_err(json_rejection)?;
    let mut series = admit(doc, &state)?;
    let id = format!("s{:06}", state.next_id.fetch_add(1, Ordering::SeqCst));
    series.id = id.clone();
    let n_rows = series.len();
    state.registry.write().expect("registry lock").insert(id.clone(), Arc::new(series));
    Ok(Json(json!({ "id": id, "rows": n_rows })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleParams {
    fraction: Option<f64>,
    #[serde(alias = "K")]
    k: Option<usize>,
    horizon_mult: Option<f64>,
    seed: Option<u64>,
}

fn check_fraction(f: f64) -> Result<f64, ApiError> {
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(ApiError::field("fraction", "must lie in (0, 1]"))
    }
}

const MAX_MEMBERS: usize = 1000;

fn options(state: &AppState, k: Option<usize>, horizon: Option<f64>) -> Result<EnsembleOptions, ApiError> {
    let mut opts = state.config.ensemble.clone();
    if let Some(k) = k {
        if !(1..=MAX_MEMBERS).contains(&k) {
            return Err(ApiError::field("K", format!("must lie in [1, {}]", MAX_MEMBERS)));
        }
        opts.members = k;
    }
    if let Some(h) = horizon {
        opts.horizon_mult = h;
    }
    opts.validate()?;
    Ok(opts)
}

async fn get_ensemble(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    params: Result<Query<EnsembleParams>, QueryRejection>,
) -> Result<Json<EnsembleExport>, ApiError> {
    let Query(q) = params.map_err(query_rejection)?;
    let series = state.series(&id)?;
    let fraction = check_fraction(q.fraction.unwrap_or(1.0))?;
    let opts = options(&state, q.k, q.horizon_mult)?;
    let seed = q.seed.unwrap_or(0);
    let doc = compute(move || {
        let ck = &state.checkpoint;
        let ens = sample_ensemble(&series, &ck.params, fraction, &opts, seed)?;
        Ok(export_ensemble(&ens, &series, &ck.norm_stats))
    })
    .await?;
    Ok(Json(doc))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    /// Window units.
    time: f64,
    feature: usize,
    /// Normalized units.
    value: f64,
    tolerance: f64,
    #[serde(default, alias = "K")]
    k: Option<usize>,
    #[serde(default, alias = "M")]
    m: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    fraction: Option<f64>,
    #[serde(default)]
    horizon_mult: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BackwardTrace {
    seed: u64,
    times: Vec<f64>,
    times_hours: Vec<f64>,
    values: Vec<Vec<f64>>,
    raw_values: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct QueryResponse {
    point: HypotheticalPoint,
    point_time_hours: f64,
    point_raw_value: f64,
    proposals: usize,
    ess: f64,
    proposal_mean_distance: f64,
    weighted_mean_distance: f64,
    conditioned_mean_distance: f64,
    best_distance: f64,
    conditioned: EnsembleExport,
    backward_traces: Vec<BackwardTrace>,
}

async fn post_query(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<QueryBody>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let Json(q) = body.map_err(json_rejection)?;
    let series = state.series(&id)?;
    let fraction = check_fraction(q.fraction.unwrap_or(1.0))?;
    let opts = options(&state, q.k, q.horizon_mult)?;
    let proposals = match q.m {
        Some(m) if m < opts.members => return Err(ApiError::field("M", "must be at least K")),
        Some(m) if m > MAX_MEMBERS * 50 => return Err(ApiError::field("M", format!("must be at most {}", MAX_MEMBERS * 50))),
        Some(m) => m,
        None => opts.members * state.config.proposals_per_member,
    };
    let point = HypotheticalPoint { time: q.time, feature: q.feature, value: q.value, tolerance: q.tolerance };
    let seed = q.seed.unwrap_or(0);
    let resp = compute(move || {
        let ck = &state.checkpoint;
        let stats = &ck.norm_stats;
        let cond = condition_on_point(&series, &ck.params, fraction, point, proposals, &opts, seed)?;
        let traces = backward_traces(&cond, &ck.params, state.config.backward_traces, opts.tolerances())?;
        let w = stats.window_hours;
        let backward_traces = traces
            .into_iter()
            .map(|(seed, rec)| BackwardTrace {
                seed,
                times_hours: rec.times.iter().map(|t| t * w).collect(),
                raw_values: rec
                    .means
                    .iter()
                    .map(|row| row.iter().enumerate().map(|(j, v)| stats.to_raw(j, *v)).collect())
                    .collect(),
                times: rec.times,
                values: rec.means,
            })
            .collect();
        Ok(QueryResponse {
            point,
            point_time_hours: point.time * w,
            point_raw_value: stats.to_raw(point.feature, point.value),
            proposals: cond.proposals,
            ess: cond.ess,
            proposal_mean_distance: cond.proposal_mean_distance,
            weighted_mean_distance: cond.weighted_mean_distance,
            conditioned_mean_distance: cond.conditioned_mean_distance,
            best_distance: cond.best_distance,
            conditioned: export_ensemble(&cond.ensemble, &series, stats),
            backward_traces,
        })
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskParams {
    threshold: Option<f64>,
}

async fn get_risk(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    params: Result<Query<RiskParams>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = params.map_err(query_rejection)?;
    let series = state.series(&id)?;
    let threshold = q.threshold.unwrap_or(state.config.ensemble.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ApiError::field("threshold", "must lie in (0, 1)"));
    }
    let tol = state.config.ensemble.tolerances();
    compute(move || {
        let ck = &state.checkpoint;
        let fractions: Vec<f64> = FRACTIONS.iter().copied().filter(|f| !series.observed_rows(*f).is_empty()).collect();
        let curve = risk_curve(&series, &ck.params, &fractions, threshold, tol)?;
        let w = ck.norm_stats.window_hours;
        Ok(Json(json!({
            "series_id": series.id,
            "threshold": curve.threshold,
            "points": curve.points.iter().map(|p| json!({
                "duration": p.duration,
                "duration_hours": p.duration * w,
                "probability": p.probability,
            })).collect::<Vec<_>>(),
            "first_crossing": curve.first_crossing,
            "first_crossing_hours": curve.first_crossing.map(|t| t * w),
        })))
    })
    .await
}
