//! HTTP routes.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use loomline_core::classification::{default_profiles, resolve_classifier, DEFAULT_PROFILE};
use loomline_core::domain::{validate_scenario, Violation};
use loomline_core::repository::{RunFilter, Store};
use loomline_core::stations::PipelineModel;
use loomline_core::ScenarioConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use serde_json::value::RawValue;

use crate::session::{drive, Progress, RunState, Session};

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

struct Shared {
    scenarios: Mutex<BTreeMap<String, ScenarioConfig>>,
    scenario_seq: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    store: Arc<Mutex<Store>>,
    model: PipelineModel,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        Self::with_model(store, PipelineModel::default())
    }

    pub fn with_model(store: Store, model: PipelineModel) -> Self {
        AppState {
            shared: Arc::new(Shared {
                scenarios: Mutex::default(),
                scenario_seq: AtomicU64::new(0),
                sessions: Mutex::default(),
                store: Arc::new(Mutex::new(store)),
                model,
            }),
        }
    }

    fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.shared
            .sessions
            .lock()
            .expect("sessions")
            .get(id)
            .cloned()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/scenarios", post(create_scenario).get(list_scenarios))
        .route("/api/scenarios/{id}", get(get_scenario))
        .route("/api/runs", post(start_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/report", get(get_report))
        .route("/api/runs/{id}/pause", post(pause_run))
        .route("/api/runs/{id}/resume", post(resume_run))
        .route("/api/runs/{id}/events", get(run_events))
        .route("/api/profiles", get(list_profiles))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    violations: Vec<Violation>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} `{id}` not found"))
    }

    fn unprocessable(violations: Vec<Violation>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: "validation failed".into(),
            violations,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.message, "violations": self.violations });
        (self.status, Json(body)).into_response()
    }
}

/// Syntax errors are 400; well-formed JSON of the wrong shape is 422.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ApiError::unprocessable(vec![Violation {
            field: "body".into(),
            value: String::new(),
            allowed: e.to_string(),
        }]),
        _ => ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")),
    })
}

async fn create_scenario(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let cfg: ScenarioConfig = parse_body(&body)?;
    let cfg = validate_scenario(cfg).map_err(ApiError::unprocessable)?;
    let n = state.shared.scenario_seq.fetch_add(1, Ordering::Relaxed) + 1;
    let id = format!("scn-{n:06}");
    state
        .shared
        .scenarios
        .lock()
        .expect("scenarios")
        .insert(id.clone(), cfg.clone());
    Ok((
        StatusCode::CREATED,
        Json(json!({ "scenario_id": id, "scenario": cfg })),
    )
        .into_response())
}

async fn list_scenarios(State(state): State<AppState>) -> Json<serde_json::Value> {
    let scenarios = state.shared.scenarios.lock().expect("scenarios");
    let list: Vec<_> = scenarios
        .iter()
        .map(|(id, s)| json!({ "scenario_id": id, "scenario": s }))
        .collect();
    Json(json!(list))
}

async fn get_scenario(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ScenarioConfig>, ApiError> {
    state
        .shared
        .scenarios
        .lock()
        .expect("scenarios")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("scenario", &id))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    scenario_id: String,
    #[serde(default)]
    profile_name: Option<String>,
    #[serde(default)]
    pacing: f64,
}

async fn start_run(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RunRequest = parse_body(&body)?;
    let scenario = state
        .shared
        .scenarios
        .lock()
        .expect("scenarios")
        .get(&req.scenario_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("scenario", &req.scenario_id))?;
    let mut violations = Vec::new();
    if !(req.pacing.is_finite() && req.pacing >= 0.0) {
        violations.push(Violation {
            field: "pacing".into(),
            value: req.pacing.to_string(),
            allowed: ">= 0".into(),
        });
    }
    let profile_name = req
        .profile_name
        .unwrap_or_else(|| DEFAULT_PROFILE.to_owned());
    let (classifier, run_id) = {
        let mut store = state.shared.store.lock().expect("store");
        let classifier = resolve_classifier(&profile_name, store.profiles());
        (classifier, store.next_run_id())
    };
    if classifier.is_none() {
        violations.push(Violation {
            field: "profile_name".into(),
            value: profile_name.clone(),
            allowed: "a name listed by GET /api/profiles, or `oracle`".into(),
        });
    }
    if !violations.is_empty() {
        return Err(ApiError::unprocessable(violations));
    }

    let total = scenario.garment_count as u64 * scenario.repetitions as u64;
    let session = Arc::new(Session::new(
        run_id.clone(),
        Some(req.scenario_id),
        profile_name,
        req.pacing,
        total,
    ));
    state
        .shared
        .sessions
        .lock()
        .expect("sessions")
        .insert(run_id.clone(), session.clone());
    tokio::spawn(drive(
        session,
        scenario,
        state.shared.model.clone(),
        classifier.expect("checked above"),
        state.shared.store.clone(),
    ));
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "run_id": run_id, "state": RunState::Pending })),
    )
        .into_response())
}

async fn list_runs(State(state): State<AppState>, Query(filter): Query<RunFilter>) -> Response {
    let runs = state.shared.store.lock().expect("store").list_runs(&filter);
    Json(runs).into_response()
}

#[derive(Serialize)]
struct RunView {
    run_id: String,
    state: RunState,
    progress: Progress,
    pacing: f64,
    profile_name: String,
    scenario_id: Option<String>,
    scenario: Option<ScenarioConfig>,
    error: Option<String>,
    report: Option<Box<RawValue>>,
}

fn raw(json: &str) -> Box<RawValue> {
    RawValue::from_string(json.trim_end().to_owned()).expect("report is valid JSON")
}

/// Report bytes plus a view, from the live session or the store.
fn lookup(state: &AppState, id: &str) -> Result<(RunView, Option<String>), ApiError> {
    if let Some(session) = state.session(id) {
        let snap = session.snapshot();
        let report = snap.report_json.as_deref().map(str::to_owned);
        let view = RunView {
            run_id: session.run_id.clone(),
            state: snap.state,
            progress: snap.progress,
            pacing: session.pacing,
            profile_name: session.profile_name.clone(),
            scenario_id: session.scenario_id.clone(),
            scenario: session.scenario_id.as_ref().and_then(|sid| {
                state
                    .shared
                    .scenarios
                    .lock()
                    .expect("scenarios")
                    .get(sid)
                    .cloned()
            }),
            error: snap.error,
            report: report.as_deref().map(raw),
        };
        return Ok((view, report));
    }
    let store = state.shared.store.lock().expect("store");
    let record = store
        .load_run(id)
        .map_err(|_| ApiError::not_found("run", id))?;
    let report = record.report.to_json();
    let deposited = record.scenario.garment_count as u64 * record.scenario.repetitions as u64;
    let view = RunView {
        run_id: record.run_id.clone(),
        state: RunState::Completed,
        progress: Progress {
            deposited,
            total: deposited,
        },
        pacing: 0.0,
        profile_name: record.profile_name.clone(),
        scenario_id: None,
        scenario: Some(record.scenario.clone()),
        error: None,
        report: Some(raw(&report)),
    };
    Ok((view, Some(report)))
}

async fn get_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<RunView>, ApiError> {
    lookup(&state, &id).map(|(view, _)| Json(view))
}

/// The canonical report document, byte-identical to `loomline simulate --out`.
async fn get_report(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    match lookup(&state, &id)? {
        (_, Some(report)) => {
            Ok(([(header::CONTENT_TYPE, "application/json")], report).into_response())
        }
        (view, None) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("run `{id}` is {:?}; no report yet", view.state),
        )),
    }
}

async fn change_state(
    state: &AppState,
    id: &str,
    to: RunState,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = match state.session(id) {
        Some(s) => s,
        None => {
            // finished runs from an earlier server instance
            lookup(state, id)?;
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("run `{id}` is completed"),
            ));
        }
    };
    session.transition(to).map_err(|e| {
        ApiError::new(
            StatusCode::CONFLICT,
            format!("cannot move run `{id}` from {:?} to {:?}", e.from, e.to),
        )
    })?;
    Ok(Json(json!({ "run_id": id, "state": to })))
}

async fn pause_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    change_state(&state, &id, RunState::Paused).await
}

async fn resume_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    change_state(&state, &id, RunState::Running).await
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    /// Id of the last event the client already has.
    cursor: Option<usize>,
}

async fn run_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = state
        .session(&id)
        .ok_or_else(|| ApiError::not_found("live run", &id))?;
    let last_seen = query.cursor.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let next = last_seen.map_or(0, |c| c + 1);
    let rx = session.subscribe();

    let events = stream::unfold((session, next, rx), |(session, next, mut rx)| async move {
        loop {
            rx.borrow_and_update();
            match session.item(next) {
                Ok(item) => {
                    let event = Event::default()
                        .id(item.id.to_string())
                        .event(item.event)
                        .data(item.data);
                    return Some((Ok(event), (session, next + 1, rx)));
                }
                Err(true) => return None,
                Err(false) => {
                    if rx.changed().await.is_err() {
                        return None;
                    }
                }
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn list_profiles(State(state): State<AppState>) -> Response {
    let mut profiles = default_profiles();
    profiles.extend(
        state
            .shared
            .store
            .lock()
            .expect("store")
            .profiles()
            .iter()
            .cloned(),
    );
    Json(profiles).into_response()
}
