//! Run sessions: lifecycle state machine, the paced event release loop and
//! the per-session replay buffer that SSE subscribers read from.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::Utc;
use loomline_core::kernel::{EventKind, SimEvent};
use loomline_core::repository::{RunRecord, Store};
use loomline_core::stations::{simulate, PipelineModel};
use loomline_core::{Classifier, ScenarioConfig};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Pending,
    Running,
    Paused,
    Completed,
    Failed,
}

impl RunState {
    pub fn can_become(self, to: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, Completed)
                | (Running, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Completed | RunState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IllegalTransition {
    pub from: RunState,
    pub to: RunState,
}

/// One SSE message. `id` is the position in the session's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub id: usize,
    pub event: &'static str,
    pub data: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub deposited: u64,
    pub total: u64,
}

struct Inner {
    state: RunState,
    progress: Progress,
    items: Vec<StreamItem>,
    report_json: Option<Arc<str>>,
    error: Option<String>,
}

pub struct Session {
    pub run_id: String,
    pub scenario_id: Option<String>,
    pub profile_name: String,
    /// Virtual seconds per wall second; 0 releases events as fast as possible.
    pub pacing: f64,
    inner: Mutex<Inner>,
    changed: watch::Sender<u64>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: RunState,
    pub progress: Progress,
    pub report_json: Option<Arc<str>>,
    pub error: Option<String>,
}

impl Session {
    pub fn new(
        run_id: String,
        scenario_id: Option<String>,
        profile_name: String,
        pacing: f64,
        total: u64,
    ) -> Self {
        let (changed, _) = watch::channel(0);
        Session {
            run_id,
            scenario_id,
            profile_name,
            pacing,
            inner: Mutex::new(Inner {
                state: RunState::Pending,
                progress: Progress {
                    deposited: 0,
                    total,
                },
                items: Vec::new(),
                report_json: None,
                error: None,
            }),
            changed,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("session lock")
    }

    fn bump(&self) {
        self.changed.send_modify(|v| *v += 1);
    }

    pub fn snapshot(&self) -> Snapshot {
        let inner = self.lock();
        Snapshot {
            state: inner.state,
            progress: inner.progress,
            report_json: inner.report_json.clone(),
            error: inner.error.clone(),
        }
    }

    pub fn state(&self) -> RunState {
        self.lock().state
    }

    pub fn transition(&self, to: RunState) -> Result<(), IllegalTransition> {
        let mut inner = self.lock();
        if !inner.state.can_become(to) {
            return Err(IllegalTransition {
                from: inner.state,
                to,
            });
        }
        inner.state = to;
        drop(inner);
        self.bump();
        Ok(())
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.changed.subscribe()
    }

    /// Item at stream position `index`, or whether the stream has ended.
    pub fn item(&self, index: usize) -> Result<StreamItem, bool> {
        let inner = self.lock();
        match inner.items.get(index) {
            Some(item) => Ok(item.clone()),
            None => Err(inner.state.is_terminal()),
        }
    }

    fn publish(&self, event: &'static str, data: String, deposited: bool) {
        let mut inner = self.lock();
        let id = inner.items.len();
        inner.items.push(StreamItem { id, event, data });
        if deposited {
            inner.progress.deposited += 1;
        }
        drop(inner);
        self.bump();
    }

    /// Moves to a terminal state, waiting out a pause that races in.
    async fn finish(
        &self,
        state: RunState,
        report_json: Option<Arc<str>>,
        error: Option<String>,
        data: String,
    ) {
        loop {
            self.wait_while_paused().await;
            if self.try_finish(state, &report_json, &error, &data) {
                return;
            }
        }
    }

    /// Applies the terminal state unless a pause slipped in first.
    fn try_finish(
        &self,
        state: RunState,
        report_json: &Option<Arc<str>>,
        error: &Option<String>,
        data: &str,
    ) -> bool {
        let mut inner = self.lock();
        if inner.state == RunState::Paused {
            return false;
        }
        debug_assert!(inner.state.can_become(state));
        inner.state = state;
        inner.report_json = report_json.clone();
        inner.error = error.clone();
        let id = inner.items.len();
        let event = if state == RunState::Completed {
            "summary"
        } else {
            "failed"
        };
        inner.items.push(StreamItem {
            id,
            event,
            data: data.to_owned(),
        });
        drop(inner);
        self.bump();
        true
    }

    async fn wait_while_paused(&self) {
        let mut rx = self.subscribe();
        loop {
            rx.borrow_and_update();
            if self.state() != RunState::Paused {
                return;
            }
            if rx.changed().await.is_err() {
                return;
            }
        }
    }
}

enum Pending {
    Repetition(u32),
    Event(SimEvent),
}

/// Runs the simulation off the async executor, then releases its events at
/// the session's pacing, persisting the report once everything is out.
pub async fn drive(
    session: Arc<Session>,
    scenario: ScenarioConfig,
    model: PipelineModel,
    classifier: Box<dyn Classifier>,
    store: Arc<Mutex<Store>>,
) {
    if session.transition(RunState::Running).is_err() {
        return;
    }
    let sim_scenario = scenario.clone();
    let outcome =
        tokio::task::spawn_blocking(move || simulate(&sim_scenario, &model, classifier.as_ref()))
            .await;
    let sim = match outcome {
        Ok(Ok(sim)) => sim,
        Ok(Err(e)) => return fail(&session, e.to_string()).await,
        Err(e) => return fail(&session, format!("simulation task: {e}")).await,
    };

    // empty repetitions get no marker, so an empty run streams only its summary
    let queue = sim
        .traces
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.events.is_empty())
        .flat_map(|(i, trace)| {
            std::iter::once(Pending::Repetition(i as u32))
                .chain(trace.events.iter().cloned().map(Pending::Event))
        });
    let mut last_time = 0.0;
    for item in queue {
        match item {
            Pending::Repetition(index) => {
                last_time = 0.0;
                session.wait_while_paused().await;
                let data = serde_json::json!({ "repetition": index, "garment_count": scenario.garment_count });
                session.publish("repetition", data.to_string(), false);
            }
            Pending::Event(event) => {
                if session.pacing > 0.0 && event.time > last_time {
                    let wait = (event.time - last_time) / session.pacing;
                    tokio::time::sleep(Duration::from_secs_f64(wait)).await;
                }
                last_time = event.time;
                session.wait_while_paused().await;
                session.publish(
                    "sim",
                    event.to_json_line(),
                    event.kind == EventKind::Deposited,
                );
            }
        }
    }

    let report_json: Arc<str> = sim.report.to_json().into();
    let record = RunRecord {
        run_id: session.run_id.clone(),
        created_at: Utc::now(),
        scenario,
        report: sim.report.clone(),
        profile_name: session.profile_name.clone(),
    };
    let saved = store.lock().expect("store lock").save_run(record);
    if let Err(e) = saved {
        return fail(&session, format!("persisting run: {e}")).await;
    }
    let data = serde_json::json!({
        "run_id": session.run_id,
        "state": RunState::Completed,
        "profile_name": session.profile_name,
        "summary": sim.report.summary,
    });
    session
        .finish(
            RunState::Completed,
            Some(report_json),
            None,
            data.to_string(),
        )
        .await;
}

async fn fail(session: &Session, error: String) {
    log::error!("run {} failed: {error}", session.run_id);
    let data =
        serde_json::json!({ "run_id": session.run_id, "state": RunState::Failed, "error": error });
    session
        .finish(RunState::Failed, None, Some(error), data.to_string())
        .await;
}
