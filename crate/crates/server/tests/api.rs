use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use loomline_core::classification::{default_profile, StochasticClassifier, DEFAULT_PROFILE};
use loomline_core::repository::Store;
use loomline_core::{run_scenario, ScenarioConfig};
use loomline_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(Store::in_memory()))
}

async fn send(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn send_json(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body.map(|b| b.to_string())).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn create_scenario(app: &Router, cfg: &ScenarioConfig) -> String {
    let (status, body) = send_json(app, Method::POST, "/api/scenarios", Some(json!(cfg))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["scenario_id"].as_str().unwrap().to_owned()
}

async fn start_run(app: &Router, scenario_id: &str, pacing: f64) -> String {
    let req =
        json!({ "scenario_id": scenario_id, "profile_name": DEFAULT_PROFILE, "pacing": pacing });
    let (status, body) = send_json(app, Method::POST, "/api/runs", Some(req)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    assert_eq!(body["state"], "pending");
    body["run_id"].as_str().unwrap().to_owned()
}

async fn wait_for(app: &Router, run_id: &str, state: &str) -> Value {
    for _ in 0..500 {
        let (status, body) =
            send_json(app, Method::GET, &format!("/api/runs/{run_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["state"] == state {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {run_id} never reached {state}");
}

#[derive(Debug, Clone, PartialEq)]
struct SseItem {
    id: Option<usize>,
    event: String,
    data: String,
}

fn parse_sse(text: &str) -> Vec<SseItem> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut item = SseItem {
                id: None,
                event: "message".into(),
                data: String::new(),
            };
            let mut any = false;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    item.id = Some(v.trim().parse().unwrap());
                } else if let Some(v) = line.strip_prefix("event:") {
                    item.event = v.trim().to_owned();
                } else if let Some(v) = line.strip_prefix("data:") {
                    item.data.push_str(v.strip_prefix(' ').unwrap_or(v));
                    any = true;
                }
            }
            any.then_some(item)
        })
        .collect()
}

async fn events(app: &Router, uri: &str) -> Vec<SseItem> {
    let req = Request::get(uri).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    parse_sse(std::str::from_utf8(&bytes).unwrap())
}

#[tokio::test]
async fn table_iv_scenario_is_accepted() {
    let app = app();
    let cfg = ScenarioConfig::reference(10);
    let (status, body) = send_json(&app, Method::POST, "/api/scenarios", Some(json!(cfg))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["scenario"]["camera_capture_time"], 3);
    let id = body["scenario_id"].as_str().unwrap();
    let (status, fetched) =
        send_json(&app, Method::GET, &format!("/api/scenarios/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched, json!(cfg));
}

#[tokio::test]
async fn malformed_json_is_400() {
    let app = app();
    let (status, _) = send(
        &app,
        Method::POST,
        "/api/scenarios",
        Some("{\"conveyor_speed\": 5,".into()),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, "/api/runs", Some("not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn out_of_range_fields_are_422_with_field_list() {
    let app = app();
    let mut cfg = json!(ScenarioConfig::reference(10));
    cfg["camera_capture_time"] = json!(2);
    cfg["laser_speed"] = json!(9);
    let (status, body) = send_json(&app, Method::POST, "/api/scenarios", Some(cfg)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<&str> = body["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["field"].as_str().unwrap())
        .collect();
    assert!(fields.contains(&"camera_capture_time"), "{fields:?}");
    assert!(fields.contains(&"laser_speed"), "{fields:?}");

    // well-formed but wrongly typed
    let (status, _) = send_json(
        &app,
        Method::POST,
        "/api/scenarios",
        Some(json!({ "conveyor_speed": "fast" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn bad_run_requests() {
    let app = app();
    let (status, _) = send_json(
        &app,
        Method::POST,
        "/api/runs",
        Some(json!({ "scenario_id": "scn-nope" })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = create_scenario(&app, &ScenarioConfig::reference(1)).await;
    let req = json!({ "scenario_id": id, "profile_name": "no-such-net" });
    let (status, body) = send_json(&app, Method::POST, "/api/runs", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["violations"][0]["field"], "profile_name");

    let req = json!({ "scenario_id": id, "pacing": -1.0 });
    let (status, body) = send_json(&app, Method::POST, "/api/runs", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["violations"][0]["field"], "pacing");

    let (status, _) = send_json(&app, Method::GET, "/api/runs/000001-dead", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send_json(&app, Method::POST, "/api/runs/000001-dead/pause", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pausing_a_completed_run_is_409() {
    let app = app();
    let id = create_scenario(&app, &ScenarioConfig::reference(10)).await;
    let run = start_run(&app, &id, 0.0).await;
    wait_for(&app, &run, "completed").await;
    let (status, _) = send_json(&app, Method::POST, &format!("/api/runs/{run}/pause"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send_json(&app, Method::POST, &format!("/api/runs/{run}/resume"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn empty_run_streams_only_the_summary() {
    let app = app();
    let id = create_scenario(&app, &ScenarioConfig::reference(0)).await;
    let run = start_run(&app, &id, 0.0).await;
    let items = events(&app, &format!("/api/runs/{run}/events")).await;
    assert_eq!(items.len(), 1, "{items:?}");
    assert_eq!(items[0].event, "summary");
    let data: Value = serde_json::from_str(&items[0].data).unwrap();
    assert_eq!(data["state"], "completed");
    assert_eq!(data["summary"]["green_efficiency"], 1.0);
}

#[tokio::test]
async fn stream_matches_trace_and_resumes_from_cursor() {
    let app = app();
    let mut cfg = ScenarioConfig::reference(5);
    cfg.repetitions = 2;
    let id = create_scenario(&app, &cfg).await;
    let run = start_run(&app, &id, 0.0).await;
    let all = events(&app, &format!("/api/runs/{run}/events")).await;

    let ids: Vec<usize> = all.iter().map(|i| i.id.unwrap()).collect();
    assert_eq!(ids, (0..all.len()).collect::<Vec<_>>());
    assert_eq!(all.last().unwrap().event, "summary");

    // the sim events are exactly the kernel traces, in order
    let profile = default_profile(DEFAULT_PROFILE).unwrap();
    let sim = loomline_core::simulate(
        &cfg,
        &Default::default(),
        &StochasticClassifier::new(profile),
    )
    .unwrap();
    let expected: Vec<String> = sim
        .traces
        .iter()
        .flat_map(|t| t.events.iter().map(|e| e.to_json_line()))
        .collect();
    let streamed: Vec<String> = all
        .iter()
        .filter(|i| i.event == "sim")
        .map(|i| i.data.clone())
        .collect();
    assert_eq!(streamed, expected);
    assert_eq!(all.iter().filter(|i| i.event == "repetition").count(), 2);

    // resume via query cursor and via Last-Event-ID
    let cut = all.len() / 2;
    let tail = events(&app, &format!("/api/runs/{run}/events?cursor={cut}")).await;
    assert_eq!(tail, all[cut + 1..]);
    let req = Request::get(format!("/api/runs/{run}/events"))
        .header("last-event-id", cut.to_string())
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(
        parse_sse(std::str::from_utf8(&bytes).unwrap()),
        all[cut + 1..]
    );
}

#[tokio::test]
async fn api_report_equals_direct_run_bytes() {
    let app = app();
    let cfg = ScenarioConfig::reference(12);
    let id = create_scenario(&app, &cfg).await;
    let run = start_run(&app, &id, 0.0).await;
    let view = wait_for(&app, &run, "completed").await;
    assert_eq!(view["progress"]["deposited"], 12 * 10);
    assert_eq!(view["progress"]["total"], 12 * 10);
    assert_eq!(view["scenario"], json!(cfg));

    let (status, bytes) = send(&app, Method::GET, &format!("/api/runs/{run}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    let profile = default_profile(DEFAULT_PROFILE).unwrap();
    let direct = run_scenario(&cfg, &StochasticClassifier::new(profile))
        .unwrap()
        .to_json();
    assert_eq!(String::from_utf8(bytes).unwrap(), direct);
    assert_eq!(
        view["report"],
        serde_json::from_str::<Value>(&direct).unwrap()
    );

    let (status, list) = send_json(&app, Method::GET, "/api/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["run_id"], run.as_str());
    assert_eq!(list[0]["garment_count"], 12);
    let (_, filtered) = send_json(&app, Method::GET, "/api/runs?garment_count=10", None).await;
    assert_eq!(filtered, json!([]));
}

#[tokio::test]
async fn paced_run_can_be_paused_and_resumed() {
    let app = app();
    let mut cfg = ScenarioConfig::reference(3);
    cfg.repetitions = 1;
    let id = create_scenario(&app, &cfg).await;
    // about 25 virtual seconds per garment at 200x lasts a few tenths of a second
    let run = start_run(&app, &id, 200.0).await;
    wait_for(&app, &run, "running").await;
    let (status, body) =
        send_json(&app, Method::POST, &format!("/api/runs/{run}/pause"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"], "paused");
    let before = wait_for(&app, &run, "paused").await["progress"]["deposited"].clone();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let still = wait_for(&app, &run, "paused").await;
    assert_eq!(still["progress"]["deposited"], before);
    let (status, _) = send_json(&app, Method::POST, &format!("/api/runs/{run}/pause"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send_json(&app, Method::POST, &format!("/api/runs/{run}/resume"), None).await;
    assert_eq!(status, StatusCode::OK);
    let done = wait_for(&app, &run, "completed").await;
    assert_eq!(done["progress"]["deposited"], 3);
}

#[tokio::test]
async fn profiles_list_defaults() {
    let app = app();
    let (status, body) = send_json(&app, Method::GET, "/api/profiles", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "EfficientNet-B6",
            "ResNest-101",
            "MediumCustom",
            "SimpleCustom"
        ]
    );
}

#[tokio::test]
async fn fresh_store_lists_no_runs() {
    let (status, body) = send_json(&app(), Method::GET, "/api/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
}
