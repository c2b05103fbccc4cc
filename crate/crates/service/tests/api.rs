use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;
use trial_service::{router, store, Store};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 24).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

fn five_fu(policy: Value) -> Value {
    json!({ "x_min": 140.0, "x_max": 425.0, "q": 0.2, "p": 1.0 / 3.0, "omega": 0.25, "n": 24, "policy": policy })
}

async fn new_session(app: &Router, policy: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(five_fu(policy))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn app() -> Router {
    router(Arc::new(Store::in_memory()))
}

#[tokio::test]
async fn healthz_reports_ok() {
    let (status, v) = call(&app(), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn five_fu_walkthrough() {
    let app = app();
    let id = new_session(&app, json!("ewoc")).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    let first = before["next_dose"].as_f64().unwrap();
    assert!((140.0..=425.0).contains(&first));
    let (status, after) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 140.0, "y": 0 }))).await;
    assert_eq!(status, StatusCode::OK);
    let next = after["next_dose"].as_f64().unwrap();
    assert!(next >= first, "{next} < {first}");
    for key in ["next_dose", "myopic_dose", "learning_dose", "epsilon", "eta_mean", "eta_sd", "what_if_toxic", "what_if_nontoxic"] {
        assert!(after.get(key).is_some(), "missing {key}");
    }
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    for key in ["x_min", "x_max", "q", "p", "omega", "n", "policy"] {
        assert!(view.get(key).is_some(), "missing {key}");
    }
    assert_eq!(view["outcomes"][0]["dose"], 140.0);
    assert_eq!(view["outcomes"][0]["y"], 0);
}

#[tokio::test]
async fn what_if_matches_round_trip() {
    let app = app();
    let id = new_session(&app, json!("hybrid")).await;
    let (_, rec) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert!(rec["epsilon"].as_f64().is_some());
    assert!(rec["learning_dose"].as_f64().is_some());
    let dose = rec["next_dose"].as_f64().unwrap();
    let (_, state_before) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let (_, again) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    let (_, state_after) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(state_before, state_after);
    assert_eq!(rec, again);
    let (_, after) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": dose, "y": 1 }))).await;
    assert_eq!(after["next_dose"], rec["what_if_toxic"]);
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let app = app();
    let mut bad = five_fu(json!("ewoc"));
    bad["q"] = json!(0.4);
    let (status, v) = call(&app, "POST", "/sessions", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("q"));
    let (status, _) = call(&app, "POST", "/sessions", Some(five_fu(json!("nonsense")))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let id = new_session(&app, json!("crm")).await;
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 500.0, "y": 0 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 200.0, "y": 2 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "GET", "/sessions/missing/recommendation", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn complete_trial_refuses_more_outcomes() {
    let app = app();
    let (status, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "x_min": 0.0, "x_max": 1.0, "q": 0.2, "p": 0.3, "omega": 0.25, "n": 2, "policy": "ewoc" })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap();
    for y in [0, 1] {
        let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 0.2, "y": y }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, rec) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(rec["complete"], true);
    assert!(rec["next_dose"].is_null());
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 0.2, "y": 0 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn posterior_density_integrates_to_one() {
    let app = app();
    let id = new_session(&app, json!({ "policy": "crm" })).await;
    call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 200.0, "y": true }))).await;
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/posterior"), None).await;
    assert_eq!(status, StatusCode::OK);
    let samples = v["samples"].as_array().unwrap();
    let width = 285.0 / samples.len() as f64;
    let total: f64 = samples.iter().map(|s| s["density"].as_f64().unwrap() * width).sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
    assert!(samples.iter().all(|s| (140.0..=425.0).contains(&s["eta"].as_f64().unwrap())));
}

#[tokio::test]
async fn three_plus_three_stop_is_reported() {
    let app = app();
    let id = new_session(&app, json!("3p3")).await;
    for _ in 0..3 {
        let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 140.0, "y": 1 }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, rec) = call(&app, "GET", &format!("/sessions/{id}/recommendation"), None).await;
    assert_eq!(rec["stopped"], true);
    assert_eq!(rec["declared_mtd"], 140.0);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 140.0, "y": 0 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn log_replay_restores_sessions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let live = Arc::new(Store::open(&path).unwrap());
    let app = router(live.clone());
    let a = new_session(&app, json!("ewoc")).await;
    let b = new_session(&app, json!("crm")).await;
    for (id, dose, y) in [(&a, 150.0, 0), (&b, 190.5, 1), (&a, 201.25, 0), (&a, 260.0, 1)] {
        let (status, _) = call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": dose, "y": y }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let expected = live.snapshot().await.unwrap();
    let replayed = store::replay(&store::read_log(&path).unwrap()).unwrap();
    assert_eq!(expected, replayed);
    let reopened = Arc::new(Store::open(&path).unwrap());
    assert_eq!(reopened.snapshot().await.unwrap(), expected);
    let app2 = router(reopened);
    let (_, r1) = call(&app, "GET", &format!("/sessions/{a}/recommendation"), None).await;
    let (_, r2) = call(&app2, "GET", &format!("/sessions/{a}/recommendation"), None).await;
    assert_eq!(r1, r2);
}

#[tokio::test]
async fn concurrent_outcomes_on_one_session_are_serialized() {
    let app = app();
    let id = new_session(&app, json!("ewoc")).await;
    let mut tasks = Vec::new();
    for i in 0..8 {
        let (app, id) = (app.clone(), id.clone());
        tasks.push(tokio::spawn(async move {
            call(&app, "POST", &format!("/sessions/{id}/outcomes"), Some(json!({ "dose": 150.0 + i as f64, "y": 0 }))).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["patients"], 8);
}
