use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use nwhead::data::{generate_blobs, split, Split};
use nwhead::report::{evaluate, influence_report, predict_view, EmbeddedDataset};
use nwhead::trainer::{train, TrainConfig};
use nwhead::{loo_predict, nw_predict, InferenceMode};
use nwhead_inspector::{router, AppState, Workspace};
use serde_json::{json, Value};
use tower::ServiceExt;

fn workspace() -> Workspace {
    let data = split(&generate_blobs(3, 40, 2, 3.0, 1.2, 5).unwrap(), [0.5, 0.25, 0.25], 5).unwrap();
    let cfg = TrainConfig {
        hidden: vec![8],
        embed_dim: 2,
        steps: 60,
        lr: 0.01,
        seed: 2,
        ..TrainConfig::default()
    };
    let (model, _) = train(&data.subset(Split::Train), &[], 3, &cfg).unwrap();
    Workspace::new(model, data).unwrap()
}

fn app() -> (Router, AppState) {
    let state = AppState::with_workspace(workspace(), 1.0);
    (router(state.clone(), None), state)
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> Value {
    let (status, body) = send(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn probs(v: &Value) -> Vec<f64> {
    v["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect()
}

fn first_test_id(state: &AppState) -> String {
    state.workspace().unwrap().data.require(Split::Test).unwrap()[0].id.clone()
}

#[tokio::test]
async fn unavailable_until_loaded() {
    let state = AppState::empty(1.0);
    let app = router(state.clone(), None);
    for uri in ["/api/summary", "/api/predict/x", "/api/reliability", "/api/queries", "/api/exclusions"] {
        assert_eq!(send(&app, "GET", uri, None).await.0, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    state.install(workspace());
    assert_eq!(send(&app, "GET", "/api/summary", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn summary_tracks_exclusions() {
    let (app, state) = app();
    let fresh = get_json(&app, "/api/summary").await;
    assert_eq!(fresh["exclusion_count"], 0);
    assert_eq!(fresh["class_count"], 3);
    assert_eq!(fresh["input_dim"], 2);
    assert_eq!(fresh["split_sizes"]["test"], 30);

    let id = state.workspace().unwrap().base.entries()[0].id.clone();
    let (status, _) = send(&app, "POST", "/api/exclusions", Some(json!({ "add": [id] }))).await;
    assert_eq!(status, StatusCode::OK);
    let after = get_json(&app, "/api/summary").await;
    assert_eq!(after["exclusion_count"], 1);
    assert_eq!(after["support_size"], fresh["support_size"].as_u64().unwrap() - 1);

    assert_eq!(send(&app, "DELETE", "/api/exclusions", None).await.0, StatusCode::OK);
    assert_eq!(get_json(&app, "/api/summary").await["exclusion_count"], 0);
}

#[tokio::test]
async fn predict_matches_library_and_weights_sum_to_one() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    let id = first_test_id(&state);
    let n = ws.base.len();
    let (status, body) = send(&app, "GET", &format!("/api/predict/{id}?top={n}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, q) = ws.data.find(&id).unwrap();
    let expected = serde_json::to_vec(&predict_view(q, &ws.base, 1.0, n).unwrap()).unwrap();
    assert_eq!(body, expected);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let total: f64 = v["top_support"].as_array().unwrap().iter().map(|e| e["weight"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    let clamped = get_json(&app, &format!("/api/predict/{id}?top={}", n + 50)).await;
    assert_eq!(clamped["top_support"].as_array().unwrap().len(), n);
    assert_eq!(clamped["warnings"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn predict_rejects_unknown_and_non_test_ids() {
    let (app, state) = app();
    assert_eq!(send(&app, "GET", "/api/predict/nope", None).await.0, StatusCode::NOT_FOUND);
    let train_id = state.workspace().unwrap().base.entries()[0].id.clone();
    assert_eq!(send(&app, "GET", &format!("/api/predict/{train_id}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn single_exclusion_equals_leave_one_out() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    let test = ws.data.require(Split::Test).unwrap();
    for q in test.iter().take(5) {
        let pred = nw_predict(&q.id, &q.features, &ws.base, 1.0).unwrap();
        for s in [0, 7, ws.base.len() - 1] {
            let sid = ws.base.entries()[s].id.clone();
            send(&app, "POST", "/api/exclusions", Some(json!({ "add": [sid] }))).await;
            let served = probs(&get_json(&app, &format!("/api/predict/{}", q.id)).await);
            let closed = loo_predict(&pred, &ws.base, s).unwrap();
            for (a, b) in served.iter().zip(&closed) {
                assert!((a - b).abs() <= 1e-12, "{} without {sid}: {a} vs {b}", q.id);
            }
            send(&app, "DELETE", "/api/exclusions", None).await;
        }
    }
}

#[tokio::test]
async fn zero_weight_exclusion_leaves_probs_unchanged() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    let id = first_test_id(&state);
    send(&app, "POST", "/api/tau", Some(json!({ "tau": 0.01 }))).await;
    let n = ws.base.len();
    let before = get_json(&app, &format!("/api/predict/{id}?top={n}")).await;
    let farthest = before["top_support"].as_array().unwrap().last().unwrap().clone();
    assert!(farthest["weight"].as_f64().unwrap() < 1e-13);
    send(&app, "POST", "/api/exclusions", Some(json!({ "add": [farthest["id"]] }))).await;
    let after = get_json(&app, &format!("/api/predict/{id}")).await;
    for (a, b) in probs(&before).iter().zip(probs(&after)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[tokio::test]
async fn add_then_remove_restores_baseline_bytes() {
    let (app, state) = app();
    let id = first_test_id(&state);
    let uri = format!("/api/predict/{id}?top=5");
    let baseline = send(&app, "GET", &uri, None).await.1;
    let sid = state.workspace().unwrap().base.entries()[3].id.clone();
    send(&app, "POST", "/api/exclusions", Some(json!({ "add": [sid.clone()] }))).await;
    assert_ne!(send(&app, "GET", &uri, None).await.1, baseline);
    send(&app, "POST", "/api/exclusions", Some(json!({ "remove": [sid] }))).await;
    assert_eq!(send(&app, "GET", &uri, None).await.1, baseline);
}

#[tokio::test]
async fn duplicate_adds_are_idempotent() {
    let (app, state) = app();
    let sid = state.workspace().unwrap().base.entries()[2].id.clone();
    let body = json!({ "add": [sid.clone(), sid.clone()] });
    let (a, b) = tokio::join!(
        send(&app, "POST", "/api/exclusions", Some(body.clone())),
        send(&app, "POST", "/api/exclusions", Some(body)),
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(b.0, StatusCode::OK);
    let view = get_json(&app, "/api/exclusions").await;
    assert_eq!(view["exclusion_count"], 1);
    assert_eq!(view["exclusions"], json!([sid]));
}

#[tokio::test]
async fn exclusion_errors() {
    let (app, state) = app();
    let (status, body) = send(&app, "POST", "/api/exclusions", Some(json!({ "add": ["ghost"] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8(body).unwrap().contains("ghost"));

    let all: Vec<String> = state.workspace().unwrap().base.entries().iter().map(|e| e.id.clone()).collect();
    let (status, _) = send(&app, "POST", "/api/exclusions", Some(json!({ "add": all }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(get_json(&app, "/api/exclusions").await["exclusion_count"], 0);

    let (status, _) = send(&app, "POST", "/api/tau", Some(json!({ "tau": -1.0 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn influence_matches_library_byte_for_byte() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    for q in ws.data.require(Split::Test).unwrap().iter().take(5) {
        let (status, body) = send(&app, "GET", &format!("/api/influence/{}?top=4", q.id), None).await;
        assert_eq!(status, StatusCode::OK);
        let expected = serde_json::to_vec(&influence_report(q, &ws.base, 1.0, 4).unwrap()).unwrap();
        assert_eq!(body, expected);
        let v: Value = serde_json::from_slice(&body).unwrap();
        for r in v["helpful"].as_array().unwrap() {
            assert_eq!(r["same_class"], true);
        }
        for r in v["harmful"].as_array().unwrap() {
            assert_eq!(r["same_class"], false);
            assert!(r["influence"].as_f64().unwrap() <= 0.0);
        }
    }
}

#[tokio::test]
async fn influence_sole_member_is_inf_and_exhausted_class_conflicts() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    let q = ws.data.require(Split::Test).unwrap()[0].clone();
    let same: Vec<String> = ws
        .base
        .entries()
        .iter()
        .filter(|e| e.label == q.label)
        .map(|e| e.id.clone())
        .collect();
    send(&app, "POST", "/api/exclusions", Some(json!({ "add": same[1..] }))).await;
    let (status, body) = send(&app, "GET", &format!("/api/influence/{}", q.id), None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["helpful"][0]["influence"], "inf");
    assert_eq!(v["helpful"][0]["support_id"], same[0]);

    send(&app, "POST", "/api/exclusions", Some(json!({ "add": [same[0].clone()] }))).await;
    let (status, _) = send(&app, "GET", &format!("/api/influence/{}", q.id), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    // Prediction still works; the class simply has zero mass.
    let p = get_json(&app, &format!("/api/predict/{}", q.id)).await;
    assert_eq!(probs(&p)[q.label], 0.0);
}

#[tokio::test]
async fn reliability_matches_eval_report() {
    let (app, state) = app();
    let ws = state.workspace().unwrap();
    assert_eq!(send(&app, "GET", "/api/reliability?bins=0", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, "GET", "/api/reliability?bins=-3", None).await.0, StatusCode::BAD_REQUEST);
    for bins in [1, 10, 15] {
        let (status, body) = send(&app, "GET", &format!("/api/reliability?bins={bins}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let report = evaluate(&ws.model, &ws.data, Split::Test, &InferenceMode::Full, 1.0, bins).unwrap();
        assert_eq!(body, serde_json::to_vec(&report.reliability).unwrap());
        let v: Value = serde_json::from_slice(&body).unwrap();
        let counts: u64 = v["bins"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
        assert_eq!(counts, 30);
        let ece = v["ece"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ece));
    }
    let default = get_json(&app, "/api/reliability").await;
    assert_eq!(default["bin_count"], 15);
}

#[tokio::test]
async fn queries_sort_and_paginate() {
    let (app, _) = app();
    let all = get_json(&app, "/api/queries?limit=1000").await;
    assert_eq!(all["total"], 30);
    let items = all["items"].as_array().unwrap();
    let conf: Vec<f64> = items.iter().map(|r| r["confidence"].as_f64().unwrap()).collect();
    assert!(conf.windows(2).all(|w| w[0] <= w[1]));

    let page = get_json(&app, "/api/queries?offset=10&limit=5").await;
    assert_eq!(page["items"].as_array().unwrap().as_slice(), &items[10..15]);
    let desc = get_json(&app, "/api/queries?order=desc&limit=1").await;
    assert_eq!(desc["items"][0], items[29]);
    let by_id = get_json(&app, "/api/queries?sort=id&limit=1000").await;
    let ids: Vec<&str> = by_id["items"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] <= w[1]));
}

#[tokio::test]
async fn embedded_dataset_is_reused() {
    let (_, state) = app();
    let ws = state.workspace().unwrap();
    let fresh = EmbeddedDataset::new(&ws.model, ws.data.raw.clone()).unwrap();
    assert_eq!(fresh.embedded, ws.data.embedded);
}
