use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tmcnn::classifier::{CnnModel, PATCH_SIDE};
use tmcnn::dataset::read_manifest;
use tmcnn::pipeline::DetectionSet;
use tmcnn::synth::{generate_labyrinth, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::{TemplateBank, TemplateConfig};
use tmcnn_annotate::project::{read_audit, replay, DETECTION_DIR};
use tmcnn_annotate::{router, AppState, Project, ProjectConfig};
use tower::ServiceExt;

fn bank() -> Arc<TemplateBank> {
    static BANK: OnceLock<Arc<TemplateBank>> = OnceLock::new();
    BANK.get_or_init(|| Arc::new(build_bank(&TemplateConfig::default()).unwrap()))
        .clone()
}

/// A project with two small labyrinth images.
fn project(dir: &std::path::Path, with_model: bool) -> Router {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for (name, seed) in [("a", 1), ("b", 2)] {
        let cfg = SynthConfig {
            width: 96,
            height: 80,
            seed,
            ..SynthConfig::default()
        };
        let lab = generate_labyrinth(&cfg).unwrap();
        lab.image.save_png(dir.join(format!("images/{name}.png"))).unwrap();
    }
    let config = ProjectConfig {
        bank: bank(),
        model: with_model.then(|| Arc::new(CnnModel::<f32>::init(3, PATCH_SIDE).unwrap())),
        default_threshold: 0.9,
        resize: None,
        box_side: 21,
    };
    router(AppState::new(Project::open(dir, config).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, value)
}

#[tokio::test]
async fn lists_registered_images() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, body) = call(&app, Method::GET, "/images", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body.as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(body[0]["status"], "unreviewed");
}

#[tokio::test]
async fn serves_preprocessed_png() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let resp = app
        .clone()
        .oneshot(Request::get("/images/a").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let img = tmcnn::image::decode_png(&bytes).unwrap();
    assert_eq!(img.dims(), (96, 80));
}

#[tokio::test]
async fn unknown_ids_are_404_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, body) = call(&app, Method::GET, "/images/nope/detections", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
    assert!(body["detail"].as_str().unwrap().contains("nope"));
    let (status, _) = call(&app, Method::PATCH, "/images/a/detections/999", Some(json!({"label": "junction"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_bodies_are_422_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, body) = call(&app, Method::POST, "/images/a/detections", Some(json!({"x": 1, "y": 2, "label": "blob"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "invalid");
    let (status, _) = call(&app, Method::POST, "/images/a/detections", Some(json!({"x": 500, "y": 2, "label": "junction"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::PATCH, "/images/a/detections/notanumber", Some(json!({"label": "junction"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, "/images/a/propose", Some(json!({"threshold": 1.5}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn use_model_without_weights_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, body) = call(&app, Method::POST, "/images/a/propose", Some(json!({"use_model": true}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["detail"].as_str().unwrap().contains("model"));
}

#[tokio::test]
async fn review_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), true);

    let (status, set) = call(&app, Method::POST, "/images/a/propose", Some(json!({"threshold": 0.9}))).await;
    assert_eq!(status, StatusCode::OK);
    let proposed = set["detections"].as_array().unwrap().clone();
    assert!(!proposed.is_empty(), "a labyrinth crop yields candidates");
    assert!(proposed.iter().all(|d| d["source"] == "tm" && d["score"].is_number()));

    // Relabel the first machine detection.
    let first = proposed[0]["id"].as_u64().unwrap();
    let (status, d) = call(&app, Method::PATCH, &format!("/images/a/detections/{first}"), Some(json!({"label": "terminal"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(d["label"], "terminal");
    assert_eq!(d["source"], "human");

    // Add a missed defect by hand.
    let (status, added) = call(&app, Method::POST, "/images/a/detections", Some(json!({"x": 3, "y": 4, "label": "junction"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(added["score"].is_null());
    assert!(added["tm_label"].is_null());
    let added_id = added["id"].as_u64().unwrap();
    assert!(proposed.iter().all(|d| d["id"].as_u64().unwrap() != added_id));

    // Delete a machine detection (gone) and the hand-added one (kept as false).
    let machine = proposed.last().unwrap()["id"].as_u64().unwrap();
    if machine != first {
        let (status, _) = call(&app, Method::DELETE, &format!("/images/a/detections/{machine}"), None).await;
        assert_eq!(status, StatusCode::NO_CONTENT);
    }
    let (status, kept) = call(&app, Method::DELETE, &format!("/images/a/detections/{added_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kept["label"], "false");

    // Re-proposing with the model keeps every human detection and never reuses ids.
    let (_, before) = call(&app, Method::GET, "/images/a/detections", None).await;
    let (status, after) = call(&app, Method::POST, "/images/a/propose", Some(json!({"threshold": 0.92, "use_model": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let after_dets = after["detections"].as_array().unwrap();
    for human in before["detections"].as_array().unwrap().iter().filter(|d| d["source"] == "human") {
        assert!(after_dets.contains(human), "lost human detection {human}");
    }
    let max_before = before["detections"].as_array().unwrap().iter().map(|d| d["id"].as_u64().unwrap()).max().unwrap();
    for d in after_dets.iter().filter(|d| d["source"] != "human") {
        assert!(d["id"].as_u64().unwrap() > max_before);
        assert!(d["source"] == "cnn");
    }

    // The stored set, the served set and the audit replay agree.
    let stored = DetectionSet::load(dir.path().join(DETECTION_DIR).join("a.json")).unwrap();
    stored.validate().unwrap();
    let served: DetectionSet = serde_json::from_value(after.clone()).unwrap();
    assert_eq!(stored, served);
    let mut replayed = replay(dir.path(), "a").unwrap();
    let mut current = stored.detections.clone();
    replayed.sort_by_key(|d| d.id);
    current.sort_by_key(|d| d.id);
    assert_eq!(replayed, current);
    assert!(read_audit(dir.path()).unwrap().len() >= 5);
}

#[tokio::test]
async fn export_requires_done_images() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, body) = call(&app, Method::POST, "/export", Some(json!({"out_dir": "set"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
    let (status, _) = call(&app, Method::POST, "/export", Some(json!({"out_dir": "../escape"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn export_writes_reviewed_patches() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    call(&app, Method::POST, "/images/a/propose", Some(json!({}))).await;
    call(&app, Method::POST, "/images/b/propose", Some(json!({}))).await;
    let (status, rec) = call(&app, Method::POST, "/images/a/status", Some(json!({"status": "done"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rec["status"], "done");

    let (_, set_a) = call(&app, Method::GET, "/images/a/detections", None).await;
    let n_a = set_a["detections"].as_array().unwrap().len();
    let (status, manifest) = call(&app, Method::POST, "/export", Some(json!({"out_dir": "out/set"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(manifest["entries"].as_array().unwrap().len(), n_a, "only the done image is exported");
    let on_disk = read_manifest(dir.path().join("out/set")).unwrap();
    on_disk.validate().unwrap();
    assert_eq!(on_disk.entries.len(), n_a);
    assert!(on_disk.entries.iter().all(|e| e.image == "a"));
}

#[tokio::test]
async fn mining_appends_false_points_below_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let app = project(dir.path(), false);
    let (status, _) = call(&app, Method::POST, "/images/a/mine", Some(json!({"t_low": 0.95, "count": 5}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "t_low must lie below the proposal threshold");

    call(&app, Method::POST, "/images/a/propose", Some(json!({"threshold": 0.95}))).await;
    let (status, mined) = call(&app, Method::POST, "/images/a/mine", Some(json!({"t_low": 0.7, "count": 3, "seed": 4}))).await;
    assert_eq!(status, StatusCode::OK);
    let mined = mined.as_array().unwrap();
    assert!(mined.len() <= 3);
    assert!(mined.iter().all(|d| d["label"] == "false" && d["source"] == "tm"));

    let (_, set) = call(&app, Method::GET, "/images/a/detections", None).await;
    let set: DetectionSet = serde_json::from_value(set).unwrap();
    set.validate().unwrap();
    let replayed = replay(dir.path(), "a").unwrap();
    assert_eq!(replayed.len(), set.detections.len());
}

#[tokio::test]
async fn state_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = project(dir.path(), false);
        call(&app, Method::POST, "/images/b/detections", Some(json!({"x": 10, "y": 11, "label": "terminal"}))).await;
        call(&app, Method::POST, "/images/b/status", Some(json!({"status": "in_review"}))).await;
    }
    let app = project(dir.path(), false);
    let (_, images) = call(&app, Method::GET, "/images", None).await;
    assert_eq!(images[1]["status"], "in_review");
    let (_, set) = call(&app, Method::GET, "/images/b/detections", None).await;
    assert_eq!(set["detections"][0]["x"], 10);
}
