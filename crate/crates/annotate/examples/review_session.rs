//! Drives a full review session against the annotation service in-process:
//! propose detections, correct one label, add a missed point, mine extra
//! negatives, mark the image done and export the training patches.
//!
//! With `--serve` the same project is served on 127.0.0.1:8080 afterwards so
//! it can be explored with curl or a browser front end.
//!
//! ```text
//! cargo run --release -p tmcnn-annotate --example review_session -- [project_dir] [--serve]
//! ```

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tmcnn::synth::{generate_labyrinth, SynthConfig};
use tmcnn::templates::build_bank;
use tmcnn::TemplateConfig;
use tmcnn_annotate::project::{Project, ProjectConfig, IMAGE_DIR};
use tmcnn_annotate::{router, serve, AppState};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method.clone()).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .expect("request builds");
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    println!("{method} {uri} -> {status}");
    value
}

fn open_project(root: &std::path::Path) -> Result<Project, Box<dyn std::error::Error>> {
    let images = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&images)?;
    for seed in [1, 2] {
        let path = images.join(format!("plate_{seed}.png"));
        if !path.exists() {
            let cfg = SynthConfig {
                width: 240,
                height: 180,
                seed,
                ..SynthConfig::default()
            };
            generate_labyrinth(&cfg)?.image.save_png(path)?;
        }
    }
    let config = ProjectConfig {
        bank: Arc::new(build_bank(&TemplateConfig::default())?),
        model: None,
        default_threshold: 0.95,
        resize: None,
        box_side: 21,
    };
    Ok(Project::open(root, config)?)
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let serve_after = args.iter().any(|a| a == "--serve");
    let root = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .cloned()
        .unwrap_or_else(|| "review_project".into());
    let root = std::path::PathBuf::from(root);

    let app = router(AppState::new(open_project(&root)?));
    let images = call(&app, Method::GET, "/images", None).await;
    println!("  {images}");

    let proposed = call(&app, Method::POST, "/images/plate_1/propose", Some(json!({"threshold": 0.95}))).await;
    let detections = proposed["detections"].as_array().cloned().unwrap_or_default();
    println!("  {} proposals", detections.len());

    if let Some(first) = detections.first() {
        let id = first["id"].as_u64().unwrap_or(0);
        let relabeled = call(
            &app,
            Method::PATCH,
            &format!("/images/plate_1/detections/{id}"),
            Some(json!({"label": "false"})),
        )
        .await;
        println!("  detection {id} is now {} ({})", relabeled["label"], relabeled["source"]);
    }
    let added = call(
        &app,
        Method::POST,
        "/images/plate_1/detections",
        Some(json!({"x": 120, "y": 90, "label": "terminal"})),
    )
    .await;
    println!("  added detection {}", added["id"]);

    let mined = call(
        &app,
        Method::POST,
        "/images/plate_1/mine",
        Some(json!({"t_low": 0.85, "count": 10, "seed": 7})),
    )
    .await;
    println!("  mined {} negatives", mined.as_array().map_or(0, Vec::len));

    call(&app, Method::POST, "/images/plate_1/status", Some(json!({"status": "done"}))).await;
    let exported = call(&app, Method::POST, "/export", Some(json!({"out_dir": "dataset"}))).await;
    println!("  exported patches per class: {}", exported["counts"]);

    if serve_after {
        println!("serving {} on http://127.0.0.1:8080", root.display());
        serve(open_project(&root)?, ([127, 0, 0, 1], 8080).into()).await?;
    }
    Ok(())
}
