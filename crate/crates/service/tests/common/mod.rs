#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use hitl_core::corpus::Span;
use hitl_core::synthfeed::{generate_world, SyntheticWorldConfig, World};
use hitl_service::{ServiceConfig, Store};
use serde_json::Value;
use tower::ServiceExt;

pub fn world(dialogues: usize) -> World {
    generate_world(&SyntheticWorldConfig {
        dialogues,
        test_dialogues: 1,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

pub fn config(dir: &std::path::Path, annotators: &[&str]) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        annotators: annotators.iter().map(|s| s.to_string()).collect(),
        fsync: false,
        ..Default::default()
    }
}

pub fn store(world: &World, cfg: ServiceConfig) -> Arc<Store> {
    Arc::new(Store::with_corpus(cfg, world.dialogues.clone(), world.summaries.clone()).unwrap())
}

/// The dialogue's fact spans: exactly three valid, disjoint highlights.
pub fn fact_spans(world: &World, dialogue_id: &str) -> Vec<Span> {
    world.facts[dialogue_id].iter().map(|f| f.span).collect()
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub fn scores(v: i64) -> Value {
    serde_json::json!({"coherence": v, "accuracy": v, "coverage": v, "conciseness": v, "overall": v})
}
