mod common;

use axum::http::StatusCode;
use common::*;
use hitl_service::router;
use serde_json::json;

#[tokio::test]
async fn tasks_follow_highlight_then_comparisons() {
    let w = world(4);
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(&w, config(dir.path(), &["ann"])));

    let (s, v) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
    assert_eq!(s, StatusCode::OK);
    let task = &v["task"];
    assert_eq!(task["kind"], "highlight");
    assert_eq!(task["status"], "open");
    let d = task["dialogue_id"].as_str().unwrap().to_string();

    // Comparisons are not offered before the dialogue is highlighted.
    let (_, v) = call(&app, "GET", "/api/tasks/next?annotator=ann&kind=comparison", None).await;
    assert!(v["task"].is_null());

    let spans = fact_spans(&w, &d);
    let body = json!({"annotator_id": "ann", "task_id": task["task_id"], "spans": spans});
    let (s, v) = call(&app, "POST", "/api/highlights", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["dialogue_id"], d.as_str());

    let (_, v) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
    let first = &v["task"];
    assert_eq!(first["kind"], "comparison");
    assert_eq!(first["dialogue_id"], d.as_str());
    assert_ne!(first["summary_a_id"], first["summary_b_id"]);
    assert!(first["task_id"].as_str().unwrap().ends_with("/c0"));

    // Drain everything.
    loop {
        let (_, v) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
        let t = &v["task"];
        if t.is_null() {
            break;
        }
        let (s, _) = if t["kind"] == "highlight" {
            let spans = fact_spans(&w, t["dialogue_id"].as_str().unwrap());
            let body = json!({"annotator_id": "ann", "task_id": t["task_id"], "spans": spans});
            call(&app, "POST", "/api/highlights", Some(body)).await
        } else {
            let body = json!({"annotator_id": "ann", "task_id": t["task_id"], "scores": scores(0)});
            call(&app, "POST", "/api/comparisons", Some(body)).await
        };
        assert_eq!(s, StatusCode::CREATED);
    }
    let (_, p) = call(&app, "GET", "/api/progress?annotator=ann", None).await;
    assert_eq!(p["highlights_submitted"], 4);
    assert_eq!(p["highlights_total"], 4);
    assert_eq!(p["comparisons_submitted"], 12);
    assert_eq!(p["comparisons_total"], 12);
}

#[tokio::test]
async fn highlight_validation() {
    let w = world(3);
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(&w, config(dir.path(), &["ann"])));
    let d = w.dialogues[0].id.clone();
    let task = format!("ann/{d}/h");
    let spans = fact_spans(&w, &d);

    let two = json!({"annotator_id": "ann", "task_id": task, "spans": &spans[..2]});
    let (s, v) = call(&app, "POST", "/api/highlights", Some(two)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid");
    assert_eq!(v["field"], "spans");
    assert!(v["message"].as_str().unwrap().contains("minimum 3"), "{v}");

    let mut nine = Vec::new();
    for t in 0..w.dialogues[0].turns.len() {
        nine.push(json!({"turn_index": t, "char_start": 0, "char_end": 1}));
        nine.push(json!({"turn_index": t, "char_start": 2, "char_end": 3}));
    }
    nine.truncate(9);
    let (s, v) = call(&app, "POST", "/api/highlights", Some(json!({"annotator_id": "ann", "task_id": task, "spans": nine}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("maximum 8"), "{v}");

    let overlapping = json!([
        {"turn_index": 0, "char_start": 0, "char_end": 5},
        {"turn_index": 0, "char_start": 3, "char_end": 8},
        {"turn_index": 1, "char_start": 0, "char_end": 2},
    ]);
    let (s, v) = call(&app, "POST", "/api/highlights", Some(json!({"annotator_id": "ann", "task_id": task, "spans": overlapping}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("overlap"), "{v}");

    let out_of_range = json!([
        {"turn_index": 0, "char_start": 0, "char_end": 2},
        {"turn_index": 1, "char_start": 0, "char_end": 2},
        {"turn_index": 99, "char_start": 0, "char_end": 2},
    ]);
    let (s, _) = call(&app, "POST", "/api/highlights", Some(json!({"annotator_id": "ann", "task_id": task, "spans": out_of_range}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let five: Vec<_> = spans
        .iter()
        .map(|s| json!(s))
        .chain([json!({"turn_index": 0, "char_start": 0, "char_end": 1}), json!({"turn_index": 1, "char_start": 0, "char_end": 1})])
        .collect();
    let ok = json!({"annotator_id": "ann", "task_id": task, "spans": five});
    let (s, v) = call(&app, "POST", "/api/highlights", Some(ok.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (s, v) = call(&app, "POST", "/api/highlights", Some(ok)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "conflict");

    let (s, v) = call(&app, "GET", "/api/tasks/next?annotator=nobody", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_annotator");
    let (s, v) = call(&app, "POST", "/api/highlights", Some(json!({"annotator_id": "ann", "task_id": "ann/zzz/h", "spans": spans}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_task");
    let (s, v) = call(&app, "POST", "/api/highlights", Some(json!({"annotator_id": "ann"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "body");
}

#[tokio::test]
async fn comparison_validation() {
    let w = world(3);
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(&w, config(dir.path(), &["ann", "other"])));
    let d = w.dialogues[0].id.clone();
    let task = format!("ann/{d}/c0");

    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": scores(1)}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "out_of_order");

    let hl = json!({"annotator_id": "ann", "task_id": format!("ann/{d}/h"), "spans": fact_spans(&w, &d)});
    assert_eq!(call(&app, "POST", "/api/highlights", Some(hl)).await.0, StatusCode::CREATED);

    let four = json!({"coherence": 1, "accuracy": 1, "coverage": 1, "conciseness": 1});
    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": four}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "scores.overall");
    assert!(v["message"].as_str().unwrap().contains("overall"));

    let mut three = scores(0);
    three["coverage"] = json!(3);
    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": three}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "scores.coverage");

    let mut extra = scores(0);
    extra["fluency"] = json!(1);
    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": extra}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "scores.fluency");

    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "other", "task_id": task, "scores": scores(0)}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["code"], "not_assigned");

    let (s, v) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": scores(0)}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["scores"]["overall"], 0);
    assert_eq!(v["annotator_id"], "ann");
    let (s, _) = call(&app, "POST", "/api/comparisons", Some(json!({"annotator_id": "ann", "task_id": task, "scores": scores(0)}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn dialogue_lookup_index_and_header_check() {
    let w = world(2);
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(&w, config(dir.path(), &["ann"])));
    let d = &w.dialogues[0];
    let (s, v) = call(&app, "GET", &format!("/api/dialogues/{}", d.id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["dialogue"]["id"], d.id.as_str());
    assert_eq!(v["summaries"].as_array().unwrap().len(), 5);
    let (s, v) = call(&app, "GET", "/api/dialogues/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_dialogue");
    let (s, v) = call(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.as_str().unwrap().contains("<html"));
    let (s, v) = call(&app, "GET", "/api/tasks/next?annotator=ann&kind=essay", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "kind");

    use axum::body::Body;
    use axum::http::Request;
    use tower::ServiceExt;
    let req = Request::builder()
        .uri("/api/progress?annotator=ann")
        .header(hitl_service::http::ANNOTATOR_HEADER, "someone-else")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
}
