//! The HTTP service driven in-process.

mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use compgan::checkpoint::Model;
use compgan::schema::SemanticSchema;
use compgan::service::{router, ServiceState};
use compgan::train::{TrainMode, TrainState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Model {
    let state = TrainState::new(common::tiny_config(), SemanticSchema::toy(), 0, TrainMode::Joint).unwrap();
    Model::from_state(&state).unwrap()
}

fn app(capacity: usize) -> Router {
    router(ServiceState::new(Some(model()), capacity), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn decode_png(b64: &Value) -> image::RgbImage {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.as_str().unwrap())
        .unwrap();
    image::load_from_memory(&bytes).unwrap().to_rgb8()
}

#[tokio::test]
async fn schema_lists_slots_in_order() {
    let app = app(8);
    let (status, body) = call(&app, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let slots = body["slots"].as_array().unwrap();
    assert_eq!(slots.len(), 13);
    let hair = SemanticSchema::toy().class_id("hair").unwrap();
    assert_eq!(slots[2 * hair + 2]["name"], "hair.texture");
    assert_eq!(slots[2 * hair + 2]["index"], 2 * hair + 2);
    assert_eq!(body["schema"]["classes"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn sample_edit_lerp_round_trip() {
    let app = app(8);
    let (status, body) = call(&app, "POST", "/sample", Some(json!({"seed": 3, "count": 2, "psi": 0.7}))).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<String> = serde_json::from_value(body["ids"].clone()).unwrap();
    assert_eq!(ids.len(), 2);
    let first = decode_png(&body["images"][0]);
    assert_eq!(first.dimensions(), (16, 16));
    assert_eq!(decode_png(&body["segmentations"][1]).dimensions(), (16, 16));

    let (_, again) = call(&app, "POST", "/sample", Some(json!({"seed": 3, "count": 2, "psi": 0.7}))).await;
    assert_eq!(again["images"], body["images"]);

    let (status, edited) = call(
        &app,
        "POST",
        "/edit",
        Some(json!({
            "id": ids[0],
            "deltas": {"hair.texture": 3.0},
            "mix": {"source": ids[1], "slots": ["eyes"]},
            "transform": {"dx": 0.1},
            "active_classes": ["background", "face", 4],
        })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{edited}");
    assert_eq!(edited["committed"], false);

    let (_, unchanged) = call(&app, "POST", "/edit", Some(json!({"id": ids[0]}))).await;
    assert_eq!(unchanged["image"], body["images"][0]);

    let (_, committed) = call(&app, "POST", "/edit", Some(json!({"id": ids[0], "deltas": {"hair": 2.0}, "commit": true}))).await;
    let (_, after) = call(&app, "POST", "/edit", Some(json!({"id": ids[0]}))).await;
    assert_eq!(after["image"], committed["image"]);

    let (status, lerp) = call(&app, "POST", "/lerp", Some(json!({"a": ids[0], "b": ids[1], "t": 1.0, "store": true}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(lerp["image"], body["images"][1]);
    assert!(lerp["id"].is_string());
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = app(8);
    let (_, body) = call(&app, "POST", "/sample", Some(json!({"seed": 1}))).await;
    let id = body["ids"][0].clone();

    let cases = [
        (json!({"id": "missing"}), StatusCode::NOT_FOUND),
        (json!({"id": id, "deltas": {"tail": 1.0}}), StatusCode::BAD_REQUEST),
        (json!({"id": id, "deltas": {"hair": [1.0, 2.0]}}), StatusCode::BAD_REQUEST),
        (json!({"id": id, "mix": {"source": "missing", "slots": ["hair"]}}), StatusCode::NOT_FOUND),
        (json!({"id": id, "active_classes": ["face"]}), StatusCode::BAD_REQUEST),
        (json!({"id": id, "transform": {"s": 0.0}}), StatusCode::BAD_REQUEST),
        (json!({"deltas": {}}), StatusCode::BAD_REQUEST),
    ];
    for (req, expected) in cases {
        let (status, body) = call(&app, "POST", "/edit", Some(req.clone())).await;
        assert_eq!(status, expected, "{req}");
        assert!(body["error"].is_string());
    }
    let (status, _) = call(&app, "POST", "/sample", Some(json!({"seed": 1, "count": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let req = Request::builder().method("POST").uri("/sample").body(Body::from("{seed")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn no_model_means_unavailable() {
    let app = router(ServiceState::new(None, 8), None);
    let (status, _) = call(&app, "POST", "/sample", Some(json!({"seed": 1}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&app, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model_loaded"], false);
}

#[tokio::test]
async fn evicted_sessions_are_gone() {
    let app = app(2);
    let (_, body) = call(&app, "POST", "/sample", Some(json!({"seed": 1, "count": 3}))).await;
    let (status, _) = call(&app, "POST", "/edit", Some(json!({"id": body["ids"][0]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/edit", Some(json!({"id": body["ids"][2]}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn static_app_and_api_description() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>editor</p>").unwrap();
    let app = router(ServiceState::new(None, 8), Some(dir.path().to_path_buf()));
    let req = Request::builder().uri("/app/index.html").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(&resp.into_body().collect().await.unwrap().to_bytes()[..], b"<p>editor</p>");

    let (status, spec) = call(&app, "GET", "/openapi.json", None).await;
    assert_eq!(status, StatusCode::OK);
    for path in ["/schema", "/sample", "/edit", "/lerp", "/healthz"] {
        assert!(spec["paths"][path].is_object(), "{path}");
    }
}
