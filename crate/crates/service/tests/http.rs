use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use serde::de::DeserializeOwned;
use tower::ServiceExt;

use layout_mcl_core::api::{CategoriesResponse, ErrorBody, GenerateResponse, HealthResponse};
use layout_mcl_core::layout::{Canvas, Profile};
use layout_mcl_core::model::{Model, ModelConfig};
use layout_mcl_service::{router, AppState, Snapshot};

fn state() -> Arc<AppState> {
    let p = Profile::SingleColumnDoc;
    let model = Model::new(ModelConfig::default(), p.vocabulary(), Canvas::default(), 7).unwrap();
    AppState::new(Snapshot::new(model, None))
}

async fn call<T: DeserializeOwned>(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, T) {
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post(body: &str) -> Request<Body> {
    Request::post("/api/generate")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap()
}

#[tokio::test]
async fn categories_echo_the_vocabulary() {
    let s = state();
    let (status, body): (_, CategoriesResponse) =
        call(&s, Request::get("/api/categories").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.categories, Profile::SingleColumnDoc.vocabulary().names());
}

#[tokio::test]
async fn health_reports_the_checkpoint_digest() {
    let s = state();
    let (status, body): (_, HealthResponse) =
        call(&s, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.status, "ok");
    assert_eq!(body.checkpoint, s.snapshot().checkpoint);
    assert_eq!(body.checkpoint.len(), 64);
}

#[tokio::test]
async fn generate_embeds_the_prefix_and_is_reproducible() {
    let s = state();
    let req = r#"{"hard": [{"category": "title", "bbox": [0.1, 0.05, 0.8, 0.06]}],
        "soft": [{"category": "figure", "size": [0.4, 0.3]}], "count": 5, "seed": 42}"#;
    let (status, a): (_, GenerateResponse) = call(&s, post(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a.candidates.len(), 5);
    for c in &a.candidates {
        assert_eq!(c.layout.objects[0].category, "title");
        assert_eq!(c.layout.objects[0].bbox, [0.1, 0.05, 0.8, 0.06]);
        assert_eq!(c.layout.objects[1].category, "figure");
        assert!(c.svg.is_none());
    }
    let (_, b): (_, GenerateResponse) = call(&s, post(req)).await;
    assert_eq!(a, b);
    assert_eq!(s.requests(), 2);
}

#[tokio::test]
async fn svg_format_renders_each_candidate() {
    let s = state();
    let (status, r): (_, GenerateResponse) = call(&s, post(r#"{"count": 2, "format": "svg"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(r.candidates.iter().all(|c| c.svg.as_deref().is_some_and(|v| v.starts_with("<svg"))));
}

#[tokio::test]
async fn malformed_requests_get_field_level_400s() {
    let s = state();
    let (status, e): (_, ErrorBody) =
        call(&s, post(r#"{"soft": [{"category": "banner"}]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e.field.as_deref(), Some("soft[0].category"));

    let (status, e): (_, ErrorBody) = call(&s, post(r#"{"count": 0}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e.field.as_deref(), Some("count"));

    let (status, e): (_, ErrorBody) = call(&s, post(r#"{"count": "many"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(e.error.contains("count"), "{}", e.error);

    let (status, _): (_, ErrorBody) = call(&s, post("not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn swap_replaces_the_snapshot() {
    let s = state();
    let before = s.snapshot().checkpoint.clone();
    let p = Profile::MobileApp;
    let other = Model::new(ModelConfig::default(), p.vocabulary(), p.canvas(), 8).unwrap();
    s.swap(Snapshot::new(other, None));
    let (_, body): (_, HealthResponse) =
        call(&s, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_ne!(body.checkpoint, before);
    let (_, cats): (_, CategoriesResponse) =
        call(&s, Request::get("/api/categories").body(Body::empty()).unwrap()).await;
    assert_eq!(cats.categories[0], "toolbar");
}

#[tokio::test]
async fn loads_a_saved_checkpoint() {
    let p = Profile::SingleColumnDoc;
    let model = Model::new(ModelConfig::default(), p.vocabulary(), Canvas::default(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = model.save_dir(dir.path(), model.manifest()).unwrap();
    let snap = Snapshot::load(dir.path()).unwrap();
    assert_eq!(snap.checkpoint, m.checkpoint_sha256);
    std::fs::write(dir.path().join("model.ckpt"), b"garbage").unwrap();
    assert!(Snapshot::load(dir.path()).is_err());
}
