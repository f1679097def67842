mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;
use txst_cli::service::{router, AppState, ServiceConfig};
use txst_cli::wire::{
    request_schema, ArtistsResponse, ModelResponse, PromptSpec, StylizeRequest, StylizeResponse,
};

const BOUNDARY: &str = "txst-test-boundary";

fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(bytes);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn post(parts: &[(&str, &[u8])]) -> Request<Body> {
    Request::post("/v1/stylize")
        .header(
            "content-type",
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(multipart(parts)))
        .unwrap()
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

struct Setup {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
    content: Vec<u8>,
    painting: Vec<u8>,
}

async fn loaded(cfg: ServiceConfig) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::desk_checkpoint(dir.path());
    let state = AppState::new(cfg);
    state.load(ckpt).await.unwrap();
    Setup {
        content: common::png_bytes(&dir.path().join("content/scene_00.png")),
        painting: common::png_bytes(&dir.path().join("style/Van_Gogh/painting_00.png")),
        _dir: dir,
        state,
    }
}

#[tokio::test]
async fn lifecycle_health_and_not_ready() {
    let state = AppState::new(ServiceConfig::default());
    assert_eq!(
        call(&state, get("/v1/health")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(
        call(&state, get("/v1/artists")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    let s = loaded(ServiceConfig::default()).await;
    let (status, body) = call(&s.state, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<serde_json::Value>(&body).unwrap()["status"],
        "ready"
    );
}

#[tokio::test]
async fn artists_and_model_describe_the_checkpoint() {
    let s = loaded(ServiceConfig::default()).await;
    let (status, body) = call(&s.state, get("/v1/artists")).await;
    assert_eq!(status, StatusCode::OK);
    let a: ArtistsResponse = serde_json::from_slice(&body).unwrap();
    let mut names = a.artists.clone();
    names.sort();
    assert_eq!(
        names,
        vec!["Claude Monet".to_string(), "Van Gogh".to_string()]
    );
    let (_, body) = call(&s.state, get("/v1/model")).await;
    let m: ModelResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(m.fusion_order, 2);
    assert_eq!(m.model_id.len(), 64);
}

#[tokio::test]
async fn zero_strength_returns_the_upload_and_repeats_identically() {
    let s = loaded(ServiceConfig::default()).await;
    let mut req = StylizeRequest::text("Van Gogh");
    req.strength = 0.0;
    let json = serde_json::to_vec(&req).unwrap();
    let (status, body) = call(
        &s.state,
        post(&[("content", &s.content), ("request", &json)]),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: StylizeResponse = serde_json::from_slice(&body).unwrap();
    let png = base64::engine::general_purpose::STANDARD
        .decode(&r.image_png)
        .unwrap();
    let got = image::load_from_memory(&png).unwrap().to_rgb8();
    let want = image::load_from_memory(&s.content).unwrap().to_rgb8();
    assert_eq!(got, want);
    let m = r.metrics.unwrap();
    assert!((m.s_cont - 1.0).abs() < 1e-5);

    let full = serde_json::to_vec(&StylizeRequest::text("Van Gogh")).unwrap();
    let (_, a) = call(
        &s.state,
        post(&[("content", &s.content), ("request", &full)]),
    )
    .await;
    let (_, b) = call(
        &s.state,
        post(&[("content", &s.content), ("request", &full)]),
    )
    .await;
    let (a, b): (StylizeResponse, StylizeResponse) = (
        serde_json::from_slice(&a).unwrap(),
        serde_json::from_slice(&b).unwrap(),
    );
    assert_eq!(a.image_sha256, b.image_sha256);
    assert_eq!(a.image_png, b.image_png);
    assert_ne!(a.image_sha256, r.image_sha256);
}

#[tokio::test]
async fn image_prompts_and_blends() {
    let s = loaded(ServiceConfig::default()).await;
    let mut req = StylizeRequest::text("Claude Monet");
    req.prompts.push(PromptSpec::Image {
        image_ref: "ref".into(),
        weight: 0.5,
    });
    let json = serde_json::to_vec(&req).unwrap();
    let (status, body) = call(
        &s.state,
        post(&[
            ("content", &s.content),
            ("request", &json),
            ("ref", &s.painting),
        ]),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: StylizeResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        r.metrics.unwrap().style_kind,
        txst_core::evaluator::StyleKind::Blend
    );
    // The referenced field is missing.
    let (status, _) = call(
        &s.state,
        post(&[("content", &s.content), ("request", &json)]),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let s = loaded(ServiceConfig::default()).await;
    let ok = serde_json::to_vec(&StylizeRequest::text("Van Gogh")).unwrap();
    for parts in [
        vec![("request", ok.as_slice())],
        vec![("content", s.content.as_slice())],
        vec![
            ("content", s.content.as_slice()),
            ("request", b"{not json".as_slice()),
        ],
        vec![
            ("content", s.content.as_slice()),
            ("request", br#"{"prompts":[],"strength":1}"#.as_slice()),
        ],
        vec![
            ("content", s.content.as_slice()),
            (
                "request",
                br#"{"prompts":[{"kind":"text","text":"x"}],"strength":2}"#.as_slice(),
            ),
        ],
        vec![
            ("content", b"not an image".as_slice()),
            ("request", ok.as_slice()),
        ],
    ] {
        let (status, body) = call(&s.state, post(&parts)).await;
        assert_eq!(
            status,
            StatusCode::BAD_REQUEST,
            "{}",
            String::from_utf8_lossy(&body)
        );
        let e: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(e["error"], "bad_request");
    }
}

#[tokio::test]
async fn oversized_uploads_get_413() {
    let s = loaded(ServiceConfig {
        max_upload_bytes: 1024,
        ..ServiceConfig::default()
    })
    .await;
    let big = vec![0u8; 4096];
    let ok = serde_json::to_vec(&StylizeRequest::text("Van Gogh")).unwrap();
    let (status, _) = call(&s.state, post(&[("content", &big), ("request", &ok)])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn saturation_gives_429() {
    let s = loaded(ServiceConfig {
        max_in_flight: 1,
        ..ServiceConfig::default()
    })
    .await;
    let held = s.state.reserve().unwrap();
    let ok = serde_json::to_vec(&StylizeRequest::text("Van Gogh")).unwrap();
    let (status, _) = call(&s.state, post(&[("content", &s.content), ("request", &ok)])).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    drop(held);
    let (status, _) = call(&s.state, post(&[("content", &s.content), ("request", &ok)])).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn schema_endpoint_matches_the_request_type() {
    let state = AppState::new(ServiceConfig::default());
    let (status, body) = call(&state, get("/v1/schema")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["request"], request_schema());
    // A body as the browser client builds it: two weighted chips.
    let body = serde_json::json!({
        "prompts": [
            {"kind": "text", "text": "Van Gogh", "weight": 0.7},
            {"kind": "text", "text": "Claude Monet", "weight": 0.3}
        ],
        "strength": 0.8,
        "seed": 42,
        "blend": "embedding"
    });
    let allowed = v["request"]["properties"].as_object().unwrap();
    for k in body.as_object().unwrap().keys() {
        assert!(allowed.contains_key(k), "{k}");
    }
    let req: StylizeRequest = serde_json::from_value(body).unwrap();
    assert!(req.validate().is_ok());
    assert_eq!(req.prompts.len(), 2);
}
