use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use msm::corpus::synth_scene;
use msm::nets::{MsmModel, NetConfig};
use msm::retouch::{apply_retouch, RetouchParams};
use msm::service::{encode_b64_png, router, AppState};
use msm::Image;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    let cfg = NetConfig { embed_input_size: 16, enhancer_input_size: 16, transformer_layers: 2, seed: 1, ..NetConfig::default() };
    router(Arc::new(AppState::single(MsmModel::new(cfg).unwrap())))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
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
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::OK);
    v["session_id"].as_str().unwrap().to_string()
}

fn b64(img: &Image) -> String {
    encode_b64_png(img).unwrap()
}

fn pair(class: usize, seed: u64, size: usize) -> Value {
    let x = synth_scene(class, 3, seed, size).unwrap();
    let params = RetouchParams { exposure_ev: 0.3 + 0.1 * seed as f64, ..RetouchParams::identity() };
    let y = apply_retouch(&x, &params).unwrap();
    json!({ "original": b64(&x), "retouched": b64(&y), "content_class": class })
}

async fn add(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{id}/pairs"), Some(body)).await
}

async fn enhance(app: &Router, id: &str, img: &Image, method: &str) -> Value {
    let (status, v) = call(app, "POST", &format!("/sessions/{id}/enhance"), Some(json!({ "image": b64(img), "method": method }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v
}

fn decode(v: &Value) -> Image {
    let bytes = base64::engine::general_purpose::STANDARD.decode(v["image"].as_str().unwrap()).unwrap();
    Image::decode_png(&bytes).unwrap()
}

#[tokio::test]
async fn healthz_reports_ok() {
    let (status, v) = call(&app(), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({ "status": "ok" }));
}

#[tokio::test]
async fn sessions_get_distinct_ids_and_unknown_models_are_rejected() {
    let app = app();
    let (a, b) = (new_session(&app).await, new_session(&app).await);
    assert_ne!(a, b);
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({ "model_id": "nope" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_model");
}

#[tokio::test]
async fn pairs_of_any_size_are_accepted() {
    let app = app();
    let id = new_session(&app).await;
    let (status, v) = add(&app, &id, pair(0, 1, 40)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["count"], 1);
}

#[tokio::test]
async fn corrupt_png_is_a_decode_error() {
    let app = app();
    let id = new_session(&app).await;
    let mut body = pair(0, 1, 16);
    body["retouched"] = json!(base64::engine::general_purpose::STANDARD.encode(b"not a png at all"));
    let (status, v) = add(&app, &id, body).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "decode_error");
    let (status, v) = add(&app, &id, json!({ "original": "%%%", "retouched": "%%%" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "decode_error");
}

#[tokio::test]
async fn missing_session_is_not_found() {
    let app = app();
    let (status, _) = add(&app, "no-such-session", pair(0, 1, 16)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "DELETE", "/sessions/no-such-session/pairs/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_session_cannot_enhance() {
    let app = app();
    let id = new_session(&app).await;
    let img = synth_scene(1, 3, 2, 16).unwrap();
    let (status, v) = call(&app, "POST", &format!("/sessions/{id}/enhance"), Some(json!({ "image": b64(&img) }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["code"], "empty_session");
    assert!(v["message"].as_str().unwrap().contains("pair"));
}

#[tokio::test]
async fn masked_attention_covers_every_pair() {
    let app = app();
    let id = new_session(&app).await;
    for i in 0..5 {
        add(&app, &id, pair(i % 3, i as u64, 16)).await;
    }
    let v = enhance(&app, &id, &synth_scene(2, 3, 99, 16).unwrap(), "masked").await;
    let att: Vec<f64> = serde_json::from_value(v["attention"].clone()).unwrap();
    assert_eq!(att.len(), 5);
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(att.iter().all(|a| *a >= 0.0));
    assert_eq!(v["method"], "masked");
}

#[tokio::test]
async fn pair_order_does_not_change_the_result() {
    let app = app();
    let unseen = synth_scene(1, 3, 50, 16).unwrap();
    let pairs: Vec<_> = (0..4).map(|i| pair(i % 3, i as u64, 16)).collect();
    let (a, b) = (new_session(&app).await, new_session(&app).await);
    for p in &pairs {
        add(&app, &a, p.clone()).await;
    }
    for p in pairs.iter().rev() {
        add(&app, &b, p.clone()).await;
    }
    let (va, vb) = (enhance(&app, &a, &unseen, "masked").await, enhance(&app, &b, &unseen, "masked").await);
    let (na, nb) = (va["predicted_style_norm"].as_f64().unwrap(), vb["predicted_style_norm"].as_f64().unwrap());
    assert!((na - nb).abs() < 1e-9, "{na} vs {nb}");
    let (ia, ib) = (decode(&va), decode(&vb));
    assert!(ia.data().iter().zip(ib.data()).all(|(x, y)| (x - y).abs() <= 1.0 / 255.0 + 1e-12));
    let att_a: Vec<f64> = serde_json::from_value(va["attention"].clone()).unwrap();
    let mut att_b: Vec<f64> = serde_json::from_value(vb["attention"].clone()).unwrap();
    att_b.reverse();
    assert!(att_a.iter().zip(&att_b).all(|(x, y)| (x - y).abs() < 1e-9));
}

#[tokio::test]
async fn average_style_ignores_the_unseen_image() {
    let app = app();
    let id = new_session(&app).await;
    for i in 0..3 {
        add(&app, &id, pair(i, i as u64, 16)).await;
    }
    let a = enhance(&app, &id, &synth_scene(0, 3, 7, 16).unwrap(), "average").await;
    let b = enhance(&app, &id, &synth_scene(2, 3, 8, 16).unwrap(), "average").await;
    assert!(a["attention"].is_null());
    assert_eq!(a["predicted_style_norm"], b["predicted_style_norm"]);
}

#[tokio::test]
async fn deleting_pairs_updates_the_count() {
    let app = app();
    let id = new_session(&app).await;
    add(&app, &id, pair(0, 1, 16)).await;
    add(&app, &id, pair(1, 2, 16)).await;
    let (status, v) = call(&app, "DELETE", &format!("/sessions/{id}/pairs/0"), None).await;
    assert_eq!((status, v["count"].as_u64()), (StatusCode::OK, Some(1)));
    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}/pairs/3"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn large_image_round_trip_is_fast_and_keeps_dims() {
    let app = app();
    let id = new_session(&app).await;
    add(&app, &id, pair(0, 1, 64)).await;
    let big = synth_scene(1, 3, 4, 256).unwrap();
    let start = Instant::now();
    let v = enhance(&app, &id, &big, "masked").await;
    let elapsed = start.elapsed();
    assert_eq!(decode(&v).dims(), (256, 256));
    assert!(elapsed.as_secs_f64() < 2.0, "took {elapsed:?}");
}

#[tokio::test]
async fn unknown_method_is_rejected() {
    let app = app();
    let id = new_session(&app).await;
    add(&app, &id, pair(0, 1, 16)).await;
    let img = synth_scene(1, 3, 2, 16).unwrap();
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/enhance"), Some(json!({ "image": b64(&img), "method": "sepia" }))).await;
    assert!(status.is_client_error(), "{status}");
}

#[test]
fn state_with_no_default_model_rejects_default_sessions() {
    let state = AppState::new(HashMap::new());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let (status, _) = call(&router(Arc::new(state)), "POST", "/sessions", None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    });
}
