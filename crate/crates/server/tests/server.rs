use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use sketchmesh::checkpoint::{file_digest, Checkpoint};
use sketchmesh::geometry::obj::parse_obj;
use sketchmesh::networks::{CriticKind, NetworkConfig, Networks};
use sketchmesh::rasterizer::SilhouetteMap;
use sketchmesh_server::*;
use tower::ServiceExt;

fn ring_png(res: usize, radius: f64) -> Vec<u8> {
    let c = res as f64 / 2.0;
    let mask: Vec<bool> = (0..res * res)
        .map(|k| {
            let (y, x) = ((k / res) as f64 + 0.5 - c, (k % res) as f64 + 0.5 - c);
            (y.hypot(x) - radius).abs() < 0.8
        })
        .collect();
    SilhouetteMap::from_mask(&mask, res).unwrap().to_png_bytes().unwrap()
}

fn saved_checkpoint(dir: &std::path::Path) -> (std::path::PathBuf, String) {
    let nets = Networks::new(&NetworkConfig::desk(), CriticKind::Progressive, 0).unwrap();
    let path = dir.join("model.skf");
    let digest = Checkpoint::from_networks(&nets, serde_json::Value::Null).save(&path).unwrap();
    (path, digest)
}

fn loaded_state(dir: &std::path::Path) -> (AppState, String) {
    let (path, digest) = saved_checkpoint(dir);
    let state = AppState::new();
    state.load(&path).unwrap();
    (state, digest)
}

async fn send(state: &AppState, req: Request<Body>) -> (StatusCode, serde_json::Value, axum::http::HeaderMap) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() { serde_json::Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, json, headers)
}

fn json_request(body: serde_json::Value) -> Request<Body> {
    Request::post("/infer").header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap()
}

fn png_request(png: Vec<u8>) -> Request<Body> {
    Request::post("/infer").header(header::CONTENT_TYPE, "image/png").body(Body::from(png)).unwrap()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let dir = tempfile::tempdir().unwrap();
    let (path, digest) = saved_checkpoint(dir.path());
    let state = AppState::new();
    let (status, body, _) = send(&state, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "loading");
    let (status, _, _) = send(&state, png_request(ring_png(64, 20.0))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    state.load(&path).unwrap();
    let (status, body, _) = send(&state, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ready");
    assert_eq!(body["checkpoint_digest"], digest.as_str());
    assert_eq!(body["checkpoint_digest"], file_digest(&std::fs::read(&path).unwrap()).as_str());
    assert_eq!(body["model_resolution"], 64);
}

#[tokio::test]
async fn json_and_raw_png_requests_agree_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = loaded_state(dir.path());
    let png = ring_png(64, 20.0);
    let (s1, a, _) = send(&state, json_request(serde_json::json!({ "sketch_png_base64": b64(&png), "resolution": 64 }))).await;
    let (s2, b, _) = send(&state, png_request(png.clone())).await;
    let (s3, c, _) = send(&state, png_request(png)).await;
    assert_eq!((s1, s2, s3), (StatusCode::OK, StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    assert_eq!(b["mesh_obj"], c["mesh_obj"]);
    let mesh = parse_obj(a["mesh_obj"].as_str().unwrap()).unwrap();
    assert!(mesh.is_watertight());
    for key in ["elevation_deg", "azimuth_deg", "distance"] {
        assert!(a["pose"][key].is_number(), "missing {key}");
    }
    let iou = a["iou_preview"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
}

#[tokio::test]
async fn bad_inputs_get_client_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = loaded_state(dir.path());

    let (status, body, _) = send(&state, png_request(SilhouetteMap::from_mask(&vec![false; 64 * 64], 64).unwrap().to_png_bytes().unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "empty sketch");

    let mut nine = vec![false; 64 * 64];
    nine[..9].iter_mut().for_each(|m| *m = true);
    let (status, _, _) = send(&state, png_request(SilhouetteMap::from_mask(&nine, 64).unwrap().to_png_bytes().unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, body, _) = send(&state, png_request(ring_png(32, 10.0))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["expected_resolution"], 64);

    let (status, body, _) =
        send(&state, json_request(serde_json::json!({ "sketch_png_base64": b64(&ring_png(64, 20.0)), "resolution": 128 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["expected_resolution"], 64);

    let (status, _, _) = send(&state, png_request(b"not an image".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = send(&state, json_request(serde_json::json!({ "sketch_png_base64": "@@@" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = send(&state, json_request(serde_json::json!({ "image": 1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn numerical_failure_is_a_server_error() {
    let nets = Networks::new(&NetworkConfig::desk(), CriticKind::Progressive, 0).unwrap();
    let (_, p) = nets.generator.named_parameters().into_iter().next().unwrap();
    p.set_data(&vec![f64::NAN; p.to_vec().len()]).unwrap();
    let state = AppState::new();
    assert!(state.set_model(Model { nets, digest: "nan".into() }).is_ok());
    let (status, body, _) = send(&state, png_request(ring_png(64, 20.0))).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(body["error"].as_str().unwrap().contains("numerical"));
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = loaded_state(dir.path());
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/infer")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, _, headers) = send(&state, req).await;
    assert!(status.is_success());
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    let req = Request::get("/health").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = send(&state, req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_results() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = loaded_state(dir.path());
    let radii = [12.0, 16.0, 20.0, 24.0];
    let mut serial = Vec::new();
    for r in radii {
        serial.push(send(&state, png_request(ring_png(64, r))).await.1);
    }
    let tasks: Vec<_> = radii
        .iter()
        .map(|&r| {
            let s = state.clone();
            tokio::spawn(async move { send(&s, png_request(ring_png(64, r))).await.1 })
        })
        .collect();
    for (task, expected) in tasks.into_iter().zip(serial) {
        assert_eq!(task.await.unwrap(), expected);
    }
}

fn http(port: u16, request: &str) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(30))).ok()?;
    s.write_all(request.as_bytes()).ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    let code = out.split_whitespace().nth(1)?.parse().ok()?;
    Some((code, out.split("\r\n\r\n").nth(1).unwrap_or("").to_string()))
}

#[test]
fn binary_serves_health_and_inference() {
    let dir = tempfile::tempdir().unwrap();
    let (path, digest) = saved_checkpoint(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_sketchmesh-server"))
        .args(["--ckpt", path.to_str().unwrap(), "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let start = Instant::now();
    let health = "GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n";
    let ready = loop {
        if let Some((200, body)) = http(port, health) {
            break body;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "server did not become ready");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(ready.contains(&digest), "{ready}");
    let body = serde_json::json!({ "sketch_png_base64": b64(&ring_png(64, 18.0)) }).to_string();
    let req = format!(
        "POST /infer HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let (code, resp) = http(port, &req).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(code, 200, "{resp}");
    assert!(resp.contains("mesh_obj") && resp.contains("iou_preview"));
}
