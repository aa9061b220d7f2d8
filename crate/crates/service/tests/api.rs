use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use image::{ImageFormat, RgbImage};
use primid_core::align::{warp_image, LandmarkTemplate, SimilarityParams};
use primid_core::gallery::Gallery;
use primid_core::matcher::template_score;
use primid_core::model::{build_primnet, PrimNetConfig};
use primid_core::pipeline::Recognizer;
use primid_core::synth::{render, ToySpec};
use primid_service::{router, AppState, SCHEMA_VERSION};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    app: Router,
    state: Arc<AppState>,
    recognizer: Recognizer,
    gallery_path: PathBuf,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let model = build_primnet(&PrimNetConfig::default()).unwrap();
    let recognizer = Recognizer::new(model, LandmarkTemplate::canonical());
    let dir = tempfile::tempdir().unwrap();
    let gallery_path = dir.path().join("gallery.json");
    let state = Arc::new(AppState::new(
        recognizer.clone(),
        Gallery::new(),
        Some(gallery_path.clone()),
        0.5,
    ));
    Fixture {
        app: router(Arc::clone(&state), None),
        state,
        recognizer,
        gallery_path,
        _dir: dir,
    }
}

fn toy(class: usize, index: usize) -> RgbImage {
    render(&ToySpec::default(), class, index)
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn b64(img: &RgbImage) -> String {
    STANDARD.encode(png(img))
}

fn landmarks_json(points: [[f64; 2]; 3]) -> Value {
    let [l, r, m] = points;
    json!({"lx": l[0], "ly": l[1], "rx": r[0], "ry": r[1], "mx": m[0], "my": m[1]})
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, body)
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(Method::POST)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

async fn call(app: &Router, method: Method, uri: &str) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).body(Body::empty()).unwrap();
    send(app, req).await
}

async fn enroll(app: &Router, id: &str, species: &str, images: &[RgbImage]) -> (StatusCode, Value) {
    let images: Vec<Value> = images.iter().map(|i| json!({"image": b64(i)})).collect();
    post_json(app, "/enroll", json!({"individual_id": id, "species": species, "images": images})).await
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap()
}

#[tokio::test]
async fn health_reports_model_and_gallery() {
    let f = fixture();
    let (status, body) = call(&f.app, Method::GET, "/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["schema_version"], SCHEMA_VERSION);
    assert_eq!(body["embed_dim"], 256);
    let hash = body["model_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(hash, f.state.model_hash());
    assert_eq!(body["gallery"]["individuals"], 0);
    assert_eq!(body["gallery"]["by_species"]["lemur"], 0);
}

#[tokio::test]
async fn align_at_anchored_targets_is_identity() {
    let f = fixture();
    let crop = toy(0, 0);
    let targets = f.recognizer.template().target_points();
    let (status, body) = post_json(
        &f.app,
        "/align",
        json!({"image": b64(&crop), "landmarks": landmarks_json(targets)}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let t = &body["transform"];
    assert!((t["s"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(t["theta"].as_f64().unwrap().abs() < 1e-9);
    assert!(t["mx"].as_f64().unwrap().abs() < 1e-6);
    assert!(t["my"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(body["width"], 96);
    assert_eq!(body["height"], 112);
    let bytes = STANDARD.decode(body["aligned_image"].as_str().unwrap()).unwrap();
    let aligned = image::load_from_memory(&bytes).unwrap().to_rgb8();
    assert_eq!(aligned, crop);
}

#[tokio::test]
async fn align_recovers_inverse_of_scene_transform() {
    let f = fixture();
    let placed = SimilarityParams::from_scale_rotation(1.6, 0.3, 40.0, 20.0);
    let scene = warp_image(&toy(1, 0), &placed, [240, 240]).unwrap();
    let points = f.recognizer.template().target_points().map(|p| placed.apply(p));
    let (status, body) = post_json(
        &f.app,
        "/align",
        json!({"image": format!("data:image/png;base64,{}", b64(&scene)), "landmarks": landmarks_json(points)}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!((body["transform"]["s"].as_f64().unwrap() - 1.0 / 1.6).abs() < 1e-9);
    assert!((body["transform"]["theta"].as_f64().unwrap() + 0.3).abs() < 1e-9);
}

#[tokio::test]
async fn bad_inputs_are_rejected_with_codes() {
    let f = fixture();
    let img = b64(&toy(0, 0));
    let collinear = json!({"lx": 10.0, "ly": 10.0, "rx": 20.0, "ry": 20.0, "mx": 30.0, "my": 30.0});
    let (status, body) = post_json(&f.app, "/align", json!({"image": img, "landmarks": collinear})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_landmarks");
    assert_eq!(body["schema_version"], SCHEMA_VERSION);

    let (status, body) = post_json(&f.app, "/align", json!({"image": img})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");

    let (status, body) = post_json(&f.app, "/identify", json!({"image": "***not base64***"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_image");

    let (status, body) = post_json(&f.app, "/identify", json!({"image": b64(&RgbImage::new(50, 50))})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_image");

    let req = Request::builder()
        .method(Method::POST)
        .uri("/identify")
        .header("content-type", "text/plain")
        .body(Body::from("hello"))
        .unwrap();
    let (status, body) = send(&f.app, req).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(error_code(&body), "unsupported_media_type");

    let (status, _) = post_json(&f.app, "/enroll", json!({"individual_id": "a", "species": "lemur", "images": []})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post_json(&f.app, "/enroll", json!({"individual_id": "a", "species": "gorilla", "images": [{"image": img}]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&f.app, Method::GET, "/gallery?species=gorilla").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn empty_gallery_and_unknown_ids_are_not_found() {
    let f = fixture();
    let img = b64(&toy(0, 0));
    let (status, body) = post_json(&f.app, "/identify", json!({"image": img})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "empty_gallery");
    let (status, _) = post_json(&f.app, "/verify", json!({"image": img, "individual_id": "nobody"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.app, Method::GET, "/individuals/nobody").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.app, Method::DELETE, "/individuals/nobody").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn enroll_updates_gallery_and_persists() {
    let f = fixture();
    let (status, body) = enroll(&f.app, "toy000", "lemur", &[toy(0, 0), toy(0, 1), toy(0, 2)]).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["added"], 3);
    assert_eq!(body["created"], true);
    assert_eq!(body["name"], "toy000");

    let (_, listing) = call(&f.app, Method::GET, "/gallery").await;
    assert_eq!(listing["count"], 1);
    assert_eq!(listing["individuals"][0]["template_size"], 3);

    let (_, again) = enroll(&f.app, "toy000", "lemur", &[toy(0, 0), toy(0, 3)]).await;
    assert_eq!(again["added"], 1);
    assert_eq!(again["created"], false);
    assert_eq!(again["template_size"], 4);

    let (status, detail) = call(&f.app, Method::GET, "/individuals/toy000").await;
    assert_eq!(status, StatusCode::OK);
    let refs: Vec<&str> = detail["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["image_ref"].as_str().unwrap())
        .collect();
    assert_eq!(refs.len(), 4);
    assert!(refs.iter().all(|r| r.starts_with("sha256:") && r.len() == 71));

    let (status, body) = enroll(&f.app, "toy000", "chimpanzee", &[toy(0, 4)]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "species_conflict");

    let on_disk = Gallery::load(&f.gallery_path).unwrap();
    assert_eq!(on_disk, f.state.gallery_snapshot().await);
    assert_eq!(on_disk.get("toy000").unwrap().template.len(), 4);
}

#[tokio::test]
async fn verify_score_matches_local_template_score() {
    let f = fixture();
    let enrolled = [toy(2, 0), toy(2, 1)];
    enroll(&f.app, "toy002", "golden_monkey", &enrolled).await;
    let probe = toy(2, 5);
    let (status, body) = post_json(&f.app, "/verify", json!({"image": b64(&probe), "individual_id": "toy002"})).await;
    assert_eq!(status, StatusCode::OK, "{body}");

    let tpl: Vec<_> = enrolled.iter().map(|i| f.recognizer.embed_crop(i).unwrap()).collect();
    let want = template_score(&f.recognizer.embed_crop(&probe).unwrap(), &tpl).unwrap();
    assert_eq!(body["score"].as_f64().unwrap() as f32, want);
    assert_eq!(body["threshold"].as_f64().unwrap() as f32, 0.5);
    assert_eq!(body["accept"], want >= 0.5);

    let (_, strict) = post_json(
        &f.app,
        "/verify",
        json!({"image": b64(&probe), "individual_id": "toy002", "threshold": 1.0}),
    )
    .await;
    assert_eq!(strict["accept"], want >= 1.0);
    let (status, _) = post_json(
        &f.app,
        "/verify",
        json!({"image": b64(&probe), "individual_id": "toy002", "threshold": 2.0}),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identify_ranks_filters_and_forgets_deleted() {
    let f = fixture();
    enroll(&f.app, "toy000", "lemur", &[toy(0, 0), toy(0, 1)]).await;
    enroll(&f.app, "toy001", "lemur", &[toy(1, 0)]).await;
    enroll(&f.app, "toy002", "chimpanzee", &[toy(2, 0)]).await;

    let probe = b64(&toy(0, 0));
    let (status, body) = post_json(&f.app, "/identify", json!({"image": probe, "k": 10})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let candidates = body["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 3);
    assert_eq!(candidates[0]["individual_id"], "toy000");
    assert!((candidates[0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(body["open_set"], false);
    let ranks: Vec<u64> = candidates.iter().map(|c| c["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, [1, 2, 3]);

    let (_, body) = post_json(&f.app, "/identify", json!({"image": probe, "species": "chimpanzee"})).await;
    assert_eq!(body["gallery_size"], 1);
    assert_eq!(body["candidates"][0]["individual_id"], "toy002");

    let (_, body) = post_json(&f.app, "/identify", json!({"image": probe, "k": 1, "threshold": 0.999})).await;
    assert_eq!(body["open_set"], true);
    assert_eq!(body["candidates"].as_array().unwrap().len(), 1);
    assert_eq!(body["candidates"][0]["accepted"], true);

    let (status, _) = post_json(&f.app, "/identify", json!({"image": probe, "k": 0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(&f.app, Method::DELETE, "/individuals/toy000").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["removed_entries"], 2);
    let (_, body) = post_json(&f.app, "/identify", json!({"image": probe, "k": 10})).await;
    let ids: Vec<&str> = body["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["individual_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids.len(), 2);
    assert!(!ids.contains(&"toy000"));
    assert!(Gallery::load(&f.gallery_path).unwrap().get("toy000").is_none());
}

fn multipart(parts: &[(&str, Option<&str>, Vec<u8>)]) -> Request<Body> {
    let boundary = "primid-test-boundary";
    let mut body = Vec::new();
    for (name, filename, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match filename {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n")
                    .as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::builder()
        .method(Method::POST)
        .uri("/placeholder")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn multipart_matches_json() {
    let f = fixture();
    let mut req = multipart(&[
        ("individual_id", None, b"007".to_vec()),
        ("species", None, b"lemur".to_vec()),
        ("name", None, b"Bond".to_vec()),
        ("image", Some("a.png"), png(&toy(3, 0))),
        ("image", Some("b.png"), png(&toy(3, 1))),
    ]);
    *req.uri_mut() = "/enroll".parse().unwrap();
    let (status, body) = send(&f.app, req).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["individual_id"], "007");
    assert_eq!(body["name"], "Bond");
    assert_eq!(body["added"], 2);

    let probe = toy(3, 7);
    let mut req = multipart(&[("k", None, b"1".to_vec()), ("image", Some("p.png"), png(&probe))]);
    *req.uri_mut() = "/identify".parse().unwrap();
    let (status, multi) = send(&f.app, req).await;
    assert_eq!(status, StatusCode::OK, "{multi}");
    let (_, json_body) = post_json(&f.app, "/identify", json!({"image": b64(&probe), "k": 1})).await;
    assert_eq!(multi, json_body);

    let placed = SimilarityParams::from_scale_rotation(1.3, -0.2, 30.0, 25.0);
    let scene = warp_image(&toy(3, 2), &placed, [200, 220]).unwrap();
    let points = f.recognizer.template().target_points().map(|p| placed.apply(p));
    let mut req = multipart(&[
        ("image", Some("scene.png"), png(&scene)),
        ("landmarks", None, landmarks_json(points).to_string().into_bytes()),
    ]);
    *req.uri_mut() = "/align".parse().unwrap();
    let (status, body) = send(&f.app, req).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!((body["transform"]["s"].as_f64().unwrap() - 1.0 / 1.3).abs() < 1e-9);
}
