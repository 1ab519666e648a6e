use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use facecomp_core::checkpoint::{save_checkpoint, sha256_file, SaveOptions};
use facecomp_core::code::FaceCode;
use facecomp_core::geometry::{BoxSet, ComponentId};
use facecomp_core::networks::{DecoderMode, FaceModel, ModelConfig};
use facecomp_core::reasoning::{pca_fit, PcaBasis};
use facecomp_core::sprites::{generate_sprites, save_dataset};
use facecomp_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const SCALE: f64 = 0.2;

struct Fixture {
    _tmp: TempDir,
    checkpoint: PathBuf,
    dataset: PathBuf,
    sidecar: PathBuf,
}

/// Toy CAM checkpoint with non-zero weights everywhere, plus a small labelled
/// sprite folder.
fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let config = ModelConfig::toy(DecoderMode::Cam);
    let model = FaceModel::new(config, BoxSet::default_for(32).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    tch::no_grad(|| {
        for (_, mut p) in model.named_parameters() {
            let v: Vec<f64> = (0..p.numel()).map(|_| rng.sample::<f64, _>(StandardNormal) * SCALE).collect();
            p.copy_(&tch::Tensor::from_slice(&v).view(p.size().as_slice()).to_kind(p.kind()));
        }
    });
    let checkpoint = tmp.path().join("ckpt");
    save_checkpoint(&checkpoint, &model, SaveOptions::default()).unwrap();
    let dataset = tmp.path().join("data");
    save_dataset(&dataset, &generate_sprites(12, 32, 3, None).unwrap()).unwrap();
    let sidecar = tmp.path().join("sidecar");
    Fixture {
        _tmp: tmp,
        checkpoint,
        dataset,
        sidecar,
    }
}

impl Fixture {
    fn config(&self) -> ServiceConfig {
        let mut c = ServiceConfig::new(&self.checkpoint);
        c.dataset = Some(self.dataset.clone());
        c.sidecar_dir = Some(self.sidecar.clone());
        c
    }

    fn app(&self) -> Router {
        router(AppState::load(&self.config()).unwrap())
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body)).await
}

async fn encode_image(app: &Router, id: usize) -> Value {
    let (s, v) = post(app, "/api/encode", json!({ "image_id": id })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

fn id(v: &Value) -> String {
    v["code_id"].as_str().unwrap().to_string()
}

fn dir_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), sha256_file(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[tokio::test]
async fn health_and_images() {
    let f = fixture();
    let app = f.app();
    let (s, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["mode"], "CAM");
    assert_eq!(v["checkpoint"].as_str().unwrap().len(), 64);

    let (s, v) = call(&app, "GET", "/api/images", None).await;
    assert_eq!(s, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 12);
    assert!(list[0]["labels"]["mouth_open"].is_i64());
    let thumb = B64.decode(list[0]["thumbnail_png_base64"].as_str().unwrap()).unwrap();
    assert_eq!(&thumb[1..4], b"PNG");
}

#[tokio::test]
async fn encode_by_upload_matches_encode_by_id() {
    let f = fixture();
    let app = f.app();
    let by_id = encode_image(&app, 2).await;
    let png = std::fs::read(f.dataset.join("000002.png")).unwrap();
    let (s, up) = post(&app, "/api/encode", json!({ "png_base64": B64.encode(png) })).await;
    assert_eq!(s, StatusCode::OK, "{up}");
    assert_eq!(by_id["preview_png_base64"], up["preview_png_base64"]);
    assert_ne!(id(&by_id), id(&up));
    assert_eq!(up["lineage"], json!([id(&up)]));

    let (s, v) = post(&app, "/api/encode", json!({ "png_base64": "not base64!" })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_image")));
    let (s, v) = post(&app, "/api/encode", json!({ "image_id": 99 })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_image")));
    let (s, _) = post(&app, "/api/encode", json!({})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let f = fixture();
    let app = f.app();
    let req = Request::builder()
        .method("POST")
        .uri("/api/edit/attribute")
        .header("content-type", "application/json")
        .body(Body::from("{\"code_id\": "))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(body["error"], "invalid_request");
    assert!(body["detail"].is_string());

    let (s, v) = post(&app, "/api/edit/zero", json!({ "code_id": "c00000000", "components": [], "extra": 1 })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_request")));
    let (s, v) = call(&app, "GET", "/api/code/c12345678", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_code")));
    let (s, _) = call(&app, "GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edits_create_children_and_keep_parents() {
    let f = fixture();
    let app = f.app();
    let root = encode_image(&app, 0).await;
    let root_id = id(&root);

    let (s, v) = post(&app, "/api/edit/attribute", json!({ "code_id": root_id, "direction_id": "smile", "alpha": 1.0 })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_direction")));

    // zeroing nothing reproduces the parent exactly
    let (s, same) = post(&app, "/api/edit/zero", json!({ "code_id": root_id, "components": [] })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(same["image_png_base64"], root["preview_png_base64"]);
    assert_eq!(same["lineage"], json!([root_id, id(&same)]));

    let (s, zeroed) = post(&app, "/api/edit/zero", json!({ "code_id": root_id, "components": ["mouth"] })).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(zeroed["image_png_base64"], root["preview_png_base64"]);
    let (_, code) = call(&app, "GET", &format!("/api/code/{}", id(&zeroed)), None).await;
    let child = FaceCode::from_json(&code["code"]).unwrap();
    assert!(child.component(ComponentId::Mouth).iter().all(|&x| x == 0.0));
    assert_eq!(code["parent"], json!(root_id));
    assert_eq!(code["operation"]["op"], "zero");

    let (s, v) = post(&app, "/api/edit/zero", json!({ "code_id": root_id, "components": ["chin"] })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_components")));

    // the parent is untouched
    let (_, again) = call(&app, "GET", &format!("/api/code/{root_id}"), None).await;
    let parent = FaceCode::from_json(&again["code"]).unwrap();
    assert!(parent.component(ComponentId::Mouth).iter().any(|&x| x != 0.0));
}

#[tokio::test]
async fn transfer_validates_and_respects_levels() {
    let f = fixture();
    let app = f.app();
    let a = id(&encode_image(&app, 0).await);
    let b = id(&encode_image(&app, 1).await);

    let (s, v) = post(&app, "/api/edit/transfer", json!({ "target_code_id": a, "reference_code_id": b, "components": [] })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_components")));
    let (s, v) = post(
        &app,
        "/api/edit/transfer",
        json!({ "target_code_id": a, "reference_code_id": b, "components": ["mouth"], "level_range": "middle" }),
    )
    .await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_level_range")));

    let (s, all) = post(&app, "/api/edit/transfer", json!({ "target_code_id": a, "reference_code_id": b, "components": ["mouth"] })).await;
    assert_eq!(s, StatusCode::OK, "{all}");
    let (_, code) = call(&app, "GET", &format!("/api/code/{}", id(&all)), None).await;
    assert_eq!(code["layered"], false);
    let (_, rb) = call(&app, "GET", &format!("/api/code/{b}"), None).await;
    let (_, ra) = call(&app, "GET", &format!("/api/code/{a}"), None).await;
    let got = FaceCode::from_json(&code["code"]).unwrap();
    let (fa, fb) = (FaceCode::from_json(&ra["code"]).unwrap(), FaceCode::from_json(&rb["code"]).unwrap());
    assert_eq!(got.component(ComponentId::Mouth), fb.component(ComponentId::Mouth));
    assert_eq!(got.component(ComponentId::Nose), fa.component(ComponentId::Nose));
    assert_eq!(got.icon, fa.icon);

    let (s, coarse) = post(
        &app,
        "/api/edit/transfer",
        json!({ "target_code_id": a, "reference_code_id": b, "components": ["mouth"], "level_range": "coarse" }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{coarse}");
    let (_, code) = call(&app, "GET", &format!("/api/code/{}", id(&coarse)), None).await;
    assert_eq!(code["layered"], true);
    let layers = code["layers"].as_array().unwrap();
    let first = FaceCode::from_json(&layers[0]).unwrap();
    let last = FaceCode::from_json(layers.last().unwrap()).unwrap();
    assert_eq!(first.component(ComponentId::Mouth), fb.component(ComponentId::Mouth));
    assert_eq!(last.component(ComponentId::Mouth), fa.component(ComponentId::Mouth));

    // layered codes can be edited further
    let (s, z) = post(&app, "/api/edit/zero", json!({ "code_id": id(&coarse), "components": ["nose"] })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(z["lineage"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn fitted_directions_are_listed_saved_and_usable() {
    let f = fixture();
    let app = f.app();
    let body = json!({
        "name": "mouth_open",
        "method": "meandiff",
        "relevant_components": ["mouth"],
        "dataset_split": "all",
    });
    let (s, v) = post(&app, "/api/directions", body).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["relevant_components"], json!(["mouth"]));
    assert!(v["norm"].as_f64().unwrap() > 0.0);
    assert!((v["block_norms"]["mouth"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(v["block_norms"]["nose"], 0.0);
    assert!(f.sidecar.join("mouth_open.json").exists());

    let (s, v) = post(
        &app,
        "/api/directions",
        json!({ "name": "bad name", "method": "meandiff", "relevant_components": ["mouth"], "dataset_split": "all" }),
    )
    .await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_name")));
    let (s, v) = post(
        &app,
        "/api/directions",
        json!({ "name": "x", "attribute": "mouth_open", "method": "pca", "relevant_components": ["mouth"], "dataset_split": "all" }),
    )
    .await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_method")));

    let (_, list) = call(&app, "GET", "/api/directions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["id"], "mouth_open");

    let root = encode_image(&app, 4).await;
    let edit = |alpha: f64| json!({ "code_id": id(&root), "direction_id": "mouth_open", "alpha": alpha });
    let (s, zero) = post(&app, "/api/edit/attribute", edit(0.0)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(zero["image_png_base64"], root["preview_png_base64"]);
    let (s, moved) = post(&app, "/api/edit/attribute", edit(3.0)).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(moved["image_png_base64"], root["preview_png_base64"]);

    let (s, v) = post(&app, "/api/edit/attribute", json!({ "code_id": id(&root), "direction_id": "mouth_open", "alpha": "big" })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_request")));

    // a restarted service picks the direction up from the sidecar directory
    let (_, list) = call(&f.app(), "GET", "/api/directions", None).await;
    assert_eq!(list[0]["id"], "mouth_open");
}

#[tokio::test]
async fn pca_endpoints() {
    let f = fixture();
    let app = f.app();
    let root = id(&encode_image(&app, 0).await);
    let (s, v) = call(&app, "GET", "/api/pca/nose", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("missing_pca_basis")));
    let (s, v) = post(&app, "/api/edit/pca", json!({ "code_id": root, "component": "nose", "index": 0, "delta": 1.0 })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("missing_pca_basis")));

    // fit a basis offline on encoded codes
    let mut codes = Vec::new();
    for i in 0..6 {
        let v = encode_image(&app, i).await;
        let (_, c) = call(&app, "GET", &format!("/api/code/{}", id(&v)), None).await;
        codes.push(FaceCode::from_json(&c["code"]).unwrap());
    }
    std::fs::create_dir_all(&f.sidecar).unwrap();
    let basis: PcaBasis = pca_fit(&codes, ComponentId::Nose, 3).unwrap();
    basis.save(&f.sidecar.join("pca_nose.json")).unwrap();

    let app = f.app();
    let root = id(&encode_image(&app, 0).await);
    let (s, v) = call(&app, "GET", "/api/pca/nose", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["k"], 3);
    assert_eq!(v["variances"].as_array().unwrap().len(), 3);
    let (s, v) = post(&app, "/api/edit/pca", json!({ "code_id": root, "component": "nose", "index": 1, "delta": 2.0 })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = post(&app, "/api/edit/pca", json!({ "code_id": root, "component": "nose", "index": 3, "delta": 2.0 })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_index")));
}

#[tokio::test]
async fn concurrent_edits_on_one_parent() {
    let f = fixture();
    let app = f.app();
    let root = encode_image(&app, 0).await;
    let root_id = id(&root);
    let (_, before) = call(&app, "GET", &format!("/api/code/{root_id}"), None).await;

    let comps = [["left_eye"], ["right_eye"], ["nose"], ["mouth"]];
    let tasks: Vec<_> = comps
        .iter()
        .map(|c| {
            let app = app.clone();
            let body = json!({ "code_id": root_id, "components": c });
            tokio::spawn(async move { post(&app, "/api/edit/zero", body).await })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["lineage"][0], json!(root_id));
        ids.push(id(&v));
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 4);
    let (_, after) = call(&app, "GET", &format!("/api/code/{root_id}"), None).await;
    assert_eq!(before["code"], after["code"]);
}

#[tokio::test]
async fn evicted_sessions_report_gone() {
    let f = fixture();
    let mut config = f.config();
    config.session_capacity = 2;
    let app = router(AppState::load(&config).unwrap());
    let first = id(&encode_image(&app, 0).await);
    encode_image(&app, 1).await;
    encode_image(&app, 2).await;
    let (s, v) = post(&app, "/api/edit/zero", json!({ "code_id": first, "components": [] })).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::GONE, Some("expired_session")));

    // with a session directory, evicted codes are reloaded
    let mut config = f.config();
    config.session_capacity = 1;
    config.session_dir = Some(f.sidecar.join("sessions"));
    let app = router(AppState::load(&config).unwrap());
    let first = encode_image(&app, 0).await;
    encode_image(&app, 1).await;
    let (s, v) = post(&app, "/api/edit/zero", json!({ "code_id": id(&first), "components": [] })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["image_png_base64"], first["preview_png_base64"]);
}

#[tokio::test]
async fn responses_are_deterministic_across_restarts() {
    let f = fixture();
    let run = || async {
        let app = f.app();
        let root = encode_image(&app, 5).await;
        let (_, z) = post(&app, "/api/edit/zero", json!({ "code_id": id(&root), "components": ["left_eye"] })).await;
        (root["preview_png_base64"].clone(), z["image_png_base64"].clone())
    };
    assert_eq!(run().await, run().await);
}

#[tokio::test]
async fn startup_fails_on_bad_checkpoint_and_never_writes_it() {
    let f = fixture();
    let before = dir_digest(&f.checkpoint);
    {
        let app = f.app();
        let root = id(&encode_image(&app, 0).await);
        post(&app, "/api/edit/zero", json!({ "code_id": root, "components": ["mouth"] })).await;
        let body = json!({ "name": "mouth_open", "method": "meandiff", "relevant_components": ["mouth"], "dataset_split": "all" });
        assert_eq!(post(&app, "/api/directions", body).await.0, StatusCode::OK);
    }
    assert_eq!(dir_digest(&f.checkpoint), before);

    let missing = ServiceConfig::new(f.checkpoint.with_file_name("nope"));
    assert!(AppState::load(&missing).is_err());

    let blob = f.checkpoint.join(facecomp_core::checkpoint::GENERATOR_BLOB);
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    let err = AppState::load(&f.config()).err().expect("corrupt blob must be rejected");
    assert!(err.to_string().contains("ckpt"), "{err}");
}
