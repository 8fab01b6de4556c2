mod common;

use std::sync::Arc;

use base64::Engine as _;
use common::*;
use procmem::config::ServiceConfig;
use procmem::ops;
use procmem::server::{AppState, BackgroundServer};
use procmem_core::bank::{read_adapter, Bank};
use procmem_core::embed::OneHotEmbedder;
use procmem_core::fuse::FusionMode;
use procmem_core::schema::ProceduralState;
use serde_json::{json, Value};

fn config(bank: &std::path::Path) -> ServiceConfig {
    ServiceConfig {
        listen: ([127, 0, 0, 1], 0).into(),
        bank: bank.to_path_buf(),
        ..ServiceConfig::default()
    }
}

fn start(cfg: ServiceConfig) -> (Arc<AppState>, BackgroundServer) {
    let state = AppState::new(cfg.clone());
    let server = BackgroundServer::start(state.clone(), cfg.listen).unwrap();
    (state, server)
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

fn get(url: &str) -> (u16, Value) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(url: &str, body: &Value) -> (u16, Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post_raw(url: &str, body: &str) -> (u16, Value) {
    let mut r = agent()
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn health_reports_loading_then_ready() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    let (status, body) = get(&server.url("/v1/health"));
    assert_eq!((status, body["status"].as_str()), (503, Some("loading")));
    let (status, _) = post(&server.url("/v1/retrieve"), &json!({"state": mug_state()}));
    assert_eq!(status, 503);

    state.load().unwrap();
    let (status, body) = get(&server.url("/v1/health"));
    assert_eq!(status, 200);
    assert_eq!(body, json!({"status": "ok", "memories": 3, "embed_model_id": "fixture-onehot"}));

    state.begin_reload();
    assert_eq!(get(&server.url("/v1/health")).0, 503);
}

#[test]
fn memories_lists_bank() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    state.load().unwrap();
    let (status, body) = get(&server.url("/v1/memories"));
    assert_eq!(status, 200);
    assert_eq!(body["count"], 3);
    let ids: Vec<&str> = body["memories"].as_array().unwrap().iter().map(|m| m["task_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["drawer", "mug", "button"]);
    assert_eq!(body["memories"][1]["rank"], 2);
    assert_eq!(body["memories"][1]["layers"], json!([LAYER]));
}

#[test]
fn retrieve_matches_in_process_and_clamps_k() {
    let dir = tempfile::tempdir().unwrap();
    let bank = fixture_bank(dir.path());
    let (state, server) = start(config(&bank));
    state.load().unwrap();

    let (status, body) = post(&server.url("/v1/retrieve"), &json!({"state": mug_state(), "k": 10, "temperature": 0.5}));
    assert_eq!(status, 200, "{body}");
    let snapshot = Bank::open(&bank).unwrap().snapshot().unwrap();
    let expected = ops::retrieve(&snapshot, &OneHotEmbedder::new(), &mug_state(), 10, 0.5, FusionMode::Factor).unwrap();
    assert_eq!(body, serde_json::to_value(&expected).unwrap());
    assert_eq!(body["plan"]["selected"].as_array().unwrap().len(), 3);
    assert_eq!(body["matches"][0]["task_id"], "mug");
    assert_eq!(body["matches"][0]["similarity"], 1.0);
}

#[test]
fn retrieve_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    state.load().unwrap();
    let url = server.url("/v1/retrieve");

    let mut bad = serde_json::to_value(mug_state()).unwrap();
    bad["action"] = json!("grab");
    let (status, body) = post(&url, &json!({"state": bad}));
    assert_eq!(status, 400);
    assert_eq!(body["error"]["module"], "schema");
    assert_eq!(body["error"]["kind"], "InvalidEnumValue");

    let (status, body) = post(&url, &json!({"state": mug_state(), "k": 0}));
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("InvalidK")));

    let (status, body) = post_raw(&url, "{not json");
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("InvalidBody")));
}

#[test]
fn fuse_writes_content_addressed_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    state.load().unwrap();
    let (_, retrieval) = post(&server.url("/v1/retrieve"), &json!({"state": mug_state(), "k": 2}));

    let (status, artifact) = post(&server.url("/v1/fuse"), &retrieval["plan"]);
    assert_eq!(status, 200, "{artifact}");
    let path = std::path::PathBuf::from(artifact["path"].as_str().unwrap());
    assert!(path.starts_with(dir.path().join("bank/artifacts")));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(artifact["size_bytes"], bytes.len());
    assert_eq!(path.file_stem().unwrap().to_str().unwrap(), artifact["digest"].as_str().unwrap());
    let fused = read_adapter(&path).unwrap();
    assert_eq!(fused.rank(), 2);

    let (status, again) = post(&server.url("/v1/fuse"), &retrieval["plan"]);
    assert_eq!((status, &again), (200, &artifact));

    let (status, delta) = post(
        &server.url("/v1/fuse"),
        &json!({"selected": ["mug", "drawer"], "weights": [0.5, 0.5], "mode": "delta"}),
    );
    assert_eq!(status, 200);
    assert_eq!(delta["mode"], "delta");
    assert_ne!(delta["digest"], artifact["digest"]);
}

#[test]
fn fuse_rejects_bad_plans() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    state.load().unwrap();
    let url = server.url("/v1/fuse");

    let (status, body) = post(&url, &json!({"selected": ["mug", "drawer"], "weights": [0.5, 0.4]}));
    assert_eq!(status, 400);
    assert_eq!((body["error"]["module"].as_str(), body["error"]["kind"].as_str()), (Some("fuse"), Some("InvalidPlan")));

    let (status, body) = post(&url, &json!({"selected": ["mug", "ghost"], "weights": [0.5, 0.5]}));
    assert_eq!(status, 400);
    assert_eq!(body["error"]["kind"], "UnknownTaskId");
}

fn extract_body() -> Value {
    json!({
        "image_b64": base64::engine::general_purpose::STANDARD.encode([0x89, b'P', b'N', b'G']),
        "instruction": "hang the mug",
        "history": [],
    })
}

#[test]
fn extract_against_mock_vlm() {
    let dir = tempfile::tempdir().unwrap();
    let vlm = MockServer::start(vec![chat_reply("not json"), chat_reply(&mug_state().to_canonical_json())]);
    let mut cfg = config(&fixture_bank(dir.path()));
    cfg.extractor.endpoint = Some(vlm.url.clone());
    let (state, server) = start(cfg);
    state.load().unwrap();

    let (status, body) = post(&server.url("/v1/extract"), &extract_body());
    assert_eq!(status, 200, "{body}");
    assert_eq!(ProceduralState::from_json_value(&body["state"]).unwrap(), mug_state());
    assert_eq!(body["attempts"].as_array().unwrap().len(), 2);
    assert_eq!(body["attempts"][0]["outcome"]["kind"], "malformed");
    assert!(body["fallback"].is_null());

    let sent: Value = serde_json::from_str(&vlm.bodies()[0]).unwrap();
    let parts = sent["messages"][1]["content"].as_array().unwrap();
    assert!(parts.iter().any(|p| p["data"] == "iVBORw=="));
}

#[test]
fn extract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (state, server) = start(config(&fixture_bank(dir.path())));
    state.load().unwrap();
    let (status, body) = post(&server.url("/v1/extract"), &extract_body());
    assert_eq!((status, body["error"]["kind"].as_str()), (502, Some("EndpointUnavailable")));

    let vlm = MockServer::start(vec![]);
    let mut cfg = config(&dir.path().join("bank"));
    cfg.extractor.endpoint = Some(vlm.url.clone());
    cfg.extractor.max_retries = 0;
    let (state, server) = start(cfg);
    state.load().unwrap();

    let mut bad = extract_body();
    bad["image_b64"] = json!("***");
    let (status, body) = post(&server.url("/v1/extract"), &bad);
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("InvalidRequest")));

    let mut empty = extract_body();
    empty["instruction"] = json!("");
    assert_eq!(post(&server.url("/v1/extract"), &empty).0, 400);

    let (status, body) = post(&server.url("/v1/extract"), &extract_body());
    assert_eq!((status, body["error"]["module"].as_str()), (502, Some("extract")));
}

#[test]
fn load_rejects_embedder_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&fixture_bank(dir.path()));
    cfg.embed.backend = procmem::config::EmbedBackend::Hashed;
    let state = AppState::new(cfg);
    let err = state.load().unwrap_err();
    assert_eq!(err.kind, "EmbedModelMismatch");
    assert!(state.current().is_none());
}

#[test]
fn snapshot_isolated_from_bank_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let bank = fixture_bank(dir.path());
    let (state, server) = start(config(&bank));
    state.load().unwrap();

    let url = server.url("/v1/retrieve");
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let url = url.clone();
            std::thread::spawn(move || {
                (0..20)
                    .map(|_| post(&url, &json!({"state": mug_state(), "k": 10})).1["matches"].as_array().unwrap().len())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let adapter = write_adapter_file(dir.path(), "lid", 2, 0.3);
    Bank::open(&bank).unwrap().register_memory("lid", vec![mug_state()], &adapter).unwrap();
    for r in readers {
        assert!(r.join().unwrap().iter().all(|&n| n == 3));
    }
    assert_eq!(get(&server.url("/v1/health")).1["memories"], 3);

    state.load().unwrap();
    assert_eq!(get(&server.url("/v1/health")).1["memories"], 4);
}
