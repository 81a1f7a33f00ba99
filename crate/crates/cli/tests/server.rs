mod common;

use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::response::IntoResponse;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use prosody_cli::server::{router, ApiError, AppState, SynthesisResponse};
use prosody_core::corpus::{generate_corpus, CorpusConfig, CorpusManifest, Vocabulary};
use prosody_core::features::{denormalize, extract_prosody_files, normalize, ExtractConfig, FEATURE_NAMES};
use prosody_core::{NormStats, ProsodyVector};

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(common::model(), 7, common::table_stats(), Vocabulary::synthetic(common::VOCAB).unwrap()).unwrap())
}

fn corpus() -> &'static (tempfile::TempDir, CorpusManifest) {
    static CORPUS: OnceLock<(tempfile::TempDir, CorpusManifest)> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&CorpusConfig { size: 2, seed: 5, ..CorpusConfig::default() }, dir.path(), 1).unwrap();
        (dir, manifest)
    })
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    let (s, body) = call(state, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&body).unwrap())
}

async fn post_json(state: &Arc<AppState>, body: impl Into<String>) -> (StatusCode, Value) {
    let req = Request::post("/synthesize").header("content-type", "application/json").body(Body::from(body.into())).unwrap();
    let (s, body) = call(state, req).await;
    (s, serde_json::from_slice(&body).unwrap())
}

fn zero_bias() -> Value {
    json!({ "pitch": 0.0, "pitch_range": 0.0, "duration": 0.0, "energy": 0.0, "tilt": 0.0 })
}

fn request(bias: Value) -> Value {
    json!({ "phone_labels": "AA BB CC", "bias": bias, "mode": "absolute", "max_frames": 12 })
}

#[tokio::test]
async fn health_is_ok() {
    assert_eq!(get(&state(), "/health").await, (StatusCode::OK, json!({ "status": "ok" })));
}

#[tokio::test]
async fn model_info_lists_config_step_and_vocabulary() {
    let (s, v) = get(&state(), "/model/info").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["step"], 7);
    assert_eq!(v["config"]["n_mels"], 32);
    assert_eq!(v["vocabulary"].as_array().unwrap().len(), common::VOCAB);
    assert_eq!(v["vocabulary"][0], "sil");
    assert_eq!(v["features"], json!(FEATURE_NAMES));
}

#[tokio::test]
async fn feature_stats_reparse_and_reproduce_fixtures() {
    let (s, body) = call(&state(), Request::get("/features/stats").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let stats = NormStats::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(stats, common::table_stats());
    for (f, (lo, mid, hi)) in stats.features().iter().zip(common::TABLE) {
        for (b, printed) in [(-1.0, lo), (0.0, mid), (1.0, hi)] {
            let v = denormalize(b, f.median, f.sigma).unwrap();
            assert!((v - printed).abs() <= 0.5 * 0.1f64.powi(if printed.abs() < 1.0 { 3 } else { 1 }) + 1e-9, "{v} vs {printed}");
        }
    }
}

#[tokio::test]
async fn zero_absolute_bias_is_applied_verbatim() {
    let (s, v) = post_json(&state(), request(zero_bias()).to_string()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let resp: SynthesisResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.applied, ProsodyVector::zeros_normalized());
    assert_eq!(resp.phone_ids, vec![0, 1, 2, 3, 0]);
    assert!(!resp.mel.is_empty() && resp.mel.len() <= 12);
    assert!(resp.mel.iter().all(|f| f.len() == 32));
    assert!(resp.measured.is_none() && resp.wav_base64.is_none());
}

#[tokio::test]
async fn identical_requests_give_identical_mels() {
    let st = state();
    let body = request(json!({ "pitch": 0.5, "pitch_range": -0.25, "duration": 0.0, "energy": 1.0, "tilt": -1.0 })).to_string();
    let calls: Vec<_> = (0..4)
        .map(|_| {
            let (st, body) = (st.clone(), body.clone());
            async move { post_json(&st, body).await }
        })
        .collect();
    let results = futures_join(calls).await;
    let first: SynthesisResponse = serde_json::from_value(results[0].1.clone()).unwrap();
    for (s, v) in &results {
        assert_eq!(*s, StatusCode::OK);
        let r: SynthesisResponse = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(r.mel, first.mel);
        assert_eq!(r.applied, first.applied);
    }
}

/// Runs the requests concurrently on the test runtime.
async fn futures_join<F: std::future::Future<Output = (StatusCode, Value)> + Send + 'static>(fs: Vec<F>) -> Vec<(StatusCode, Value)> {
    let handles: Vec<_> = fs.into_iter().map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn out_of_range_bias_is_unprocessable() {
    let mut bias = zero_bias();
    bias["pitch"] = json!(2.0);
    let (s, v) = post_json(&state(), request(bias).to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("pitch"), "{v}");
}

#[tokio::test]
async fn bias_keys_must_be_exactly_the_five_features() {
    let mut extra = zero_bias();
    extra["speed"] = json!(0.0);
    let (s, v) = post_json(&state(), request(extra).to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("speed"));
    let (s, v) = post_json(&state(), request(json!({ "pitch": 0.0 })).to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("pitch_range"));
}

#[tokio::test]
async fn unknown_labels_are_listed() {
    let mut req = request(zero_bias());
    req["phone_labels"] = json!("AA XX BB YY");
    let (s, v) = post_json(&state(), req.to_string()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["unknown_labels"], json!(["XX", "YY"]));
}

#[tokio::test]
async fn phone_input_must_be_given_once() {
    let mut both = request(zero_bias());
    both["phone_ids"] = json!([1, 2]);
    assert_eq!(post_json(&state(), both.to_string()).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let mut ids = request(zero_bias());
    ids.as_object_mut().unwrap().remove("phone_labels");
    ids["phone_ids"] = json!([1, 99]);
    assert_eq!(post_json(&state(), ids.to_string()).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn malformed_json_is_a_bad_request() {
    let (s, v) = post_json(&state(), "{\"phone_labels\": \"AA\",").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let (s, v) = post_json(&state(), json!({ "phone_labels": "AA" }).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("bias"), "{v}");
    let mut typo = request(zero_bias());
    typo["want_audi"] = json!(true);
    let (s, v) = post_json(&state(), typo.to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("want_audi"));
    let mut mode = request(zero_bias());
    mode["mode"] = json!("relative");
    assert_eq!(post_json(&state(), mode.to_string()).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn want_audio_returns_a_wav_and_measurement() {
    let mut req = request(zero_bias());
    req["want_audio"] = json!(true);
    req["max_frames"] = json!(40);
    let (s, v) = post_json(&state(), req.to_string()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let resp: SynthesisResponse = serde_json::from_value(v).unwrap();
    let wav = base64::engine::general_purpose::STANDARD.decode(resp.wav_base64.unwrap()).unwrap();
    assert_eq!(&wav[..4], b"RIFF");
    let audio = prosody_core::wav::read_wav_bytes(&wav).unwrap();
    assert_eq!(audio.sample_rate, 24_000);
    // An untrained model may produce audio whose features cannot be
    // measured; the response then says why.
    assert!(resp.measured.is_some() || resp.warnings.iter().any(|w| w.contains("measurement")), "{:?}", resp.warnings);
    assert!(resp.timing_ms.vocoder_ms.is_some());
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "XbOuNdArYx";
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post("/analyze").header("content-type", format!("multipart/form-data; boundary={boundary}")).body(Body::from(body)).unwrap()
}

#[tokio::test]
async fn analyze_matches_file_extraction() {
    let (_, manifest) = corpus();
    let e = &manifest.entries[0];
    let wav = std::fs::read(manifest.wav_path(e)).unwrap();
    let align = std::fs::read(manifest.alignment_path(e)).unwrap();
    let (s, body) = call(&state(), multipart(&[("wav", &wav), ("alignment", &align)])).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let expected = extract_prosody_files(manifest.wav_path(e), manifest.alignment_path(e), &ExtractConfig::default()).unwrap();
    let raw: ProsodyVector = serde_json::from_value(v["raw"].clone()).unwrap();
    assert_eq!(raw, expected);
    let normalized: ProsodyVector = serde_json::from_value(v["normalized"].clone()).unwrap();
    assert_eq!(normalized, normalize(&expected, &common::table_stats()));
}

#[tokio::test]
async fn analyze_rejects_missing_or_broken_parts() {
    let (_, manifest) = corpus();
    let align = std::fs::read(manifest.alignment_path(&manifest.entries[0])).unwrap();
    assert_eq!(call(&state(), multipart(&[("alignment", &align)])).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state(), multipart(&[("wav", b"not a wav"), ("alignment", &align)])).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn internal_errors_hide_details_behind_an_id() {
    let resp = ApiError::Internal("secret stack trace".into()).into_response();
    assert_eq!(resp.status(), StatusCode::INTERNAL_SERVER_ERROR);
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "internal error");
    assert_eq!(v["id"].as_str().unwrap().len(), 32);
    assert!(!String::from_utf8_lossy(&body).contains("secret"));
}
