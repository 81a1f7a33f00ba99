//! JSON service behind the lever UI.
//!
//! The model, statistics and vocabulary are loaded once and shared read-only;
//! each request synthesizes on a blocking worker with its own decoder state.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use prosody_core::corpus::Vocabulary;
use prosody_core::features::{extract_prosody, normalize, ExtractConfig, PhoneAlignment, FEATURE_NAMES, N_FEATURES};
use prosody_core::vocoder::MelInverter;
use prosody_core::wav::{read_wav_bytes, wav_bytes};
use prosody_core::{NormStats, ProsodyVector};
use prosody_eval::measure::{measure_vocoded, vocode, MeasureConfig};
use prosody_tts::{BiasMode, Model, ModelConfig, SynthesisOptions};

use crate::commands::frame_with_silence;

/// Upper bound on `max_frames` per request.
pub const MAX_FRAMES_LIMIT: usize = 4000;

pub struct AppState {
    pub model: Model,
    pub step: u64,
    pub stats: NormStats,
    pub vocab: Vocabulary,
    pub measure: MeasureConfig,
    inverter: MelInverter,
}

impl AppState {
    pub fn new(model: Model, step: u64, stats: NormStats, vocab: Vocabulary) -> anyhow::Result<Self> {
        if vocab.len() != model.config().vocab_size {
            anyhow::bail!("vocabulary has {} labels, model expects {}", vocab.len(), model.config().vocab_size);
        }
        stats.validate()?;
        let inverter = MelInverter::new(&model.config().analysis)?;
        Ok(Self { model, step, stats, vocab, measure: MeasureConfig::default(), inverter })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PhoneLabels {
    /// Space-separated.
    Text(String),
    List(Vec<String>),
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    #[serde(default)]
    pub phone_ids: Option<Vec<usize>>,
    #[serde(default)]
    pub phone_labels: Option<PhoneLabels>,
    /// Exactly the five feature names, each in [-1, 1].
    pub bias: BTreeMap<String, f64>,
    #[serde(default)]
    pub mode: BiasMode,
    #[serde(default)]
    pub want_audio: bool,
    #[serde(default)]
    pub max_frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct Timing {
    pub synthesis_ms: f64,
    pub vocoder_ms: Option<f64>,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct SynthesisResponse {
    /// Input actually synthesized, with `sil` framing.
    pub phone_ids: Vec<usize>,
    /// Natural-log mel magnitudes, one row per frame.
    pub mel: Vec<Vec<f64>>,
    pub hop_ms: f64,
    pub predicted: ProsodyVector,
    pub applied: ProsodyVector,
    /// Features re-extracted from the vocoded audio, normalized.
    pub measured: Option<ProsodyVector>,
    pub wav_base64: Option<String>,
    pub truncated: bool,
    pub attention_path: Vec<usize>,
    pub timing_ms: Timing,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    Unprocessable { message: String, unknown: Vec<String> },
    Internal(String),
}

impl ApiError {
    fn invalid(message: impl Into<String>) -> Self {
        Self::Unprocessable { message: message.into(), unknown: Vec::new() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, Json(json!({ "error": m }))).into_response(),
            ApiError::Unprocessable { message, unknown } => {
                let mut body = json!({ "error": message });
                if !unknown.is_empty() {
                    body["unknown_labels"] = json!(unknown);
                }
                (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
            }
            ApiError::Internal(details) => {
                let id = uuid::Uuid::new_v4().simple().to_string();
                log::error!("request {id}: {details}");
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal error", "id": id }))).into_response()
            }
        }
    }
}

fn bias_vector(bias: &BTreeMap<String, f64>) -> Result<[f64; N_FEATURES], ApiError> {
    if let Some(k) = bias.keys().find(|k| !FEATURE_NAMES.contains(&k.as_str())) {
        return Err(ApiError::invalid(format!("unknown bias key `{k}`; expected {}", FEATURE_NAMES.join(", "))));
    }
    let mut out = [0.0; N_FEATURES];
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        let v = *bias.get(*name).ok_or_else(|| ApiError::invalid(format!("bias.{name} is missing")))?;
        if !(-1.0..=1.0).contains(&v) {
            return Err(ApiError::invalid(format!("bias.{name} = {v} is outside [-1, 1]")));
        }
        out[i] = v;
    }
    Ok(out)
}

impl AppState {
    fn phone_ids(&self, req: &SynthesisRequest) -> Result<Vec<usize>, ApiError> {
        let ids = match (&req.phone_ids, &req.phone_labels) {
            (Some(ids), None) => {
                let size = self.model.config().vocab_size;
                if let Some(bad) = ids.iter().find(|&&id| id >= size) {
                    return Err(ApiError::invalid(format!("phone id {bad} outside 0..{size}")));
                }
                ids.clone()
            }
            (None, Some(labels)) => {
                let labels: Vec<String> = match labels {
                    PhoneLabels::Text(t) => t.split_whitespace().map(String::from).collect(),
                    PhoneLabels::List(l) => l.clone(),
                };
                self.vocab
                    .encode(&labels)
                    .map_err(|unknown| ApiError::Unprocessable { message: "unknown phone labels".into(), unknown })?
            }
            _ => return Err(ApiError::invalid("give exactly one of phone_ids and phone_labels")),
        };
        Ok(frame_with_silence(ids))
    }

    /// Validates and runs one synthesis request.
    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<SynthesisResponse, ApiError> {
        let start = Instant::now();
        let bias = bias_vector(&req.bias)?;
        let ids = self.phone_ids(req)?;
        let max_frames = req.max_frames.unwrap_or(SynthesisOptions::default().max_frames);
        if max_frames == 0 || max_frames > MAX_FRAMES_LIMIT {
            return Err(ApiError::invalid(format!("max_frames must be in 1..={MAX_FRAMES_LIMIT}")));
        }
        let options = SynthesisOptions { mode: req.mode, max_frames, ..SynthesisOptions::default() };
        let s = self.model.synthesize(&ids, &bias, &options).map_err(|e| ApiError::Internal(e.to_string()))?;
        let synthesis_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut warnings = Vec::new();
        if s.truncated {
            warnings.push(format!("stop token did not fire within {max_frames} frames"));
        }
        let (mut measured, mut wav_base64, mut vocoder_ms) = (None, None, None);
        if req.want_audio {
            let t = Instant::now();
            let audio = vocode(&s, &self.inverter, &self.measure).map_err(|e| ApiError::Internal(e.to_string()))?;
            wav_base64 = Some(base64::engine::general_purpose::STANDARD.encode(wav_bytes(&audio)));
            match measure_vocoded(&s, &audio, &ids, &self.vocab, &self.measure) {
                Ok((raw, _)) => measured = Some(normalize(&raw, &self.stats)),
                Err(e) => warnings.push(format!("measurement failed: {e}")),
            }
            vocoder_ms = Some(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(SynthesisResponse {
            phone_ids: ids,
            hop_ms: s.mel.config.hop_ms,
            mel: s.mel.frames,
            predicted: s.predicted,
            applied: s.applied,
            measured,
            wav_base64,
            truncated: s.truncated,
            attention_path: s.attention_path,
            timing_ms: Timing { synthesis_ms, vocoder_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 },
            warnings,
        })
    }

    /// Raw and normalized features of an uploaded utterance.
    pub fn analyze(&self, wav: &[u8], alignment: &str) -> Result<serde_json::Value, ApiError> {
        let audio = read_wav_bytes(wav).map_err(|e| ApiError::invalid(format!("wav: {e}")))?;
        let alignment = PhoneAlignment::parse(alignment).map_err(|e| ApiError::invalid(format!("alignment: {e}")))?;
        let raw = extract_prosody(&audio, &alignment, &ExtractConfig::default()).map_err(|e| ApiError::invalid(e.to_string()))?;
        Ok(json!({ "raw": raw, "normalized": normalize(&raw, &self.stats) }))
    }
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    config: &'a ModelConfig,
    step: u64,
    vocabulary: &'a [String],
    features: [&'static str; N_FEATURES],
    stats_digest: String,
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Response {
    Json(ModelInfo {
        config: state.model.config(),
        step: state.step,
        vocabulary: state.vocab.labels(),
        features: FEATURE_NAMES,
        stats_digest: state.stats.digest(),
    })
    .into_response()
}

async fn feature_stats(State(state): State<Arc<AppState>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.stats.to_json()).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn synthesize(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SynthesisResponse>, ApiError> {
    let req: SynthesisRequest = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    blocking(move || state.synthesize(&req)).await.map(Json)
}

async fn analyze(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Result<Json<serde_json::Value>, ApiError> {
    let (mut wav, mut alignment) = (None, None);
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::BadRequest(e.to_string()))? {
        match field.name().unwrap_or("") {
            "wav" => wav = Some(field.bytes().await.map_err(|e| ApiError::BadRequest(e.to_string()))?),
            "alignment" => alignment = Some(field.text().await.map_err(|e| ApiError::BadRequest(e.to_string()))?),
            other => return Err(ApiError::BadRequest(format!("unexpected field `{other}`; expected wav and alignment"))),
        }
    }
    let wav = wav.ok_or_else(|| ApiError::BadRequest("missing field `wav`".into()))?;
    let alignment = alignment.ok_or_else(|| ApiError::BadRequest("missing field `alignment`".into()))?;
    blocking(move || state.analyze(&wav, &alignment)).await.map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(model_info))
        .route("/features/stats", get(feature_stats))
        .route("/synthesize", post(synthesize))
        .route("/analyze", post(analyze))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
