//! Typed request/response contracts for every generation stage, plus the
//! retrying call layer that sits between the orchestrator and any backend.
//!
//! Every stage response is validated here, at the boundary: a malformed
//! remote reply never reaches the orchestrator. Retries apply only to
//! transient failures (timeouts, transport errors, 5xx-class codes) with
//! exponential backoff and full jitter; contract violations and 4xx-class
//! codes fail immediately.

mod http;
pub mod mock;

pub use http::HttpBackend;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::parse_vqa_pairs;
use crate::eval::{EmbedProvider, EvalError};
use crate::mask::{MaskTrack, RleMask};
use crate::util;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("request is invalid: {0}")]
    BadRequest(String),
    #[error("backend reply violates the stage contract: {0}")]
    BadResponse(String),
    #[error("backend call timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("gave up after {attempts} attempts; last failure: {last}")]
    TransientExhausted { attempts: u32, last: String },
    #[error("no backend configured for stage {0}")]
    MissingBackend(StageKind),
    #[error("asset i/o failed: {0}")]
    AssetIo(String),
}

impl GatewayError {
    /// Transient failures are worth retrying: timeouts, transport errors, and
    /// 5xx-class remote codes. Everything else is permanent.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport(_) => true,
            GatewayError::Remote { code, .. } => (500..=599).contains(code),
            _ => false,
        }
    }
}

impl From<io::Error> for GatewayError {
    fn from(err: io::Error) -> Self {
        GatewayError::AssetIo(err.to_string())
    }
}

/// The pipeline stage protocols. `Embed` is not part of the per-sample DAG;
/// it serves evaluation.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Caption,
    Vqa,
    Video,
    Segment,
    Propagate,
    Embed,
    Audio,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::Caption,
        StageKind::Vqa,
        StageKind::Video,
        StageKind::Segment,
        StageKind::Propagate,
        StageKind::Embed,
        StageKind::Audio,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Caption => "caption",
            StageKind::Vqa => "vqa",
            StageKind::Video => "video",
            StageKind::Segment => "segment",
            StageKind::Propagate => "propagate",
            StageKind::Embed => "embed",
            StageKind::Audio => "audio",
        }
    }

    /// The POST path for this stage under the common wire prefix.
    pub fn endpoint_path(&self) -> String {
        format!("/v1/{}", self.name())
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which inputs drive video generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    TextOnly,
    ImageOnly,
    Both,
}

impl std::str::FromStr for ConditioningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text_only" => Ok(ConditioningMode::TextOnly),
            "image_only" => Ok(ConditioningMode::ImageOnly),
            "both" => Ok(ConditioningMode::Both),
            other => Err(format!(
                "unknown conditioning mode {other:?}; use text_only, image_only, or both"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// The raw wire-format reply; parsing into a `VqaSet` happens upstream, but
/// the three-pair contract is enforced at this boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub caption: String,
    pub conditioning_mode: ConditioningMode,
    pub num_frames: u32,
    pub fps: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoResponse {
    pub frame_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    /// Frame 0 of the generated video.
    pub frame_ref: String,
    pub width: u32,
    pub height: u32,
    /// Category metadata guiding which objects to segment.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMask {
    pub object_id: u64,
    pub category: String,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub objects: Vec<SeedMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateRequest {
    pub frame_refs: Vec<String>,
    pub seed_masks: Vec<SeedMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateResponse {
    pub tracks: Vec<MaskTrack>,
}

/// Embed either a text or an image reference; exactly one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRequest {
    pub frame_refs: Vec<String>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioResponse {
    pub audio_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "body", rename_all = "snake_case")]
pub enum StageRequest {
    Caption(CaptionRequest),
    Vqa(VqaRequest),
    Video(VideoRequest),
    Segment(SegmentRequest),
    Propagate(PropagateRequest),
    Embed(EmbedRequest),
    Audio(AudioRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "body", rename_all = "snake_case")]
pub enum StageResponse {
    Caption(CaptionResponse),
    Vqa(VqaResponse),
    Video(VideoResponse),
    Segment(SegmentResponse),
    Propagate(PropagateResponse),
    Embed(EmbedResponse),
    Audio(AudioResponse),
}

impl StageRequest {
    pub fn kind(&self) -> StageKind {
        match self {
            StageRequest::Caption(_) => StageKind::Caption,
            StageRequest::Vqa(_) => StageKind::Vqa,
            StageRequest::Video(_) => StageKind::Video,
            StageRequest::Segment(_) => StageKind::Segment,
            StageRequest::Propagate(_) => StageKind::Propagate,
            StageRequest::Embed(_) => StageKind::Embed,
            StageRequest::Audio(_) => StageKind::Audio,
        }
    }

    /// Deterministic serialization (sorted field order) used for cache keys.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("stage request serializes");
        util::canonical_json(&value).into_bytes()
    }

    /// Check the request-side invariants before any backend is contacted.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::BadRequest(msg));
        match self {
            StageRequest::Caption(req) => {
                if req.prompt.trim().is_empty() {
                    return bad("caption prompt is empty".into());
                }
            }
            StageRequest::Vqa(req) => {
                if req.prompt.trim().is_empty() {
                    return bad("vqa prompt is empty".into());
                }
            }
            StageRequest::Video(req) => {
                if req.num_frames == 0 {
                    return bad("num_frames must be at least 1".into());
                }
                if req.fps == 0 {
                    return bad("fps must be at least 1".into());
                }
                let has_image = req.image_ref.as_deref().is_some_and(|r| !r.is_empty());
                if req.conditioning_mode != ConditioningMode::TextOnly && !has_image {
                    return bad(format!(
                        "conditioning mode {:?} requires an image_ref",
                        req.conditioning_mode
                    ));
                }
                if req.conditioning_mode != ConditioningMode::ImageOnly
                    && req.caption.trim().is_empty()
                {
                    return bad("text conditioning requires a caption".into());
                }
            }
            StageRequest::Segment(req) => {
                if req.frame_ref.is_empty() {
                    return bad("segment frame_ref is empty".into());
                }
                if req.width == 0 || req.height == 0 {
                    return bad("segment grid dimensions must be non-zero".into());
                }
            }
            StageRequest::Propagate(req) => {
                if req.frame_refs.is_empty() {
                    return bad("propagate needs at least one frame".into());
                }
                let mut ids = BTreeSet::new();
                for seed in &req.seed_masks {
                    if !ids.insert(seed.object_id) {
                        return bad(format!("duplicate seed object_id {}", seed.object_id));
                    }
                }
                if let Some(first) = req.seed_masks.first() {
                    let dims = (first.mask.width(), first.mask.height());
                    for seed in &req.seed_masks[1..] {
                        if (seed.mask.width(), seed.mask.height()) != dims {
                            return bad("seed masks have mixed dimensions".into());
                        }
                    }
                }
            }
            StageRequest::Embed(req) => {
                let has_text = req.text.as_deref().is_some_and(|t| !t.is_empty());
                let has_image = req.image_ref.as_deref().is_some_and(|r| !r.is_empty());
                if has_text == has_image {
                    return bad("embed takes exactly one of text or image_ref".into());
                }
            }
            StageRequest::Audio(req) => {
                if req.frame_refs.is_empty() {
                    return bad("audio needs at least one frame".into());
                }
                if req.caption.trim().is_empty() {
                    return bad("audio caption is empty".into());
                }
            }
        }
        Ok(())
    }
}

impl StageResponse {
    pub fn kind(&self) -> StageKind {
        match self {
            StageResponse::Caption(_) => StageKind::Caption,
            StageResponse::Vqa(_) => StageKind::Vqa,
            StageResponse::Video(_) => StageKind::Video,
            StageResponse::Segment(_) => StageKind::Segment,
            StageResponse::Propagate(_) => StageKind::Propagate,
            StageResponse::Embed(_) => StageKind::Embed,
            StageResponse::Audio(_) => StageKind::Audio,
        }
    }

    /// Enforce the response-side invariants against the request that produced
    /// this reply.
    pub fn validate_against(&self, request: &StageRequest) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::BadResponse(msg));
        if self.kind() != request.kind() {
            return bad(format!(
                "stage mismatch: {} reply to a {} request",
                self.kind(),
                request.kind()
            ));
        }
        match (self, request) {
            (StageResponse::Caption(resp), _) => {
                if resp.text.trim().is_empty() {
                    return bad("caption text is empty".into());
                }
            }
            (StageResponse::Vqa(resp), _) => {
                let pairs = parse_vqa_pairs(&resp.text)
                    .map_err(|err| GatewayError::BadResponse(format!("vqa reply: {err}")))?;
                if pairs.len() != 3 {
                    return bad(format!("vqa reply has {} pairs, expected 3", pairs.len()));
                }
            }
            (StageResponse::Video(resp), StageRequest::Video(req)) => {
                if resp.frame_refs.len() != req.num_frames as usize {
                    return bad(format!(
                        "video reply has {} frames, expected {}",
                        resp.frame_refs.len(),
                        req.num_frames
                    ));
                }
                if resp.frame_refs.iter().any(String::is_empty) {
                    return bad("video reply contains an empty frame ref".into());
                }
            }
            (StageResponse::Segment(resp), StageRequest::Segment(req)) => {
                let mut ids = BTreeSet::new();
                for object in &resp.objects {
                    if !ids.insert(object.object_id) {
                        return bad(format!("duplicate object_id {}", object.object_id));
                    }
                    if object.mask.width() != req.width || object.mask.height() != req.height {
                        return bad(format!(
                            "mask for object {} is {}x{}, expected {}x{}",
                            object.object_id,
                            object.mask.width(),
                            object.mask.height(),
                            req.width,
                            req.height
                        ));
                    }
                }
            }
            (StageResponse::Propagate(resp), StageRequest::Propagate(req)) => {
                let expected: BTreeSet<u64> =
                    req.seed_masks.iter().map(|s| s.object_id).collect();
                let got: BTreeSet<u64> = resp.tracks.iter().map(|t| t.object_id()).collect();
                if expected != got {
                    return bad(format!(
                        "tracks cover object ids {got:?}, expected {expected:?}"
                    ));
                }
                if resp.tracks.len() != req.seed_masks.len() {
                    return bad("propagate reply repeats an object id".into());
                }
                for track in &resp.tracks {
                    if track.len() != req.frame_refs.len() {
                        return bad(format!(
                            "track {} has {} frames, expected {}",
                            track.object_id(),
                            track.len(),
                            req.frame_refs.len()
                        ));
                    }
                }
            }
            (StageResponse::Embed(resp), _) => {
                if resp.vector.is_empty() {
                    return bad("embed reply vector is empty".into());
                }
                let norm = resp.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return bad(format!("embed reply norm {norm} is not within 1e-6 of 1"));
                }
            }
            (StageResponse::Audio(resp), _) => {
                if resp.audio_ref.is_empty() {
                    return bad("audio reply ref is empty".into());
                }
            }
            _ => unreachable!("kind equality checked above"),
        }
        Ok(())
    }
}

/// Where a backend may write binary assets for the current call, and the
/// root-relative prefix its response refs should carry.
#[derive(Debug, Clone)]
pub struct AssetSink {
    dir: PathBuf,
    ref_prefix: String,
}

impl AssetSink {
    pub fn new(dir: impl Into<PathBuf>, ref_prefix: impl Into<String>) -> Self {
        AssetSink {
            dir: dir.into(),
            ref_prefix: ref_prefix.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ref_prefix(&self) -> &str {
        &self.ref_prefix
    }

    /// Write one asset and return the ref to put in the response.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<String, GatewayError> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.dir.join(name), bytes)?;
        Ok(self.make_ref(name))
    }

    pub fn make_ref(&self, name: &str) -> String {
        if self.ref_prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.ref_prefix)
        }
    }
}

/// A stage backend. Implementations must be shareable across workers; each
/// call is independent.
pub trait Backend: Send + Sync {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError>;
}

/// Retry budget for one stage endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts = max_retries + 1.
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_base: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallResult {
    pub response: StageResponse,
    pub attempts: u32,
}

/// Invoke a backend with validation on both sides and retries on transient
/// failures. Backoff doubles per attempt with full jitter. Requests are
/// expected to be idempotent: a backend may replay a cached result for the
/// same seed.
pub fn call(
    backend: &dyn Backend,
    policy: &RetryPolicy,
    request: &StageRequest,
    sink: &AssetSink,
) -> Result<CallResult, GatewayError> {
    request.validate()?;
    let mut attempts: u32 = 0;
    loop {
        attempts += 1;
        match backend.invoke(request, sink) {
            Ok(response) => {
                response.validate_against(request)?;
                return Ok(CallResult { response, attempts });
            }
            Err(err) if err.is_transient() => {
                if attempts > policy.max_retries {
                    return Err(GatewayError::TransientExhausted {
                        attempts,
                        last: err.to_string(),
                    });
                }
                let exp = policy.backoff_base.saturating_mul(1 << (attempts - 1).min(16));
                std::thread::sleep(full_jitter(exp, request, attempts));
            }
            Err(err) => return Err(err),
        }
    }
}

fn full_jitter(delay: Duration, request: &StageRequest, attempt: u32) -> Duration {
    let nanos = delay.as_nanos() as u64;
    if nanos == 0 {
        return Duration::ZERO;
    }
    let mut seed_bytes = request.canonical_bytes();
    seed_bytes.extend_from_slice(&attempt.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(util::sha256_u64(&seed_bytes));
    Duration::from_nanos(rng.next_u64() % nanos)
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_base_ms() -> u64 {
    250
}

/// Connection settings for one remote stage endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub stage: StageKind,
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

impl BackendEndpoint {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.is_empty() {
            return Err(GatewayError::BadRequest(format!(
                "endpoint for stage {} has an empty base_url",
                self.stage
            )));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::BadRequest(format!(
                "endpoint for stage {} must have timeout > 0",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
        }
    }
}

/// One backend (plus retry policy) per stage kind.
#[derive(Clone)]
pub struct BackendSet {
    entries: BTreeMap<StageKind, (Arc<dyn Backend>, RetryPolicy)>,
}

impl BackendSet {
    pub fn empty() -> Self {
        BackendSet {
            entries: BTreeMap::new(),
        }
    }

    /// The deterministic seeded mock suite for every stage.
    pub fn mock(seed: u64) -> Self {
        mock::mock_suite(seed)
    }

    /// HTTP backends from endpoint configs.
    pub fn from_endpoints<'a, I>(endpoints: I) -> Result<Self, GatewayError>
    where
        I: IntoIterator<Item = &'a BackendEndpoint>,
    {
        let mut set = BackendSet::empty();
        for endpoint in endpoints {
            let policy = endpoint.retry_policy();
            let backend = HttpBackend::new(endpoint.clone())?;
            set.insert(endpoint.stage, Arc::new(backend), policy);
        }
        Ok(set)
    }

    pub fn insert(&mut self, kind: StageKind, backend: Arc<dyn Backend>, policy: RetryPolicy) {
        self.entries.insert(kind, (backend, policy));
    }

    /// Replace one stage's backend, keeping its policy. Handy for wrapping a
    /// stage with instrumentation.
    pub fn with_backend(mut self, kind: StageKind, backend: Arc<dyn Backend>) -> Self {
        let policy = self
            .entries
            .get(&kind)
            .map(|(_, p)| p.clone())
            .unwrap_or_default();
        self.entries.insert(kind, (backend, policy));
        self
    }

    pub fn with_policy(mut self, kind: StageKind, policy: RetryPolicy) -> Self {
        if let Some(entry) = self.entries.get_mut(&kind) {
            entry.1 = policy;
        }
        self
    }

    pub fn backend(&self, kind: StageKind) -> Result<&(Arc<dyn Backend>, RetryPolicy), GatewayError> {
        self.entries
            .get(&kind)
            .ok_or(GatewayError::MissingBackend(kind))
    }

    /// Dispatch a request to its stage backend with the stage's retry policy.
    pub fn call(&self, request: &StageRequest, sink: &AssetSink) -> Result<CallResult, GatewayError> {
        let (backend, policy) = self.backend(request.kind())?;
        call(backend.as_ref(), policy, request, sink)
    }
}

/// Adapter exposing the embed stage to the evaluation harness.
pub struct GatewayEmbedder {
    set: BackendSet,
    scratch: PathBuf,
}

impl GatewayEmbedder {
    pub fn new(set: BackendSet, scratch: impl Into<PathBuf>) -> Self {
        GatewayEmbedder {
            set,
            scratch: scratch.into(),
        }
    }

    fn embed(&self, request: EmbedRequest) -> Result<Vec<f64>, EvalError> {
        let sink = AssetSink::new(&self.scratch, "");
        let result = self
            .set
            .call(&StageRequest::Embed(request), &sink)
            .map_err(|err| EvalError::EmbedFailure(err.to_string()))?;
        match result.response {
            StageResponse::Embed(resp) => Ok(resp.vector),
            other => Err(EvalError::EmbedFailure(format!(
                "embed backend answered with a {} response",
                other.kind()
            ))),
        }
    }
}

impl EmbedProvider for GatewayEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        self.embed(EmbedRequest {
            text: Some(text.to_string()),
            image_ref: None,
        })
    }

    fn embed_image(&self, image_ref: &str) -> Result<Vec<f64>, EvalError> {
        self.embed(EmbedRequest {
            text: None,
            image_ref: Some(image_ref.to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn caption_request() -> StageRequest {
        StageRequest::Caption(CaptionRequest {
            prompt: "describe".into(),
            image_ref: Some("img.jpg".into()),
        })
    }

    struct FlakyCaption {
        failures: AtomicU32,
    }

    impl Backend for FlakyCaption {
        fn invoke(&self, _req: &StageRequest, _sink: &AssetSink) -> Result<StageResponse, GatewayError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::Remote {
                    code: 503,
                    message: "unavailable".into(),
                });
            }
            Ok(StageResponse::Caption(CaptionResponse {
                text: "a caption".into(),
            }))
        }
    }

    fn zero_backoff(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            backoff_base: Duration::ZERO,
        }
    }

    fn scratch_sink() -> (tempfile::TempDir, AssetSink) {
        let dir = tempfile::tempdir().unwrap();
        let sink = AssetSink::new(dir.path(), "scratch");
        (dir, sink)
    }

    #[test]
    fn call_succeeds_first_attempt() {
        let backend = FlakyCaption { failures: AtomicU32::new(0) };
        let (_dir, sink) = scratch_sink();
        let result = call(&backend, &zero_backoff(3), &caption_request(), &sink).unwrap();
        assert_eq!(result.attempts, 1);
    }

    #[test]
    fn call_retries_through_transient_failures() {
        let backend = FlakyCaption { failures: AtomicU32::new(2) };
        let (_dir, sink) = scratch_sink();
        let result = call(&backend, &zero_backoff(3), &caption_request(), &sink).unwrap();
        assert_eq!(result.attempts, 3);
    }

    #[test]
    fn call_exhausts_retries() {
        let backend = FlakyCaption { failures: AtomicU32::new(u32::MAX) };
        let (_dir, sink) = scratch_sink();
        let err = call(&backend, &zero_backoff(2), &caption_request(), &sink).unwrap_err();
        assert!(matches!(err, GatewayError::TransientExhausted { attempts: 3, .. }));
    }

    struct Canned(StageResponse);

    impl Backend for Canned {
        fn invoke(&self, _req: &StageRequest, _sink: &AssetSink) -> Result<StageResponse, GatewayError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn call_does_not_retry_bad_response() {
        let backend = Canned(StageResponse::Vqa(VqaResponse {
            text: "Q: one?\nA: yes\nQ: two?\nA: no\n".into(),
        }));
        let request = StageRequest::Vqa(VqaRequest {
            prompt: "three pairs please".into(),
            image_ref: None,
        });
        let (_dir, sink) = scratch_sink();
        let err = call(&backend, &zero_backoff(5), &request, &sink).unwrap_err();
        assert!(matches!(err, GatewayError::BadResponse(_)), "{err:?}");
    }

    struct Rejecting(u16);

    impl Backend for Rejecting {
        fn invoke(&self, _req: &StageRequest, _sink: &AssetSink) -> Result<StageResponse, GatewayError> {
            Err(GatewayError::Remote {
                code: self.0,
                message: "nope".into(),
            })
        }
    }

    #[test]
    fn call_does_not_retry_4xx() {
        let backend = Rejecting(404);
        let (_dir, sink) = scratch_sink();
        let err = call(&backend, &zero_backoff(5), &caption_request(), &sink).unwrap_err();
        assert_eq!(err, GatewayError::Remote { code: 404, message: "nope".into() });
    }

    #[test]
    fn video_request_requires_image_when_conditioned_on_it() {
        let request = StageRequest::Video(VideoRequest {
            image_ref: None,
            caption: "a scene".into(),
            conditioning_mode: ConditioningMode::Both,
            num_frames: 4,
            fps: 8,
            seed: 1,
        });
        assert!(matches!(request.validate(), Err(GatewayError::BadRequest(_))));
    }

    #[test]
    fn text_only_video_request_allows_missing_image() {
        let request = StageRequest::Video(VideoRequest {
            image_ref: None,
            caption: "a scene".into(),
            conditioning_mode: ConditioningMode::TextOnly,
            num_frames: 4,
            fps: 8,
            seed: 1,
        });
        assert!(request.validate().is_ok());
    }

    #[test]
    fn embed_request_takes_exactly_one_input() {
        let both = StageRequest::Embed(EmbedRequest {
            text: Some("x".into()),
            image_ref: Some("y".into()),
        });
        assert!(both.validate().is_err());
        let neither = StageRequest::Embed(EmbedRequest { text: None, image_ref: None });
        assert!(neither.validate().is_err());
    }

    #[test]
    fn canonical_bytes_are_stable_and_distinct() {
        let a = caption_request();
        let b = caption_request();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        let c = StageRequest::Caption(CaptionRequest {
            prompt: "describe!".into(),
            image_ref: Some("img.jpg".into()),
        });
        assert_ne!(a.canonical_bytes(), c.canonical_bytes());
    }

    #[test]
    fn video_response_frame_count_enforced() {
        let request = StageRequest::Video(VideoRequest {
            image_ref: Some("img.jpg".into()),
            caption: "a scene".into(),
            conditioning_mode: ConditioningMode::Both,
            num_frames: 4,
            fps: 8,
            seed: 1,
        });
        let response = StageResponse::Video(VideoResponse {
            frame_refs: vec!["f0".into(), "f1".into()],
        });
        assert!(matches!(
            response.validate_against(&request),
            Err(GatewayError::BadResponse(_))
        ));
    }
}
