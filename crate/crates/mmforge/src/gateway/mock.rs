//! Deterministic seeded mock backends for every stage, plus small wrappers
//! (call counting, scripted failures, per-request interception) used to test
//! retry behavior and failure isolation.
//!
//! Every mock is a pure function of `(seed, request)`: the same pair always
//! produces byte-identical responses and asset files.

use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::mask::{rle_decode, rle_encode, BinaryMask, MaskTrack};

use super::{
    AssetSink, AudioResponse, Backend, BackendSet, CaptionResponse, EmbedResponse, GatewayError,
    PropagateResponse, RetryPolicy, SeedMask, SegmentResponse, StageKind, StageRequest,
    StageResponse, VideoResponse, VqaResponse,
};

/// Mock embedding dimension. Real embedding backends advertise their own
/// dimension through the response vector length.
pub const MOCK_EMBED_DIM: usize = 64;

/// One deterministic mock implementation per stage kind.
pub fn mock_suite(seed: u64) -> BackendSet {
    let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(seed));
    let mut set = BackendSet::empty();
    for kind in StageKind::ALL {
        set.insert(kind, Arc::clone(&backend), RetryPolicy::default());
    }
    set
}

/// Serves every stage protocol with deterministic synthetic content.
pub struct MockBackend {
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend { seed }
    }
}

/// Deterministic byte stream derived from the seed and the canonical request.
struct HashStream {
    base: Vec<u8>,
    counter: u32,
    buf: [u8; 32],
    pos: usize,
}

impl HashStream {
    fn new(seed: u64, request: &StageRequest, domain: &str) -> Self {
        let mut base = seed.to_le_bytes().to_vec();
        base.extend_from_slice(domain.as_bytes());
        base.extend_from_slice(&request.canonical_bytes());
        let mut stream = HashStream { base, counter: 0, buf: [0; 32], pos: 32 };
        stream.refill();
        stream
    }

    fn refill(&mut self) {
        let mut hasher = Sha256::new();
        hasher.update(&self.base);
        hasher.update(self.counter.to_le_bytes());
        self.buf.copy_from_slice(&hasher.finalize());
        self.counter += 1;
        self.pos = 0;
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos >= 32 {
            self.refill();
        }
        let byte = self.buf[self.pos];
        self.pos += 1;
        byte
    }

    fn next_u64(&mut self) -> u64 {
        let mut bytes = [0u8; 8];
        for b in &mut bytes {
            *b = self.next_byte();
        }
        u64::from_le_bytes(bytes)
    }

    fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[(self.next_u64() % items.len() as u64) as usize]
    }
}

const OPENINGS: [&str; 5] = [
    "Moments later",
    "In the next few seconds",
    "Shortly afterwards",
    "As the scene continues",
    "A heartbeat later",
];

const MOTIONS: [&str; 6] = [
    "drifts slowly toward the foreground",
    "begins to move across the frame",
    "shifts as the light changes",
    "stirs with sudden activity",
    "settles into a quiet rhythm",
    "picks up pace near the center",
];

const OUTCOMES: [&str; 6] = [
    "while the background stays calm",
    "as onlookers turn to watch",
    "and the composition opens up",
    "while shadows stretch across the ground",
    "as details sharpen around the subject",
    "and the moment resolves naturally",
];

const SUBJECTS: [&str; 8] = [
    "the largest object", "a group near the center", "the subject on the left",
    "the brightest region", "the foreground figure", "an object near the edge",
    "the main cluster", "the textured area",
];

const NEXT_EVENTS: [&str; 6] = [
    "it keeps moving in the same direction",
    "the scene gradually empties",
    "more activity builds around it",
    "the motion slows to a stop",
    "the viewpoint drifts closer",
    "nothing changes for a while",
];

fn file_stem(reference: Option<&str>) -> String {
    reference
        .and_then(|r| Path::new(r).file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "the scene".to_string())
}

fn solid_ppm(r: u8, g: u8, b: u8) -> Vec<u8> {
    const SIDE: usize = 8;
    let mut bytes = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
    for _ in 0..SIDE * SIDE {
        bytes.extend_from_slice(&[r, g, b]);
    }
    bytes
}

fn pcm_wav(samples: &[u8]) -> Vec<u8> {
    let data_len = samples.len() as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len());
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&8000u32.to_le_bytes());
    bytes.extend_from_slice(&8000u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&8u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    bytes.extend_from_slice(samples);
    bytes
}

/// Translate a mask one pixel in +x, clamping at the right edge.
fn shift_right(mask: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for x in 1..mask.width() {
        for y in 0..mask.height() {
            if mask.get(x - 1, y) {
                out.set(x, y, true);
            }
        }
    }
    out
}

impl Backend for MockBackend {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError> {
        match request {
            StageRequest::Caption(req) => {
                let mut stream = HashStream::new(self.seed, request, "caption");
                let text = format!(
                    "{}, the scene around {} comes alive: {} {} {}.",
                    stream.pick(&OPENINGS),
                    file_stem(req.image_ref.as_deref()),
                    stream.pick(&SUBJECTS),
                    stream.pick(&MOTIONS),
                    stream.pick(&OUTCOMES),
                );
                Ok(StageResponse::Caption(CaptionResponse { text }))
            }
            StageRequest::Vqa(_) => {
                let mut stream = HashStream::new(self.seed, request, "vqa");
                let subject = stream.pick(&SUBJECTS).to_string();
                let total = stream.next_u64() % 9 + 1;
                let next = stream.pick(&NEXT_EVENTS).to_string();
                let text = format!(
                    "Q: What is the most prominent thing in the video?\nA: {subject}\n\
                     Q: How many objects are in the video in total?\nA: {total}\n\
                     Q: What is likely to happen next?\nA: {next}\n"
                );
                Ok(StageResponse::Vqa(VqaResponse { text }))
            }
            StageRequest::Video(req) => {
                let mut stream = HashStream::new(self.seed, request, "video");
                let (r, g, b) = (stream.next_byte(), stream.next_byte(), stream.next_byte());
                let mut frame_refs = Vec::with_capacity(req.num_frames as usize);
                for i in 0..req.num_frames {
                    let tint = (i as u8).wrapping_mul(11);
                    let bytes = solid_ppm(
                        r.wrapping_add(tint),
                        g.wrapping_add(tint),
                        b.wrapping_add(tint),
                    );
                    frame_refs.push(sink.write(&format!("frame_{i:03}.ppm"), &bytes)?);
                }
                Ok(StageResponse::Video(VideoResponse { frame_refs }))
            }
            StageRequest::Segment(req) => {
                let mut stream = HashStream::new(self.seed, request, "segment");
                let rect_w = (req.width / 4).max(1);
                let rect_h = (req.height / 4).max(1);
                let mut objects = Vec::with_capacity(req.categories.len());
                for (index, category) in req.categories.iter().enumerate() {
                    let x = (stream.next_u64() % (req.width - rect_w + 1) as u64) as u32;
                    let y = (stream.next_u64() % (req.height - rect_h + 1) as u64) as u32;
                    let mut mask = BinaryMask::new(req.width, req.height);
                    mask.fill_rect(x, y, rect_w, rect_h);
                    objects.push(SeedMask {
                        object_id: index as u64 + 1,
                        category: category.clone(),
                        mask: rle_encode(&mask),
                    });
                }
                Ok(StageResponse::Segment(SegmentResponse { objects }))
            }
            StageRequest::Propagate(req) => {
                let mut tracks = Vec::with_capacity(req.seed_masks.len());
                for seed_mask in &req.seed_masks {
                    let mut frames = Vec::with_capacity(req.frame_refs.len());
                    let mut current = rle_decode(&seed_mask.mask);
                    frames.push(seed_mask.mask.clone());
                    for _ in 1..req.frame_refs.len() {
                        current = shift_right(&current);
                        frames.push(rle_encode(&current));
                    }
                    let track =
                        MaskTrack::new(seed_mask.object_id, seed_mask.category.clone(), frames)
                            .expect("shifted frames share dimensions");
                    tracks.push(track);
                }
                Ok(StageResponse::Propagate(PropagateResponse { tracks }))
            }
            StageRequest::Embed(_) => {
                let mut stream = HashStream::new(self.seed, request, "embed");
                let mut vector: Vec<f64> = (0..MOCK_EMBED_DIM)
                    .map(|_| stream.next_byte() as f64 - 127.5)
                    .collect();
                let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                for value in &mut vector {
                    *value /= norm;
                }
                Ok(StageResponse::Embed(EmbedResponse { vector }))
            }
            StageRequest::Audio(_) => {
                let mut stream = HashStream::new(self.seed, request, "audio");
                let samples: Vec<u8> = (0..32).map(|_| stream.next_byte()).collect();
                let audio_ref = sink.write("audio.wav", &pcm_wav(&samples))?;
                Ok(StageResponse::Audio(AudioResponse { audio_ref }))
            }
        }
    }
}

/// Counts invocations; everything else delegates.
pub struct CountingBackend {
    inner: Arc<dyn Backend>,
    calls: AtomicU64,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Arc<Self> {
        Arc::new(CountingBackend {
            inner,
            calls: AtomicU64::new(0),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for CountingBackend {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.invoke(request, sink)
    }
}

/// Fails the first `n` invocations with the given remote code, then delegates.
pub struct ScriptedBackend {
    inner: Arc<dyn Backend>,
    remaining_failures: AtomicU32,
    code: u16,
    attempts: AtomicU32,
}

impl ScriptedBackend {
    pub fn fail_first(inner: Arc<dyn Backend>, failures: u32, code: u16) -> Arc<Self> {
        Arc::new(ScriptedBackend {
            inner,
            remaining_failures: AtomicU32::new(failures),
            code,
            attempts: AtomicU32::new(0),
        })
    }

    /// Never succeeds.
    pub fn always_failing(inner: Arc<dyn Backend>, code: u16) -> Arc<Self> {
        Self::fail_first(inner, u32::MAX, code)
    }

    pub fn attempts(&self) -> u32 {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let remaining = self.remaining_failures.load(Ordering::SeqCst);
        if remaining > 0 {
            if remaining != u32::MAX {
                self.remaining_failures.fetch_sub(1, Ordering::SeqCst);
            }
            return Err(GatewayError::Remote {
                code: self.code,
                message: "scripted failure".into(),
            });
        }
        self.inner.invoke(request, sink)
    }
}

type InterceptHook =
    dyn Fn(&StageRequest) -> Option<Result<StageResponse, GatewayError>> + Send + Sync;

/// Lets a test substitute the reply for selected requests; everything else
/// delegates to the wrapped backend.
pub struct InterceptBackend {
    inner: Arc<dyn Backend>,
    hook: Box<InterceptHook>,
}

impl InterceptBackend {
    pub fn new<F>(inner: Arc<dyn Backend>, hook: F) -> Arc<Self>
    where
        F: Fn(&StageRequest) -> Option<Result<StageResponse, GatewayError>> + Send + Sync + 'static,
    {
        Arc::new(InterceptBackend {
            inner,
            hook: Box::new(hook),
        })
    }
}

impl Backend for InterceptBackend {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError> {
        match (self.hook)(request) {
            Some(result) => result,
            None => self.inner.invoke(request, sink),
        }
    }
}
