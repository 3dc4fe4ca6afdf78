//! mmforge turns COCO-annotated still images into synthetic multimodal video
//! training data: captions, object-count labels, visual question-answer pairs,
//! generated video frames, propagated segmentation mask tracks, and optional
//! audio. Generation backends are remote services behind a typed gateway;
//! deterministic seeded mocks ship for offline runs and tests.
//!
//! The crate is organized around the pipeline:
//!
//! - [`coco`] parses instance annotations and derives per-image count labels.
//! - [`annotation`] builds backend prompts and parses caption/VQA replies.
//! - [`mask`] holds the binary mask and RLE codec plus IoU and track checks.
//! - [`gateway`] is the typed request/response layer over the stage backends.
//! - [`orchestrator`] runs the per-sample stage DAG with a content-addressed
//!   cache, so interrupted runs resume without repeating backend calls.
//! - [`store`] persists sample manifests and exports supervision sets.
//! - [`eval`] computes counting, VQA, and segmentation metrics and renders
//!   report tables.

pub mod annotation;
pub mod coco;
pub mod eval;
pub mod gateway;
pub mod mask;
pub mod orchestrator;
pub mod store;

pub(crate) mod util;
