//! Attention-guided context compression for retrieval-augmented generation.
//!
//! Retrieved documents are scored by how much of the query's attention
//! they receive, and a Top-P rule keeps the smallest set that, together
//! with the instruction, covers a threshold of that attention. A small
//! trainable cross-attention head supplies the attention from frozen
//! hidden states, and the instruction's share doubles as a confidence
//! signal.

pub mod annotate;
pub mod confidence;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod head;
pub mod provider;
pub mod rng;
pub mod scoring;
pub mod topp;
pub mod trainer;

pub use annotate::{AnnotationConfig, AnnotationOutcome, Annotator, Compressor, MatchPolicy};
pub use confidence::{calibration_report, confidence, BinMode, CalibrationReport, ConfidenceScore};
pub use corpus::{assemble_layout, Document, Granularity, PromptLayout, QuerySample, SegmentKind, SegmentSpan};
pub use error::{Error, Result};
pub use eval::{run_eval, EvalRecord, EvalReport, RunConfig};
pub use generator::GeneratorClient;
pub use head::{forward, CrossAttentionHead, HiddenBundle};
pub use provider::{AttentionProvider, BundleProvider, Scorer, SyntheticParams, SyntheticProvider};
pub use scoring::{segment_scores, AttentionMatrix, HeadStack, SegmentScores};
pub use topp::{compress, CompressionResult, TopPConfig};
pub use trainer::{train, TrainConfig, TrainingInstance};
