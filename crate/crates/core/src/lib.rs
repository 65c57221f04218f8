//! Memory bank for streaming feature enhancement.
//!
//! A [`MemoryBank`] stores scored features from past frames up to a fixed
//! capacity. Instead of attending over all of it, each frame samples a small
//! key set ([`MemoryBank::construct_key_set`]) and enhances its own features
//! with multi-head relation attention ([`geo`]). When the bank overflows,
//! individual features are evicted rather than whole frames, so the bank
//! keeps covering far more of the video than its capacity in frames would
//! suggest.
//!
//! [`pipeline`] strings this into a per-frame loop over a pixel-level and an
//! instance-level bank, and [`synthgen`] produces seeded synthetic streams to
//! drive it.

pub mod bank;
pub mod error;
pub mod geo;
pub mod metrics;
pub mod pipeline;
pub mod synthgen;
pub mod timing;
pub mod types;

pub use bank::{BankConfig, BankStats, EvictionReport, MemoryBank, SamplingStrategy, Scope, UpdatePolicy};
pub use error::{Error, Result};
pub use geo::{
    attention_weights, geo_enhance, geo_reference, geo_stack, relation_feature, similarity, GeoConfig, GeoParams,
    SimilarityScale,
};
pub use pipeline::{FrameFeatures, FrameResult, Pipeline, PipelineConfig};
pub use synthgen::{generate_stream, labeled_eval_set, ScoreModel, StreamSpec};
pub use types::{FeatureVector, KeySet, Level, ScoredFeature, SeededRng, SlotId};
