//! Compact set-retrieval engine.
//!
//! A variable-size set of unit-norm element descriptors is aggregated into a
//! single fixed-length set descriptor (learned soft-assignment pooling plus a
//! learned reduction, or simple pooling baselines), trained end-to-end with a
//! multi-label logistic set loss. A collection of such sets is then ranked
//! against multi-element queries with several speed/quality-tunable scoring
//! strategies: one descriptor per set, greedy per-element matching, hybrid
//! re-ranking, and a closed-world pre-tagging inverted index.
//!
//! The math core is generic over the scalar type ([`scalar::Real`], `f32` or
//! `f64`); the aliases below pin the shipped pipeline to `f64`. Index files
//! store `f32` rows.

pub mod aggregator;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model_io;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod whitening;

pub use error::{Error, Result};

/// Scalar type of the shipped pipeline.
pub type Scalar = f64;

pub type Model = aggregator::AggregatorModel<Scalar>;
pub type Head = aggregator::LogisticHead<Scalar>;
pub type Gallery = Vec<synth::IdentityPrototype<Scalar>>;
pub type Element = synth::ElementDescriptor<Scalar>;
pub type Whitening = whitening::StagedWhitening<Scalar>;
pub type TrainConfig = trainer::TrainConfig;
