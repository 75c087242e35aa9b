//! Data-side and objective-side machinery for training multi-task text
//! embedding models.
//!
//! * [`corpus`]: sample/pair data model, JSONL I/O, instruction registry
//! * [`transform`]: raw records into retrieval, NLI and classification data
//! * [`synthesis`]: LLM-driven paraphrasing, augmentation, hard negatives
//! * [`mining`]: scorer-ranked hard-negative mining, dedup, quality filter
//! * [`losses`]: InfoNCE with query-query negatives, Cosent, masked CLS InfoNCE
//! * [`sampler`]: size-scaled dataset weights and the two-stage plan
//! * [`embed`] / [`trainer`]: a hashed mean-pooling toy embedder and its trainer
//! * [`pipeline`]: staged, resumable orchestration of all of the above
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

pub mod corpus;
pub mod embed;
pub mod fixtures;
pub mod hashing;
pub mod losses;
pub mod mining;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod synthesis;
pub mod trainer;
pub mod transform;

pub use scalar::Scalar;

pub type EmbeddedBatch = losses::EmbeddedBatch<f64>;
pub type ScoredPairBatch = losses::ScoredPairBatch<f64>;
pub type LossConfig = losses::LossConfig<f64>;
pub type LossOutput = losses::LossOutput<f64>;
pub type ToyEmbedder = embed::ToyEmbedder<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
