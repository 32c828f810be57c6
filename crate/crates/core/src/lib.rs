//! Normalization-free iris recognition at desk scale: class-balanced P x K
//! batch sampling, online batch-hard triplet mining, margin and soft-margin
//! triplet losses with exact gradients on a small residual convolutional
//! backbone, softmax pre-training against embedding collapse, six-way
//! test-time-augmentation embedding concatenation, and a biometric
//! verification metrics suite (all-to-all matching, EER, FRR@FAR, Rank-1,
//! ROC).

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod eval;
pub mod image;
pub mod store;
pub mod trainer;
pub mod triplet;

pub use augment::{Augmentation, AugmentParams};
pub use backbone::{BackboneConfig, BackboneModel, Embedding, GradientSet};
pub use dataset::{Batch, Dataset, LabelVocab, SplitPolicy, SynthParams};
pub use eval::{EvalReport, ScoreSet, TtaEmbedding};
pub use image::{LabeledImage, PixelGrid};
pub use store::EmbeddingStore;
pub use trainer::{TrainConfig, TrainLog};
pub use triplet::{DistanceMatrix, MarginSpec, Metric, MinedTriplet, Reduction};
