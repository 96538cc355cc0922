//! Cross-pair feature interaction learning.
//!
//! The heart of the crate is a pair of softmax-normalized distance-kernel
//! weighting operators: a non-local operator that reweights one flattened
//! feature map against itself, and a local operator that cross-weights two
//! feature vectors (one per image of a pair) while applying each weight
//! matrix to its own vector. Around them sit a small reverse-mode tensor
//! library, a two-branch convolutional verification network, a synthetic
//! paired-data protocol with family-disjoint folds, an Adam trainer, and
//! ROC/AUC evaluation.
//!
//! Numeric policy: training runs in f32, every gradient check and reference
//! oracle runs in f64. All randomness flows through [`rng::SeededRng`], so
//! datasets, checkpoints and reports are bit-reproducible per seed.

pub mod cft;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod selfcheck;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weighted;

pub use error::{CfilError, Result};
pub use rng::SeededRng;
pub use shape::Shape;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
