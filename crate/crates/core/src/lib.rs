//! Adversarial-robustness laboratory built around an optimal-transport
//! regularized embedding classifier.
//!
//! The crate provides
//!
//! - dense tensors with a reverse-mode [`Tape`], Adam and weight clipping,
//! - the encoder / classifier / critic [`Pipeline`] and its training regimes,
//! - FGSM, `l_inf` PGD and `l2` Carlini-Wagner attacks,
//! - maximum-likelihood intrinsic-dimension estimation,
//! - MNIST IDX loading, checkpoints, robustness curves and CSV exports.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod idim;
pub mod nets;
pub mod optim;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod training;

pub use attacks::{AttackConfig, AttackFamily, AttackResult, CwConfig};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use nets::{Architecture, Classifier, Mlp, MlpSpec, Pipeline, PriorSampler, PriorSpec};
pub use optim::{AdamConfig, AdamState, Direction};
pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;
pub use training::{Regime, TrainConfig, TrainLog};
