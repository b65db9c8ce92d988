//! Tied probabilistic linear discriminant analysis (tied PLDA) acoustic
//! models.
//!
//! A frame `y` emitted by state `j` is explained by a sub-state `k`, a
//! component `m`, a per-frame latent `x` and a per-sub-state vector `z`:
//! `y = U_m x + G_m z_jk + b_m + e`, with `e ~ N(0, Lambda_m)` and `Lambda_m`
//! diagonal. The loadings, biases and noise are shared by all states; each
//! state owns only its sub-state vectors and weights.

pub mod background;
mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod math;
pub mod model;
pub mod shard;
pub mod training;

pub use background::{BackgroundModel, BackgroundScorer, BgTrainConfig};
pub use data::{FeatureMatrix, LabelSequence};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use inference::{LikelihoodMode, Scorer};
pub use model::{Hyperparams, ModelFamily, TiedPldaModel};
pub use shard::ExecPolicy;
pub use training::{em_iteration, estep, mixup, Dataset, TrainConfig, Trainer};
