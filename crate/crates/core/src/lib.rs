//! Probing classifiers over code-LLM hidden states.
//!
//! The pipeline: hidden-state dumps are stored in the APRB1 container
//! ([`repr_store`]); a compact subset of (layer, token) rows is sampled
//! ([`sampling`]); a learned softmax scorer weights every row
//! ([`selector`]); the weighted rows are pooled and classified
//! ([`predictor`]); scorer and classifier are trained jointly
//! ([`train`]). Labels come from command-based oracles ([`oracles`]) and
//! experiments, baselines and metrics live in [`eval`].

pub mod error;
pub mod eval;
pub mod linalg;
pub mod oracles;
pub mod predictor;
pub mod repr_store;
pub mod sampling;
pub mod selector;
pub mod train;

pub use error::{Error, Result};
pub use eval::metrics::{compute_metrics, Metrics};
pub use predictor::{Aggregator, ClassifierSpec};
pub use repr_store::{Dataset, DatasetManifest, HiddenBlock, LabelKind, SampleRecord};
pub use sampling::{PositionRole, TokenPosition, TokenStrategy};
pub use train::{ModelSpec, ProbeModel, TrainConfig, TrainReport};
