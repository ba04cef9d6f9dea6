//! Hierarchical slate embeddings.
//!
//! A slate is a tree whose leaves are categorical or numerical features and
//! whose internal nodes are combined by a permutation-invariant rule (mean
//! plus mean pairwise product). The crate provides the embedding algebra,
//! three model families built on it (rating regression, slate click models
//! and a factorization-machine baseline), hand-written gradients with a
//! finite-difference checker, ADAM training with early stopping, ranking
//! metrics and a command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod models;
pub mod optim;
pub mod params;
pub mod slate;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, DatasetSchema, PlantedConfig, SessionRecord, SlateRatingRecord, Split, SyntheticKind, Task};
pub use error::{Error, Result};
pub use eval::{evaluate, Metric, MetricReport};
pub use grad::{check_gradients, loss_and_grad, Batch, GradientAccumulator, GradientCheckReport};
pub use models::{ClickModel, ClickVariant, FactorizationMachineModel, ModelParams, ModelVariant, RegressionModel};
pub use optim::{adam_step, sweep, train, AdamState, SweepGrid, TrainConfig, TrainOutcome};
pub use params::{ParamKey, Parameters};
pub use slate::{
    compose, embed_leaf, embed_tree, Embedding, EmbeddingTable, FamilyId, FeatureKind, FeatureSpec, Leaf, LeafValue,
    Schema, SlateNode,
};
