use std::fmt;

use serde::{Deserialize, Serialize};

use crate::slate::FamilyId;

/// Addresses one learnable row: an embedding vector, a user factor, or one
/// of the scalar / FM weights (scalars are rows of length one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    Feature { family: FamilyId, row: usize },
    User(usize),
    W1,
    W2,
    FmBias,
    FmLinear(usize),
    FmLatent(usize),
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Feature { family, row } => write!(f, "feature[{}][{}]", family.0, row),
            ParamKey::User(u) => write!(f, "user[{u}]"),
            ParamKey::W1 => f.write_str("w1"),
            ParamKey::W2 => f.write_str("w2"),
            ParamKey::FmBias => f.write_str("fm_bias"),
            ParamKey::FmLinear(i) => write!(f, "fm_linear[{i}]"),
            ParamKey::FmLatent(i) => write!(f, "fm_latent[{i}]"),
        }
    }
}

/// Uniform access to a model's learnable state, used by the optimizer,
/// the regulariser and the finite-difference checker.
pub trait Parameters {
    fn param(&self, key: ParamKey) -> Option<&[f64]>;

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]>;

    /// Every key, in a deterministic order.
    fn param_keys(&self) -> Vec<ParamKey>;

    /// ℓ2 strength applied to `key` (zero for unpenalised parameters).
    fn l2(&self, key: ParamKey) -> f64;
}
