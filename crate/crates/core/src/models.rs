//! Model heads: slate rating regression, the two session click models and
//! the multinomial factorization machine baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKey, Parameters};
use crate::slate::{
    dot, embed_leave_one_out, embed_tree, fill_gaussian, init_std, Embedding, EmbeddingTable,
    FamilyId, FeatureKind, LeafValue, Schema, SlateNode,
};

/// Which head a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Regression,
    Semb1,
    Semb2,
    Fm,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Regression,
        ModelVariant::Semb1,
        ModelVariant::Semb2,
        ModelVariant::Fm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Regression => "regression",
            ModelVariant::Semb1 => "semb1",
            ModelVariant::Semb2 => "semb2",
            ModelVariant::Fm => "fm",
        }
    }

    pub fn is_click(self) -> bool {
        !matches!(self, ModelVariant::Regression)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model variant `{s}` (expected regression, semb1, semb2 or fm)"
                ))
            })
    }
}

// ---------------------------------------------------------------------------
// Softmax helpers

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of `clicked` under the softmax of `logits`.
pub fn softmax_nll(logits: &[f64], clicked: usize) -> Result<f64> {
    let z = logits.get(clicked).ok_or_else(|| {
        Error::contract(format!(
            "clicked index {clicked} out of range for {} logits",
            logits.len()
        ))
    })?;
    Ok(log_sum_exp(logits) - z)
}

// ---------------------------------------------------------------------------
// Regression

/// Gaussian rating model: `r ~ N(q_uᵀ em(S), σ²)` with σ² fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub table: EmbeddingTable,
    pub users: Vec<f64>,
    pub num_users: usize,
    pub lambda: f64,
    pub movie: FamilyId,
    pub position: FamilyId,
}

impl RegressionModel {
    pub const MOVIE: &'static str = "movie";
    pub const POSITION: &'static str = "position";

    pub fn zeros(schema: Schema, num_users: usize, dim: usize, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        let movie = categorical_family(&schema, Self::MOVIE)?;
        let position = categorical_family(&schema, Self::POSITION)?;
        Ok(Self {
            table: EmbeddingTable::zeros(schema, dim)?,
            users: vec![0.0; num_users * dim],
            num_users,
            lambda,
            movie,
            position,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        schema: Schema,
        num_users: usize,
        dim: usize,
        lambda: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(schema, num_users, dim, lambda)?;
        model.table = EmbeddingTable::gaussian(model.table.schema().clone(), dim, std, rng)?;
        fill_gaussian(model.users.iter_mut(), std, rng);
        Ok(model)
    }

    pub fn init<R: Rng + ?Sized>(
        schema: Schema,
        num_users: usize,
        dim: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::random(schema, num_users, dim, lambda, init_std(dim), rng)
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn user_factor(&self, user: usize) -> Result<&[f64]> {
        let k = self.dim();
        self.users
            .get(user * k..(user + 1) * k)
            .filter(|_| user < self.num_users)
            .ok_or(Error::UnknownUser {
                user,
                users: self.num_users,
            })
    }

    pub fn user_factor_mut(&mut self, user: usize) -> Result<&mut [f64]> {
        let k = self.dim();
        let users = self.num_users;
        self.users
            .get_mut(user * k..(user + 1) * k)
            .filter(|_| user < users)
            .ok_or(Error::UnknownUser { user, users })
    }

    /// `q_uᵀ em(slate)`.
    pub fn rating_predict(&self, user: usize, slate: &SlateNode) -> Result<f64> {
        let q = self.user_factor(user)?;
        let em = embed_tree(&self.table, slate)?;
        Ok(dot(q, &em))
    }
}

fn categorical_family(schema: &Schema, name: &str) -> Result<FamilyId> {
    let id = schema.id(name)?;
    if schema.spec(id)?.kind != FeatureKind::Categorical {
        return Err(Error::Schema(format!("family `{name}` must be categorical")));
    }
    Ok(id)
}

// ---------------------------------------------------------------------------
// Click models

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickVariant {
    Semb1,
    Semb2,
}

/// Session click model. SEMB-1 scores `em(u)ᵀem(i)`; SEMB-2 adds
/// `w1·em(u)ᵀem(s_i) + w2·em(i)ᵀem(s_i)` where `s_i` is the rest of the slate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub table: EmbeddingTable,
    pub variant: ClickVariant,
    pub w1: f64,
    pub w2: f64,
    pub lambda: f64,
}

/// Intermediate values of one click-model forward pass.
#[derive(Debug, Clone)]
pub struct ClickForward {
    pub session: Embedding,
    pub items: Vec<Embedding>,
    /// Leave-one-out slate embeddings; empty for SEMB-1 with a single item.
    pub rest: Vec<Embedding>,
    pub logits: Vec<f64>,
}

impl ClickModel {
    pub fn zeros(schema: Schema, variant: ClickVariant, dim: usize, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            table: EmbeddingTable::zeros(schema, dim)?,
            variant,
            w1: 0.0,
            w2: 0.0,
            lambda,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        schema: Schema,
        variant: ClickVariant,
        dim: usize,
        lambda: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(schema, variant, dim, lambda)?;
        model.table = EmbeddingTable::gaussian(model.table.schema().clone(), dim, std, rng)?;
        Ok(model)
    }

    /// Gaussian init for the tables; `w1 = w2 = 0`.
    pub fn init<R: Rng + ?Sized>(
        schema: Schema,
        variant: ClickVariant,
        dim: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::random(schema, variant, dim, lambda, init_std(dim), rng)
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    /// Same tables and weights under the other variant.
    pub fn with_variant(&self, variant: ClickVariant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn forward(&self, session: &SlateNode, items: &[SlateNode]) -> Result<ClickForward> {
        if items.is_empty() || (self.variant == ClickVariant::Semb2 && items.len() < 2) {
            return Err(Error::contract(format!(
                "{:?} needs at least {} items, got {}",
                self.variant,
                if self.variant == ClickVariant::Semb2 { 2 } else { 1 },
                items.len()
            )));
        }
        let u = embed_tree(&self.table, session)?;
        let embedded = items
            .iter()
            .map(|i| embed_tree(&self.table, i))
            .collect::<Result<Vec<_>>>()?;
        let rest = if items.len() >= 2 {
            (0..items.len())
                .map(|i| embed_leave_one_out(&embedded, i))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let logits = embedded
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let base = u.dot(e);
                match self.variant {
                    ClickVariant::Semb1 => base,
                    ClickVariant::Semb2 => {
                        base + self.w1 * u.dot(&rest[i]) + self.w2 * e.dot(&rest[i])
                    }
                }
            })
            .collect();
        Ok(ClickForward {
            session: u,
            items: embedded,
            rest,
            logits,
        })
    }

    pub fn click_logits(&self, session: &SlateNode, items: &[SlateNode]) -> Result<Vec<f64>> {
        Ok(self.forward(session, items)?.logits)
    }
}

// ---------------------------------------------------------------------------
// Factorization machine

/// Sparse real vector with sorted, unique indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    /// Builds a canonical vector, summing duplicate indices.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let mut out = SparseVec::default();
        for (i, v) in pairs {
            if out.indices.last() == Some(&i) {
                *out.values.last_mut().unwrap() += v;
            } else {
                out.indices.push(i);
                out.values.push(v);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

/// Maps schema features onto the FM input space. Item features and session
/// features live in separate blocks so that session × item interactions are
/// distinct from item × item ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmFeatureIndex {
    offsets: Vec<usize>,
    block: usize,
}

impl FmFeatureIndex {
    pub fn new(schema: &Schema) -> Self {
        let mut offsets = Vec::with_capacity(schema.len());
        let mut block = 0;
        for spec in schema.families() {
            offsets.push(block);
            block += spec.rows();
        }
        Self { offsets, block }
    }

    pub fn num_features(&self) -> usize {
        2 * self.block
    }

    fn push_leaves(
        &self,
        node: &SlateNode,
        base: usize,
        weight: f64,
        out: &mut Vec<(usize, f64)>,
    ) -> Result<()> {
        let mut err = None;
        node.for_each_leaf(&mut |leaf| {
            let Some(&offset) = self.offsets.get(leaf.family.0) else {
                err.get_or_insert(Error::UnknownFamily(format!("#{}", leaf.family.0)));
                return;
            };
            match leaf.value {
                LeafValue::Id(id) => out.push((base + offset + id, weight)),
                LeafValue::Value(v) => out.push((base + offset, weight * v)),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Input vector for one (session, item) pair: the item's leaves with
    /// weight 1 (numerical leaves carry their value) plus the session's
    /// leaves averaged over its actions.
    pub fn encode(&self, session: &SlateNode, item: &SlateNode) -> Result<SparseVec> {
        let mut pairs = Vec::new();
        self.push_leaves(item, 0, 1.0, &mut pairs)?;
        match session {
            SlateNode::Internal(actions) => {
                let w = 1.0 / actions.len() as f64;
                for action in actions {
                    self.push_leaves(action, self.block, w, &mut pairs)?;
                }
            }
            leaf => self.push_leaves(leaf, self.block, 1.0, &mut pairs)?,
        }
        Ok(SparseVec::from_pairs(pairs))
    }
}

/// Second-order factorization machine with a softmax over the slate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationMachineModel {
    pub schema: Schema,
    pub index: FmFeatureIndex,
    pub dim: usize,
    pub bias: f64,
    pub linear: Vec<f64>,
    pub latent: Vec<f64>,
    pub lambda_linear: f64,
    pub lambda_latent: f64,
}

impl FactorizationMachineModel {
    pub fn zeros(schema: Schema, dim: usize, lambda_linear: f64, lambda_latent: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("FM dimension must be positive"));
        }
        for l in [lambda_linear, lambda_latent] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        let index = FmFeatureIndex::new(&schema);
        let n = index.num_features();
        Ok(Self {
            schema,
            index,
            dim,
            bias: 0.0,
            linear: vec![0.0; n],
            latent: vec![0.0; n * dim],
            lambda_linear,
            lambda_latent,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        schema: Schema,
        dim: usize,
        lambda_linear: f64,
        lambda_latent: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(schema, dim, lambda_linear, lambda_latent)?;
        fill_gaussian(model.latent.iter_mut(), init_std(dim), rng);
        Ok(model)
    }

    pub fn num_features(&self) -> usize {
        self.linear.len()
    }

    pub fn latent_vector(&self, feature: usize) -> &[f64] {
        &self.latent[feature * self.dim..(feature + 1) * self.dim]
    }

    fn check(&self, x: &SparseVec) -> Result<()> {
        let n = self.num_features();
        match x.indices.iter().find(|&&i| i >= n) {
            Some(&index) => Err(Error::FeatureIndex { index, dim: n }),
            None => Ok(()),
        }
    }

    /// Per-factor sums `Σ_i v_{i,f} x_i`, reused by the gradient.
    pub(crate) fn factor_sums(&self, x: &SparseVec) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for (i, xi) in x.iter() {
            for (s, v) in sums.iter_mut().zip(self.latent_vector(i)) {
                *s += v * xi;
            }
        }
        sums
    }

    /// `w0 + Σ w_i x_i + Σ_{i<j} ⟨v_i, v_j⟩ x_i x_j` in O(nnz·k).
    pub fn score(&self, x: &SparseVec) -> Result<f64> {
        self.check(x)?;
        let linear: f64 = x.iter().map(|(i, xi)| self.linear[i] * xi).sum();
        let sums = self.factor_sums(x);
        let mut pairwise = 0.0;
        for (f, s) in sums.iter().enumerate() {
            let sq: f64 = x
                .iter()
                .map(|(i, xi)| {
                    let v = self.latent[i * self.dim + f];
                    v * v * xi * xi
                })
                .sum();
            pairwise += s * s - sq;
        }
        Ok(self.bias + linear + 0.5 * pairwise)
    }

    pub fn fm_logits(&self, items: &[SparseVec]) -> Result<Vec<f64>> {
        items.iter().map(|x| self.score(x)).collect()
    }

    pub fn encode_session(&self, session: &SlateNode, items: &[SlateNode]) -> Result<Vec<SparseVec>> {
        items
            .iter()
            .map(|item| self.index.encode(session, item))
            .collect()
    }

    pub fn session_logits(&self, session: &SlateNode, items: &[SlateNode]) -> Result<Vec<f64>> {
        self.schema.check_tree(session)?;
        for item in items {
            self.schema.check_tree(item)?;
        }
        self.fm_logits(&self.encode_session(session, items)?)
    }
}

// ---------------------------------------------------------------------------
// Parameter access

fn row(block: &[f64], dim: usize, r: usize) -> Option<&[f64]> {
    block.get(r * dim..(r + 1) * dim)
}

fn row_mut(block: &mut [f64], dim: usize, r: usize) -> Option<&mut [f64]> {
    block.get_mut(r * dim..(r + 1) * dim)
}

fn table_keys(table: &EmbeddingTable, keys: &mut Vec<ParamKey>) {
    for (f, _) in table.schema().families().iter().enumerate() {
        let family = FamilyId(f);
        keys.extend((0..table.family_rows(family)).map(|row| ParamKey::Feature { family, row }));
    }
}

impl Parameters for RegressionModel {
    fn param(&self, key: ParamKey) -> Option<&[f64]> {
        match key {
            ParamKey::Feature { family, row } => self.table.vector(family, row),
            ParamKey::User(u) if u < self.num_users => row(&self.users, self.dim(), u),
            _ => None,
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        let dim = self.dim();
        match key {
            ParamKey::Feature { family, row } => self.table.vector_mut(family, row),
            ParamKey::User(u) if u < self.num_users => row_mut(&mut self.users, dim, u),
            _ => None,
        }
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        table_keys(&self.table, &mut keys);
        keys.extend((0..self.num_users).map(ParamKey::User));
        keys
    }

    fn l2(&self, _key: ParamKey) -> f64 {
        self.lambda
    }
}

impl Parameters for ClickModel {
    fn param(&self, key: ParamKey) -> Option<&[f64]> {
        match key {
            ParamKey::Feature { family, row } => self.table.vector(family, row),
            ParamKey::W1 => Some(std::slice::from_ref(&self.w1)),
            ParamKey::W2 => Some(std::slice::from_ref(&self.w2)),
            _ => None,
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        match key {
            ParamKey::Feature { family, row } => self.table.vector_mut(family, row),
            ParamKey::W1 => Some(std::slice::from_mut(&mut self.w1)),
            ParamKey::W2 => Some(std::slice::from_mut(&mut self.w2)),
            _ => None,
        }
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        table_keys(&self.table, &mut keys);
        if self.variant == ClickVariant::Semb2 {
            keys.extend([ParamKey::W1, ParamKey::W2]);
        }
        keys
    }

    fn l2(&self, key: ParamKey) -> f64 {
        match key {
            ParamKey::W1 | ParamKey::W2 => 0.0,
            _ => self.lambda,
        }
    }
}

impl Parameters for FactorizationMachineModel {
    fn param(&self, key: ParamKey) -> Option<&[f64]> {
        match key {
            ParamKey::FmBias => Some(std::slice::from_ref(&self.bias)),
            ParamKey::FmLinear(i) => self.linear.get(i..i + 1),
            ParamKey::FmLatent(i) => row(&self.latent, self.dim, i),
            _ => None,
        }
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        match key {
            ParamKey::FmBias => Some(std::slice::from_mut(&mut self.bias)),
            ParamKey::FmLinear(i) => self.linear.get_mut(i..i + 1),
            ParamKey::FmLatent(i) => row_mut(&mut self.latent, self.dim, i),
            _ => None,
        }
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        let n = self.num_features();
        std::iter::once(ParamKey::FmBias)
            .chain((0..n).map(ParamKey::FmLinear))
            .chain((0..n).map(ParamKey::FmLatent))
            .collect()
    }

    fn l2(&self, key: ParamKey) -> f64 {
        match key {
            ParamKey::FmLinear(_) => self.lambda_linear,
            ParamKey::FmLatent(_) => self.lambda_latent,
            _ => 0.0,
        }
    }
}

/// All learnable state of one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Regression(RegressionModel),
    Click(ClickModel),
    Fm(FactorizationMachineModel),
}

impl ModelParams {
    pub fn variant(&self) -> ModelVariant {
        match self {
            ModelParams::Regression(_) => ModelVariant::Regression,
            ModelParams::Click(m) => match m.variant {
                ClickVariant::Semb1 => ModelVariant::Semb1,
                ClickVariant::Semb2 => ModelVariant::Semb2,
            },
            ModelParams::Fm(_) => ModelVariant::Fm,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelParams::Regression(m) => m.dim(),
            ModelParams::Click(m) => m.dim(),
            ModelParams::Fm(m) => m.dim,
        }
    }

    pub fn schema(&self) -> &Schema {
        match self {
            ModelParams::Regression(m) => m.table.schema(),
            ModelParams::Click(m) => m.table.schema(),
            ModelParams::Fm(m) => &m.schema,
        }
    }

    /// Checks internal shape consistency, e.g. after deserialisation.
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Regression(m) => {
                m.table.validate()?;
                if m.users.len() != m.num_users * m.dim() {
                    return Err(Error::contract("user factor table has the wrong size"));
                }
            }
            ModelParams::Click(m) => m.table.validate()?,
            ModelParams::Fm(m) => {
                let n = FmFeatureIndex::new(&m.schema).num_features();
                if m.index.num_features() != n || m.linear.len() != n || m.latent.len() != n * m.dim {
                    return Err(Error::contract("FM weights do not match the schema"));
                }
            }
        }
        Ok(())
    }

    pub fn as_params(&self) -> &dyn Parameters {
        match self {
            ModelParams::Regression(m) => m,
            ModelParams::Click(m) => m,
            ModelParams::Fm(m) => m,
        }
    }

    pub fn as_params_mut(&mut self) -> &mut dyn Parameters {
        match self {
            ModelParams::Regression(m) => m,
            ModelParams::Click(m) => m,
            ModelParams::Fm(m) => m,
        }
    }
}

impl Parameters for ModelParams {
    fn param(&self, key: ParamKey) -> Option<&[f64]> {
        self.as_params().param(key)
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        self.as_params_mut().param_mut(key)
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        self.as_params().param_keys()
    }

    fn l2(&self, key: ParamKey) -> f64 {
        self.as_params().l2(key)
    }
}
