//! Feature schemas, leaf embeddings and the recursive composition rule.
//!
//! A slate is a tree. Leaves are raw features (a categorical id or a numeric
//! value); internal nodes are ordered lists of children. Every node maps to a
//! `k`-dimensional vector: leaves through a linear lookup, internal nodes by
//! composing their children as
//!
//! ```text
//! em(X) = mean(x_1..x_L) + mean_{l>m}(x_l ⊙ x_m)
//! ```
//!
//! The cross term is empty for a single child, so `compose([x]) == x`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a feature family inside a [`Schema`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FamilyId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl FeatureSpec {
    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            cardinality: Some(cardinality),
        }
    }

    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
            cardinality: None,
        }
    }

    /// Number of stored vectors: the cardinality for categorical families,
    /// one direction vector for numerical ones.
    pub fn rows(&self) -> usize {
        match self.kind {
            FeatureKind::Categorical => self.cardinality.unwrap_or(0),
            FeatureKind::Numerical => 1,
        }
    }
}

/// An ordered, validated set of feature families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct Schema {
    families: Vec<FeatureSpec>,
    by_name: HashMap<String, FamilyId>,
}

impl Schema {
    pub fn new(families: Vec<FeatureSpec>) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(families.len());
        for (i, spec) in families.iter().enumerate() {
            match (spec.kind, spec.cardinality) {
                (FeatureKind::Categorical, Some(c)) if c >= 1 => {}
                (FeatureKind::Categorical, _) => {
                    return Err(Error::Schema(format!(
                        "categorical family `{}` needs cardinality >= 1",
                        spec.name
                    )))
                }
                (FeatureKind::Numerical, Some(_)) => {
                    return Err(Error::Schema(format!(
                        "numerical family `{}` must not declare a cardinality",
                        spec.name
                    )))
                }
                (FeatureKind::Numerical, None) => {}
            }
            if by_name.insert(spec.name.clone(), FamilyId(i)).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate feature family `{}`",
                    spec.name
                )));
            }
        }
        Ok(Self { families, by_name })
    }

    pub fn families(&self) -> &[FeatureSpec] {
        &self.families
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<FamilyId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownFamily(name.to_string()))
    }

    pub fn spec(&self, family: FamilyId) -> Result<&FeatureSpec> {
        self.families
            .get(family.0)
            .ok_or_else(|| Error::UnknownFamily(format!("#{}", family.0)))
    }

    /// Validates a leaf against this schema.
    pub fn check_leaf(&self, leaf: &Leaf) -> Result<()> {
        let spec = self.spec(leaf.family)?;
        match (spec.kind, leaf.value) {
            (FeatureKind::Categorical, LeafValue::Id(id)) => {
                let cardinality = spec.rows();
                if id >= cardinality {
                    return Err(Error::IdOutOfRange {
                        family: spec.name.clone(),
                        id,
                        cardinality,
                    });
                }
                Ok(())
            }
            (FeatureKind::Numerical, LeafValue::Value(v)) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Contract(format!(
                        "numerical family `{}` has non-finite value {v}",
                        spec.name
                    )))
                }
            }
            (FeatureKind::Categorical, LeafValue::Value(_)) => Err(Error::KindMismatch {
                family: spec.name.clone(),
                expected: "categorical",
            }),
            (FeatureKind::Numerical, LeafValue::Id(_)) => Err(Error::KindMismatch {
                family: spec.name.clone(),
                expected: "numerical",
            }),
        }
    }

    /// Validates every leaf of a tree and that internal nodes are nonempty.
    pub fn check_tree(&self, node: &SlateNode) -> Result<()> {
        match node {
            SlateNode::Leaf(leaf) => self.check_leaf(leaf),
            SlateNode::Internal(children) => {
                if children.is_empty() {
                    return Err(Error::contract("internal slate node has no children"));
                }
                children.iter().try_for_each(|c| self.check_tree(c))
            }
        }
    }
}

impl TryFrom<Vec<FeatureSpec>> for Schema {
    type Error = Error;

    fn try_from(families: Vec<FeatureSpec>) -> Result<Self> {
        Schema::new(families)
    }
}

impl From<Schema> for Vec<FeatureSpec> {
    fn from(schema: Schema) -> Self {
        schema.families
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeafValue {
    Id(usize),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leaf {
    pub family: FamilyId,
    pub value: LeafValue,
}

impl Leaf {
    pub fn categorical(family: FamilyId, id: usize) -> Self {
        Self {
            family,
            value: LeafValue::Id(id),
        }
    }

    pub fn numerical(family: FamilyId, value: f64) -> Self {
        Self {
            family,
            value: LeafValue::Value(value),
        }
    }
}

/// A hierarchical slate.
#[derive(Debug, Clone, PartialEq)]
pub enum SlateNode {
    Leaf(Leaf),
    Internal(Vec<SlateNode>),
}

impl SlateNode {
    pub fn leaf(leaf: Leaf) -> Self {
        SlateNode::Leaf(leaf)
    }

    pub fn internal(children: Vec<SlateNode>) -> Self {
        SlateNode::Internal(children)
    }

    pub fn depth(&self) -> usize {
        match self {
            SlateNode::Leaf(_) => 0,
            SlateNode::Internal(children) => {
                1 + children.iter().map(SlateNode::depth).max().unwrap_or(0)
            }
        }
    }

    /// Visits every leaf in depth-first order.
    pub fn for_each_leaf<F: FnMut(&Leaf)>(&self, f: &mut F) {
        match self {
            SlateNode::Leaf(leaf) => f(leaf),
            SlateNode::Internal(children) => children.iter().for_each(|c| c.for_each_leaf(f)),
        }
    }
}

/// A `k`-dimensional latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Embedding {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Default standard deviation for embedding initialisation.
pub fn init_std(dim: usize) -> f64 {
    0.1 / (dim as f64).sqrt()
}

/// Learnable leaf vectors, one block of `rows × dim` values per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    schema: Schema,
    data: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn zeros(schema: Schema, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("embedding dimension must be positive"));
        }
        let data = schema
            .families()
            .iter()
            .map(|spec| vec![0.0; spec.rows() * dim])
            .collect();
        Ok(Self { dim, schema, data })
    }

    /// Draws every vector i.i.d. from `N(0, std²)`.
    pub fn gaussian<R: Rng + ?Sized>(schema: Schema, dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut table = Self::zeros(schema, dim)?;
        fill_gaussian(table.data.iter_mut().flatten(), std, rng);
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn family_rows(&self, family: FamilyId) -> usize {
        self.data.get(family.0).map_or(0, |d| d.len() / self.dim)
    }

    /// Stored vector for `(family, row)`; row 0 is the direction vector of a
    /// numerical family.
    pub fn vector(&self, family: FamilyId, row: usize) -> Option<&[f64]> {
        let block = self.data.get(family.0)?;
        block.get(row * self.dim..(row + 1) * self.dim)
    }

    pub fn vector_mut(&mut self, family: FamilyId, row: usize) -> Option<&mut [f64]> {
        let dim = self.dim;
        let block = self.data.get_mut(family.0)?;
        block.get_mut(row * dim..(row + 1) * dim)
    }

    /// Raw parameter blocks, one per family.
    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.data.len() != self.schema.len() {
            return Err(Error::contract("embedding table does not match its schema"));
        }
        for (spec, block) in self.schema.families().iter().zip(&self.data) {
            if block.len() != spec.rows() * self.dim {
                return Err(Error::SchemaMismatch(spec.name.clone()));
            }
        }
        Ok(())
    }
}

pub(crate) fn fill_gaussian<'a, R: Rng + ?Sized>(
    values: impl Iterator<Item = &'a mut f64>,
    std: f64,
    rng: &mut R,
) {
    if std == 0.0 {
        values.for_each(|v| *v = 0.0);
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite positive standard deviation");
    for v in values {
        *v = normal.sample(rng);
    }
}

/// Linear leaf embedding: a lookup for categorical ids, a scaled direction
/// vector for numerical values.
pub fn embed_leaf(table: &EmbeddingTable, leaf: &Leaf) -> Result<Embedding> {
    table.schema.check_leaf(leaf)?;
    match leaf.value {
        LeafValue::Id(id) => Ok(Embedding(table.vector(leaf.family, id).unwrap().to_vec())),
        LeafValue::Value(v) => Ok(Embedding(
            table
                .vector(leaf.family, 0)
                .unwrap()
                .iter()
                .map(|w| v * w)
                .collect(),
        )),
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Order in which children are accumulated. Sorting by value makes every sum
/// in [`compose`] independent of the input order, so the result is bitwise
/// permutation invariant.
pub(crate) fn canonical_order<E: AsRef<[f64]>>(children: &[E]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..children.len()).collect();
    order.sort_by(|&a, &b| lexicographic(children[a].as_ref(), children[b].as_ref()));
    order
}

pub(crate) fn check_children<E: AsRef<[f64]>>(children: &[E]) -> Result<usize> {
    let first = children
        .first()
        .ok_or_else(|| Error::contract("compose needs at least one child"))?;
    let dim = first.as_ref().len();
    if children.iter().any(|c| c.as_ref().len() != dim) {
        return Err(Error::contract("compose children differ in dimension"));
    }
    Ok(dim)
}

/// Elementwise sum of the children in canonical order.
pub(crate) fn canonical_sum<E: AsRef<[f64]>>(children: &[E], order: &[usize], dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    for &i in order {
        for (s, v) in sum.iter_mut().zip(children[i].as_ref()) {
            *s += v;
        }
    }
    sum
}

/// Composition rule: mean of the children plus the mean over unordered pairs
/// of their elementwise products.
pub fn compose<E: AsRef<[f64]>>(children: &[E]) -> Result<Embedding> {
    let dim = check_children(children)?;
    let len = children.len();
    let order = canonical_order(children);

    // Running prefix sum turns the pair sum into one pass:
    // Σ_{l>m} e_l⊙e_m = Σ_l e_l ⊙ (e_1 + .. + e_{l-1}).
    let mut prefix = vec![0.0; dim];
    let mut cross = vec![0.0; dim];
    for &i in &order {
        let e = children[i].as_ref();
        for d in 0..dim {
            cross[d] += e[d] * prefix[d];
            prefix[d] += e[d];
        }
    }

    let n = len as f64;
    let pairs = (len * (len - 1) / 2) as f64;
    let out = prefix
        .iter()
        .zip(&cross)
        .map(|(s, c)| if len > 1 { s / n + c / pairs } else { s / n })
        .collect();
    Ok(Embedding(out))
}

/// Embeds a tree bottom-up.
pub fn embed_tree(table: &EmbeddingTable, node: &SlateNode) -> Result<Embedding> {
    match node {
        SlateNode::Leaf(leaf) => embed_leaf(table, leaf),
        SlateNode::Internal(children) => {
            let embedded = children
                .iter()
                .map(|c| embed_tree(table, c))
                .collect::<Result<Vec<_>>>()?;
            compose(&embedded)
        }
    }
}

/// Composition over every item except `excluded`: the "rest of the slate".
pub fn embed_leave_one_out<E: AsRef<[f64]>>(items: &[E], excluded: usize) -> Result<Embedding> {
    if items.len() < 2 {
        return Err(Error::contract(
            "leave-one-out needs at least two items",
        ));
    }
    if excluded >= items.len() {
        return Err(Error::contract(format!(
            "excluded index {excluded} out of range for {} items",
            items.len()
        )));
    }
    let rest: Vec<&[f64]> = items
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != excluded)
        .map(|(_, e)| e.as_ref())
        .collect();
    compose(&rest)
}
