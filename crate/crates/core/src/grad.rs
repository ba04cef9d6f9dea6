//! Reverse-mode gradients through composition trees and the model heads,
//! plus a central finite-difference checker.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SessionRecord, SlateRatingRecord};
use crate::error::{Error, Result};
use crate::models::{
    softmax, softmax_nll, ClickModel, ClickVariant, FactorizationMachineModel, ModelParams,
    RegressionModel,
};
use crate::params::{ParamKey, Parameters};
use crate::slate::{
    canonical_order, canonical_sum, check_children, compose, dot, embed_leaf, Embedding,
    EmbeddingTable, LeafValue, SlateNode,
};

/// Sparse gradient: only rows touched by the current batch are present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientAccumulator {
    grads: BTreeMap<ParamKey, Vec<f64>>,
}

impl GradientAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, key: ParamKey, len: usize) -> &mut Vec<f64> {
        self.grads.entry(key).or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, key: ParamKey, grad: &[f64]) {
        self.add_scaled(key, 1.0, grad);
    }

    pub fn add_scaled(&mut self, key: ParamKey, scale: f64, grad: &[f64]) {
        let g = self.entry(key, grad.len());
        for (a, b) in g.iter_mut().zip(grad) {
            *a += scale * b;
        }
    }

    pub fn add_scalar(&mut self, key: ParamKey, grad: f64) {
        self.entry(key, 1)[0] += grad;
    }

    /// Marks `key` as touched without changing its gradient.
    pub fn touch(&mut self, key: ParamKey, len: usize) {
        self.entry(key, len);
    }

    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.grads.get(&key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sums another accumulator into this one.
    pub fn merge(&mut self, other: GradientAccumulator) {
        for (key, g) in other.grads {
            match self.grads.get_mut(&key) {
                Some(mine) => mine.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(key, g);
                }
            }
        }
    }

    /// Folds `λ‖θ‖²` over the touched rows into the gradient and returns the
    /// penalty value.
    pub fn add_l2<P: Parameters + ?Sized>(&mut self, params: &P) -> f64 {
        let mut penalty = 0.0;
        for (key, g) in self.grads.iter_mut() {
            let lambda = params.l2(*key);
            if lambda == 0.0 {
                continue;
            }
            if let Some(theta) = params.param(*key) {
                for (gi, t) in g.iter_mut().zip(theta) {
                    *gi += 2.0 * lambda * t;
                    penalty += lambda * t * t;
                }
            }
        }
        penalty
    }

    pub fn first_non_finite(&self) -> Option<ParamKey> {
        self.grads
            .iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| *k)
    }
}

/// `λ‖θ‖²` summed over `keys`.
pub fn l2_penalty<P: Parameters + ?Sized>(params: &P, keys: impl IntoIterator<Item = ParamKey>) -> f64 {
    keys.into_iter()
        .map(|key| {
            let lambda = params.l2(key);
            match params.param(key) {
                Some(theta) if lambda != 0.0 => lambda * theta.iter().map(|t| t * t).sum::<f64>(),
                _ => 0.0,
            }
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Composition tree

/// Gradients of `compose(children)` with respect to each child:
/// `g/L + g ⊙ (Σ_{m≠l} e_m) / (L(L−1)/2)`.
pub fn backward_compose<E: AsRef<[f64]>>(children: &[E], upstream: &[f64]) -> Result<Vec<Embedding>> {
    let dim = check_children(children)?;
    if upstream.len() != dim {
        return Err(Error::contract("upstream gradient dimension mismatch"));
    }
    let len = children.len();
    let n = len as f64;
    if len == 1 {
        return Ok(vec![Embedding(upstream.iter().map(|g| g / n).collect())]);
    }
    let pairs = (len * (len - 1) / 2) as f64;
    let sum = canonical_sum(children, &canonical_order(children), dim);
    Ok(children
        .iter()
        .map(|e| {
            let e = e.as_ref();
            Embedding(
                (0..dim)
                    .map(|d| upstream[d] / n + upstream[d] * (sum[d] - e[d]) / pairs)
                    .collect(),
            )
        })
        .collect())
}

/// Forward values of every node, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct TreeTrace {
    pub value: Embedding,
    pub children: Vec<TreeTrace>,
}

pub fn forward_tree(table: &EmbeddingTable, node: &SlateNode) -> Result<TreeTrace> {
    match node {
        SlateNode::Leaf(leaf) => Ok(TreeTrace {
            value: embed_leaf(table, leaf)?,
            children: Vec::new(),
        }),
        SlateNode::Internal(children) => {
            let traces = children
                .iter()
                .map(|c| forward_tree(table, c))
                .collect::<Result<Vec<_>>>()?;
            let values: Vec<&[f64]> = traces.iter().map(|t| t.value.as_ref()).collect();
            Ok(TreeTrace {
                value: compose(&values)?,
                children: traces,
            })
        }
    }
}

/// Deposits the gradient of `upstream · em(node)` into `acc`.
pub fn backward_tree(
    node: &SlateNode,
    trace: &TreeTrace,
    upstream: &[f64],
    acc: &mut GradientAccumulator,
) -> Result<()> {
    match node {
        SlateNode::Leaf(leaf) => {
            match leaf.value {
                LeafValue::Id(id) => acc.add(
                    ParamKey::Feature {
                        family: leaf.family,
                        row: id,
                    },
                    upstream,
                ),
                LeafValue::Value(v) => acc.add_scaled(
                    ParamKey::Feature {
                        family: leaf.family,
                        row: 0,
                    },
                    v,
                    upstream,
                ),
            }
            Ok(())
        }
        SlateNode::Internal(children) => {
            let values: Vec<&[f64]> = trace.children.iter().map(|t| t.value.as_ref()).collect();
            let grads = backward_compose(&values, upstream)?;
            for ((child, t), g) in children.iter().zip(&trace.children).zip(&grads) {
                backward_tree(child, t, g, acc)?;
            }
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Model heads

/// Squared error of one rating; gradient into `acc` when given.
pub fn regression_example(
    model: &RegressionModel,
    record: &SlateRatingRecord,
    acc: Option<&mut GradientAccumulator>,
) -> Result<f64> {
    let tree = record.slate_tree(model.movie, model.position);
    let q = model.user_factor(record.user)?;
    let trace = forward_tree(&model.table, &tree)?;
    let residual = dot(q, &trace.value) - record.rating;
    if let Some(acc) = acc {
        let scale = 2.0 * residual;
        acc.add_scaled(ParamKey::User(record.user), scale, &trace.value);
        let upstream: Vec<f64> = q.iter().map(|v| scale * v).collect();
        backward_tree(&tree, &trace, &upstream, acc)?;
    }
    Ok(residual * residual)
}

/// Softmax NLL of one session under a click model.
pub fn click_example(
    model: &ClickModel,
    record: &SessionRecord,
    acc: Option<&mut GradientAccumulator>,
) -> Result<f64> {
    let Some(acc) = acc else {
        let logits = model.click_logits(&record.session, &record.items)?;
        return softmax_nll(&logits, record.clicked);
    };

    let session = forward_tree(&model.table, &record.session)?;
    let items = record
        .items
        .iter()
        .map(|i| forward_tree(&model.table, i))
        .collect::<Result<Vec<_>>>()?;
    let u = &session.value;
    let embedded: Vec<&[f64]> = items.iter().map(|t| t.value.as_ref()).collect();
    let n = embedded.len();
    let semb2 = model.variant == ClickVariant::Semb2;
    if n == 0 || (semb2 && n < 2) {
        return Err(Error::contract("click model needs more items"));
    }

    let rest: Vec<Embedding> = if semb2 {
        (0..n)
            .map(|i| crate::slate::embed_leave_one_out(&embedded, i))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let logits: Vec<f64> = (0..n)
        .map(|i| {
            let base = dot(u, embedded[i]);
            if semb2 {
                base + model.w1 * dot(u, &rest[i]) + model.w2 * dot(embedded[i], &rest[i])
            } else {
                base
            }
        })
        .collect();
    let loss = softmax_nll(&logits, record.clicked)?;

    let dim = model.dim();
    let mut dlogits = softmax(&logits);
    dlogits[record.clicked] -= 1.0;

    let mut g_session = vec![0.0; dim];
    let mut g_items = vec![vec![0.0; dim]; n];
    let (mut g_w1, mut g_w2) = (0.0, 0.0);
    for i in 0..n {
        let dz = dlogits[i];
        for d in 0..dim {
            g_session[d] += dz * embedded[i][d];
            g_items[i][d] += dz * u[d];
        }
        if semb2 {
            let s = &rest[i];
            g_w1 += dz * dot(u, s);
            g_w2 += dz * dot(embedded[i], s);
            let mut g_rest = vec![0.0; dim];
            for d in 0..dim {
                g_session[d] += dz * model.w1 * s[d];
                g_items[i][d] += dz * model.w2 * s[d];
                g_rest[d] = dz * (model.w1 * u[d] + model.w2 * embedded[i][d]);
            }
            let others: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| embedded[j]).collect();
            let g_others = backward_compose(&others, &g_rest)?;
            for (j, g) in (0..n).filter(|&j| j != i).zip(g_others) {
                g_items[j].iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
            }
        }
    }

    backward_tree(&record.session, &session, &g_session, acc)?;
    for ((item, trace), g) in record.items.iter().zip(&items).zip(&g_items) {
        backward_tree(item, trace, g, acc)?;
    }
    if semb2 {
        acc.add_scalar(ParamKey::W1, g_w1);
        acc.add_scalar(ParamKey::W2, g_w2);
    }
    Ok(loss)
}

/// Softmax NLL of one session under the factorization machine.
pub fn fm_example(
    model: &FactorizationMachineModel,
    record: &SessionRecord,
    acc: Option<&mut GradientAccumulator>,
) -> Result<f64> {
    let inputs = model.encode_session(&record.session, &record.items)?;
    let logits = model.fm_logits(&inputs)?;
    let loss = softmax_nll(&logits, record.clicked)?;
    let Some(acc) = acc else {
        return Ok(loss);
    };
    let mut dlogits = softmax(&logits);
    dlogits[record.clicked] -= 1.0;
    for (x, dz) in inputs.iter().zip(dlogits) {
        acc.add_scalar(ParamKey::FmBias, dz);
        let sums = model.factor_sums(x);
        for (i, xi) in x.iter() {
            acc.add_scalar(ParamKey::FmLinear(i), dz * xi);
            let v = model.latent_vector(i);
            let g: Vec<f64> = (0..model.dim)
                .map(|f| dz * (xi * sums[f] - v[f] * xi * xi))
                .collect();
            acc.add(ParamKey::FmLatent(i), &g);
        }
    }
    Ok(loss)
}

/// A batch of training examples for any model head.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Ratings(&'a [SlateRatingRecord]),
    Sessions(&'a [SessionRecord]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Ratings(r) => r.len(),
            Batch::Sessions(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn data_term(model: &ModelParams, batch: Batch<'_>, mut acc: Option<&mut GradientAccumulator>) -> Result<f64> {
    let mut total = 0.0;
    match (model, batch) {
        (ModelParams::Regression(m), Batch::Ratings(records)) => {
            for r in records {
                total += regression_example(m, r, acc.as_deref_mut())?;
            }
        }
        (ModelParams::Click(m), Batch::Sessions(records)) => {
            for r in records {
                total += click_example(m, r, acc.as_deref_mut())?;
            }
        }
        (ModelParams::Fm(m), Batch::Sessions(records)) => {
            for r in records {
                total += fm_example(m, r, acc.as_deref_mut())?;
            }
        }
        _ => {
            return Err(Error::contract(format!(
                "{} model cannot score this record type",
                model.variant()
            )))
        }
    }
    Ok(total)
}

/// Summed data loss plus the ℓ2 penalty over touched rows; fills `acc` with
/// the full gradient (penalty included).
pub fn loss_and_grad(model: &ModelParams, batch: Batch<'_>, acc: &mut GradientAccumulator) -> Result<f64> {
    let data = data_term(model, batch, Some(acc))?;
    let penalty = acc.add_l2(model);
    Ok(data + penalty)
}

/// Objective without gradients; the penalty covers exactly `keys`.
pub fn loss_with_keys(model: &ModelParams, batch: Batch<'_>, keys: &BTreeSet<ParamKey>) -> Result<f64> {
    Ok(data_term(model, batch, None)? + l2_penalty(model, keys.iter().copied()))
}

/// Summed data loss only (no penalty).
pub fn data_loss(model: &ModelParams, batch: Batch<'_>) -> Result<f64> {
    data_term(model, batch, None)
}

// ---------------------------------------------------------------------------
// Finite-difference check

#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(ParamKey, usize)>,
    /// Coordinates compared by relative error (|analytic| above the floor).
    pub compared: usize,
    /// All probed coordinates.
    pub probed: usize,
    /// Largest |finite difference| among probed coordinates the batch
    /// never touches; these must be exactly zero.
    pub untouched_max: f64,
    pub failure: Option<String>,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error < self.tolerance && self.untouched_max == 0.0
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences on a random sample
/// of at least `samples` coordinates (or all of them if fewer exist).
/// Touched coordinates are probed first.
pub fn check_gradients(
    model: &ModelParams,
    batch: Batch<'_>,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientCheckReport> {
    let mut acc = GradientAccumulator::new();
    loss_and_grad(model, batch, &mut acc)?;
    let touched: BTreeSet<ParamKey> = acc.keys().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = |keys: &mut dyn Iterator<Item = ParamKey>| -> Vec<(ParamKey, usize)> {
        keys.flat_map(|k| (0..model.param(k).map_or(0, <[f64]>::len)).map(move |d| (k, d)))
            .collect()
    };
    let mut hot = coords(&mut touched.iter().copied());
    let mut cold = coords(&mut model.param_keys().into_iter().filter(|k| !touched.contains(k)));
    hot.shuffle(&mut rng);
    cold.shuffle(&mut rng);
    let mut probes: Vec<(ParamKey, usize)> = hot.into_iter().take(samples).collect();
    let remaining = samples.saturating_sub(probes.len());
    probes.extend(cold.into_iter().take(remaining.max(samples / 10)));

    let mut report = GradientCheckReport {
        max_rel_error: 0.0,
        worst: None,
        compared: 0,
        probed: probes.len(),
        untouched_max: 0.0,
        failure: None,
        tolerance,
    };
    let mut probe = model.clone();
    for (key, d) in probes {
        let original = model.param(key).unwrap()[d];
        let mut eval = |x: f64| -> Result<f64> {
            probe.param_mut(key).unwrap()[d] = x;
            loss_with_keys(&probe, batch, &touched)
        };
        let plus = eval(original + FD_STEP)?;
        let minus = eval(original - FD_STEP)?;
        probe.param_mut(key).unwrap()[d] = original;
        if !plus.is_finite() || !minus.is_finite() {
            report.failure = Some(format!("non-finite loss when probing {key}[{d}]"));
            report.worst = Some((key, d));
            return Ok(report);
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = acc.get(key).map_or(0.0, |g| g[d]);
        if !touched.contains(&key) {
            report.untouched_max = report.untouched_max.max(numeric.abs());
            continue;
        }
        if analytic.abs() <= FD_FLOOR {
            continue;
        }
        report.compared += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((key, d));
        }
    }
    Ok(report)
}
