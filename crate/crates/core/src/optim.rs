//! ADAM, the training loop and the grid-search harness.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, SessionRecord, SlateRatingRecord, Split, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric, MetricReport};
use crate::grad::{loss_and_grad, Batch, GradientAccumulator};
use crate::models::{ClickModel, ClickVariant, FactorizationMachineModel, ModelParams, ModelVariant, RegressionModel};
use crate::params::{ParamKey, Parameters};

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// ADAM with bias correction. Moments are kept only for rows that have
/// received a gradient; untouched rows are not decayed (lazy updates).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<ParamKey, Moments>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.moments.keys().copied()
    }
}

/// Applies one ADAM update to every row in `grads`. A non-finite gradient
/// aborts the step before anything is modified.
pub fn adam_step<P: Parameters + ?Sized>(
    state: &mut AdamState,
    params: &mut P,
    grads: &GradientAccumulator,
) -> Result<()> {
    if let Some(key) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(key));
    }
    if let Some(key) = grads.keys().find(|k| params.param(*k).is_none()) {
        return Err(Error::contract(format!("gradient for unknown parameter {key}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for (key, g) in grads.iter() {
        let theta = params.param_mut(key).expect("checked above");
        let m = state.moments.entry(key).or_insert_with(|| Moments {
            first: vec![0.0; g.len()],
            second: vec![0.0; g.len()],
        });
        for d in 0..g.len() {
            m.first[d] = b1 * m.first[d] + (1.0 - b1) * g[d];
            m.second[d] = b2 * m.second[d] + (1.0 - b2) * g[d] * g[d];
            let m_hat = m.first[d] / correction1;
            let v_hat = m.second[d] / correction2;
            theta[d] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

fn default_dim() -> usize {
    5
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// FM linear-weight penalty; defaults to `lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_linear: Option<f64>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults to 256 slates for regression and 128 sessions otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Defaults to MSE for regression and MRR for click models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Metric>,
}

impl TrainConfig {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            variant,
            dim: default_dim(),
            lambda: default_lambda(),
            lambda_linear: None,
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: None,
            seed: 0,
            patience: default_patience(),
            selection: None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.variant {
            ModelVariant::Regression => 256,
            _ => 128,
        })
    }

    pub fn selection(&self) -> Metric {
        self.selection.unwrap_or(match self.variant {
            ModelVariant::Regression => Metric::Mse,
            _ => Metric::Mrr,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        for (name, l) in [("lambda", Some(self.lambda)), ("lambda_linear", self.lambda_linear)] {
            if let Some(l) = l {
                if !(l >= 0.0 && l.is_finite()) {
                    return bad(format!("{name} must be >= 0, got {l}"));
                }
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        let selection = self.selection();
        let ok = match self.variant {
            ModelVariant::Regression => selection == Metric::Mse,
            _ => selection != Metric::Mse,
        };
        if !ok {
            return bad(format!("selection metric {selection} does not apply to {}", self.variant));
        }
        Ok(())
    }

    /// Short stable hash of the canonical configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Fresh model for this configuration, seeded from `rng`.
    pub fn init_model(&self, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        let schema = dataset.schema();
        let families = schema.families.clone();
        match (self.variant, schema.task) {
            (ModelVariant::Regression, Task::Regression) => Ok(ModelParams::Regression(RegressionModel::init(
                families,
                schema.users.unwrap_or(0),
                self.dim,
                self.lambda,
                rng,
            )?)),
            (ModelVariant::Semb1 | ModelVariant::Semb2, Task::Click) => {
                let variant = if self.variant == ModelVariant::Semb1 {
                    ClickVariant::Semb1
                } else {
                    ClickVariant::Semb2
                };
                Ok(ModelParams::Click(ClickModel::init(families, variant, self.dim, self.lambda, rng)?))
            }
            (ModelVariant::Fm, Task::Click) => Ok(ModelParams::Fm(FactorizationMachineModel::init(
                families,
                self.dim,
                self.lambda_linear.unwrap_or(self.lambda),
                self.lambda,
                rng,
            )?)),
            (variant, task) => Err(Error::Config(format!(
                "model variant {variant} cannot be trained on {task:?} data"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean penalised objective per training record; 0 for the initial row.
    pub train_objective: f64,
    pub validation: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Snapshot with the best validation metric.
    pub model: ModelParams,
    pub best_epoch: usize,
    pub best: MetricReport,
    /// One row per evaluated epoch, starting with the initialisation (epoch 0).
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

enum Shuffled {
    Ratings(Vec<SlateRatingRecord>),
    Sessions(Vec<SessionRecord>),
}

/// Trains from a seeded initialisation and returns the best-validation
/// snapshot together with the per-epoch history.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = config.init_model(dataset, &mut rng)?;
    train_from(config, dataset, model, &mut rng)
}

/// Continues training from an existing model (for example SEMB-2 started
/// from a SEMB-1 solution). Shuffling is seeded from `config.seed`.
pub fn train_warm(config: &TrainConfig, dataset: &Dataset, model: ModelParams) -> Result<TrainOutcome> {
    config.validate()?;
    if model.variant() != config.variant {
        return Err(Error::Config(format!(
            "warm start model is {}, config asks for {}",
            model.variant(),
            config.variant
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_from(config, dataset, model, &mut rng)
}

fn train_from(config: &TrainConfig, dataset: &Dataset, mut model: ModelParams, rng: &mut ChaCha8Rng) -> Result<TrainOutcome> {
    let train_batch = dataset.batch(Split::Train);
    let validation = dataset.batch(Split::Validation);
    if validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let metric = config.selection();
    let fingerprint = config.fingerprint();
    let validate = |model: &ModelParams, epoch: usize| -> Result<MetricReport> {
        let report = evaluate(model, validation, metric)?.with_fingerprint(fingerprint.clone());
        if report.value.is_finite() {
            Ok(report)
        } else {
            Err(Error::Divergence { epoch })
        }
    };

    let initial = validate(&model, 0)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_objective: 0.0,
        validation: initial.clone(),
    }];
    let mut best = (model.clone(), 0, initial);
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffled = match train_batch {
        Batch::Ratings(r) => Shuffled::Ratings(r.to_vec()),
        Batch::Sessions(s) => Shuffled::Sessions(s.to_vec()),
    };
    let size = config.batch_size();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut objective = 0.0;
        let mut step = |batch: Batch<'_>, model: &mut ModelParams| -> Result<()> {
            let mut acc = GradientAccumulator::new();
            objective += loss_and_grad(model, batch, &mut acc)?;
            match adam_step(&mut adam, model, &acc) {
                Err(Error::NonFiniteGradient(_)) => Err(Error::Divergence { epoch }),
                other => other,
            }
        };
        match &mut shuffled {
            Shuffled::Ratings(r) => {
                r.shuffle(rng);
                for chunk in r.chunks(size) {
                    step(Batch::Ratings(chunk), &mut model)?;
                }
            }
            Shuffled::Sessions(s) => {
                s.shuffle(rng);
                for chunk in s.chunks(size) {
                    step(Batch::Sessions(chunk), &mut model)?;
                }
            }
        }
        let report = validate(&model, epoch)?;
        debug!("epoch {epoch}: {report}");
        history.push(EpochRecord {
            epoch,
            train_objective: objective / train_batch.len().max(1) as f64,
            validation: report.clone(),
        });
        if metric.better(report.value, best.2.value) {
            best = (model.clone(), epoch, report);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                info!("early stop at epoch {epoch}; best epoch {}", best.1);
                stopped_early = true;
                break;
            }
        }
    }

    let (model, best_epoch, best) = best;
    Ok(TrainOutcome {
        config: config.clone(),
        model,
        best_epoch,
        best,
        history,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

/// Candidate values per axis. Axes left empty keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub dim: Vec<usize>,
    pub lambda: Vec<f64>,
    pub lambda_linear: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub selection: Option<Metric>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Dim,
    Lambda,
    LambdaLinear,
    LearningRate,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Dim => "dim",
            Axis::Lambda => "lambda",
            Axis::LambdaLinear => "lambda_linear",
            Axis::LearningRate => "learning_rate",
        }
    }

    pub fn value(self, config: &TrainConfig) -> String {
        match self {
            Axis::Dim => config.dim.to_string(),
            Axis::Lambda => config.lambda.to_string(),
            Axis::LambdaLinear => config.lambda_linear.unwrap_or(config.lambda).to_string(),
            Axis::LearningRate => config.learning_rate.to_string(),
        }
    }
}

impl SweepGrid {
    pub fn axes(&self) -> Vec<Axis> {
        let mut axes = Vec::new();
        if !self.dim.is_empty() {
            axes.push(Axis::Dim);
        }
        if !self.lambda.is_empty() {
            axes.push(Axis::Lambda);
        }
        if !self.lambda_linear.is_empty() {
            axes.push(Axis::LambdaLinear);
        }
        if !self.learning_rate.is_empty() {
            axes.push(Axis::LearningRate);
        }
        axes
    }

    /// Cartesian product in axis order (dim, lambda, lambda_linear,
    /// learning_rate), last axis varying fastest.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let mut base = base.clone();
        if self.selection.is_some() {
            base.selection = self.selection;
        }
        let mut out = Vec::new();
        for &dim in &or_base(&self.dim, base.dim) {
            for &lambda in &or_base(&self.lambda, base.lambda) {
                let linear: Vec<Option<f64>> = if self.lambda_linear.is_empty() {
                    vec![base.lambda_linear]
                } else {
                    self.lambda_linear.iter().map(|&l| Some(l)).collect()
                };
                for &lambda_linear in &linear {
                    for &learning_rate in &or_base(&self.learning_rate, base.learning_rate) {
                        out.push(TrainConfig {
                            dim,
                            lambda,
                            lambda_linear,
                            learning_rate,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub config: TrainConfig,
    pub result: std::result::Result<MetricReport, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub axes: Vec<Axis>,
    pub metric: Metric,
    /// Successful runs, best first; ties keep grid order.
    pub ranked: Vec<SweepRow>,
    /// Runs rejected at validation or failed during training, in grid order.
    pub failed: Vec<SweepRow>,
    pub best: Option<TrainOutcome>,
}

impl SweepOutcome {
    /// Best metric per embedding dimension, ascending by dimension.
    pub fn dimension_table(&self) -> Vec<(usize, MetricReport)> {
        let mut by_dim: BTreeMap<usize, MetricReport> = BTreeMap::new();
        for row in &self.ranked {
            let Ok(report) = &row.result else { continue };
            by_dim.entry(row.config.dim).or_insert_with(|| report.clone());
        }
        by_dim.into_iter().collect()
    }
}

/// Trains every grid point (in parallel) and ranks them by validation metric.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, dataset: &Dataset) -> Result<SweepOutcome> {
    let configs = grid.configs(base);
    let metric = configs
        .first()
        .map(TrainConfig::selection)
        .ok_or_else(|| Error::Config("empty sweep grid".into()))?;
    let results: Vec<(TrainConfig, std::result::Result<TrainOutcome, String>)> = configs
        .into_par_iter()
        .map(|config| {
            let result = train(&config, dataset).map_err(|e| e.to_string());
            if let Err(e) = &result {
                warn!("sweep point {} failed: {e}", config.fingerprint());
            }
            (config, result)
        })
        .collect();

    let mut ranked = Vec::new();
    let mut failed = Vec::new();
    let mut best: Option<TrainOutcome> = None;
    for (config, result) in results {
        match result {
            Ok(outcome) => {
                if best.as_ref().is_none_or(|b| metric.better(outcome.best.value, b.best.value)) {
                    best = Some(outcome.clone());
                }
                ranked.push(SweepRow {
                    config,
                    result: Ok(outcome.best),
                });
            }
            Err(e) => failed.push(SweepRow {
                config,
                result: Err(e),
            }),
        }
    }
    let value = |row: &SweepRow| row.result.as_ref().map(|r| r.value).unwrap_or(f64::NAN);
    ranked.sort_by(|a, b| {
        let (x, y) = (value(a), value(b));
        if metric.higher_is_better() {
            y.total_cmp(&x)
        } else {
            x.total_cmp(&y)
        }
    });
    Ok(SweepOutcome {
        axes: grid.axes(),
        metric,
        ranked,
        failed,
        best,
    })
}
