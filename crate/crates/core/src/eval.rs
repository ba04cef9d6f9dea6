//! Held-out metrics with standard errors, and the per-item feature export.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SessionRecord, SlateRatingRecord};
use crate::error::{Error, Result};
use crate::grad::Batch;
use crate::models::{log_softmax, softmax_nll, ClickModel, ClickVariant, FactorizationMachineModel, ModelParams, RegressionModel};
use crate::slate::dot;

/// Records scored per parallel chunk. Fixed so merges happen in the same
/// order on every run.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Mrr,
    Ndcg,
    Nll,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mse, Metric::Mrr, Metric::Ndcg, Metric::Nll];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mrr => "mrr",
            Metric::Ndcg => "ndcg",
            Metric::Nll => "nll",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Mrr | Metric::Ndcg)
    }

    /// `true` if `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown metric `{s}`; valid metrics: {}",
                    Metric::ALL.map(Metric::name).join(", ")
                ))
            })
    }
}

/// Streaming mean/variance (Welford) with a pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / n;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation (n − 1 denominator); zero for n < 2.
    pub fn std_dev(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0).sqrt()
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.std_dev() / (self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub std_error: f64,
    pub count: usize,
    #[serde(default)]
    pub fingerprint: String,
}

impl MetricReport {
    fn from_stats(metric: Metric, stats: RunningStats) -> Self {
        Self {
            metric,
            value: stats.mean(),
            std_error: stats.std_error(),
            count: stats.count(),
            fingerprint: String::new(),
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} = {} ± {} (n = {})",
            self.metric,
            short(self.value),
            short(self.std_error),
            self.count
        )
    }
}

fn short(x: f64) -> String {
    if x == 0.0 || (1e-3..1e6).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.4e}")
    }
}

/// Scores every record in parallel and reduces the per-record values.
fn summarize<R, F>(metric: Metric, records: &[R], score: F) -> Result<MetricReport>
where
    R: Sync,
    F: Fn(&R) -> Result<f64> + Sync,
{
    if records.is_empty() {
        return Err(Error::contract(format!("{metric} needs at least one record")));
    }
    let partials = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut stats = RunningStats::default();
            for r in chunk {
                stats.push(score(r)?);
            }
            Ok(stats)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = RunningStats::default();
    for p in &partials {
        total.merge(p);
    }
    Ok(MetricReport::from_stats(metric, total))
}

/// 1-based rank of `clicked` when items are sorted by descending logit,
/// ties going to the lower index.
pub fn rank_of(logits: &[f64], clicked: usize) -> usize {
    let z = logits[clicked];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < clicked))
        .count()
}

pub fn reciprocal_rank(logits: &[f64], clicked: usize) -> f64 {
    1.0 / rank_of(logits, clicked) as f64
}

/// NDCG with a single relevant item.
pub fn single_item_ndcg(logits: &[f64], clicked: usize) -> f64 {
    1.0 / ((rank_of(logits, clicked) + 1) as f64).log2()
}

/// Anything that produces one logit per slate item for a session.
pub trait SessionScorer: Sync {
    fn session_logits(&self, record: &SessionRecord) -> Result<Vec<f64>>;
}

impl SessionScorer for ClickModel {
    fn session_logits(&self, record: &SessionRecord) -> Result<Vec<f64>> {
        self.click_logits(&record.session, &record.items)
    }
}

impl SessionScorer for FactorizationMachineModel {
    fn session_logits(&self, record: &SessionRecord) -> Result<Vec<f64>> {
        self.session_logits(&record.session, &record.items)
    }
}

impl SessionScorer for ModelParams {
    fn session_logits(&self, record: &SessionRecord) -> Result<Vec<f64>> {
        match self {
            ModelParams::Click(m) => m.session_logits(record),
            ModelParams::Fm(m) => SessionScorer::session_logits(m, record),
            ModelParams::Regression(_) => Err(Error::contract("regression model cannot score sessions")),
        }
    }
}

fn checked_clicked(record: &SessionRecord, logits: &[f64]) -> Result<usize> {
    if record.clicked < logits.len() {
        Ok(record.clicked)
    } else {
        Err(Error::contract(format!(
            "session {}: clicked index {} out of range",
            record.id, record.clicked
        )))
    }
}

pub fn mse(model: &RegressionModel, records: &[SlateRatingRecord]) -> Result<MetricReport> {
    summarize(Metric::Mse, records, |r| {
        let tree = r.slate_tree(model.movie, model.position);
        let e = model.rating_predict(r.user, &tree)? - r.rating;
        Ok(e * e)
    })
}

pub fn mrr<S: SessionScorer + ?Sized>(model: &S, records: &[SessionRecord]) -> Result<MetricReport> {
    summarize(Metric::Mrr, records, |r| {
        let logits = model.session_logits(r)?;
        Ok(reciprocal_rank(&logits, checked_clicked(r, &logits)?))
    })
}

pub fn ndcg<S: SessionScorer + ?Sized>(model: &S, records: &[SessionRecord]) -> Result<MetricReport> {
    summarize(Metric::Ndcg, records, |r| {
        let logits = model.session_logits(r)?;
        Ok(single_item_ndcg(&logits, checked_clicked(r, &logits)?))
    })
}

/// Mean per-session negative log-likelihood (no penalty).
pub fn nll<S: SessionScorer + ?Sized>(model: &S, records: &[SessionRecord]) -> Result<MetricReport> {
    summarize(Metric::Nll, records, |r| {
        let logits = model.session_logits(r)?;
        softmax_nll(&logits, r.clicked)
    })
}

/// Evaluates `metric` for any model / record combination that supports it.
pub fn evaluate(model: &ModelParams, records: Batch<'_>, metric: Metric) -> Result<MetricReport> {
    match (model, records, metric) {
        (ModelParams::Regression(m), Batch::Ratings(r), Metric::Mse) => mse(m, r),
        (ModelParams::Click(_) | ModelParams::Fm(_), Batch::Sessions(r), Metric::Mrr) => mrr(model, r),
        (ModelParams::Click(_) | ModelParams::Fm(_), Batch::Sessions(r), Metric::Ndcg) => ndcg(model, r),
        (ModelParams::Click(_) | ModelParams::Fm(_), Batch::Sessions(r), Metric::Nll) => nll(model, r),
        _ => Err(Error::Config(format!(
            "metric {metric} is not available for a {} model on this data",
            model.variant()
        ))),
    }
}

/// Metrics that apply to a model variant.
pub fn metrics_for(model: &ModelParams) -> &'static [Metric] {
    match model {
        ModelParams::Regression(_) => &[Metric::Mse],
        _ => &[Metric::Mrr, Metric::Ndcg, Metric::Nll],
    }
}

// ---------------------------------------------------------------------------
// Feature export

/// Header of the feature export for embedding dimension `dim`:
///
/// `session_id,item,log_prob,emb_0,..,emb_{dim-1},session_item,w1_session_slate,w2_item_slate`
///
/// * `log_prob`: log softmax probability of the item within its session.
/// * `emb_*`: the item embedding.
/// * `session_item`: `em(u)ᵀem(i)`.
/// * `w1_session_slate`, `w2_item_slate`: `w1·em(u)ᵀem(s_i)` and
///   `w2·em(i)ᵀem(s_i)` with `s_i` the rest of the slate; zero for SEMB-1.
pub fn export_header(dim: usize) -> Vec<String> {
    let mut cols = vec!["session_id".to_string(), "item".to_string(), "log_prob".to_string()];
    cols.extend((0..dim).map(|d| format!("emb_{d}")));
    cols.extend(["session_item", "w1_session_slate", "w2_item_slate"].map(String::from));
    cols
}

/// Writes one CSV row per (session, item). Returns the number of rows.
pub fn export_features(model: &ClickModel, records: &[SessionRecord], path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let rows: Vec<Vec<Vec<String>>> = records
        .par_iter()
        .map(|r| {
            let fwd = model.forward(&r.session, &r.items)?;
            let log_probs = log_softmax(&fwd.logits);
            Ok(fwd
                .items
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let (t1, t2) = match (model.variant, fwd.rest.get(i)) {
                        (ClickVariant::Semb2, Some(s)) => {
                            (model.w1 * dot(&fwd.session, s), model.w2 * dot(e, s))
                        }
                        _ => (0.0, 0.0),
                    };
                    let mut row = vec![r.id.clone(), i.to_string(), log_probs[i].to_string()];
                    row.extend(e.iter().map(f64::to_string));
                    row.push(dot(&fwd.session, e).to_string());
                    row.push(t1.to_string());
                    row.push(t2.to_string());
                    row
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(export_header(model.dim())).map_err(io_err)?;
    let mut count = 0;
    for row in rows.iter().flatten() {
        w.write_record(row).map_err(io_err)?;
        count += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}
