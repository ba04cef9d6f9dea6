//! Dataset schemas, the two on-disk record formats and a synthetic generator
//! with a planted ground-truth model.
//!
//! Slate ratings are one CSV line per slate, no header:
//!
//! ```text
//! u7,m1:0,m9:1,m2:2,m5:3,m8:4,4.5
//! ```
//!
//! i.e. user, five `movie:position` slots, rating. Sessions are JSON lines:
//!
//! ```text
//! {"session":"s1","actions":[[{"family":"action_type","id":3},{"family":"time_spent","value":1.5}]],
//!  "items":[[{"family":"item_id","id":17}],[{"family":"item_id","id":4}]],"clicked":1}
//! ```
//!
//! where every action and every item is a list of leaves. A leaf carries
//! either an `id` (categorical) or a `value` (numerical).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Batch;
use crate::models::{softmax, ClickModel, ClickVariant, ModelParams, RegressionModel};
use crate::slate::{init_std, FamilyId, FeatureSpec, Leaf, LeafValue, Schema, SlateNode};

pub const SLOTS_PER_SLATE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Click,
}

fn default_max_actions() -> usize {
    15
}

fn default_max_items() -> usize {
    25
}

/// Sidecar schema file describing one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub task: Task,
    /// Number of users (regression only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    /// Inclusive rating bounds; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_range: Option<[f64; 2]>,
    #[serde(default = "default_max_actions")]
    pub max_actions: usize,
    #[serde(default = "default_max_items")]
    pub max_items: usize,
    pub families: Schema,
}

impl DatasetSchema {
    pub fn regression(users: usize, movies: usize, rating_range: Option<[f64; 2]>) -> Result<Self> {
        let schema = Self {
            task: Task::Regression,
            users: Some(users),
            rating_range,
            max_actions: default_max_actions(),
            max_items: default_max_items(),
            families: Schema::new(vec![
                FeatureSpec::categorical(RegressionModel::MOVIE, movies),
                FeatureSpec::categorical(RegressionModel::POSITION, SLOTS_PER_SLATE),
            ])?,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_actions == 0 || self.max_items == 0 {
            return Err(Error::Schema("max_actions and max_items must be positive".into()));
        }
        if let Some([lo, hi]) = self.rating_range {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::Schema(format!("empty rating range [{lo}, {hi}]")));
            }
        }
        if self.task == Task::Regression {
            if self.users.unwrap_or(0) == 0 {
                return Err(Error::Schema("regression schema needs `users` >= 1".into()));
            }
            let position = self.families.id(RegressionModel::POSITION)?;
            if self.families.spec(position)?.rows() < SLOTS_PER_SLATE {
                return Err(Error::Schema(format!(
                    "family `position` needs cardinality >= {SLOTS_PER_SLATE}"
                )));
            }
            self.families.id(RegressionModel::MOVIE)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// First family whose declaration differs between the two schemas.
    pub fn mismatch(&self, other: &DatasetSchema) -> Option<String> {
        let a = self.families.families();
        let b = other.families.families();
        for i in 0..a.len().max(b.len()) {
            match (a.get(i), b.get(i)) {
                (Some(x), Some(y)) if x == y => {}
                (Some(x), _) => return Some(x.name.clone()),
                (None, Some(y)) => return Some(y.name.clone()),
                (None, None) => unreachable!(),
            }
        }
        if self.users != other.users {
            return Some("users".into());
        }
        if self.task != other.task {
            return Some("task".into());
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Records

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub movie: usize,
    pub position: usize,
}

/// One rated slate of five movies.
#[derive(Debug, Clone, PartialEq)]
pub struct SlateRatingRecord {
    pub user: usize,
    pub slots: Vec<Slot>,
    pub rating: f64,
}

impl SlateRatingRecord {
    /// Slot trees `[movie, position]` under a slate node.
    pub fn slate_tree(&self, movie: FamilyId, position: FamilyId) -> SlateNode {
        SlateNode::internal(
            self.slots
                .iter()
                .map(|s| {
                    SlateNode::internal(vec![
                        SlateNode::leaf(Leaf::categorical(movie, s.movie)),
                        SlateNode::leaf(Leaf::categorical(position, s.position)),
                    ])
                })
                .collect(),
        )
    }
}

/// One session: the action history, the slate shown and the clicked item.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub id: String,
    /// Internal node whose children are the actions.
    pub session: SlateNode,
    pub items: Vec<SlateNode>,
    pub clicked: usize,
}

impl SessionRecord {
    pub fn num_actions(&self) -> usize {
        match &self.session {
            SlateNode::Internal(a) => a.len(),
            SlateNode::Leaf(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<R> {
    pub schema: DatasetSchema,
    pub train: Vec<R>,
    pub validation: Vec<R>,
    pub test: Vec<R>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Ratings(DatasetSplit<SlateRatingRecord>),
    Sessions(DatasetSplit<SessionRecord>),
}

impl Dataset {
    pub fn schema(&self) -> &DatasetSchema {
        match self {
            Dataset::Ratings(d) => &d.schema,
            Dataset::Sessions(d) => &d.schema,
        }
    }

    pub fn task(&self) -> Task {
        self.schema().task
    }

    pub fn batch(&self, split: Split) -> Batch<'_> {
        match (self, split) {
            (Dataset::Ratings(d), Split::Train) => Batch::Ratings(&d.train),
            (Dataset::Ratings(d), Split::Validation) => Batch::Ratings(&d.validation),
            (Dataset::Ratings(d), Split::Test) => Batch::Ratings(&d.test),
            (Dataset::Sessions(d), Split::Train) => Batch::Sessions(&d.train),
            (Dataset::Sessions(d), Split::Validation) => Batch::Sessions(&d.validation),
            (Dataset::Sessions(d), Split::Test) => Batch::Sessions(&d.test),
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        match self {
            Dataset::Ratings(d) => [d.train.len(), d.validation.len(), d.test.len()],
            Dataset::Sessions(d) => [d.train.len(), d.validation.len(), d.test.len()],
        }
    }
}

/// Records of one file, either task.
#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Ratings(Vec<SlateRatingRecord>),
    Sessions(Vec<SessionRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Ratings(r) => r.len(),
            Records::Sessions(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Self> {
        Ok(match schema.task {
            Task::Regression => Records::Ratings(load_slate_ratings(path, schema)?),
            Task::Click => Records::Sessions(load_sessions(path, schema)?),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<()> {
        match self {
            Records::Ratings(r) => save_slate_ratings(path, r),
            Records::Sessions(r) => save_sessions(path, r, schema),
        }
    }
}

// ---------------------------------------------------------------------------
// Slate rating CSV

fn parse_id(token: &str, prefix: char) -> Option<usize> {
    token.strip_prefix(prefix).unwrap_or(token).parse().ok()
}

fn parse_rating_line(
    line: &str,
    lineno: usize,
    path: &Path,
    schema: &DatasetSchema,
    movie_cardinality: usize,
) -> Result<SlateRatingRecord> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    let invalid = |field: &'static str, message: String| Error::InvalidField {
        path: path.to_path_buf(),
        line: lineno,
        field,
        message,
    };

    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != SLOTS_PER_SLATE + 2 {
        return Err(parse_err(format!(
            "expected {} comma-separated fields, found {}",
            SLOTS_PER_SLATE + 2,
            fields.len()
        )));
    }
    let user = parse_id(fields[0], 'u').ok_or_else(|| parse_err(format!("bad user `{}`", fields[0])))?;
    let users = schema.users.unwrap_or(0);
    if user >= users {
        return Err(invalid("user", format!("id {user} >= {users} users")));
    }

    let mut seen = [false; SLOTS_PER_SLATE];
    let mut slots = Vec::with_capacity(SLOTS_PER_SLATE);
    for token in &fields[1..=SLOTS_PER_SLATE] {
        let (m, p) = token
            .split_once(':')
            .ok_or_else(|| parse_err(format!("slot `{token}` is not movie:position")))?;
        let movie = parse_id(m, 'm').ok_or_else(|| parse_err(format!("bad movie `{m}`")))?;
        let position: usize = p
            .parse()
            .map_err(|_| parse_err(format!("bad position `{p}`")))?;
        if movie >= movie_cardinality {
            return Err(invalid(
                "movie",
                format!("id {movie} >= cardinality {movie_cardinality}"),
            ));
        }
        if position >= SLOTS_PER_SLATE {
            return Err(invalid("position", format!("{position} not in 0..{SLOTS_PER_SLATE}")));
        }
        if std::mem::replace(&mut seen[position], true) {
            return Err(invalid("position", format!("duplicate position {position}")));
        }
        slots.push(Slot { movie, position });
    }

    let rating: f64 = fields[SLOTS_PER_SLATE + 1]
        .parse()
        .map_err(|_| parse_err(format!("bad rating `{}`", fields[SLOTS_PER_SLATE + 1])))?;
    if !rating.is_finite() {
        return Err(invalid("rating", "not finite".into()));
    }
    if let Some([lo, hi]) = schema.rating_range {
        if rating < lo || rating > hi {
            return Err(invalid("rating", format!("{rating} outside [{lo}, {hi}]")));
        }
    }
    Ok(SlateRatingRecord { user, slots, rating })
}

pub fn load_slate_ratings(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<SlateRatingRecord>> {
    let path = path.as_ref();
    if schema.task != Task::Regression {
        return Err(Error::Schema("slate ratings need a regression schema".into()));
    }
    let movie = schema.families.id(RegressionModel::MOVIE)?;
    let movie_cardinality = schema.families.spec(movie)?.rows();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_rating_line(&line, i + 1, path, schema, movie_cardinality)?);
    }
    Ok(records)
}

pub fn format_rating_line(record: &SlateRatingRecord) -> String {
    let mut line = format!("u{}", record.user);
    for s in &record.slots {
        line.push_str(&format!(",m{}:{}", s.movie, s.position));
    }
    line.push_str(&format!(",{}", record.rating));
    line
}

pub fn save_slate_ratings(path: impl AsRef<Path>, records: &[SlateRatingRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", format_rating_line(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Session JSON lines

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafLine {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionLine {
    session: String,
    actions: Vec<Vec<LeafLine>>,
    items: Vec<Vec<LeafLine>>,
    clicked: usize,
}

fn leaves_to_node(
    leaves: Vec<LeafLine>,
    schema: &Schema,
    invalid: &dyn Fn(&'static str, String) -> Error,
    field: &'static str,
) -> Result<SlateNode> {
    if leaves.is_empty() {
        return Err(invalid(field, "empty feature list".into()));
    }
    let children = leaves
        .into_iter()
        .map(|l| {
            let family = schema.id(&l.family).map_err(|e| invalid(field, e.to_string()))?;
            let value = match (l.id, l.value) {
                (Some(id), None) => LeafValue::Id(id),
                (None, Some(v)) => LeafValue::Value(v),
                _ => {
                    return Err(invalid(
                        field,
                        format!("leaf of `{}` needs exactly one of id/value", l.family),
                    ))
                }
            };
            let leaf = Leaf { family, value };
            schema.check_leaf(&leaf).map_err(|e| invalid(field, e.to_string()))?;
            Ok(SlateNode::leaf(leaf))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlateNode::internal(children))
}

fn node_to_leaves(node: &SlateNode, schema: &Schema) -> Result<Vec<LeafLine>> {
    let mut out = Vec::new();
    let mut err = None;
    node.for_each_leaf(&mut |leaf| match schema.spec(leaf.family) {
        Ok(spec) => out.push(match leaf.value {
            LeafValue::Id(id) => LeafLine {
                family: spec.name.clone(),
                id: Some(id),
                value: None,
            },
            LeafValue::Value(v) => LeafLine {
                family: spec.name.clone(),
                id: None,
                value: Some(v),
            },
        }),
        Err(e) => {
            err.get_or_insert(e);
        }
    });
    err.map_or(Ok(out), Err)
}

fn parse_session_line(line: &str, lineno: usize, path: &Path, schema: &DatasetSchema) -> Result<SessionRecord> {
    let parsed: SessionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message: e.to_string(),
    })?;
    let invalid = |field: &'static str, message: String| Error::InvalidField {
        path: path.to_path_buf(),
        line: lineno,
        field,
        message,
    };
    if parsed.actions.is_empty() {
        return Err(invalid("actions", "session has no actions".into()));
    }
    if parsed.actions.len() > schema.max_actions {
        return Err(invalid(
            "actions",
            format!("{} actions > max {}", parsed.actions.len(), schema.max_actions),
        ));
    }
    if parsed.items.is_empty() || parsed.items.len() > schema.max_items {
        return Err(invalid(
            "items",
            format!("{} items, expected 1..={}", parsed.items.len(), schema.max_items),
        ));
    }
    if parsed.clicked >= parsed.items.len() {
        return Err(invalid(
            "clicked",
            format!("index {} out of range for {} items", parsed.clicked, parsed.items.len()),
        ));
    }
    let actions = parsed
        .actions
        .into_iter()
        .map(|a| leaves_to_node(a, &schema.families, &invalid, "actions"))
        .collect::<Result<Vec<_>>>()?;
    let items = parsed
        .items
        .into_iter()
        .map(|i| leaves_to_node(i, &schema.families, &invalid, "items"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SessionRecord {
        id: parsed.session,
        session: SlateNode::internal(actions),
        items,
        clicked: parsed.clicked,
    })
}

pub fn load_sessions(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<SessionRecord>> {
    let path = path.as_ref();
    if schema.task != Task::Click {
        return Err(Error::Schema("sessions need a click schema".into()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_session_line(&line, i + 1, path, schema)?);
    }
    Ok(records)
}

pub fn format_session_line(record: &SessionRecord, schema: &DatasetSchema) -> Result<String> {
    let actions = match &record.session {
        SlateNode::Internal(actions) => actions
            .iter()
            .map(|a| node_to_leaves(a, &schema.families))
            .collect::<Result<Vec<_>>>()?,
        leaf => vec![node_to_leaves(leaf, &schema.families)?],
    };
    let line = SessionLine {
        session: record.id.clone(),
        actions,
        items: record
            .items
            .iter()
            .map(|i| node_to_leaves(i, &schema.families))
            .collect::<Result<Vec<_>>>()?,
        clicked: record.clicked,
    };
    Ok(serde_json::to_string(&line).expect("session lines serialise"))
}

pub fn save_sessions(path: impl AsRef<Path>, records: &[SessionRecord], schema: &DatasetSchema) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", format_session_line(r, schema)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Sizes and scales of a planted synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub dim: usize,
    pub records: usize,
    /// Standard deviation of the planted vectors; the initialisation
    /// distribution (`0.1/√dim`) when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_std: Option<f64>,
    /// Gaussian rating noise (regression only).
    pub noise_std: f64,
    pub users: usize,
    pub movies: usize,
    pub items_per_slate: usize,
    pub item_vocab: usize,
    pub action_types: usize,
    pub max_actions: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            records: 1000,
            planted_std: None,
            noise_std: 0.0,
            users: 500,
            movies: 2000,
            items_per_slate: 10,
            item_vocab: 200,
            action_types: 10,
            max_actions: 15,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl PlantedConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.dim == 0 {
            return bad("planted dim must be positive");
        }
        if self.planted_std.is_some_and(|s| s.is_nan() || s < 0.0) || self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("planted_std and noise_std must be >= 0");
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be >= 0 and sum to 1");
        }
        Ok(())
    }

    pub fn planted_std(&self) -> f64 {
        self.planted_std.unwrap_or_else(|| init_std(self.dim))
    }

    fn split_sizes(&self) -> [usize; 3] {
        let n = self.records;
        let train = ((n as f64) * self.split[0]).round() as usize;
        let val = (((n as f64) * self.split[1]).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, val, n - train - val]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Regression,
    Click,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(SyntheticKind::Regression),
            "click" => Ok(SyntheticKind::Click),
            other => Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected regression or click)"
            ))),
        }
    }
}

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn split_records<R>(mut records: Vec<R>, sizes: [usize; 3], schema: DatasetSchema) -> DatasetSplit<R> {
    let test = records.split_off(sizes[0] + sizes[1]);
    let validation = records.split_off(sizes[0]);
    DatasetSplit {
        schema,
        train: records,
        validation,
        test,
    }
}

/// Names of the families used by the synthetic click generator.
pub mod click_families {
    pub const ITEM_ID: &str = "item_id";
    pub const ITEM_POSITION: &str = "item_position";
    pub const ITEM_PRICE: &str = "item_price";
    pub const ACTION_TYPE: &str = "action_type";
    pub const ACTION_ITEM: &str = "action_item";
    pub const TIME_SPENT: &str = "time_spent";
}

pub fn synthetic_click_schema(config: &PlantedConfig) -> Result<DatasetSchema> {
    use click_families::*;
    let schema = DatasetSchema {
        task: Task::Click,
        users: None,
        rating_range: None,
        max_actions: config.max_actions,
        max_items: config.items_per_slate,
        families: Schema::new(vec![
            FeatureSpec::categorical(ITEM_ID, config.item_vocab),
            FeatureSpec::categorical(ITEM_POSITION, config.items_per_slate),
            FeatureSpec::numerical(ITEM_PRICE),
            FeatureSpec::categorical(ACTION_TYPE, config.action_types),
            FeatureSpec::categorical(ACTION_ITEM, config.items_per_slate),
            FeatureSpec::numerical(TIME_SPENT),
        ])?,
    };
    schema.validate()?;
    Ok(schema)
}

/// Generates a dataset from a planted model drawn with `planted_std()`.
/// Regression ratings are the planted prediction plus optional noise;
/// clicks are sampled from the planted SEMB-1 softmax.
pub fn generate_synthetic(kind: SyntheticKind, config: &PlantedConfig, seed: u64) -> Result<(Dataset, ModelParams)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::Regression => {
            if config.movies < SLOTS_PER_SLATE || config.users == 0 {
                return Err(Error::Config(format!(
                    "regression synthesis needs >= {SLOTS_PER_SLATE} movies and >= 1 user"
                )));
            }
            let schema = DatasetSchema::regression(config.users, config.movies, None)?;
            let planted = RegressionModel::random(
                schema.families.clone(),
                config.users,
                config.dim,
                0.0,
                config.planted_std(),
                &mut rng,
            )?;
            let mut records = Vec::with_capacity(config.records);
            for _ in 0..config.records {
                let user = rng.random_range(0..config.users);
                let movies = sample(&mut rng, config.movies, SLOTS_PER_SLATE);
                let slots = movies
                    .iter()
                    .enumerate()
                    .map(|(position, movie)| Slot { movie, position })
                    .collect();
                let mut record = SlateRatingRecord { user, slots, rating: 0.0 };
                let tree = record.slate_tree(planted.movie, planted.position);
                record.rating = planted.rating_predict(user, &tree)?;
                if config.noise_std > 0.0 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    record.rating += config.noise_std * eps;
                }
                records.push(record);
            }
            let split = split_records(records, config.split_sizes(), schema);
            Ok((Dataset::Ratings(split), ModelParams::Regression(planted)))
        }
        SyntheticKind::Click => {
            use click_families::*;
            if config.items_per_slate < 2 || config.item_vocab < config.items_per_slate {
                return Err(Error::Config(
                    "click synthesis needs >= 2 items per slate and item_vocab >= items_per_slate".into(),
                ));
            }
            if config.action_types == 0 || config.max_actions == 0 {
                return Err(Error::Config("click synthesis needs action types and actions".into()));
            }
            let schema = synthetic_click_schema(config)?;
            let f = &schema.families;
            let (item_id, item_pos, price) = (f.id(ITEM_ID)?, f.id(ITEM_POSITION)?, f.id(ITEM_PRICE)?);
            let (action_type, action_item, time) = (f.id(ACTION_TYPE)?, f.id(ACTION_ITEM)?, f.id(TIME_SPENT)?);
            let planted = ClickModel::random(
                schema.families.clone(),
                ClickVariant::Semb1,
                config.dim,
                0.0,
                config.planted_std(),
                &mut rng,
            )?;
            let mut records = Vec::with_capacity(config.records);
            for n in 0..config.records {
                let num_actions = rng.random_range(1..=config.max_actions);
                let actions = (0..num_actions)
                    .map(|_| {
                        SlateNode::internal(vec![
                            SlateNode::leaf(Leaf::categorical(action_type, rng.random_range(0..config.action_types))),
                            SlateNode::leaf(Leaf::categorical(action_item, rng.random_range(0..config.items_per_slate))),
                            SlateNode::leaf(Leaf::numerical(time, rng.random::<f64>())),
                        ])
                    })
                    .collect();
                let ids = sample(&mut rng, config.item_vocab, config.items_per_slate);
                let items: Vec<SlateNode> = ids
                    .iter()
                    .enumerate()
                    .map(|(pos, id)| {
                        let p: f64 = StandardNormal.sample(&mut rng);
                        SlateNode::internal(vec![
                            SlateNode::leaf(Leaf::categorical(item_id, id)),
                            SlateNode::leaf(Leaf::categorical(item_pos, pos)),
                            SlateNode::leaf(Leaf::numerical(price, p)),
                        ])
                    })
                    .collect();
                let session = SlateNode::internal(actions);
                let probs = softmax(&planted.click_logits(&session, &items)?);
                let clicked = sample_categorical(&probs, &mut rng);
                records.push(SessionRecord {
                    id: format!("s{n}"),
                    session,
                    items,
                    clicked,
                });
            }
            let split = split_records(records, config.split_sizes(), schema);
            Ok((Dataset::Sessions(split), ModelParams::Click(planted)))
        }
    }
}
