//! Class-incremental single-pass data streams.
//!
//! A stream is an ordered list of task datasets with disjoint class sets,
//! consumed once in mini-batches. Sources are a synthetic Gaussian-blob
//! generator and CSV files; the augmentation operator perturbs feature
//! vectors with Gaussian jitter and per-coordinate masking.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled feature vector, tagged with the task it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

/// What `TaskStream::next_batch` yields.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Batch(Vec<Sample>),
    /// The given task has just been fully consumed.
    TaskEnd(usize),
    StreamEnd,
}

/// Single-pass mini-batch iterator over an ordered list of task datasets.
///
/// Samples are visited in a shuffled order within each task, each exactly
/// once per run; the visiting order is a pure function of `shuffle_seed`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Vec<Sample>>,
    task_classes: Vec<Vec<usize>>,
    batch_size: usize,
    shuffle_seed: u64,
    orders: Vec<Vec<usize>>,
    task_cursor: usize,
    pos: usize,
    boundary_pending: bool,
}

impl TaskStream {
    pub fn new(tasks: Vec<Vec<Sample>>, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if tasks.is_empty() || tasks.iter().any(Vec::is_empty) {
            return Err(Error::Config("every task needs at least one sample".into()));
        }
        let mut task_classes = Vec::with_capacity(tasks.len());
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            let classes: BTreeSet<usize> = task.iter().map(|s| s.label).collect();
            for c in &classes {
                if !seen.insert(*c) {
                    return Err(Error::Config(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            if task.iter().any(|s| s.task != t) {
                return Err(Error::Config(format!("task {t} holds a mislabeled sample")));
            }
            task_classes.push(classes.into_iter().collect());
        }
        let orders = shuffled_orders(&tasks, shuffle_seed);
        Ok(Self {
            tasks,
            task_classes,
            batch_size,
            shuffle_seed,
            orders,
            task_cursor: 0,
            pos: 0,
            boundary_pending: false,
        })
    }

    /// Re-seeds the within-task visiting order. Only meaningful before any
    /// batch has been drawn.
    pub fn with_shuffle_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self.orders = shuffled_orders(&self.tasks, seed);
        self
    }

    pub fn reset(&mut self) {
        self.orders = shuffled_orders(&self.tasks, self.shuffle_seed);
        self.task_cursor = 0;
        self.pos = 0;
        self.boundary_pending = false;
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Total number of classes over all tasks. Labels are expected to be the
    /// contiguous range `0..num_classes`.
    pub fn num_classes(&self) -> usize {
        self.task_classes.iter().map(Vec::len).sum()
    }

    pub fn task_classes(&self, task: usize) -> &[usize] {
        &self.task_classes[task]
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks[0][0].features.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn total_train_samples(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    /// Next mini-batch of at most `batch_size` samples, with task-boundary
    /// and end-of-stream signals in between.
    pub fn next_batch(&mut self) -> StreamEvent {
        if self.boundary_pending {
            self.boundary_pending = false;
            let finished = self.task_cursor;
            self.task_cursor += 1;
            self.pos = 0;
            return StreamEvent::TaskEnd(finished);
        }
        if self.task_cursor >= self.tasks.len() {
            return StreamEvent::StreamEnd;
        }
        let task = &self.tasks[self.task_cursor];
        let order = &self.orders[self.task_cursor];
        let end = (self.pos + self.batch_size).min(order.len());
        let batch: Vec<Sample> = order[self.pos..end].iter().map(|&i| task[i].clone()).collect();
        self.pos = end;
        if self.pos >= order.len() {
            self.boundary_pending = true;
        }
        StreamEvent::Batch(batch)
    }
}

fn shuffled_orders(tasks: &[Vec<Sample>], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tasks
        .iter()
        .map(|task| {
            let mut order: Vec<usize> = (0..task.len()).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Parameters of the synthetic Gaussian-blob stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0
            || self.classes_per_task == 0
            || self.samples_per_class == 0
            || self.dim == 0
        {
            return Err(Error::Config("synthetic stream counts must be >= 1".into()));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::Config("class_separation must be > 0".into()));
        }
        Ok(())
    }
}

/// Builds a class-incremental stream of isotropic unit-variance Gaussian
/// blobs with pairwise center distance >= `class_separation`, split 80/20
/// into train and per-task test sets. Deterministic under `cfg.seed`.
pub fn make_synthetic_stream(
    cfg: &SyntheticConfig,
    batch_size: usize,
) -> Result<(TaskStream, Vec<Vec<Sample>>)> {
    cfg.validate()?;
    let num_classes = cfg.num_tasks * cfg.classes_per_task;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(num_classes, cfg.dim, cfg.class_separation, &mut rng)?;

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_train = cfg.samples_per_class * 4 / 5;
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut tests = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for k in 0..cfg.classes_per_task {
            let label = t * cfg.classes_per_task + k;
            for i in 0..cfg.samples_per_class {
                let features: Vec<f64> = centers[label]
                    .iter()
                    .map(|c| c + unit.sample(&mut rng))
                    .collect();
                let sample = Sample { features, label, task: t };
                if i < n_train {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
        tasks.push(train);
        tests.push(test);
    }
    let stream = TaskStream::new(tasks, batch_size, cfg.seed)?;
    Ok((stream, tests))
}

/// Rejection-samples class centers until all pairwise distances reach
/// `separation`, keeping the configuration as compact as the geometry
/// allows (typical Gaussian pair distance starts barely above the required
/// separation and the proposal spread doubles whenever a retry budget slice
/// runs out). Compact centers keep feature magnitudes near the blob scale,
/// which downstream training assumes. Fails when the geometry does not fit
/// the dimension within the total retry budget.
fn place_centers(
    count: usize,
    dim: usize,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    // Typical distance of two N(0, s^2 I) points is s * sqrt(2 dim); 1.25x
    // slack puts it just above the required separation.
    let mut spread = 1.25 * separation / (2.0 * dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    let budget_slice = 200 * count;
    for _round in 0..8 {
        let proposal = Normal::new(0.0, spread).expect("center proposal");
        for _ in 0..budget_slice {
            if centers.len() == count {
                return Ok(centers);
            }
            let candidate: Vec<f64> = (0..dim).map(|_| proposal.sample(rng)).collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= separation * separation
            });
            if ok {
                centers.push(candidate);
            }
        }
        // Restart wider rather than keeping a cramped partial configuration.
        centers.clear();
        spread *= 2.0;
    }
    Err(Error::Config(format!(
        "cannot place {count} class centers at separation {separation} in dimension {dim}"
    )))
}

/// Parameters of a CSV-backed stream. Rows are `label, f_1, ..., f_D`;
/// `tasks` partitions the labels that may appear in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvConfig {
    pub path: String,
    #[serde(default)]
    pub header: bool,
    pub tasks: Vec<Vec<i64>>,
}

/// Loads a CSV stream. Labels are remapped to `0..num_classes` in task-spec
/// order; features are standardized per dimension to zero mean / unit
/// variance using training rows only (constant columns map to zero). Each
/// class is split 80/20 into train and test by file order.
pub fn load_csv_stream(
    cfg: &CsvConfig,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<(TaskStream, Vec<Vec<Sample>>)> {
    if cfg.tasks.is_empty() || cfg.tasks.iter().any(Vec::is_empty) {
        return Err(Error::Config("csv task partition must be nonempty".into()));
    }
    let mut label_ids = std::collections::BTreeMap::new();
    let mut task_of_label = Vec::new();
    for (t, labels) in cfg.tasks.iter().enumerate() {
        for &raw in labels {
            if label_ids.insert(raw, label_ids.len()).is_some() {
                return Err(Error::Config(format!(
                    "label {raw} listed in more than one task"
                )));
            }
            task_of_label.push(t);
        }
    }
    let rows = read_csv_rows(Path::new(&cfg.path), cfg.header)?;
    let dim = match rows.first() {
        Some((_, f, _)) => f.len(),
        None => return Err(Error::Schema("csv file holds no data rows".into())),
    };

    // Group rows by class in file order.
    let num_classes = label_ids.len();
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for (raw_label, features, line) in rows {
        if features.len() != dim {
            return Err(Error::Parse {
                line,
                message: format!("expected {dim} features, found {}", features.len()),
            });
        }
        let Some(&class) = label_ids.get(&raw_label) else {
            return Err(Error::Schema(format!(
                "label {raw_label} at line {line} is not listed in the task partition"
            )));
        };
        by_class[class].push(features);
    }
    if let Some(missing) = by_class.iter().position(Vec::is_empty) {
        let raw = label_ids.iter().find(|(_, &v)| v == missing).map(|(k, _)| *k);
        return Err(Error::Schema(format!(
            "no rows for label {:?} listed in the task partition",
            raw
        )));
    }

    // Per-class 80/20 split by file order, then standardize on train rows only.
    let mut train_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut test_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (class, rows) in by_class.into_iter().enumerate() {
        let n_train = (rows.len() * 4 / 5).max(1);
        for (i, features) in rows.into_iter().enumerate() {
            if i < n_train {
                train_rows.push((class, features));
            } else {
                test_rows.push((class, features));
            }
        }
    }
    let (mean, std) = column_stats(train_rows.iter().map(|(_, f)| f.as_slice()), dim);
    let standardize = |f: &[f64]| -> Vec<f64> {
        f.iter()
            .enumerate()
            .map(|(j, v)| if std[j] > 1e-12 { (v - mean[j]) / std[j] } else { 0.0 })
            .collect()
    };

    let num_tasks = cfg.tasks.len();
    let mut tasks: Vec<Vec<Sample>> = vec![Vec::new(); num_tasks];
    let mut tests: Vec<Vec<Sample>> = vec![Vec::new(); num_tasks];
    for (class, features) in &train_rows {
        let t = task_of_label[*class];
        tasks[t].push(Sample { features: standardize(features), label: *class, task: t });
    }
    for (class, features) in &test_rows {
        let t = task_of_label[*class];
        tests[t].push(Sample { features: standardize(features), label: *class, task: t });
    }
    let stream = TaskStream::new(tasks, batch_size, shuffle_seed)?;
    Ok((stream, tests))
}

fn read_csv_rows(path: &Path, header: bool) -> Result<Vec<(i64, Vec<f64>, u64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, csv::Position::line),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let mut fields = record.iter();
        let label: i64 = fields
            .next()
            .ok_or_else(|| Error::Parse { line, message: "empty row".into() })?
            .parse()
            .map_err(|e| Error::Parse { line, message: format!("bad label: {e}") })?;
        let features = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse { line, message: format!("bad feature: {e}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.is_empty() {
            return Err(Error::Parse { line, message: "row has no features".into() });
        }
        rows.push((label, features, line));
    }
    Ok(rows)
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
        count += 1;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / count as f64).sqrt()).collect();
    (mean, std)
}

/// Label-preserving feature perturbation: Gaussian jitter followed by
/// per-coordinate masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { jitter_sigma: 0.1, mask_prob: 0.1 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma < 0.0 {
            return Err(Error::Config("jitter_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `features' = mask .* (features + noise)`. Draw order is fixed: one
/// Gaussian per coordinate, then one mask draw per coordinate.
pub fn augment_features<R: Rng>(features: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = if cfg.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_sigma).expect("jitter distribution");
        features.iter().map(|v| v + noise.sample(rng)).collect()
    } else {
        features.to_vec()
    };
    if cfg.mask_prob > 0.0 {
        for v in &mut out {
            if rng.random::<f64>() < cfg.mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}

/// Augments a sample's features, keeping label and task untouched.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    Sample {
        features: augment_features(&sample.features, cfg, rng),
        label: sample.label,
        task: sample.task,
    }
}
