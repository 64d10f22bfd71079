//! Flow dataset ingestion, synthetic generation, holdout splits, feature
//! scaling, and class-balanced batch sampling.
//!
//! Datasets are immutable after construction; class id 0 is always the benign
//! class and every split preserves the full class-name vocabulary.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

/// Class id reserved for benign traffic.
pub const BENIGN_CLASS: usize = 0;

const STD_FLOOR: f64 = 1e-8;

/// Labeled tabular flow records with a pinned class vocabulary.
#[derive(Debug, Clone)]
pub struct FlowDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl FlowDataset {
    /// Build a dataset, enforcing the label-range, benign-id and finiteness
    /// invariants.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::data("class vocabulary is empty"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::data(format!(
                "feature rows ({}) and labels ({}) disagree",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::data(format!(
                "label {bad} outside vocabulary of {} classes",
                class_names.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("feature matrix contains non-finite values"));
        }
        Ok(Self { features, labels, class_names })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Row count per class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.labels[i] == class).collect()
    }

    /// New dataset from a row subset; the vocabulary is preserved.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        FlowDataset::new(features, labels, self.class_names.clone())
    }

    /// Feature rows for a list of indices as one matrix.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), rows)
    }

    /// Derived binary labels: 0 benign, 1 malicious.
    pub fn binary_labels(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l != BENIGN_CLASS)).collect()
    }

    /// Drop classes without rows and remap ids contiguously. Benign keeps
    /// id 0. Returns the compacted dataset plus, per new id, the old id.
    pub fn compact_vocabulary(&self) -> Result<(Self, Vec<usize>)> {
        let counts = self.class_counts();
        if counts[BENIGN_CLASS] == 0 {
            return Err(Error::data("benign class has no rows"));
        }
        let kept: Vec<usize> = (0..self.n_classes()).filter(|&c| counts[c] > 0).collect();
        let mut remap = vec![usize::MAX; self.n_classes()];
        for (new_id, &old_id) in kept.iter().enumerate() {
            remap[old_id] = new_id;
        }
        let labels = self.labels.iter().map(|&l| remap[l]).collect();
        let class_names = kept.iter().map(|&c| self.class_names[c].clone()).collect();
        let ds = FlowDataset::new(self.features.clone(), labels, class_names)?;
        Ok((ds, kept))
    }
}

/// Zero-day holdout specification for a stratified train/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Class names withheld entirely from the train split.
    pub zero_day_classes: Vec<String>,
    /// Fraction of each remaining class routed to the train split, in (0,1).
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(zero_day_classes: Vec<String>, train_fraction: f64, seed: u64) -> Self {
        Self { zero_day_classes, train_fraction, seed }
    }
}

/// Per-feature standardization fitted on the train split only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clamp_bound: f64,
}

impl FeatureScaler {
    /// Standardize and clamp a feature matrix.
    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        let b = self.clamp_bound;
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.mean[j]) / self.std[j]).clamp(-b, b);
            }
        }
        out
    }

    /// Undo standardization (without the clamp).
    pub fn inverse_transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Class-balanced sampling plan for one epoch of batches.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Normalized inverse-frequency weight per class id (0 for empty classes).
    pub class_weights: Vec<f64>,
    pub seed: u64,
    pub batches_per_epoch: usize,
}

impl BatchPlan {
    pub fn new(d: &FlowDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 4 {
            return Err(Error::config("batch_size must be at least 4"));
        }
        if d.n_rows() == 0 {
            return Err(Error::data("cannot plan batches over an empty dataset"));
        }
        let counts = d.class_counts();
        let inv: Vec<f64> =
            counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
        let total: f64 = inv.iter().sum();
        let class_weights = inv.iter().map(|w| w / total).collect();
        let batches_per_epoch = d.n_rows().div_ceil(batch_size);
        Ok(Self { batch_size, class_weights, seed, batches_per_epoch })
    }
}

/// Result of a CSV ingestion: the dataset plus the count of rejected rows.
#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: FlowDataset,
    pub dropped_rows: usize,
}

/// Load a flow CSV. The benign label is pinned to class id 0 and the other
/// labels are numbered in first-appearance order. Rows whose feature cells do
/// not parse as finite numbers are dropped and counted.
pub fn load_csv(path: &Path, label_column: &str, benign_label: &str) -> Result<CsvLoad> {
    if !path.exists() {
        return Err(Error::data(format!("no such file: {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::data(format!("label column {label_column:?} not found")))?;
    let n_cols = headers.len();
    let n_features = n_cols - 1;

    let mut rows: Vec<f64> = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut dropped = 0usize;
    let mut buf = Vec::with_capacity(n_features);
    for record in reader.records() {
        let record = record?;
        if record.len() != n_cols {
            dropped += 1;
            continue;
        }
        buf.clear();
        let mut ok = true;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => buf.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            dropped += 1;
            continue;
        }
        rows.extend_from_slice(&buf);
        label_names.push(record[label_idx].to_string());
    }

    let n_rows = label_names.len();
    if n_rows == 0 {
        return Err(Error::data("no usable rows after parsing"));
    }
    if !label_names.iter().any(|l| l == benign_label) {
        return Err(Error::data(format!("benign class {benign_label:?} absent from data")));
    }

    let mut class_names = vec![benign_label.to_string()];
    let mut labels = Vec::with_capacity(n_rows);
    for name in &label_names {
        let id = match class_names.iter().position(|n| n == name) {
            Some(id) => id,
            None => {
                class_names.push(name.clone());
                class_names.len() - 1
            }
        };
        labels.push(id);
    }

    let features = Array2::from_shape_vec((n_rows, n_features), rows)
        .map_err(|e| Error::data(format!("bad feature matrix shape: {e}")))?;
    let dataset = FlowDataset::new(features, labels, class_names)?;
    Ok(CsvLoad { dataset, dropped_rows: dropped })
}

/// Write a dataset in the ingestion CSV format (features f0..fN, then the
/// label column holding class names).
pub fn write_csv(d: &FlowDataset, path: &Path, label_column: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d.n_features()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(d.n_features() + 1);
    for (i, row) in d.features.rows().into_iter().enumerate() {
        record.clear();
        for v in row.iter() {
            record.push(format!("{v}"));
        }
        record.push(d.class_names[d.labels[i]].clone());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Stratified train/test split with the zero-day classes routed entirely to
/// the test side. Deterministic given the spec seed.
pub fn split_holdout(d: &FlowDataset, spec: &SplitSpec) -> Result<(FlowDataset, FlowDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config("train_fraction must lie in (0,1)"));
    }
    let benign_name = &d.class_names()[BENIGN_CLASS];
    if spec.zero_day_classes.iter().any(|n| n == benign_name) {
        return Err(Error::config("zero-day set must not name the benign class"));
    }
    let mut zero_day_ids = Vec::new();
    for name in &spec.zero_day_classes {
        let id = d
            .class_id(name)
            .ok_or_else(|| Error::config(format!("zero-day class {name:?} not in vocabulary")))?;
        zero_day_ids.push(id);
    }

    let counts = d.class_counts();
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..d.n_classes() {
        let mut rows = d.rows_of_class(class);
        if rows.is_empty() {
            continue;
        }
        if zero_day_ids.contains(&class) {
            test_rows.extend(rows);
            continue;
        }
        if counts[class] < 2 {
            return Err(Error::data(format!(
                "class {:?} has fewer than 2 rows; cannot stratify",
                d.class_names()[class]
            )));
        }
        let mut class_rng = rng(derive_seed(spec.seed, class as u64));
        rows.shuffle(&mut class_rng);
        let n_train = (rows.len() as f64 * spec.train_fraction).floor() as usize;
        train_rows.extend_from_slice(&rows[..n_train]);
        test_rows.extend_from_slice(&rows[n_train..]);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok((d.select(&train_rows)?, d.select(&test_rows)?))
}

/// Fit per-feature mean and population standard deviation on the train split.
/// Standard deviations are floored at 1e-8 so constant features scale to 0.
pub fn fit_scaler(train: &FlowDataset, clamp_bound: f64) -> Result<FeatureScaler> {
    if train.n_rows() == 0 {
        return Err(Error::data("cannot fit scaler on an empty dataset"));
    }
    if !(clamp_bound > 0.0) {
        return Err(Error::config("clamp_bound must be positive"));
    }
    let n = train.n_rows() as f64;
    let mean: Array1<f64> = train.features.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(train.n_features());
    for row in train.features.rows() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var /= n;
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
    Ok(FeatureScaler { mean: mean.to_vec(), std, clamp_bound })
}

/// Class-balanced batches: rows drawn with replacement with probability
/// proportional to the weight of their class, which makes the expected class
/// frequency uniform over the classes present. Every batch is guaranteed at
/// least one benign row (resampled up to 100 times, then one benign row is
/// forced in at a random position).
pub fn balanced_batches(d: &FlowDataset, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    let benign_rows = d.rows_of_class(BENIGN_CLASS);
    if benign_rows.is_empty() {
        return Err(Error::data("dataset has no benign rows; batches need at least one"));
    }
    let row_weights: Vec<f64> = d.labels.iter().map(|&l| plan.class_weights[l]).collect();
    let index = WeightedIndex::new(&row_weights)
        .map_err(|e| Error::data(format!("bad sampling weights: {e}")))?;
    let mut sampler = rng(plan.seed);
    let mut batches = Vec::with_capacity(plan.batches_per_epoch);
    for _ in 0..plan.batches_per_epoch {
        let mut batch = Vec::with_capacity(plan.batch_size);
        let mut has_benign = false;
        for attempt in 0..=100 {
            batch.clear();
            for _ in 0..plan.batch_size {
                batch.push(index.sample(&mut sampler));
            }
            has_benign = batch.iter().any(|&i| d.labels[i] == BENIGN_CLASS);
            if has_benign || attempt == 100 {
                break;
            }
        }
        if !has_benign {
            let row = benign_rows[sampler.random_range(0..benign_rows.len())];
            let pos = sampler.random_range(0..plan.batch_size);
            batch[pos] = row;
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Synthetic dataset plus the names of its designated zero-day classes.
#[derive(Debug)]
pub struct SynthDataset {
    pub dataset: FlowDataset,
    pub zero_day_classes: Vec<String>,
}

/// Gaussian blobs with unit covariance. Class means sit on a scaled simplex
/// (standard basis directions), so all pairwise mean distances equal
/// `separation` exactly. The last `zero_day_count` malicious classes are
/// flagged for holdout. Deterministic given the seed.
pub fn synth_blobs(
    n_classes: usize,
    n_per_class: usize,
    f: usize,
    separation: f64,
    zero_day_count: usize,
    seed: u64,
) -> Result<SynthDataset> {
    if n_classes < 2 {
        return Err(Error::config("need at least 2 classes (benign plus one malicious)"));
    }
    if n_per_class == 0 || f == 0 {
        return Err(Error::config("n_per_class and feature count must be positive"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("separation must be finite and non-negative"));
    }
    if zero_day_count + 1 >= n_classes {
        return Err(Error::config(
            "zero_day_count must leave at least one known malicious class",
        ));
    }
    if separation > 0.0 && n_classes > f {
        return Err(Error::config(
            "simplex placement needs feature count >= class count when separation > 0",
        ));
    }

    let scale = separation / std::f64::consts::SQRT_2;
    let n_rows = n_classes * n_per_class;
    let mut features = Array2::<f64>::zeros((n_rows, f));
    let mut labels = Vec::with_capacity(n_rows);
    let mut gen = rng(seed);
    for class in 0..n_classes {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            for j in 0..f {
                let noise: f64 = gen.sample(StandardNormal);
                let mean = if separation > 0.0 && j == class { scale } else { 0.0 };
                features[[row, j]] = mean + noise;
            }
            labels.push(class);
        }
    }

    let mut class_names = vec!["benign".to_string()];
    for c in 1..n_classes {
        class_names.push(format!("attack{c}"));
    }
    let zero_day_classes = class_names[n_classes - zero_day_count..].to_vec();
    let dataset = FlowDataset::new(features, labels, class_names)?;
    Ok(SynthDataset { dataset, zero_day_classes })
}
