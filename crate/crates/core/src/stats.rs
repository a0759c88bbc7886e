//! Per-class statistics of the classifier's last-layer feature map.
//!
//! These moments are the only trace of real data that survives a task:
//! the generator's feature-map loss matches generated batches against
//! Gaussians merged from them. Accumulation is streaming (Welford), so
//! no features are ever retained.

use crate::losses::MomentPair;
use ndarray::Array1;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("feature dim mismatch: store holds {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label count {labels} does not match feature rows {rows}")]
    CountMismatch { labels: usize, rows: usize },
    #[error("class {0} has no stored statistics")]
    UnknownClass(u8),
    #[error("empty batch")]
    EmptyBatch,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("store file {path} is invalid: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Mean/variance/count for one class's feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureStats {
    pub label: u8,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub count: usize,
}

/// Streaming per-class accumulator. `merge in sample -> finalize` equals
/// a two-pass mean/variance over the same data up to rounding.
#[derive(Debug, Clone)]
struct Welford {
    mean: Array1<f64>,
    m2: Array1<f64>,
    count: usize,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            m2: Array1::zeros(dim),
            count: 0,
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    /// Population variance (divide by n), matching the batch-variance
    /// convention used by the feature-map loss.
    fn finalize(&self, label: u8) -> ClassFeatureStats {
        let variance = if self.count > 0 {
            &self.m2 / self.count as f64
        } else {
            Array1::zeros(self.m2.len())
        };
        ClassFeatureStats {
            label,
            mean: self.mean.clone(),
            variance,
            count: self.count,
        }
    }
}

/// Builder that feeds batches of labeled feature vectors into per-class
/// accumulators.
#[derive(Debug, Clone)]
pub struct FeatureStatBuilder {
    feature_dim: usize,
    acc: BTreeMap<u8, Welford>,
}

impl FeatureStatBuilder {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            acc: BTreeMap::new(),
        }
    }

    /// Fold a batch of feature rows into the per-class accumulators.
    pub fn accumulate(
        &mut self,
        features: &ndarray::ArrayView2<'_, f64>,
        labels: &[u8],
    ) -> Result<(), StatsError> {
        if features.ncols() != self.feature_dim {
            return Err(StatsError::DimMismatch {
                expected: self.feature_dim,
                got: features.ncols(),
            });
        }
        if features.nrows() != labels.len() {
            return Err(StatsError::CountMismatch {
                labels: labels.len(),
                rows: features.nrows(),
            });
        }
        let dim = self.feature_dim;
        for (row, &label) in features.rows().into_iter().zip(labels) {
            let slot = self.acc.entry(label).or_insert_with(|| Welford::new(dim));
            slot.push(row.as_slice().expect("contiguous feature row"));
        }
        Ok(())
    }

    pub fn finalize(self) -> FeatureStatStore {
        let entries = self
            .acc
            .into_iter()
            .map(|(label, w)| (label, w.finalize(label)))
            .collect();
        FeatureStatStore {
            feature_dim: self.feature_dim,
            entries,
        }
    }
}

/// Finalized per-class feature moments; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStatStore {
    feature_dim: usize,
    entries: BTreeMap<u8, ClassFeatureStats>,
}

impl FeatureStatStore {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> Vec<u8> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, label: u8) -> Option<&ClassFeatureStats> {
        self.entries.get(&label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stored statistic scalars (mean + variance per class).
    pub fn scalar_count(&self) -> usize {
        self.entries.len() * 2 * self.feature_dim
    }

    /// Insert or replace one class's stats.
    pub fn insert(&mut self, stats: ClassFeatureStats) -> Result<(), StatsError> {
        if stats.mean.len() != self.feature_dim {
            return Err(StatsError::DimMismatch {
                expected: self.feature_dim,
                got: stats.mean.len(),
            });
        }
        self.entries.insert(stats.label, stats);
        Ok(())
    }

    /// Carry stats forward: entries of `self` absent from `newer` are
    /// kept, entries present in `newer` replace the old ones.
    pub fn updated_with(&self, newer: &FeatureStatStore) -> FeatureStatStore {
        let mut merged = self.clone();
        for (label, stats) in &newer.entries {
            merged.entries.insert(*label, stats.clone());
        }
        merged
    }
}

/// Merge the per-class Gaussians of the labels present in a batch,
/// weighted by their in-batch counts: the mean is the weighted mean and
/// the variance follows the mixture second-moment identity.
pub fn merge_moments(
    batch_labels: &[u8],
    store: &FeatureStatStore,
) -> Result<MomentPair, StatsError> {
    if batch_labels.is_empty() {
        return Err(StatsError::EmptyBatch);
    }
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &l in batch_labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let dim = store.feature_dim();
    let total = batch_labels.len() as f64;
    let mut mean = Array1::<f64>::zeros(dim);
    let mut second = Array1::<f64>::zeros(dim);
    for (&label, &n_c) in &counts {
        let stats = store.get(label).ok_or(StatsError::UnknownClass(label))?;
        let w = n_c as f64 / total;
        mean.scaled_add(w, &stats.mean);
        // E[x^2] per class = variance + mean^2
        ndarray::Zip::from(&mut second)
            .and(&stats.variance)
            .and(&stats.mean)
            .for_each(|s, &v, &m| *s += w * (v + m * m));
    }
    let mut variance = &second - &mean.mapv(|m| m * m);
    // floating cancellation can leave tiny negatives
    variance.mapv_inplace(|v| v.max(0.0));
    Ok(MomentPair::new(mean, variance))
}

const STORE_MAGIC: &str = "feature-stats v1";

/// Write the store as `<stem>.bin` (little-endian f32 mean/variance
/// arrays) plus `<stem>.txt` (plain-text manifest with labels, counts,
/// and byte offsets).
pub fn save_store(store: &FeatureStatStore, stem: &Path) -> Result<(), StatsError> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| StatsError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let bin_path = stem.with_extension("bin");
    let txt_path = stem.with_extension("txt");
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = format!(
        "{STORE_MAGIC}\nfeature_dim = {}\nclasses = {}\n",
        store.feature_dim,
        store.len()
    );
    for (label, stats) in &store.entries {
        let offset = blob.len();
        for &v in stats.mean.iter().chain(stats.variance.iter()) {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.push_str(&format!(
            "class {label} count {} offset {offset}\n",
            stats.count
        ));
    }
    fs::write(&bin_path, &blob).map_err(|source| StatsError::Io {
        path: bin_path,
        source,
    })?;
    let mut f = fs::File::create(&txt_path).map_err(|source| StatsError::Io {
        path: txt_path.clone(),
        source,
    })?;
    f.write_all(manifest.as_bytes()).map_err(|source| StatsError::Io {
        path: txt_path,
        source,
    })
}

/// Load a store written by [`save_store`].
pub fn load_store(stem: &Path) -> Result<FeatureStatStore, StatsError> {
    let bin_path = stem.with_extension("bin");
    let txt_path = stem.with_extension("txt");
    let manifest = fs::read_to_string(&txt_path).map_err(|source| StatsError::Io {
        path: txt_path.clone(),
        source,
    })?;
    let blob = fs::read(&bin_path).map_err(|source| StatsError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let mut lines = manifest.lines();
    if lines.next() != Some(STORE_MAGIC) {
        return Err(StatsError::Format {
            path: txt_path,
            reason: "missing header".into(),
        });
    }
    let bad = |reason: &str| StatsError::Format {
        path: txt_path.clone(),
        reason: reason.into(),
    };
    let feature_dim: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("feature_dim = "))
        .ok_or_else(|| bad("missing feature_dim"))?
        .parse()
        .map_err(|_| bad("bad feature_dim"))?;
    let classes: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("classes = "))
        .ok_or_else(|| bad("missing class count"))?
        .parse()
        .map_err(|_| bad("bad class count"))?;
    let mut store = FeatureStatStore::empty(feature_dim);
    for _ in 0..classes {
        let line = lines.next().ok_or_else(|| bad("missing class line"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 || tok[0] != "class" || tok[2] != "count" || tok[4] != "offset" {
            return Err(bad(&format!("malformed class line: {line}")));
        }
        let label: u8 = tok[1].parse().map_err(|_| bad("bad label"))?;
        let count: usize = tok[3].parse().map_err(|_| bad("bad count"))?;
        let offset: usize = tok[5].parse().map_err(|_| bad("bad offset"))?;
        let bytes_needed = offset + 2 * feature_dim * 4;
        if blob.len() < bytes_needed {
            return Err(StatsError::Format {
                path: bin_path,
                reason: format!("blob too short for class {label}"),
            });
        }
        let read_vec = |start: usize| -> Array1<f64> {
            Array1::from_iter(
                blob[start..start + feature_dim * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            )
        };
        store
            .insert(ClassFeatureStats {
                label,
                mean: read_vec(offset),
                variance: read_vec(offset + feature_dim * 4),
                count,
            })
            .expect("dims consistent by construction");
    }
    Ok(store)
}
