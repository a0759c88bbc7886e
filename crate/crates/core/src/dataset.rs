//! IDX ingestion, preprocessing, task schedules, and batch iteration.
//!
//! Images move through three stages: raw 28x28 bytes straight from the
//! IDX files, preprocessed 32x32 floats in `[-1, 1]`, and per-task
//! subsets selected by a [`TaskSchedule`]. Everything downstream of the
//! schedule is deterministic in the seed.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated, needed {needed} bytes, had {had}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        had: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} outside the supported range 0..=9")]
    LabelRange(u8),
    #[error("expected {expected} images, got {got}")]
    ShapeError { expected: String, got: String },
    #[error("schedule references class {0} absent from the split")]
    UnknownClass(u8),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("split is empty")]
    EmptySplit,
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("cache at {path} is invalid: {reason}")]
    CacheFormat { path: PathBuf, reason: String },
}

/// One class within a task and the fraction of its images the task keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSpec {
    pub label: u8,
    pub fraction: f64,
}

impl ClassSpec {
    pub fn full(label: u8) -> Self {
        Self {
            label,
            fraction: 1.0,
        }
    }
}

/// Ordered disjoint-class tasks with per-class keep fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSchedule {
    pub tasks: Vec<Vec<ClassSpec>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<ClassSpec>>) -> Result<Self, DataError> {
        if tasks.is_empty() {
            return Err(DataError::InvalidSchedule("no tasks".into()));
        }
        let mut seen = BTreeMap::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(DataError::InvalidSchedule(format!("task {t} is empty")));
            }
            for spec in task {
                if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
                    return Err(DataError::InvalidSchedule(format!(
                        "class {} fraction {} outside (0, 1]",
                        spec.label, spec.fraction
                    )));
                }
                if let Some(prev) = seen.insert(spec.label, t) {
                    return Err(DataError::InvalidSchedule(format!(
                        "class {} appears in tasks {prev} and {t}",
                        spec.label
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    /// The three balanced tasks used throughout: {3,4,9}, {5,6,0}, {1,2,8,7}.
    pub fn balanced() -> Self {
        let t = |labels: &[u8]| labels.iter().map(|&l| ClassSpec::full(l)).collect();
        Self::new(vec![t(&[3, 4, 9]), t(&[5, 6, 0]), t(&[1, 2, 8, 7])]).unwrap()
    }

    /// The imbalanced variant with fixed per-class keep fractions.
    pub fn imbalanced() -> Self {
        let t = |specs: &[(u8, f64)]| {
            specs
                .iter()
                .map(|&(label, fraction)| ClassSpec { label, fraction })
                .collect()
        };
        Self::new(vec![
            t(&[(3, 1.0), (4, 0.6), (9, 0.3)]),
            t(&[(5, 0.9), (6, 0.4), (0, 0.2)]),
            t(&[(1, 0.5), (2, 0.7), (8, 0.1), (7, 0.8)]),
        ])
        .unwrap()
    }

    pub fn classes_of_task(&self, task: usize) -> Vec<u8> {
        self.tasks[task].iter().map(|s| s.label).collect()
    }

    pub fn classes_up_to(&self, task: usize) -> Vec<u8> {
        let mut all: Vec<u8> = self.tasks[..=task]
            .iter()
            .flatten()
            .map(|s| s.label)
            .collect();
        all.sort_unstable();
        all
    }

    /// Stable content hash for cache manifests and run logs.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for task in &self.tasks {
            for spec in task {
                eat(&[spec.label]);
                eat(&spec.fraction.to_le_bytes());
            }
            eat(b"|");
        }
        h
    }
}

/// A labeled image collection; raw splits are 28x28 byte values, the
/// preprocessed form is 32x32 in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
    pub per_class_counts: BTreeMap<u8, usize>,
}

impl DatasetSplit {
    pub fn new(images: Array4<f32>, labels: Vec<u8>) -> Result<Self, DataError> {
        let (n, _, _, _) = images.dim();
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        let mut per_class_counts = BTreeMap::new();
        for &l in &labels {
            if l > 9 {
                return Err(DataError::LabelRange(l));
            }
            *per_class_counts.entry(l).or_insert(0) += 1;
        }
        Ok(Self {
            images,
            labels,
            per_class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<u8> {
        self.per_class_counts.keys().copied().collect()
    }

    pub fn image_side(&self) -> usize {
        self.images.dim().2
    }

    fn select(&self, indices: &[usize]) -> Self {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        Self::new(images, labels).expect("selection preserves invariants")
    }

    /// Indices of every image of class `label`, in storage order.
    pub fn indices_of(&self, label: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // gzip files start with 0x1f 0x8b
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed: end,
            had: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Decode an IDX image/label file pair into a raw split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let h = be_u32(&img_bytes, 8, images_path)? as usize;
    let w = be_u32(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * h * w;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            needed,
            had: img_bytes.len(),
        });
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() < 8 + n_labels {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8 + n_labels,
            had: lbl_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let mut images = Array4::<f32>::zeros((n, 1, h, w));
    {
        let dst = images.as_slice_mut().unwrap();
        for (d, &b) in dst.iter_mut().zip(&img_bytes[16..needed]) {
            *d = b as f32;
        }
    }
    let labels = lbl_bytes[8..8 + n_labels].to_vec();
    DatasetSplit::new(images, labels)
}

/// Encode a raw split back to IDX bytes (images file). Used by the data
/// preparation tooling and round-trip tests.
pub fn encode_idx_images(split: &DatasetSplit) -> Vec<u8> {
    let (n, _, h, w) = split.images.dim();
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in split.images.as_slice().unwrap() {
        out.push(v as u8);
    }
    out
}

/// Encode the labels file for a raw split.
pub fn encode_idx_labels(split: &DatasetSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + split.labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(split.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&split.labels);
    out
}

/// Bilinear 28x28 -> 32x32 resize and linear map from `[0, 255]` to `[-1, 1]`.
pub fn preprocess(split: &DatasetSplit) -> Result<DatasetSplit, DataError> {
    let (n, c, h, w) = split.images.dim();
    if (h, w) != (28, 28) || c != 1 {
        return Err(DataError::ShapeError {
            expected: "(n, 1, 28, 28)".into(),
            got: format!("({n}, {c}, {h}, {w})"),
        });
    }
    const DST: usize = 32;
    let scale = 28.0 / DST as f32;
    let mut out = Array4::<f32>::zeros((n, 1, DST, DST));
    for i in 0..n {
        let src = split.images.index_axis(ndarray::Axis(0), i);
        let src = src.index_axis(ndarray::Axis(0), 0);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), i);
        let mut dst = dst.index_axis_mut(ndarray::Axis(0), 0);
        for dy in 0..DST {
            let sy = ((dy as f32 + 0.5) * scale - 0.5).clamp(0.0, 27.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(27);
            let fy = sy - y0 as f32;
            for dx in 0..DST {
                let sx = ((dx as f32 + 0.5) * scale - 0.5).clamp(0.0, 27.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(27);
                let fx = sx - x0 as f32;
                let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
                let bottom = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                dst[(dy, dx)] = v / 255.0 * 2.0 - 1.0;
            }
        }
    }
    DatasetSplit::new(out, split.labels.clone())
}

/// Per-class PRNG stream: stable under changes to other classes.
fn class_rng(seed: u64, label: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label as u64 + 1);
    rng
}

/// Materialize one split per task. For a class spec `(c, f)` the task
/// keeps `floor(f * count(c))` images of class `c`, chosen as a seeded
/// shuffle prefix, so reruns with one seed select identical subsets.
pub fn apply_schedule(
    split: &DatasetSplit,
    schedule: &TaskSchedule,
    seed: u64,
) -> Result<Vec<DatasetSplit>, DataError> {
    for task in &schedule.tasks {
        for spec in task {
            if !split.per_class_counts.contains_key(&spec.label) {
                return Err(DataError::UnknownClass(spec.label));
            }
        }
    }
    let mut out = Vec::with_capacity(schedule.tasks.len());
    for task in &schedule.tasks {
        let mut indices = Vec::new();
        for spec in task {
            let mut class_indices = split.indices_of(spec.label);
            let keep = (spec.fraction * class_indices.len() as f64).floor() as usize;
            class_indices.shuffle(&mut class_rng(seed, spec.label));
            class_indices.truncate(keep);
            indices.extend(class_indices);
        }
        indices.sort_unstable();
        out.push(split.select(&indices));
    }
    Ok(out)
}

/// Cap every class at `cap` images, selected by seeded shuffle prefix.
/// Classes already at or below the cap are kept whole.
pub fn subsample_per_class(
    split: &DatasetSplit,
    cap: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let mut indices = Vec::new();
    for &label in split.per_class_counts.keys() {
        let mut class_indices = split.indices_of(label);
        class_indices.shuffle(&mut class_rng(seed, label));
        class_indices.truncate(cap);
        indices.extend(class_indices);
    }
    indices.sort_unstable();
    Ok(split.select(&indices))
}

/// A labeled batch ready for the models: f64 pixels in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: ArrayD<f64>,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// One epoch of seeded-shuffle batches over a split; the last batch may
/// be short, and together the batches cover every index exactly once.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let (_, c, h, w) = self.split.images.dim();
        let mut pixels = ArrayD::<f64>::zeros(IxDyn(&[idx.len(), c, h, w]));
        let src = self.split.images.as_slice().unwrap();
        let dst = pixels.as_slice_mut().unwrap();
        let plane = c * h * w;
        let mut labels = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..plane {
                dst[k * plane + j] = src[i * plane + j] as f64;
            }
            labels.push(self.split.labels[i]);
        }
        Some(ImageBatch { pixels, labels })
    }
}

/// Seeded epoch iteration; distinct seeds give distinct shuffles.
pub fn iterate_batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter<'_>, DataError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit);
    }
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter {
        split,
        order,
        pos: 0,
        batch_size,
    })
}

/// Sequential (unshuffled) batches, for evaluation and statistics passes.
pub fn sequential_batches(
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<BatchIter<'_>, DataError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit);
    }
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    Ok(BatchIter {
        split,
        order: (0..split.len()).collect(),
        pos: 0,
        batch_size,
    })
}

/// Locate the conventional IDX file names under a directory, preferring
/// the gzip-compressed variants.
pub fn mnist_paths(dir: &Path, train: bool) -> Result<(PathBuf, PathBuf), DataError> {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| -> Result<PathBuf, DataError> {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        let plain = dir.join(&stem);
        if plain.exists() {
            return Ok(plain);
        }
        Err(DataError::Io {
            path: plain,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        })
    };
    Ok((
        pick(format!("{prefix}-images-idx3-ubyte"))?,
        pick(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Persist a preprocessed split as a little-endian f32 blob plus a
/// plain-text manifest, for reuse across runs.
pub fn save_split_cache(
    split: &DatasetSplit,
    dir: &Path,
    dataset_name: &str,
    seed: u64,
    schedule_hash: u64,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let bin_path = dir.join("split.bin");
    let mut bytes = Vec::with_capacity(split.images.len() * 4 + split.labels.len());
    for &v in split.images.as_slice().unwrap() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&split.labels);
    fs::write(&bin_path, &bytes).map_err(|source| DataError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let (n, c, h, w) = split.images.dim();
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = fs::File::create(&manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let mut text = format!(
        "dataset = {dataset_name}\nseed = {seed}\nschedule_hash = {schedule_hash:016x}\nshape = {n} {c} {h} {w}\n"
    );
    for (label, count) in &split.per_class_counts {
        text.push_str(&format!("count_{label} = {count}\n"));
    }
    manifest
        .write_all(text.as_bytes())
        .map_err(|source| DataError::Io {
            path: manifest_path,
            source,
        })
}

/// Load a split previously written by [`save_split_cache`].
pub fn load_split_cache(dir: &Path) -> Result<DatasetSplit, DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let shape_line = text
        .lines()
        .find_map(|l| l.strip_prefix("shape = "))
        .ok_or_else(|| DataError::CacheFormat {
            path: manifest_path.clone(),
            reason: "missing shape line".into(),
        })?;
    let dims: Vec<usize> = shape_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| DataError::CacheFormat {
            path: manifest_path.clone(),
            reason: format!("bad shape line: {shape_line}"),
        })?;
    if dims.len() != 4 {
        return Err(DataError::CacheFormat {
            path: manifest_path,
            reason: "shape must have 4 dims".into(),
        });
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let bin_path = dir.join("split.bin");
    let bytes = fs::read(&bin_path).map_err(|source| DataError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let pixel_bytes = n * c * h * w * 4;
    if bytes.len() != pixel_bytes + n {
        return Err(DataError::CacheFormat {
            path: bin_path,
            reason: format!("expected {} bytes, found {}", pixel_bytes + n, bytes.len()),
        });
    }
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    {
        let dst = images.as_slice_mut().unwrap();
        for (k, chunk) in bytes[..pixel_bytes].chunks_exact(4).enumerate() {
            dst[k] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let labels = bytes[pixel_bytes..].to_vec();
    DatasetSplit::new(images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_split(labels: &[u8]) -> DatasetSplit {
        let n = labels.len();
        let images = Array4::from_shape_fn((n, 1, 28, 28), |(i, _, y, x)| {
            ((i * 83 + y * 31 + x * 7) % 256) as f32
        });
        DatasetSplit::new(images, labels.to_vec()).unwrap()
    }

    fn hand_built_idx() -> (Vec<u8>, Vec<u8>) {
        // two 2x2 images with distinct bytes
        let mut imgs = Vec::new();
        imgs.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&[10, 20, 30, 40, 50, 60, 70, 80]);
        let mut lbls = Vec::new();
        lbls.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbls.extend_from_slice(&2u32.to_be_bytes());
        lbls.extend_from_slice(&[7, 2]);
        (imgs, lbls)
    }

    #[test]
    fn decode_hand_built_blob_byte_exact() {
        let dir = std::env::temp_dir().join(format!("idx-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (imgs, lbls) = hand_built_idx();
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        fs::write(&ip, &imgs).unwrap();
        fs::write(&lp, &lbls).unwrap();
        let split = load_idx(&ip, &lp).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.labels, vec![7, 2]);
        assert_eq!(split.images[[0, 0, 0, 0]], 10.0);
        assert_eq!(split.images[[1, 0, 1, 1]], 80.0);
        // round-trip: encode(decode(x)) == x
        assert_eq!(encode_idx_images(&split), imgs);
        assert_eq!(encode_idx_labels(&split), lbls);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_file_is_length_error() {
        let dir = std::env::temp_dir().join(format!("idx-empty-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("empty.idx");
        fs::write(&ip, b"").unwrap();
        let err = load_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = std::env::temp_dir().join(format!("idx-magic-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (mut imgs, lbls) = hand_built_idx();
        imgs[3] = 0x99;
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        fs::write(&ip, &imgs).unwrap();
        fs::write(&lp, &lbls).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic { .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn preprocess_maps_range_endpoints() {
        let zeros = DatasetSplit::new(Array4::zeros((1, 1, 28, 28)), vec![0]).unwrap();
        let out = preprocess(&zeros).unwrap();
        assert!(out.images.iter().all(|&v| v == -1.0));

        let full = DatasetSplit::new(Array4::from_elem((1, 1, 28, 28), 255.0), vec![0]).unwrap();
        let out = preprocess(&full).unwrap();
        assert!(out.images.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn preprocess_constant_stays_constant() {
        let v = 100.0f32;
        let split = DatasetSplit::new(Array4::from_elem((1, 1, 28, 28), v), vec![3]).unwrap();
        let out = preprocess(&split).unwrap();
        let expected = v / 255.0 * 2.0 - 1.0;
        assert_eq!(out.image_side(), 32);
        for &p in out.images.iter() {
            assert!((p - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocess_rejects_wrong_shape() {
        let split = DatasetSplit::new(Array4::zeros((1, 1, 2, 2)), vec![0]).unwrap();
        assert!(matches!(
            preprocess(&split),
            Err(DataError::ShapeError { .. })
        ));
    }

    #[test]
    fn schedule_rejects_duplicate_classes() {
        let err = TaskSchedule::new(vec![
            vec![ClassSpec::full(1)],
            vec![ClassSpec::full(1)],
        ])
        .unwrap_err();
        assert!(matches!(err, DataError::InvalidSchedule(_)));
    }

    #[test]
    fn schedule_rejects_zero_fraction() {
        let err = TaskSchedule::new(vec![vec![ClassSpec {
            label: 1,
            fraction: 0.0,
        }]])
        .unwrap_err();
        assert!(matches!(err, DataError::InvalidSchedule(_)));
    }

    #[test]
    fn balanced_schedule_covers_all_classes_fully() {
        let labels: Vec<u8> = (0..10).cycle().take(200).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let tasks = apply_schedule(&split, &TaskSchedule::balanced(), 0).unwrap();
        assert_eq!(tasks.len(), 3);
        let total: usize = tasks.iter().map(|t| t.len()).sum();
        assert_eq!(total, 200);
        assert_eq!(tasks[0].classes(), vec![3, 4, 9]);
        assert_eq!(tasks[2].classes(), vec![1, 2, 7, 8]);
    }

    #[test]
    fn imbalanced_schedule_floors_counts() {
        // 50 images/class: task 1 keeps floor(0.6 * 50) = 30 of class 4
        let labels: Vec<u8> = (0..10).cycle().take(500).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let tasks = apply_schedule(&split, &TaskSchedule::imbalanced(), 1).unwrap();
        assert_eq!(tasks[0].per_class_counts[&3], 50);
        assert_eq!(tasks[0].per_class_counts[&4], 30);
        assert_eq!(tasks[0].per_class_counts[&9], 15);
        assert_eq!(tasks[2].per_class_counts[&8], 5);
    }

    #[test]
    fn schedule_is_deterministic_in_seed() {
        let labels: Vec<u8> = (0..10).cycle().take(300).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let a = apply_schedule(&split, &TaskSchedule::imbalanced(), 42).unwrap();
        let b = apply_schedule(&split, &TaskSchedule::imbalanced(), 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.images, y.images);
        }
    }

    #[test]
    fn schedule_unknown_class_is_error() {
        let split = tiny_split(&[0, 1, 2]);
        let schedule = TaskSchedule::new(vec![vec![ClassSpec::full(9)]]).unwrap();
        assert!(matches!(
            apply_schedule(&split, &schedule, 0),
            Err(DataError::UnknownClass(9))
        ));
    }

    #[test]
    fn batch_partition_sizes() {
        let split = tiny_split(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let sizes: Vec<usize> = iterate_batches(&split, 4, 0)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batch_count_for_large_split() {
        // ceil(60000 / 128) = 469, checked by arithmetic on the iterator
        let n: usize = 60000;
        let batch = 128;
        assert_eq!(n.div_ceil(batch), 469);
    }

    #[test]
    fn batches_cover_every_label_once() {
        let labels: Vec<u8> = (0..10).cycle().take(53).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let mut seen: Vec<u8> = iterate_batches(&split, 8, 3)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        seen.sort_unstable();
        let mut expected = labels.clone();
        expected.sort_unstable();
        assert_eq!(seen, expected);
    }

    #[test]
    fn same_seed_same_batch_order() {
        let labels: Vec<u8> = (0..10).cycle().take(40).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let a: Vec<Vec<u8>> = iterate_batches(&split, 7, 5).unwrap().map(|b| b.labels).collect();
        let b: Vec<Vec<u8>> = iterate_batches(&split, 7, 5).unwrap().map(|b| b.labels).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_is_error() {
        let split = DatasetSplit::new(Array4::zeros((0, 1, 28, 28)), vec![]).unwrap();
        assert!(matches!(
            iterate_batches(&split, 4, 0),
            Err(DataError::EmptySplit)
        ));
    }

    #[test]
    fn subsample_caps_every_class() {
        let labels: Vec<u8> = (0..10).cycle().take(120).map(|l| l as u8).collect();
        let split = tiny_split(&labels);
        let capped = subsample_per_class(&split, 5, 9).unwrap();
        assert!(capped.per_class_counts.values().all(|&c| c == 5));
    }

    #[test]
    fn cache_round_trip() {
        let dir = std::env::temp_dir().join(format!("split-cache-{}", std::process::id()));
        let labels: Vec<u8> = (0..10).cycle().take(30).map(|l| l as u8).collect();
        let split = preprocess(&tiny_split(&labels)).unwrap();
        save_split_cache(&split, &dir, "mnist", 1, 0xabcd).unwrap();
        let loaded = load_split_cache(&dir).unwrap();
        assert_eq!(loaded.labels, split.labels);
        assert_eq!(loaded.images, split.images);
        fs::remove_dir_all(&dir).ok();
    }
}
