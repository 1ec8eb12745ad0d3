//! Datasets: MNIST IDX files, seeded synthetic tasks, equal partitioning and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{dot, Sample};
use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An ordered, non-empty list of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptyDataset(name.clone()))?;
        let d = first.dim();
        for s in &samples {
            if s.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.dim() });
            }
            if !s.features.iter().all(|v| v.is_finite()) || !s.label.is_finite() {
                return Err(Error::invalid(format!("{name}: non-finite sample")));
            }
        }
        Ok(Dataset { samples, name })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    /// Appends a constant-1 feature so the last model coordinate acts as a bias.
    pub fn with_bias(mut self) -> Self {
        for s in &mut self.samples {
            s.features.push(1.0);
        }
        self
    }

    /// Fraction of samples labelled `+1`.
    pub fn positive_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.label > 0.0).count() as f64 / self.len() as f64
    }
}

impl AsRef<[Sample]> for Dataset {
    fn as_ref(&self) -> &[Sample] {
        &self.samples
    }
}

/// Disjoint shards, one per device.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Dataset>,
}

impl Partition {
    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    pub fn dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn total_len(&self) -> usize {
        self.shards.iter().map(Dataset::len).sum()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.shards.iter().flat_map(|s| s.samples.iter())
    }
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let header = |at| be_u32(bytes, at).ok_or_else(|| Error::idx(path, "truncated header"));
    let magic = header(0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::idx(path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = header(4)? as usize;
    let rows = header(8)? as usize;
    let cols = header(12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::idx(path, format!("truncated: {} pixel bytes, header promises {need}", body.len())));
    }
    if body.len() > need {
        return Err(Error::idx(path, format!("{} trailing bytes", body.len() - need)));
    }
    Ok(IdxImages { rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let header = |at| be_u32(bytes, at).ok_or_else(|| Error::idx(path, "truncated header"));
    let magic = header(0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::idx(path, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = header(4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::idx(path, format!("truncated: {} labels, header promises {count}", body.len())));
    }
    if body.len() > count {
        return Err(Error::idx(path, format!("{} trailing bytes", body.len() - count)));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads an IDX image/label pair. Features are `pixel / 255`; the label is the
/// raw digit.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(ip, &fs::read(ip)?)?;
    let labels = parse_idx_labels(lp, &fs::read(lp)?)?;
    if images.count() != labels.len() {
        return Err(Error::idx(
            lp,
            format!("count mismatch: {} images vs {} labels", images.count(), labels.len()),
        ));
    }
    let px = images.rows * images.cols;
    let samples = images
        .pixels
        .chunks_exact(px.max(1))
        .zip(&labels)
        .map(|(img, &lab)| Sample::new(img.iter().map(|&p| p as f64 / 255.0).collect(), lab as f64))
        .collect();
    let name = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, samples)
}

/// Keeps only digits `class_a` (label +1) and `class_b` (label −1), in order.
pub fn make_binary_task(dataset: &Dataset, class_a: u8, class_b: u8) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::invalid(format!("binary task needs two distinct classes, got {class_a} twice")));
    }
    let (a, b) = (class_a as f64, class_b as f64);
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .filter_map(|s| {
            if s.label == a {
                Some(Sample::new(s.features.clone(), 1.0))
            } else if s.label == b {
                Some(Sample::new(s.features.clone(), -1.0))
            } else {
                None
            }
        })
        .collect();
    for (class, label) in [(class_a, 1.0), (class_b, -1.0)] {
        if !samples.iter().any(|s| s.label == label) {
            return Err(Error::MissingClass(class));
        }
    }
    Dataset::new(format!("{}[{class_a}v{class_b}]", dataset.name), samples)
}

/// Standard MNIST file names inside a directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }
}

/// Binary train/test pair from an MNIST directory.
pub fn load_mnist_binary(dir: impl AsRef<Path>, class_a: u8, class_b: u8, bias: bool) -> Result<(Dataset, Dataset)> {
    let files = MnistFiles::in_dir(dir);
    let train = make_binary_task(&load_mnist_idx(&files.train_images, &files.train_labels)?, class_a, class_b)?;
    let test = make_binary_task(&load_mnist_idx(&files.test_images, &files.test_labels)?, class_a, class_b)?;
    Ok(if bias { (train.with_bias(), test.with_bias()) } else { (train, test) })
}

/// Teacher hyperplane used by [`synth_dataset`] for a given seed.
pub fn synth_teacher(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, Stream::Synth, &[0]);
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Label rule shared by the synthetic generator and accuracy evaluation.
#[inline]
pub fn sign_label(score: f64) -> f64 {
    if score >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `n` standard-normal points in `ℝᵈ` labelled by a seeded teacher hyperplane.
pub fn synth_dataset(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!("synthetic dataset needs n, d >= 1 (got n={n}, d={d})")));
    }
    let teacher = synth_teacher(d, seed);
    let mut rng = keyed_rng(seed, Stream::Synth, &[1]);
    let samples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let y = sign_label(dot(&teacher, &x));
            Sample::new(x, y)
        })
        .collect();
    Dataset::new(format!("synth-n{n}-d{d}-s{seed}"), samples)
}

/// Seeded shuffle followed by a round-robin split into `n` shards.
pub fn partition_equal(dataset: &Dataset, n: usize, seed: u64) -> Result<Partition> {
    if n == 0 {
        return Err(Error::invalid("device count must be >= 1"));
    }
    if n > dataset.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {n} devices",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut keyed_rng(seed, Stream::Partition, &[dataset.len() as u64, n as u64]));
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::with_capacity(dataset.len() / n + 1); n];
    for (pos, &idx) in order.iter().enumerate() {
        buckets[pos % n].push(dataset.samples[idx].clone());
    }
    let shards = buckets
        .into_iter()
        .enumerate()
        .map(|(i, s)| Dataset::new(format!("{}#{i}", dataset.name), s))
        .collect::<Result<_>>()?;
    Ok(Partition { shards })
}

/// CSV with header `label,f0,f1,...`. Floats use shortest round-trip formatting.
pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("label");
    for j in 0..dataset.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for s in &dataset.samples {
        let _ = write!(out, "{}", s.label);
        for v in &s.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(name: impl Into<String>, text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Csv("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Csv(format!("header must start with `label`, got `{header}`")));
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Csv(format!("unexpected column `{c}`, expected `f{j}`")));
        }
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Csv(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != cols.len() {
            return Err(Error::Csv(format!(
                "line {}: {} fields, header has {}",
                lineno + 1,
                vals.len(),
                cols.len()
            )));
        }
        samples.push(Sample::new(vals[1..].to_vec(), vals[0]));
    }
    Dataset::new(name, samples)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn key(s: &Sample) -> Vec<u64> {
        s.features.iter().map(|v| v.to_bits()).chain([s.label.to_bits()]).collect()
    }

    proptest! {
        #[test]
        fn partition_is_a_disjoint_cover(n in 1usize..60, devices in 1usize..12, seed in any::<u64>()) {
            prop_assume!(devices <= n);
            let ds = synth_dataset(n, 3, seed ^ 0xAB).unwrap();
            let p = partition_equal(&ds, devices, seed).unwrap();
            let sizes: Vec<usize> = p.shards.iter().map(Dataset::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut got: Vec<Vec<u64>> = p.all_samples().map(key).collect();
            let mut want: Vec<Vec<u64>> = ds.samples.iter().map(key).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            prop_assert_eq!(p, partition_equal(&ds, devices, seed).unwrap());
        }

        #[test]
        fn idx_bytes_roundtrip(rows in 1usize..5, cols in 1usize..5, count in 0usize..6, fill in any::<u8>()) {
            let pixels: Vec<u8> = (0..rows * cols * count).map(|i| (i as u8).wrapping_mul(31).wrapping_add(fill)).collect();
            let images = IdxImages { rows, cols, pixels };
            let p = Path::new("mem");
            prop_assert_eq!(parse_idx_images(p, &encode_idx_images(&images)).unwrap(), images);
        }
    }
}
