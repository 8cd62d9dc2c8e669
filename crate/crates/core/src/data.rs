//! Labelled datasets: IDX ingestion, seeded splits and symmetric label noise.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs in `[0, 1]` with possibly noisy labels; the original labels are
/// kept in `clean_labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    clean_labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::input(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            clean_labels: labels.clone(),
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.clean_labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Indices whose current label differs from the clean one.
    pub fn flipped(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] != self.clean_labels[i])
            .collect()
    }

    /// Copies the given samples, preserving both label sets.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            class_count: self.class_count,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let actual = be_u32(bytes, 0);
    if actual != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// Parses an IDX image/label file pair, scaling pixels by 1/255 and
/// flattening each image row-major. Files ending in `.gz` are decompressed.
/// The class count is one past the largest label.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_maybe_gz(images_path)?;
    check_magic(images_path, &images, IDX_IMAGES_MAGIC)?;
    need(images_path, &images, 16)?;
    let count = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let dim = rows * cols;
    need(images_path, &images, 16 + count * dim)?;

    let labels_raw = read_maybe_gz(labels_path)?;
    check_magic(labels_path, &labels_raw, IDX_LABELS_MAGIC)?;
    need(labels_path, &labels_raw, 8)?;
    let label_count = be_u32(&labels_raw, 4) as usize;
    need(labels_path, &labels_raw, 8 + label_count)?;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if count == 0 || dim == 0 {
        return Err(Error::input(format!("{}: no samples", images_path.display())));
    }

    let pixels: Vec<f64> = images[16..16 + count * dim]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[8..8 + count].iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(Tensor::new(vec![count, dim], pixels)?, labels, class_count)
}

/// Symmetric label noise: a fraction `epsilon` of samples get a different
/// label drawn uniformly from the other classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::input(format!("noise fraction {epsilon} not in [0, 1]")));
        }
        Ok(NoiseSpec { epsilon, seed })
    }

    pub fn flip_count(&self, n: usize) -> usize {
        (self.epsilon * n as f64).round() as usize
    }
}

/// Flips exactly `round(epsilon * N)` labels chosen without replacement.
/// Each chosen label moves to one of the other `class_count - 1` classes with
/// equal probability. `clean_labels` is untouched.
pub fn inject_symmetric_noise(ds: &LabeledDataset, spec: NoiseSpec) -> Result<LabeledDataset> {
    let spec = NoiseSpec::new(spec.epsilon, spec.seed)?;
    if spec.epsilon > 0.0 && ds.class_count < 2 {
        return Err(Error::input("label noise needs at least two classes"));
    }
    let mut out = ds.clone();
    let count = spec.flip_count(ds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in index::sample(&mut rng, ds.len(), count) {
        let old = out.labels[i];
        let r = rng.random_range(0..ds.class_count - 1);
        out.labels[i] = if r >= old { r + 1 } else { r };
    }
    Ok(out)
}

/// Flip statistics of a noisy dataset against its clean labels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAudit {
    pub samples: usize,
    pub class_count: usize,
    pub flips: usize,
    /// Flips by target offset `(noisy - clean) mod C`, for offsets `1..C`.
    /// Symmetric noise makes these uniform whatever the class balance.
    pub offset_counts: Vec<usize>,
    pub chi_square: f64,
    pub p_value: f64,
}

pub fn audit_noise(ds: &LabeledDataset) -> Result<NoiseAudit> {
    let c = ds.class_count;
    if c < 2 {
        return Err(Error::input("noise audit needs at least two classes"));
    }
    let mut offset_counts = vec![0usize; c - 1];
    for (&noisy, &clean) in ds.labels.iter().zip(&ds.clean_labels) {
        if noisy != clean {
            offset_counts[(noisy + c - clean) % c - 1] += 1;
        }
    }
    let flips: usize = offset_counts.iter().sum();
    let (chi_square, p_value) = if flips == 0 || c < 3 {
        (0.0, 1.0)
    } else {
        let expected = flips as f64 / (c - 1) as f64;
        let stat: f64 = offset_counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((c - 2) as f64).map_err(|e| Error::input(e.to_string()))?;
        (stat, 1.0 - dist.cdf(stat))
    };
    Ok(NoiseAudit {
        samples: ds.len(),
        class_count: c,
        flips,
        offset_counts,
        chi_square,
        p_value,
    })
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded disjoint split into `(train, validation)` with
/// `round(train_fraction * N)` training samples.
pub fn split(ds: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n_train = (train_fraction * ds.len() as f64).round() as usize;
    if n_train == 0 || n_train == ds.len() {
        return Err(Error::input(format!(
            "train fraction {train_fraction} leaves an empty side for {} samples",
            ds.len()
        )));
    }
    let perm = permutation(ds.len(), seed);
    Ok((ds.select(&perm[..n_train])?, ds.select(&perm[n_train..])?))
}

/// Seeded random subset of `n` samples (the whole set when `n >= N`).
pub fn subset(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n >= ds.len() {
        return Ok(ds.clone());
    }
    let perm = permutation(ds.len(), seed);
    ds.select(&perm[..n])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            class_count: 10,
            per_class: 50,
            dim: 16,
            spread: 0.05,
        }
    }
}

/// Gaussian clusters around seeded centers in `[0.2, 0.8]^dim`, clamped to
/// `[0, 1]`. Samples cycle through the classes so each class appears exactly
/// `per_class` times.
pub fn synth_blobs(class_count: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if class_count == 0 || per_class == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(Error::input("blob parameters must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..class_count * dim).map(|_| rng.random_range(0.2..0.8)).collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::input(e.to_string()))?;
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % class_count;
        for d in 0..dim {
            let v: f64 = centers[c * dim + d] + noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, class_count)
}

pub fn synth_blobs_from(spec: &BlobSpec, seed: u64) -> Result<LabeledDataset> {
    synth_blobs(spec.class_count, spec.per_class, spec.dim, spec.spread, seed)
}
