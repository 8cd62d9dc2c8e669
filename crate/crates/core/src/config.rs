//! Run configuration: a flat TOML document describing one pruning run.
//!
//! ```toml
//! dataset = "idx"                 # or "blobs"
//! train_images = "data/mnist/train-images-idx3-ubyte"
//! train_labels = "data/mnist/train-labels-idx1-ubyte"
//! test_images = "data/mnist/t10k-images-idx3-ubyte"
//! test_labels = "data/mnist/t10k-labels-idx1-ubyte"
//! train_subset = 10000            # 0 keeps every training sample
//! train_fraction = 0.9            # rest of the subset is the clean validation split
//! noise_epsilon = 0.5
//! hidden_dims = [300, 100]
//! zeta_iter = 0.2
//! zeta_end = 0.998
//! prune_scope = "global"          # or "per_layer"
//! base_lr = 0.1
//! momentum = 0.9
//! milestones = [20, 30]
//! decay_factor = 0.1
//! lambda_l2 = 0.0
//! epochs = 40
//! batch_size = 128
//! eval_interval = 1
//! kd_alpha = 0.0
//! kd_tau = 4.0
//! teacher_kind = "none"           # "dense" or "best_fit_pruned" when kd_alpha > 0
//! # teacher_run = "runs/l2"       # run directory the teacher is selected from
//! seed = 1
//! output_dir = "runs/example"
//! ```
//!
//! Every key except `output_dir` enters the SHA-256 config hash, which is
//! stamped into checkpoints and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ConfigHash;
use crate::data::{self, LabeledDataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::prune::{PruneSchedule, PruneScope};
use crate::train::{KdConfig, OptimizerPolicy, TeacherKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Idx,
    Blobs,
}

fn d_fraction() -> f64 {
    0.9
}
fn d_zeta_iter() -> f64 {
    0.2
}
fn d_zeta_end() -> f64 {
    0.998
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay() -> f64 {
    0.1
}
fn d_batch() -> usize {
    128
}
fn d_one() -> usize {
    1
}
fn d_tau() -> f64 {
    4.0
}
fn d_blob_classes() -> usize {
    10
}
fn d_blob_per_class() -> usize {
    50
}
fn d_blob_test_per_class() -> usize {
    50
}
fn d_blob_dim() -> usize {
    16
}
fn d_blob_spread() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_subset: usize,
    #[serde(default = "d_blob_classes")]
    pub blob_classes: usize,
    #[serde(default = "d_blob_per_class")]
    pub blob_per_class: usize,
    #[serde(default = "d_blob_test_per_class")]
    pub blob_test_per_class: usize,
    #[serde(default = "d_blob_dim")]
    pub blob_dim: usize,
    #[serde(default = "d_blob_spread")]
    pub blob_spread: f64,
    #[serde(default = "d_fraction")]
    pub train_fraction: f64,

    #[serde(default)]
    pub noise_epsilon: f64,
    pub hidden_dims: Vec<usize>,

    #[serde(default = "d_zeta_iter")]
    pub zeta_iter: f64,
    #[serde(default = "d_zeta_end")]
    pub zeta_end: f64,
    #[serde(default)]
    pub prune_scope: PruneScope,

    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "d_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub lambda_l2: f64,
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub eval_interval: usize,

    #[serde(default)]
    pub kd_alpha: f64,
    #[serde(default = "d_tau")]
    pub kd_tau: f64,
    #[serde(default)]
    pub teacher_kind: TeacherKind,
    #[serde(default)]
    pub teacher_run: Option<PathBuf>,

    pub seed: u64,
    #[serde(default)]
    pub output_dir: PathBuf,
}

/// Train (noisy), validation (clean) and test (clean) sets of one run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Independent sub-seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const SUBSET: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BLOBS: u64 = 5;
    pub const BLOB_TEST: u64 = 6;
    /// Training shuffles use `TRAIN + round`.
    pub const TRAIN: u64 = 1000;
}

impl RunConfig {
    /// A small synthetic configuration that trains in well under a second.
    pub fn blobs_example() -> Self {
        RunConfig {
            dataset: DatasetKind::Blobs,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_subset: 0,
            blob_classes: 4,
            blob_per_class: 40,
            blob_test_per_class: 20,
            blob_dim: 8,
            blob_spread: 0.08,
            train_fraction: 0.9,
            noise_epsilon: 0.2,
            hidden_dims: vec![16],
            zeta_iter: 0.2,
            zeta_end: 0.8,
            prune_scope: PruneScope::Global,
            base_lr: 0.05,
            momentum: 0.9,
            milestones: vec![],
            decay_factor: 0.1,
            lambda_l2: 0.0,
            epochs: 3,
            batch_size: 16,
            eval_interval: 1,
            kd_alpha: 0.0,
            kd_tau: 4.0,
            teacher_kind: TeacherKind::None,
            teacher_run: None,
            seed: 1,
            output_dir: PathBuf::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn policy(&self) -> OptimizerPolicy {
        OptimizerPolicy {
            base_lr: self.base_lr,
            momentum: self.momentum,
            milestones: self.milestones.clone(),
            decay_factor: self.decay_factor,
            lambda_l2: self.lambda_l2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_interval: self.eval_interval,
        }
    }

    pub fn kd(&self) -> KdConfig {
        KdConfig {
            alpha: self.kd_alpha,
            tau: self.kd_tau,
            teacher_kind: self.teacher_kind,
            teacher: self.teacher_run.clone(),
        }
    }

    pub fn schedule(&self) -> PruneSchedule {
        PruneSchedule {
            zeta_iter: self.zeta_iter,
            zeta_end: self.zeta_end,
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            epsilon: self.noise_epsilon,
            seed: derive_seed(self.seed, streams::NOISE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy().validate()?;
        self.kd().validate()?;
        self.schedule().validate()?;
        NoiseSpec::new(self.noise_epsilon, 0).map_err(|e| Error::Config(e.to_string()))?;
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.dataset == DatasetKind::Idx {
            for (name, p) in [
                ("train_images", &self.train_images),
                ("train_labels", &self.train_labels),
                ("test_images", &self.test_images),
                ("test_labels", &self.test_labels),
            ] {
                if p.is_none() {
                    return Err(Error::Config(format!("dataset = \"idx\" requires {name}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding, with `output_dir` blanked.
    pub fn hash(&self) -> ConfigHash {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("run config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex_string(&self.hash())
    }

    /// Loads the data, carves the clean validation split out of the training
    /// pool and injects label noise into the training split only.
    pub fn load_splits(&self) -> Result<Splits> {
        let (pool, test) = match self.dataset {
            DatasetKind::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                let train = data::load_idx_dataset(&path(&self.train_images), &path(&self.train_labels))?;
                let test = data::load_idx_dataset(&path(&self.test_images), &path(&self.test_labels))?;
                let pool = if self.train_subset > 0 {
                    data::subset(&train, self.train_subset, derive_seed(self.seed, streams::SUBSET))?
                } else {
                    train
                };
                (pool, test)
            }
            DatasetKind::Blobs => {
                let per = self.blob_per_class + self.blob_test_per_class;
                let all = data::synth_blobs(
                    self.blob_classes,
                    per,
                    self.blob_dim,
                    self.blob_spread,
                    derive_seed(self.seed, streams::BLOBS),
                )?;
                let frac = self.blob_per_class as f64 / per as f64;
                data::split(&all, frac, derive_seed(self.seed, streams::BLOB_TEST))?
            }
        };
        let (train, val) = data::split(&pool, self.train_fraction, derive_seed(self.seed, streams::SPLIT))?;
        let train = data::inject_symmetric_noise(&train, self.noise())?;
        Ok(Splits { train, val, test })
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = RunConfig::blobs_example();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());

        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        let other = RunConfig { seed: 2, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash_hex().len(), 64);
    }

    #[test]
    fn defaults_and_unknown_keys() {
        let text = r#"
            dataset = "blobs"
            hidden_dims = [8]
            base_lr = 0.1
            epochs = 2
            seed = 3
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.zeta_iter, 0.2);
        assert_eq!(cfg.zeta_end, 0.998);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.kd_tau, 4.0);
        assert!(RunConfig::from_toml_str(&format!("{text}\nbogus = 1")).is_err());
    }

    #[test]
    fn validation_errors() {
        let base = RunConfig::blobs_example();
        for bad in [
            RunConfig { zeta_iter: 1.0, ..base.clone() },
            RunConfig { noise_epsilon: 2.0, ..base.clone() },
            RunConfig { kd_alpha: 0.9, ..base.clone() },
            RunConfig { dataset: DatasetKind::Idx, ..base.clone() },
            RunConfig { milestones: vec![3, 2], ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn noise_only_touches_training_split() {
        let cfg = RunConfig {
            noise_epsilon: 0.5,
            ..RunConfig::blobs_example()
        };
        let s = cfg.load_splits().unwrap();
        assert_eq!(s.train.flipped().len(), (0.5 * s.train.len() as f64).round() as usize);
        assert!(s.val.flipped().is_empty());
        assert!(s.test.flipped().is_empty());
        assert_eq!(s.train.len() + s.val.len(), 4 * 40);
        assert_eq!(s.test.len(), 4 * 20);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, streams::SPLIT);
        let b = derive_seed(1, streams::NOISE);
        let c = derive_seed(2, streams::SPLIT);
        assert!(a != b && a != c && b != c);
    }
}
