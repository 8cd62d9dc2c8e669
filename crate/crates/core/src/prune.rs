//! Magnitude pruning and the iterative prune/retrain loop.
//!
//! A run directory holds one checkpoint per round (`round-<k>.ckpt`),
//! `rounds.csv` with one [`RoundRecord`] per round, `epochs.csv` with the
//! per-epoch trace, and the resolved `config.toml` plus its hash in
//! `config.sha256`. A `complete` marker holding the hash is written last.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::training_flops;
use crate::checkpoint::{self, ConfigHash};
use crate::config::{derive_seed, hex_string, streams, RunConfig, Splits};
use crate::error::{Error, Result};
use crate::model::{build_mlp, MlpModel};
use crate::train::{evaluate, evaluate_with_loss, train, Distillation, EpochMetrics, LabelSet, OptimizerPolicy, TeacherKind};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const COMPLETE_MARKER: &str = "complete";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Fraction of the surviving weights removed per round.
    pub zeta_iter: f64,
    /// The loop stops at the first round whose sparsity reaches this value.
    pub zeta_end: f64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta_iter > 0.0 && self.zeta_iter < 1.0) {
            return Err(Error::Config(format!("zeta_iter must lie in (0, 1), got {}", self.zeta_iter)));
        }
        if !(self.zeta_end > 0.0 && self.zeta_end < 1.0) {
            return Err(Error::Config(format!("zeta_end must lie in (0, 1), got {}", self.zeta_end)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// One magnitude threshold pooled over all weight matrices.
    #[default]
    Global,
    /// Each weight matrix loses the same fraction of its survivors.
    PerLayer,
}

/// Fraction of masked weight entries; biases are not counted.
pub fn sparsity(model: &MlpModel) -> f64 {
    let total = model.weight_count();
    if total == 0 {
        return 0.0;
    }
    (total - model.surviving_weights()) as f64 / total as f64
}

/// Masks the `floor(zeta_iter · survivors)` smallest-magnitude surviving
/// weights (per pool) and zeroes them. Ties are broken by the flatten order
/// (layer, then row-major). Returns the number of newly masked weights.
pub fn magnitude_prune(model: &mut MlpModel, zeta_iter: f64, scope: PruneScope) -> Result<usize> {
    if !(zeta_iter >= 0.0 && zeta_iter <= 1.0) {
        return Err(Error::input(format!("pruning fraction {zeta_iter} not in [0, 1]")));
    }
    let mut view = model.flatten_prunable();
    let survivors: Vec<usize> = (0..view.len()).filter(|&i| view.mask[i]).collect();
    if survivors.is_empty() {
        return Err(Error::NothingToPrune);
    }
    let pools: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![survivors],
        PruneScope::PerLayer => view
            .offsets
            .windows(2)
            .map(|w| survivors.iter().copied().filter(|&i| i >= w[0] && i < w[1]).collect())
            .collect(),
    };
    let mut removed = 0;
    for mut pool in pools {
        let k = (zeta_iter * pool.len() as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        pool.sort_by(|&a, &b| view.values[a].abs().total_cmp(&view.values[b].abs()).then(a.cmp(&b)));
        for &i in &pool[..k] {
            view.mask[i] = false;
            view.values[i] = 0.0;
        }
        removed += k;
    }
    model.write_back(&view)?;
    Ok(removed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sparsity: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub epochs: usize,
    /// Estimated training FLOPs spent in this round.
    pub flops: u64,
    /// Relative to the run directory.
    pub checkpoint_path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PruneRun {
    pub run_dir: PathBuf,
    pub config_hash: ConfigHash,
    pub records: Vec<RoundRecord>,
    pub model: MlpModel,
}

impl PruneRun {
    pub fn checkpoint(&self, record: &RoundRecord) -> PathBuf {
        self.run_dir.join(&record.checkpoint_path)
    }
}

/// Everything the loop needs besides the model and data.
pub struct ImpSettings<'a> {
    pub schedule: PruneSchedule,
    pub scope: PruneScope,
    pub policy: OptimizerPolicy,
    pub distill: Option<Distillation<'a>>,
    pub seed: u64,
}

fn append_epochs(path: &Path, round: usize, trace: &[EpochMetrics]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record([
            "round",
            "epoch",
            "train_loss",
            "train_accuracy",
            "val_accuracy",
            "test_accuracy",
            "test_loss",
            "lr",
        ])?;
    }
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for m in trace {
        w.write_record([
            round.to_string(),
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_accuracy.to_string(),
            opt(m.val_accuracy),
            opt(m.test_accuracy),
            opt(m.test_loss),
            m.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r.deserialize().collect::<std::result::Result<Vec<RoundRecord>, _>>()?;
    Ok(records)
}

fn round_metrics(
    model: &MlpModel,
    splits: &Splits,
    trace: &[EpochMetrics],
) -> Result<(f64, f64, f64, f64)> {
    match trace.last() {
        Some(EpochMetrics {
            train_accuracy,
            val_accuracy: Some(val),
            test_accuracy: Some(test),
            test_loss: Some(loss),
            ..
        }) => Ok((*train_accuracy, *val, *test, *loss)),
        _ => {
            let train = evaluate(model, &splits.train, LabelSet::Noisy)?;
            let val = evaluate(model, &splits.val, LabelSet::Clean)?;
            let (test, loss) = evaluate_with_loss(model, &splits.test, LabelSet::Clean)?;
            Ok((train, val, test, loss))
        }
    }
}

/// Dense training, then prune and retrain with the same policy until the
/// sparsity reaches `zeta_end`. Weights carry over between rounds and the
/// optimizer velocity restarts at zero in every round. Writes checkpoints
/// and CSVs into `run_dir`.
pub fn imp_loop(
    model: &mut MlpModel,
    splits: &Splits,
    settings: &ImpSettings<'_>,
    run_dir: &Path,
    config_hash: &ConfigHash,
) -> Result<Vec<RoundRecord>> {
    settings.schedule.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let epochs_path = run_dir.join(EPOCHS_CSV);
    if epochs_path.exists() {
        fs::remove_file(&epochs_path).map_err(|e| Error::io(&epochs_path, e))?;
    }
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut round = 0;
    loop {
        if round > 0 {
            let removed = magnitude_prune(model, settings.schedule.zeta_iter, settings.scope)
                .map_err(|e| e.in_round(round))?;
            if removed == 0 {
                return Err(Error::PruneStalled { sparsity: sparsity(model) }.in_round(round));
            }
        }
        let trace = train(
            model,
            &splits.train,
            &splits.val,
            &splits.test,
            &settings.policy,
            settings.distill.as_ref(),
            derive_seed(settings.seed, streams::TRAIN + round as u64),
        )
        .map_err(|e| e.in_round(round))?;
        let (train_acc, val_acc, test_acc, test_loss) = round_metrics(model, splits, &trace)?;
        let ckpt = PathBuf::from(format!("round-{round}.ckpt"));
        checkpoint::save(&run_dir.join(&ckpt), model, config_hash)?;
        let record = RoundRecord {
            round,
            sparsity: sparsity(model),
            train_acc,
            val_acc,
            test_acc,
            test_loss,
            epochs: settings.policy.epochs,
            flops: training_flops(model, splits.train.len(), settings.policy.epochs),
            checkpoint_path: ckpt,
        };
        log::info!(
            "round {round}: sparsity {:.5} train {:.4} val {:.4} test {:.4}",
            record.sparsity,
            train_acc,
            val_acc,
            test_acc
        );
        append_epochs(&epochs_path, round, &trace)?;
        records.push(record);
        write_rounds_csv(&run_dir.join(ROUNDS_CSV), &records)?;
        if sparsity(model) >= settings.schedule.zeta_end {
            break;
        }
        round += 1;
    }
    Ok(records)
}

/// Resolves the teacher checkpoint of a reference run.
pub fn teacher_checkpoint(run_dir: &Path, kind: TeacherKind) -> Result<PathBuf> {
    let records = read_rounds_csv(&run_dir.join(ROUNDS_CSV))?;
    let rec = select_teacher(&records, kind)?;
    Ok(run_dir.join(&rec.checkpoint_path))
}

/// Round 0 for a dense teacher; the round with the best validation accuracy
/// for a best-fit pruned teacher, ties going to the lowest sparsity.
pub fn select_teacher(records: &[RoundRecord], kind: TeacherKind) -> Result<&RoundRecord> {
    let dense = records
        .iter()
        .min_by_key(|r| r.round)
        .ok_or_else(|| Error::input("run has no rounds"))?;
    match kind {
        TeacherKind::None => Err(Error::input("teacher kind is none")),
        TeacherKind::Dense => Ok(dense),
        TeacherKind::BestFitPruned => {
            let mut best = dense;
            for r in records {
                let better = r.val_acc > best.val_acc
                    || (r.val_acc == best.val_acc && r.sparsity < best.sparsity);
                if better {
                    best = r;
                }
            }
            Ok(best)
        }
    }
}

/// True when `run_dir` holds a finished run of exactly this configuration.
pub fn is_complete(run_dir: &Path, config: &RunConfig) -> bool {
    fs::read_to_string(run_dir.join(COMPLETE_MARKER))
        .map(|s| s.trim() == config.hash_hex())
        .unwrap_or(false)
        && run_dir.join(ROUNDS_CSV).exists()
}

/// Loads a finished run from disk.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, Vec<RoundRecord>)> {
    let cfg = RunConfig::from_file(&run_dir.join("config.toml"))?;
    let records = read_rounds_csv(&run_dir.join(ROUNDS_CSV))?;
    Ok((cfg, records))
}

/// Executes one full pruning run described by `config` into
/// `config.output_dir`.
pub fn imp_run(config: &RunConfig) -> Result<PruneRun> {
    config.validate()?;
    let run_dir = config.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let marker = run_dir.join(COMPLETE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let hash = config.hash();
    let write = |name: &str, text: String| {
        let p = run_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("config.toml", config.to_toml_string())?;
    write("config.sha256", format!("{}\n", hex_string(&hash)))?;

    let splits = config.load_splits()?;
    let mut model = build_mlp(
        splits.train.dim(),
        &config.hidden_dims,
        splits.train.class_count().max(splits.test.class_count()),
        derive_seed(config.seed, streams::INIT),
    )?;
    let kd = config.kd();
    let teacher = match (&kd.teacher, kd.enabled()) {
        (Some(dir), true) => Some(checkpoint::load(&teacher_checkpoint(dir, kd.teacher_kind)?)?.0),
        _ => None,
    };
    let settings = ImpSettings {
        schedule: config.schedule(),
        scope: config.prune_scope,
        policy: config.policy(),
        distill: teacher.as_ref().map(|t| Distillation {
            alpha: kd.alpha,
            tau: kd.tau,
            teacher: t,
        }),
        seed: config.seed,
    };
    let records = imp_loop(&mut model, &splits, &settings, &run_dir, &hash)?;
    write(COMPLETE_MARKER, format!("{}\n", hex_string(&hash)))?;
    Ok(PruneRun {
        run_dir,
        config_hash: hash,
        records,
        model,
    })
}
