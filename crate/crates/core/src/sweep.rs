//! Grids of independent pruning runs and their summary table.
//!
//! A grid file holds the shared settings under `[base]` (the same keys as a
//! run config, without `output_dir`) and the swept values under `[grid]`:
//!
//! ```toml
//! output_root = "runs/l2"
//! flops_per_joule = 1e9
//! grams_co2_per_kwh = 500.0
//!
//! [base]
//! dataset = "blobs"
//! noise_epsilon = 0.5
//!
//! [grid]
//! lambda_l2 = [0.0, 1e-4, 1e-3]
//! seed = [1, 2, 3]
//! ```
//!
//! Each point of the cartesian product becomes one run whose directory name
//! is built from the swept keys, e.g. `lambda_l2-0.0001_seed-2`. The text
//! `{seed}` inside any string value is replaced by the run's seed, which lets
//! a student run point at the teacher trained with the same seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{co2_estimate, first_stop_index, SparsityCurve};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prune::{imp_run, is_complete, read_rounds_csv, RoundRecord, ROUNDS_CSV};
use crate::train::TeacherKind;

fn d_patience() -> usize {
    2
}
fn d_stop_tol() -> f64 {
    0.02
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub output_root: PathBuf,
    pub flops_per_joule: f64,
    pub grams_co2_per_kwh: f64,
    #[serde(default = "d_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "d_stop_tol")]
    pub early_stop_tol: f64,
    pub base: toml::Table,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub runs: Vec<PlannedRun>,
    pub flops_per_joule: f64,
    pub grams_co2_per_kwh: f64,
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
    pub output_root: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PlannedRun {
    pub id: String,
    /// Swept keys without `seed`; runs sharing it are averaged together.
    pub group: String,
    pub config: RunConfig,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join("x"),
        other => other.to_string(),
    }
}

impl SweepFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Expands the grid into run configs. Relative `output_root` and
    /// `teacher_run` paths are taken as given.
    pub fn plan(&self) -> Result<SweepPlan> {
        if !(self.flops_per_joule > 0.0 && self.grams_co2_per_kwh > 0.0) {
            return Err(Error::Config("flops_per_joule and grams_co2_per_kwh must be positive".into()));
        }
        if self.base.contains_key("output_dir") {
            return Err(Error::Config("[base] must not set output_dir; runs go under output_root".into()));
        }
        let mut points: Vec<Vec<(&str, &toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::Config(format!("grid key {key} has no values")));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.as_str(), v));
                        q
                    })
                })
                .collect();
        }
        let mut runs = Vec::with_capacity(points.len());
        for point in points {
            let mut table = self.base.clone();
            let mut id_parts = Vec::new();
            let mut group_parts = Vec::new();
            for (k, v) in &point {
                table.insert((*k).to_string(), (*v).clone());
                let part = format!("{k}-{}", value_label(v));
                if *k != "seed" {
                    group_parts.push(part.clone());
                }
                id_parts.push(part);
            }
            let id = if id_parts.is_empty() { "run".to_string() } else { id_parts.join("_") };
            let seed = table.get("seed").map(value_label).unwrap_or_default();
            for (_, v) in table.iter_mut() {
                if let toml::Value::String(text) = v {
                    *text = text.replace("{seed}", &seed);
                }
            }
            table.insert(
                "output_dir".into(),
                toml::Value::String(self.output_root.join(&id).to_string_lossy().into_owned()),
            );
            let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
            let config = RunConfig::from_toml_str(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("run {id}: {m}")),
                other => other,
            })?;
            let group = if group_parts.is_empty() { "all".to_string() } else { group_parts.join("_") };
            runs.push(PlannedRun { id, group, config });
        }
        Ok(SweepPlan {
            runs,
            flops_per_joule: self.flops_per_joule,
            grams_co2_per_kwh: self.grams_co2_per_kwh,
            early_stop_patience: self.early_stop_patience,
            early_stop_tol: self.early_stop_tol,
            output_root: self.output_root.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub enum RunOutcome {
    Finished { records: Vec<RoundRecord>, reused: bool },
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub outcomes: Vec<(PlannedRun, RunOutcome)>,
    pub summary: Vec<SummaryRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|(_, o)| matches!(o, RunOutcome::Failed(_)))
            .count()
    }
}

/// Refuses plans where two runs share a directory or a directory already
/// holds a run of a different configuration.
pub fn check_collisions(runs: &[PlannedRun]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in runs {
        let dir = &r.config.output_dir;
        if !seen.insert(dir.clone()) {
            return Err(Error::OutputCollision(dir.clone()));
        }
        let stamp = dir.join("config.sha256");
        if let Ok(text) = fs::read_to_string(&stamp) {
            if text.trim() != r.config.hash_hex() {
                return Err(Error::OutputCollision(dir.clone()));
            }
        }
    }
    Ok(())
}

fn execute(run: &PlannedRun, resume: bool) -> RunOutcome {
    let dir = &run.config.output_dir;
    if resume && is_complete(dir, &run.config) {
        return match read_rounds_csv(&dir.join(ROUNDS_CSV)) {
            Ok(records) => RunOutcome::Finished { records, reused: true },
            Err(e) => RunOutcome::Failed(e.to_string()),
        };
    }
    match imp_run(&run.config) {
        Ok(r) => RunOutcome::Finished {
            records: r.records,
            reused: false,
        },
        Err(e) => {
            log::error!("run {} failed: {e}", run.id);
            RunOutcome::Failed(e.to_string())
        }
    }
}

/// Runs every planned config on a pool of `parallelism` threads. Runs whose
/// teacher is produced by another run of the same plan wait for it. Each run
/// is sequential and writes only into its own directory, so its files do not
/// depend on the pool size or scheduling order. With `resume`, finished runs
/// with a matching config hash are read back instead of retrained.
pub fn run_sweep(plan: &SweepPlan, parallelism: usize, resume: bool) -> Result<SweepReport> {
    check_collisions(&plan.runs)?;
    fs::create_dir_all(&plan.output_root).map_err(|e| Error::io(&plan.output_root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let dirs: Vec<&PathBuf> = plan.runs.iter().map(|r| &r.config.output_dir).collect();
    let depends = |r: &PlannedRun| {
        r.config.kd().enabled()
            && r.config.teacher_run.as_ref().is_some_and(|t| dirs.contains(&t))
    };
    let mut outcomes: Vec<Option<RunOutcome>> = vec![None; plan.runs.len()];
    for stage in [false, true] {
        let idx: Vec<usize> = (0..plan.runs.len()).filter(|&i| depends(&plan.runs[i]) == stage).collect();
        let done: Vec<(usize, RunOutcome)> =
            pool.install(|| idx.par_iter().map(|&i| (i, execute(&plan.runs[i], resume))).collect());
        for (i, o) in done {
            outcomes[i] = Some(o);
        }
    }
    let outcomes: Vec<(PlannedRun, RunOutcome)> = plan
        .runs
        .iter()
        .cloned()
        .zip(outcomes.into_iter().map(|o| o.expect("every run executed")))
        .collect();

    let summary = summarize(plan, &outcomes)?;
    write_summary(&plan.output_root, &summary)?;
    write_failures(&plan.output_root, &outcomes)?;
    Ok(SweepReport { outcomes, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub early_stop: bool,
    pub distillation: bool,
    pub pruned_teacher: bool,
    pub runs: usize,
    pub failed: usize,
    /// Mean over runs of the training FLOPs spent up to the stopping round.
    pub train_flops: f64,
    pub co2_g: f64,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub sparsity_mean: f64,
}

/// Round a run reports: the best validation accuracy among the rounds up to
/// `last`, earliest on ties.
pub fn operating_point(records: &[RoundRecord], last: usize) -> &RoundRecord {
    let mut best = &records[0];
    for r in &records[..=last] {
        if r.val_acc > best.val_acc {
            best = r;
        }
    }
    best
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(plan: &SweepPlan, outcomes: &[(PlannedRun, RunOutcome)]) -> Result<Vec<SummaryRow>> {
    let mut groups: Vec<&str> = Vec::new();
    for (r, _) in outcomes {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let mut rows = Vec::new();
    for group in groups {
        let members: Vec<&(PlannedRun, RunOutcome)> = outcomes.iter().filter(|(r, _)| r.group == group).collect();
        let cfg = &members[0].0.config;
        let distillation = cfg.kd().enabled();
        let pruned_teacher = distillation && cfg.teacher_kind == TeacherKind::BestFitPruned;
        for early_stop in [false, true] {
            let mut flops = Vec::new();
            let mut acc = Vec::new();
            let mut sparsity = Vec::new();
            let mut failed = 0;
            for (_, o) in &members {
                let records = match o {
                    RunOutcome::Finished { records, .. } => records,
                    RunOutcome::Failed(_) => {
                        failed += 1;
                        continue;
                    }
                };
                let curve = SparsityCurve::from_records(records)?;
                let last = if early_stop {
                    first_stop_index(&curve.test_acc(), plan.early_stop_patience, plan.early_stop_tol)
                        .unwrap_or(curve.len() - 1)
                } else {
                    curve.len() - 1
                };
                let chosen = operating_point(records, last);
                flops.push(curve.points()[last].cumulative_flops as f64);
                acc.push(chosen.test_acc);
                sparsity.push(chosen.sparsity);
            }
            let (train_flops, _) = mean_std(&flops);
            let (test_acc_mean, test_acc_std) = mean_std(&acc);
            let (sparsity_mean, _) = mean_std(&sparsity);
            let co2_g = if flops.is_empty() {
                f64::NAN
            } else {
                co2_estimate(train_flops, plan.flops_per_joule, plan.grams_co2_per_kwh)?
            };
            rows.push(SummaryRow {
                group: group.to_string(),
                early_stop,
                distillation,
                pruned_teacher,
                runs: flops.len(),
                failed,
                train_flops,
                co2_g,
                test_acc_mean,
                test_acc_std,
                sparsity_mean,
            });
        }
    }
    Ok(rows)
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_NOTES: &str = "summary.md";

pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    let path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut md = String::from(
        "| group | early stop | KD | pruned teacher | runs | training FLOPs | CO2 [g] | test acc | sparsity |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {}/{} | {:.4e} | {:.3} | {:.2} ± {:.2} | {:.4} |",
            r.group,
            r.early_stop,
            r.distillation,
            r.pruned_teacher,
            r.runs,
            r.runs + r.failed,
            r.train_flops,
            r.co2_g,
            100.0 * r.test_acc_mean,
            100.0 * r.test_acc_std,
            r.sparsity_mean,
        );
    }
    md.push_str(
        "\nFLOPs are estimated as 3 x forward FLOPs over surviving weights x training samples x epochs, \
         summed over rounds. Evaluation passes are not counted. Test accuracy is reported at the round \
         with the best validation accuracy up to the stopping round; std uses n - 1.\n",
    );
    let notes = dir.join(SUMMARY_NOTES);
    fs::write(&notes, md).map_err(|e| Error::io(notes, e))
}

fn write_failures(dir: &Path, outcomes: &[(PlannedRun, RunOutcome)]) -> Result<()> {
    let path = dir.join("failures.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run", "error"])?;
    for (r, o) in outcomes {
        if let RunOutcome::Failed(msg) = o {
            w.write_record([r.id.as_str(), msg.as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
