//! Acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Criteria 6 to 8 train LeNet-300-100 on MNIST and are ignored by default.
//! Run them with
//!
//! ```text
//! SDD_MNIST_DIR=/path/to/mnist SDD_RUNS_DIR=/path/to/runs \
//!     cargo test --release -p sdd-core --test acceptance -- --ignored --nocapture
//! ```
//!
//! `SDD_MNIST_DIR` holds the four uncompressed IDX files. Finished runs in
//! `SDD_RUNS_DIR` with a matching config hash are reused.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use sdd_core::analysis::{
    detect_sdd, first_stop_index, forward_flops, training_flops, SddVerdict, SparsityCurve,
};
use sdd_core::config::RunConfig;
use sdd_core::data::{inject_symmetric_noise, LabeledDataset, NoiseSpec};
use sdd_core::model::build_mlp;
use sdd_core::plot::{emit_plot, PlotOptions, Series};
use sdd_core::prune::{imp_run, magnitude_prune, read_rounds_csv, sparsity, PruneScope, RoundRecord};
use sdd_core::sweep::{run_sweep, operating_point, RunOutcome, SweepFile, SweepPlan};
use sdd_core::tensor::{softmax_rows, Tape, Tensor};
use sdd_core::train::total_loss;

fn report(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gradient_correctness() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let inst = common::random_grad_instance(seed);
        worst = worst.max(common::max_gradient_error(&inst, 1e-5));
    }
    let pass = worst < 1e-6;
    report(1, pass, &format!("100 random masked MLPs, max error {worst:.3e} (limit 1e-6)"));
    assert!(pass);
}

#[test]
fn criterion_2_pruning_algebra() {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(8..=40)).collect();
        let mut m = build_mlp(rng.random_range(8..=40), &hidden, rng.random_range(2..=10), seed).unwrap();
        let total = m.weight_count() as f64;
        let mut prev_masked: HashSet<usize> = HashSet::new();
        for k in 1..=10 {
            let before = m.flatten_prunable();
            magnitude_prune(&mut m, 0.2, PruneScope::Global).unwrap();
            let after = m.flatten_prunable();
            let s = sparsity(&m);
            let target = 1.0 - 0.8f64.powi(k);
            if (s - target).abs() > k as f64 / total + 1e-12 {
                failures.push(format!("seed {seed} round {k}: sparsity {s} vs {target}"));
            }
            let masked: HashSet<usize> = (0..after.len()).filter(|&i| !after.mask[i]).collect();
            if !(masked.is_superset(&prev_masked) && masked.len() > prev_masked.len()) {
                failures.push(format!("seed {seed} round {k}: mask did not grow strictly"));
            }
            // brute force: sort the survivors before pruning by magnitude
            let mut survivors: Vec<usize> = (0..before.len()).filter(|&i| before.mask[i]).collect();
            survivors.sort_by(|&a, &b| before.values[a].abs().total_cmp(&before.values[b].abs()));
            let newly: Vec<usize> = survivors.iter().copied().filter(|i| masked.contains(i)).collect();
            let kept: Vec<usize> = survivors.iter().copied().filter(|i| !masked.contains(i)).collect();
            let max_pruned = newly.iter().map(|&i| before.values[i].abs()).fold(0.0, f64::max);
            let min_kept = kept.iter().map(|&i| before.values[i].abs()).fold(f64::INFINITY, f64::min);
            if max_pruned > min_kept {
                failures.push(format!("seed {seed} round {k}: threshold violated"));
            }
            if newly.len() != (0.2 * survivors.len() as f64).floor() as usize {
                failures.push(format!("seed {seed} round {k}: removed {} weights", newly.len()));
            }
            prev_masked = masked;
        }
    }
    let pass = failures.is_empty();
    report(2, pass, &format!("20 random models x 10 rounds, {} violations {:?}", failures.len(), failures.first()));
    assert!(pass);
}

fn chi_square_offsets(noisy: &LabeledDataset, classes: usize) -> (usize, f64) {
    let mut counts = vec![0usize; classes - 1];
    let mut flips = 0;
    for (&n, &c) in noisy.labels().iter().zip(noisy.clean_labels()) {
        if n != c {
            flips += 1;
            counts[(n + classes - c) % classes - 1] += 1;
        }
    }
    let expected = flips as f64 / (classes - 1) as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((classes - 2) as f64).unwrap().cdf(stat);
    (flips, p)
}

fn labelled(n: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(Tensor::zeros(&[n, 1]), labels, classes).unwrap()
}

#[test]
fn criterion_3_noise_statistics() {
    let mut ok = true;
    let mut details = Vec::new();
    let ds = labelled(10_000, 10, 5);
    for eps in [0.1, 0.2, 0.5] {
        let noisy = inject_symmetric_noise(&ds, NoiseSpec::new(eps, 17).unwrap()).unwrap();
        let expected = (eps * 10_000.0f64).round() as usize;
        let flipped = noisy.flipped();
        let (flips, p) = chi_square_offsets(&noisy, 10);
        let exact = flipped.len() == expected && flips == expected;
        ok &= exact && p > 0.01;
        details.push(format!("eps {eps}: {flips}/{expected} flips, chi-square p {p:.3}"));
    }
    let zero = inject_symmetric_noise(&ds, NoiseSpec::new(0.0, 17).unwrap()).unwrap();
    let zero_ok = zero.labels() == ds.labels();
    let two = labelled(10_000, 2, 6);
    let all = inject_symmetric_noise(&two, NoiseSpec::new(1.0, 17).unwrap()).unwrap();
    let one_ok = all.labels().iter().zip(two.labels()).all(|(&n, &c)| n == 1 - c);
    ok &= zero_ok && one_ok;
    details.push(format!("eps 0 identity {zero_ok}, eps 1 two-class swap {one_ok}"));
    report(3, ok, &details.join("; "));
    assert!(ok);
}

#[test]
fn criterion_4_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ce_bitwise = true;
    let mut kl_nonneg = true;
    let mut kl_zero = true;
    for _ in 0..200 {
        let (b, c) = (rng.random_range(1..8), rng.random_range(2..12));
        let logits = Tensor::new(vec![b, c], (0..b * c).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let teacher = Tensor::new(vec![b, c], (0..b * c).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let tau = rng.random_range(0.5..8.0);

        let mut t1 = Tape::new();
        let l1 = t1.constant(logits.clone());
        let ce = t1.softmax_cross_entropy(l1, &targets).unwrap();
        let mut t2 = Tape::new();
        let l2 = t2.constant(logits.clone());
        let tl = total_loss(&mut t2, l2, &targets, Some(&teacher), 0.0, tau).unwrap();
        ce_bitwise &= t1.value(ce).item().to_bits() == t2.value(tl).item().to_bits();

        let mut t3 = Tape::new();
        let s = t3.constant(logits.clone());
        let kl = t3.kl_divergence_loss(s, &teacher, tau).unwrap();
        let kl_value = t3.value(kl).item();
        kl_nonneg &= kl_value >= 0.0;

        // same softened distribution: identical logits and a per-row shift
        let shifted: Vec<f64> = logits.data().iter().enumerate().map(|(i, v)| v + (i / c) as f64 * 3.0).collect();
        let shifted = Tensor::new(vec![b, c], shifted).unwrap();
        let mut t4 = Tape::new();
        let s = t4.constant(logits.clone());
        let kl = t4.kl_divergence_loss(s, &shifted, tau).unwrap();
        kl_zero &= t4.value(kl).item().abs() <= 1e-12;
        let ps = softmax_rows(&logits, tau).unwrap();
        let pt = softmax_rows(&teacher, tau).unwrap();
        let differ = ps.data().iter().zip(pt.data()).any(|(a, b)| (a - b).abs() > 1e-6);
        kl_zero &= !differ || kl_value > 0.0;
    }
    let mut uniform_err: f64 = 0.0;
    for c in [2usize, 3, 10, 100, 1000] {
        let mut t = Tape::new();
        let l = t.constant(Tensor::filled(&[4, c], 0.7));
        let ce = t.softmax_cross_entropy(l, &[0, 1, 1, 0]).unwrap();
        uniform_err = uniform_err.max((t.value(ce).item() - (c as f64).ln()).abs());
    }
    let pass = ce_bitwise && kl_nonneg && kl_zero && uniform_err <= 1e-12;
    report(
        4,
        pass,
        &format!(
            "alpha=0 bitwise CE {ce_bitwise}, KL >= 0 {kl_nonneg}, KL = 0 iff equal {kl_zero}, uniform CE error {uniform_err:.1e}"
        ),
    );
    assert!(pass);
}

fn blobs_config(dir: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::blobs_example();
    c.seed = seed;
    c.zeta_end = 0.6;
    c.output_dir = dir.to_path_buf();
    c
}

fn blobs_grid(root: &Path) -> String {
    format!(
        r#"
output_root = "{}"
flops_per_joule = 1e9
grams_co2_per_kwh = 500.0

[base]
dataset = "blobs"
blob_classes = 4
blob_per_class = 40
blob_test_per_class = 20
blob_dim = 8
blob_spread = 0.08
noise_epsilon = 0.2
hidden_dims = [16]
zeta_end = 0.6
base_lr = 0.05
batch_size = 16
epochs = 3

[grid]
lambda_l2 = [0.0, 0.001]
seed = [1, 2, 3]
"#,
        root.display()
    )
}

#[test]
fn criterion_5_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = imp_run(&blobs_config(&tmp.path().join("a"), 3)).unwrap();
    let b = imp_run(&blobs_config(&tmp.path().join("b"), 3)).unwrap();
    let same_run = fs::read(a.run_dir.join("rounds.csv")).unwrap() == fs::read(b.run_dir.join("rounds.csv")).unwrap()
        && fs::read(a.run_dir.join("round-2.ckpt")).unwrap() == fs::read(b.run_dir.join("round-2.ckpt")).unwrap();

    let p1 = SweepFile::from_toml_str(&blobs_grid(&tmp.path().join("p1"))).unwrap().plan().unwrap();
    let p4 = SweepFile::from_toml_str(&blobs_grid(&tmp.path().join("p4"))).unwrap().plan().unwrap();
    run_sweep(&p1, 1, false).unwrap();
    run_sweep(&p4, 4, false).unwrap();
    let mut same_sweep = true;
    for (r1, r4) in p1.runs.iter().zip(&p4.runs) {
        let f1 = fs::read(r1.config.output_dir.join("rounds.csv")).unwrap();
        let f4 = fs::read(r4.config.output_dir.join("rounds.csv")).unwrap();
        same_sweep &= f1 == f4;
    }
    let pass = same_run && same_sweep;
    report(5, pass, &format!("repeat run identical {same_run}, sweep parallelism 1 vs 4 identical {same_sweep}"));
    assert!(pass);
}

#[test]
fn criterion_9_flops_counter() {
    let mut m = build_mlp(784, &[300, 100], 10, 1).unwrap();
    let dense = forward_flops(&m);
    magnitude_prune(&mut m, 0.5, PruneScope::PerLayer).unwrap();
    let half = forward_flops(&m);

    let tmp = tempfile::tempdir().unwrap();
    let plan = SweepFile::from_toml_str(&blobs_grid(tmp.path())).unwrap().plan().unwrap();
    let rep = run_sweep(&plan, 1, false).unwrap();
    let mut totals_ok = true;
    for row in rep.summary.iter().filter(|r| !r.early_stop) {
        let sums: Vec<f64> = plan
            .runs
            .iter()
            .filter(|r| r.group == row.group)
            .map(|r| {
                let recs = read_rounds_csv(&r.config.output_dir.join("rounds.csv")).unwrap();
                recs.iter().map(|x| x.flops).sum::<u64>() as f64
            })
            .collect();
        totals_ok &= row.train_flops == sums.iter().sum::<f64>() / sums.len() as f64;
    }
    let recs = read_rounds_csv(&plan.runs[0].config.output_dir.join("rounds.csv")).unwrap();
    let cfg = &plan.runs[0].config;
    let ckpt = sdd_core::checkpoint::load(&plan.runs[0].config.output_dir.join(&recs[1].checkpoint_path)).unwrap().0;
    let train_n = (cfg.train_fraction * (cfg.blob_classes * cfg.blob_per_class) as f64).round() as usize;
    let per_round_ok = recs[1].flops == training_flops(&ckpt, train_n, cfg.epochs);

    let pass = dense == 532_400 && 2 * half == dense && totals_ok && per_round_ok;
    report(
        9,
        pass,
        &format!("dense {dense}, 50% per-layer {half}, summary totals match rounds.csv {totals_ok}, round FLOPs recomputed {per_round_ok}"),
    );
    assert!(pass);
}

// ---- MNIST reproduction -------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];
const LAMBDAS: [f64; 3] = [1e-4, 1e-3, 1e-2];
const SDD_TOL: f64 = 0.01;
const POINTS: f64 = 0.02;

struct Slow {
    runs_dir: PathBuf,
    l2: SweepPlan,
    l2_outcomes: Vec<(f64, u64, Vec<RoundRecord>)>,
}

impl Slow {
    fn curve(&self, lambda: f64, seed: u64) -> (SparsityCurve, &[RoundRecord]) {
        let recs = &self
            .l2_outcomes
            .iter()
            .find(|(l, s, _)| *l == lambda && *s == seed)
            .expect("run present")
            .2;
        (SparsityCurve::from_records(recs).unwrap(), recs)
    }

    fn verdict(&self, lambda: f64, seed: u64) -> SddVerdict {
        detect_sdd(&self.curve(lambda, seed).0, SDD_TOL).unwrap()
    }

    /// The l2 strength that removes the double descent on most seeds, with
    /// the best mean validation accuracy among those.
    fn lambda_opt(&self) -> Option<f64> {
        LAMBDAS
            .iter()
            .copied()
            .filter(|&l| SEEDS.iter().filter(|&&s| !self.verdict(l, s).is_sdd).count() >= 2)
            .map(|l| {
                let mean: f64 = SEEDS
                    .iter()
                    .map(|&s| {
                        let (c, r) = self.curve(l, s);
                        operating_point(r, c.len() - 1).val_acc
                    })
                    .sum::<f64>()
                    / 3.0;
                (l, mean)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
    }
}

fn repo_file(rel: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel);
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Rewrites the repository grid file for local data and output locations.
fn localize(text: &str, mnist: &Path, runs: &Path) -> String {
    text.replace("\"data/mnist/", &format!("\"{}/", mnist.display()))
        .replace("\"runs/", &format!("\"{}/", runs.display()))
}

fn slow_env() -> Option<(PathBuf, PathBuf)> {
    let mnist = std::env::var_os("SDD_MNIST_DIR").map(PathBuf::from)?;
    let runs = std::env::var_os("SDD_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sdd-acceptance"));
    Some((mnist, runs))
}

fn finished(outcomes: Vec<(sdd_core::sweep::PlannedRun, RunOutcome)>) -> Vec<(f64, u64, Vec<RoundRecord>)> {
    outcomes
        .into_iter()
        .map(|(r, o)| match o {
            RunOutcome::Finished { records, .. } => (r.config.lambda_l2, r.config.seed, records),
            RunOutcome::Failed(e) => panic!("run {} failed: {e}", r.id),
        })
        .collect()
}

fn slow() -> &'static Slow {
    static SLOW: OnceLock<Slow> = OnceLock::new();
    SLOW.get_or_init(|| {
        let (mnist, runs_dir) = slow_env().expect("set SDD_MNIST_DIR to run the MNIST criteria");
        let text = localize(&repo_file("configs/mnist-l2.toml"), &mnist, &runs_dir);
        let l2 = SweepFile::from_toml_str(&text).unwrap().plan().unwrap();
        let rep = run_sweep(&l2, 1, true).unwrap();
        Slow {
            runs_dir,
            l2,
            l2_outcomes: finished(rep.outcomes),
        }
    })
}

#[test]
#[ignore = "trains on MNIST; set SDD_MNIST_DIR"]
fn criterion_6_sdd_reproduction() {
    let s = slow();
    let mut lines = Vec::new();
    let mut vanilla = 0;
    for &seed in &SEEDS {
        let v = s.verdict(0.0, seed);
        let strong = v.is_sdd && v.dip_depth >= POINTS && v.recovery_height >= POINTS;
        vanilla += strong as usize;
        lines.push(format!(
            "lambda 0 seed {seed}: sdd {} dip {:.3} recovery {:.3}",
            v.is_sdd, v.dip_depth, v.recovery_height
        ));
    }
    let mut removed_by = Vec::new();
    for &l in &LAMBDAS {
        let mono = SEEDS
            .iter()
            .filter(|&&seed| {
                let v = s.verdict(l, seed);
                lines.push(format!("lambda {l} seed {seed}: sdd {} shape {:?}", v.is_sdd, v.shape));
                !v.is_sdd
            })
            .count();
        if mono >= 2 {
            removed_by.push(l);
        }
    }
    let pass = vanilla >= 2 && !removed_by.is_empty();
    for l in &lines {
        println!("  {l}");
    }
    report(
        6,
        pass,
        &format!("vanilla SDD (>= 2 points) on {vanilla}/3 seeds; l2 strengths without SDD on >= 2/3 seeds: {removed_by:?}"),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains on MNIST; set SDD_MNIST_DIR"]
fn criterion_7_early_stop_contrast() {
    let s = slow();
    let mut lines = Vec::new();
    let mut vanilla_ok = 0;
    let mut vanilla_sdd = 0;
    for &seed in &SEEDS {
        let v = s.verdict(0.0, seed);
        if !v.is_sdd {
            continue;
        }
        vanilla_sdd += 1;
        let (c, _) = s.curve(0.0, seed);
        let acc = c.test_acc();
        let dip = v.dip_index.unwrap();
        let best_after = (dip..acc.len()).fold(dip, |b, i| if acc[i] > acc[b] { i } else { b });
        let stop = first_stop_index(&acc, 2, 0.02);
        let ok = stop.is_some_and(|k| c.points()[k].sparsity < c.points()[best_after].sparsity);
        vanilla_ok += ok as usize;
        lines.push(format!(
            "lambda 0 seed {seed}: stop {stop:?} (sparsity {:.3}), post-recovery best round {best_after} (sparsity {:.3})",
            stop.map_or(f64::NAN, |k| c.points()[k].sparsity),
            c.points()[best_after].sparsity
        ));
    }
    let vanilla_pass = vanilla_sdd >= 2 && vanilla_ok == vanilla_sdd;

    let mut opt_ok = 0;
    let mut opt_curves = 0;
    let lambda = s.lambda_opt();
    if let Some(l) = lambda {
        for &seed in &SEEDS {
            if s.verdict(l, seed).is_sdd {
                continue;
            }
            opt_curves += 1;
            let (c, recs) = s.curve(l, seed);
            let acc = c.test_acc();
            let best = c.best_index();
            let stop = first_stop_index(&acc, 2, 0.02);
            let (in_decline, near_best, saving) = match stop {
                Some(k) => {
                    let chosen = operating_point(recs, k);
                    let saving = 1.0 - c.points()[k].cumulative_flops as f64 / c.total_flops() as f64;
                    (k > best, chosen.test_acc >= acc[best] - 0.02, saving)
                }
                None => (false, false, 0.0),
            };
            let ok = in_decline && near_best && saving >= 0.2;
            opt_ok += ok as usize;
            lines.push(format!(
                "lambda {l} seed {seed}: stop {stop:?}, best round {best}, in decline {in_decline}, within 2 points {near_best}, FLOPs saved {:.1}%",
                100.0 * saving
            ));
        }
    }
    let opt_pass = opt_curves >= 2 && opt_ok == opt_curves;
    for l in &lines {
        println!("  {l}");
    }
    let pass = vanilla_pass && opt_pass;
    report(
        7,
        pass,
        &format!(
            "vanilla stops before the post-recovery best on {vanilla_ok}/{vanilla_sdd} SDD curves; lambda_opt {lambda:?} curves meeting stop/accuracy/>=20% FLOPs: {opt_ok}/{opt_curves}"
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains on MNIST; set SDD_MNIST_DIR"]
fn criterion_8_kd_avoidance() {
    let s = slow();
    let lambda = s.lambda_opt().expect("criterion 6 found no l2 strength without SDD");
    let (mnist, runs) = slow_env().unwrap();
    let mut text = localize(&repo_file("configs/mnist-kd.toml"), &mnist, &runs);
    let teacher_dir = s.l2.output_root.join(format!("lambda_l2-{lambda}_seed-{{seed}}"));
    text = text
        .lines()
        .map(|line| {
            if line.starts_with("teacher_run") {
                format!("teacher_run = \"{}\"", teacher_dir.display())
            } else {
                line.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let plan = SweepFile::from_toml_str(&text).unwrap().plan().unwrap();
    let rep = run_sweep(&plan, 1, true).unwrap();
    let students = finished(rep.outcomes);

    let mut lines = Vec::new();
    let mut no_sdd = 0;
    let mut margins = Vec::new();
    for (_, seed, recs) in &students {
        let kd_curve = SparsityCurve::from_records(recs).unwrap();
        let v = detect_sdd(&kd_curve, SDD_TOL).unwrap();
        no_sdd += !v.is_sdd as usize;
        let (vanilla_curve, _) = s.curve(0.0, *seed);
        let vv = s.verdict(0.0, *seed);
        let margin = match (vv.plateau_end, vv.dip_index, vv.recovery_index) {
            (Some(a), Some(d), Some(r)) => {
                let kd = kd_curve.test_acc();
                let student_min = kd[a..=r.min(kd.len() - 1)].iter().copied().fold(f64::INFINITY, f64::min);
                Some(student_min - vanilla_curve.test_acc()[d])
            }
            _ => None,
        };
        if let Some(m) = margin {
            margins.push(m);
        }
        lines.push(format!(
            "seed {seed}: student sdd {} shape {:?}; min over vanilla dip window minus vanilla dip minimum {}",
            v.is_sdd,
            v.shape,
            margin.map_or("n/a".into(), |m| format!("{:+.2} points", 100.0 * m))
        ));
        let svg = s.runs_dir.join(format!("kd-vs-vanilla-seed-{seed}.svg"));
        let (l2c, _) = s.curve(lambda, *seed);
        let l2_label = format!("l2 {lambda}");
        emit_plot(
            &[
                Series { label: "vanilla", curve: &vanilla_curve, verdict: Some(&vv) },
                Series { label: &l2_label, curve: &l2c, verdict: None },
                Series { label: "KD, pruned teacher", curve: &kd_curve, verdict: None },
            ],
            &PlotOptions { title: Some(format!("MNIST, 50% noise, seed {seed}")), ..PlotOptions::default() },
            &svg,
        )
        .unwrap();
        lines.push(format!("plot {}", svg.display()));
    }
    for l in &lines {
        println!("  {l}");
    }
    let margin_ok = margins.len() >= 2 && margins.iter().filter(|&&m| m >= POINTS).count() >= 2;
    let pass = no_sdd >= 2;
    report(
        8,
        pass,
        &format!(
            "student without SDD on {no_sdd}/3 seeds (asserted); margin >= 2 points on >= 2 seeds: {margin_ok} (reported, not asserted)"
        ),
    );
    assert!(pass);
}
