use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdd_core::analysis::{detect_sdd, first_stop_index, SparsityCurve, DEFAULT_TOL};
use sdd_core::config::RunConfig;
use sdd_core::data::audit_noise;
use sdd_core::plot::{emit_plot, PlotOptions, Series, XAxis};
use sdd_core::prune::{imp_run, read_rounds_csv, ROUNDS_CSV};
use sdd_core::sweep::{run_sweep, SweepFile};
use sdd_core::Error;

#[derive(Parser)]
#[command(name = "sdd", version, about = "Iterative magnitude pruning experiments on noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Expect {
    Sdd,
    NoSdd,
}

#[derive(Subcommand)]
enum Command {
    /// Run one prune/retrain loop from a config file.
    Train {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run every point of a grid file.
    Sweep {
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Reuse finished runs whose config hash matches.
        #[arg(long)]
        resume: bool,
    },
    /// Classify curves (run directories or rounds.csv files).
    Analyze {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 2)]
        patience: usize,
        #[arg(long, default_value_t = 0.02)]
        stop_tol: f64,
        /// Exit with status 3 unless enough curves match.
        #[arg(long, value_enum)]
        assert: Option<Expect>,
        /// How many curves must match for --assert (default: all).
        #[arg(long)]
        at_least: Option<usize>,
    },
    /// Draw curves into an SVG file.
    Plot {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// One label per curve; defaults to the path.
        #[arg(long)]
        label: Vec<String>,
        /// Linear sparsity axis instead of log-scaled remaining weights.
        #[arg(long)]
        linear: bool,
        /// Shade the detected phases of the first curve.
        #[arg(long)]
        shade: bool,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        title: Option<String>,
    },
    /// Report label flip statistics of the training split a config prepares.
    NoiseAudit { config: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::OutputCollision(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn rounds_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(ROUNDS_CSV)
    } else {
        p.to_path_buf()
    }
}

fn load_curve(p: &Path) -> Result<SparsityCurve, Failure> {
    let records = read_rounds_csv(&rounds_path(p))?;
    Ok(SparsityCurve::from_records(&records)?)
}

fn load_config(p: &Path) -> Result<RunConfig, Failure> {
    RunConfig::from_file(p).map_err(|e| Failure::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, output_dir } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let run = imp_run(&cfg)?;
            let last = run.records.last().expect("at least one round");
            println!(
                "{}: {} rounds, final sparsity {:.5}, test acc {:.4}",
                run.run_dir.display(),
                run.records.len(),
                last.sparsity,
                last.test_acc
            );
        }
        Command::Sweep { grid, parallelism, resume } => {
            let plan = SweepFile::from_file(&grid)
                .and_then(|g| g.plan())
                .map_err(|e| Failure::Config(e.to_string()))?;
            let report = run_sweep(&plan, parallelism, resume)?;
            println!(
                "{} runs, {} failed; summary in {}",
                report.outcomes.len(),
                report.failures(),
                plan.output_root.display()
            );
            if report.failures() > 0 {
                return Err(Failure::Runtime(format!("{} runs failed", report.failures())));
            }
        }
        Command::Analyze {
            curves,
            tol,
            patience,
            stop_tol,
            assert,
            at_least,
        } => {
            println!("curve,is_sdd,shape,dip_index,recovery_index,dip_depth,recovery_height,stop_index,best_index");
            let mut sdd = 0;
            for p in &curves {
                let curve = load_curve(p)?;
                let v = detect_sdd(&curve, tol)?;
                let stop = first_stop_index(&curve.test_acc(), patience, stop_tol);
                let opt = |x: Option<usize>| x.map_or(String::new(), |i| i.to_string());
                println!(
                    "{},{},{:?},{},{},{:.4},{:.4},{},{}",
                    p.display(),
                    v.is_sdd,
                    v.shape,
                    opt(v.dip_index),
                    opt(v.recovery_index),
                    v.dip_depth,
                    v.recovery_height,
                    opt(stop),
                    curve.best_index()
                );
                sdd += v.is_sdd as usize;
            }
            println!("# {sdd} of {} curves show sparse double descent at tol {tol}", curves.len());
            if let Some(expect) = assert {
                let matching = match expect {
                    Expect::Sdd => sdd,
                    Expect::NoSdd => curves.len() - sdd,
                };
                let need = at_least.unwrap_or(curves.len());
                if matching < need {
                    return Err(Failure::Check(format!("{matching} curves match, {need} required")));
                }
            }
        }
        Command::Plot {
            curves,
            output,
            label,
            linear,
            shade,
            tol,
            title,
        } => {
            let loaded = curves.iter().map(|p| load_curve(p)).collect::<Result<Vec<_>, _>>()?;
            let verdict = if shade { Some(detect_sdd(&loaded[0], tol)?) } else { None };
            let names: Vec<String> = curves
                .iter()
                .enumerate()
                .map(|(i, p)| label.get(i).cloned().unwrap_or_else(|| p.display().to_string()))
                .collect();
            let series: Vec<Series> = loaded
                .iter()
                .zip(&names)
                .enumerate()
                .map(|(i, (c, n))| Series {
                    label: n,
                    curve: c,
                    verdict: if i == 0 { verdict.as_ref() } else { None },
                })
                .collect();
            let opts = PlotOptions {
                x_axis: if linear { XAxis::LinearSparsity } else { XAxis::LogRemaining },
                title,
                ..PlotOptions::default()
            };
            emit_plot(&series, &opts, &output)?;
        }
        Command::NoiseAudit { config } => {
            let cfg = load_config(&config)?;
            let splits = cfg.load_splits()?;
            let a = audit_noise(&splits.train)?;
            let expected = cfg.noise().flip_count(a.samples);
            println!("samples {}", a.samples);
            println!("classes {}", a.class_count);
            println!("epsilon {}", cfg.noise_epsilon);
            println!("flips {} (expected {expected})", a.flips);
            println!("flip offsets {:?}", a.offset_counts);
            println!("chi-square {:.4}, p = {:.4}", a.chi_square, a.p_value);
            if a.flips != expected {
                return Err(Failure::Check(format!("{} flips, expected {expected}", a.flips)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}
