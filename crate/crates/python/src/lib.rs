//! Python bindings: models, pruning, noise, runs and curve analysis.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sdd_core::analysis::{self, SparsityCurve};
use sdd_core::config::RunConfig;
use sdd_core::data::{self, LabeledDataset, NoiseSpec};
use sdd_core::model::{build_mlp, MlpModel};
use sdd_core::plot::{emit_plot, PlotOptions, Series, XAxis};
use sdd_core::prune::{self, PruneScope};
use sdd_core::tensor::Tensor;
use sdd_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn scope(name: &str) -> PyResult<PruneScope> {
    match name {
        "global" => Ok(PruneScope::Global),
        "per_layer" => Ok(PruneScope::PerLayer),
        other => Err(PyValueError::new_err(format!("unknown scope {other:?}"))),
    }
}

/// A masked multilayer perceptron with ReLU hidden layers.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: MlpModel,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (input_dim, hidden, classes, seed=0))]
    fn new(input_dim: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: build_mlp(input_dim, &hidden, classes, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = sdd_core::checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sdd_core::checkpoint::save(&path, &self.inner, &[0; 32]).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn weight_count(&self) -> usize {
        self.inner.weight_count()
    }

    #[getter]
    fn surviving_weights(&self) -> usize {
        self.inner.surviving_weights()
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        prune::sparsity(&self.inner)
    }

    /// Logits for a list of input rows.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = Tensor::from_rows(&rows).map_err(py_err)?;
        let y = self.inner.predict(&x).map_err(py_err)?;
        let (n, _) = y.dims2().map_err(py_err)?;
        Ok((0..n).map(|r| y.row(r).to_vec()).collect())
    }

    /// Masks the smallest-magnitude surviving weights; returns how many.
    #[pyo3(signature = (zeta_iter, scope="global"))]
    fn prune(&mut self, zeta_iter: f64, scope: &str) -> PyResult<usize> {
        prune::magnitude_prune(&mut self.inner, zeta_iter, self::scope(scope)?).map_err(py_err)
    }

    /// `(min, max, counts)` of the surviving weights.
    fn weight_histogram(&self, bins: usize) -> PyResult<(f64, f64, Vec<usize>)> {
        let h = self.inner.weight_histogram(bins).map_err(py_err)?;
        Ok((h.min, h.max, h.counts))
    }

    fn forward_flops(&self) -> u64 {
        analysis::forward_flops(&self.inner)
    }

    fn training_flops(&self, samples: usize, epochs: usize) -> u64 {
        analysis::training_flops(&self.inner, samples, epochs)
    }
}

#[pyclass(name = "RoundRecord", get_all)]
struct PyRoundRecord {
    round: usize,
    sparsity: f64,
    train_acc: f64,
    val_acc: f64,
    test_acc: f64,
    test_loss: f64,
    epochs: usize,
    flops: u64,
    checkpoint_path: String,
}

impl From<&prune::RoundRecord> for PyRoundRecord {
    fn from(r: &prune::RoundRecord) -> Self {
        Self {
            round: r.round,
            sparsity: r.sparsity,
            train_acc: r.train_acc,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            test_loss: r.test_loss,
            epochs: r.epochs,
            flops: r.flops,
            checkpoint_path: r.checkpoint_path.display().to_string(),
        }
    }
}

#[pyclass(name = "SddVerdict", get_all)]
struct PyVerdict {
    is_sdd: bool,
    shape: String,
    phases: Vec<(usize, usize)>,
    dip_index: Option<usize>,
    recovery_index: Option<usize>,
    dip_depth: f64,
    recovery_height: f64,
    tol: f64,
}

fn curve_of(acc: &[f64]) -> PyResult<SparsityCurve> {
    SparsityCurve::from_test_acc(acc).map_err(py_err)
}

/// Runs one prune/retrain loop from TOML config text; returns its rounds.
#[pyfunction]
fn imp_run(config_toml: &str) -> PyResult<Vec<PyRoundRecord>> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(py_err)?;
    let run = prune::imp_run(&cfg).map_err(py_err)?;
    Ok(run.records.iter().map(PyRoundRecord::from).collect())
}

#[pyfunction]
fn read_rounds(path: PathBuf) -> PyResult<Vec<PyRoundRecord>> {
    let recs = prune::read_rounds_csv(&path).map_err(py_err)?;
    Ok(recs.iter().map(PyRoundRecord::from).collect())
}

/// Classifies a test-accuracy curve (one value per pruning round).
#[pyfunction]
#[pyo3(signature = (test_acc, tol=analysis::DEFAULT_TOL))]
fn detect_sdd(test_acc: Vec<f64>, tol: f64) -> PyResult<PyVerdict> {
    let v = analysis::detect_sdd(&curve_of(&test_acc)?, tol).map_err(py_err)?;
    Ok(PyVerdict {
        is_sdd: v.is_sdd,
        shape: format!("{:?}", v.shape),
        phases: v.phases,
        dip_index: v.dip_index,
        recovery_index: v.recovery_index,
        dip_depth: v.dip_depth,
        recovery_height: v.recovery_height,
        tol: v.tol,
    })
}

/// True when pruning should halt after the last round of `test_acc`.
#[pyfunction]
fn early_stop(test_acc: Vec<f64>, patience: usize, tol: f64) -> bool {
    analysis::early_stop_round(&test_acc, patience, tol) == analysis::EarlyStop::Stop
}

#[pyfunction]
fn first_stop_index(test_acc: Vec<f64>, patience: usize, tol: f64) -> Option<usize> {
    analysis::first_stop_index(&test_acc, patience, tol)
}

#[pyfunction]
fn co2_estimate(flops: f64, flops_per_joule: f64, grams_per_kwh: f64) -> PyResult<f64> {
    analysis::co2_estimate(flops, flops_per_joule, grams_per_kwh).map_err(py_err)
}

/// Symmetric label noise; returns the noisy labels.
#[pyfunction]
fn inject_noise(labels: Vec<usize>, classes: usize, epsilon: f64, seed: u64) -> PyResult<Vec<usize>> {
    let n = labels.len();
    let ds = LabeledDataset::new(Tensor::zeros(&[n.max(1), 1]), labels, classes).map_err(py_err)?;
    let spec = NoiseSpec::new(epsilon, seed).map_err(py_err)?;
    Ok(data::inject_symmetric_noise(&ds, spec).map_err(py_err)?.labels().to_vec())
}

/// Writes an SVG with one polyline per `(label, rounds.csv path)` pair.
#[pyfunction]
#[pyo3(signature = (curves, path, log_x=true))]
fn plot(curves: Vec<(String, PathBuf)>, path: PathBuf, log_x: bool) -> PyResult<()> {
    let loaded = curves
        .iter()
        .map(|(_, p)| {
            let recs = prune::read_rounds_csv(p)?;
            SparsityCurve::from_records(&recs)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let series: Vec<Series> = loaded
        .iter()
        .zip(&curves)
        .map(|(c, (label, _))| Series { label, curve: c, verdict: None })
        .collect();
    let opts = PlotOptions {
        x_axis: if log_x { XAxis::LogRemaining } else { XAxis::LinearSparsity },
        ..PlotOptions::default()
    };
    emit_plot(&series, &opts, &path).map_err(py_err)
}

#[pymodule]
fn sparse_dd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlp>()?;
    m.add_class::<PyRoundRecord>()?;
    m.add_class::<PyVerdict>()?;
    m.add_function(wrap_pyfunction!(imp_run, m)?)?;
    m.add_function(wrap_pyfunction!(read_rounds, m)?)?;
    m.add_function(wrap_pyfunction!(detect_sdd, m)?)?;
    m.add_function(wrap_pyfunction!(early_stop, m)?)?;
    m.add_function(wrap_pyfunction!(first_stop_index, m)?)?;
    m.add_function(wrap_pyfunction!(co2_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    Ok(())
}
