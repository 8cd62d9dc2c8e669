//! Curve analysis over pruning rounds: double-descent detection, early
//! stopping, and compute accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::prune::RoundRecord;

/// Default detector tolerance, in absolute accuracy.
pub const DEFAULT_TOL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sparsity: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub cumulative_flops: u64,
}

/// Test accuracy against sparsity, one point per pruning round. Point 0 is
/// the dense model and sparsity is strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityCurve {
    points: Vec<CurvePoint>,
}

impl SparsityCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::input("empty curve"))?;
        if first.sparsity != 0.0 {
            return Err(Error::input(format!("curve starts at sparsity {}", first.sparsity)));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].sparsity <= w[0].sparsity) {
            return Err(Error::input(format!(
                "sparsity not strictly increasing: {} then {}",
                w[0].sparsity, w[1].sparsity
            )));
        }
        Ok(Self { points })
    }

    /// Builds a curve from `rounds.csv` records, accumulating FLOPs.
    pub fn from_records(records: &[RoundRecord]) -> Result<Self> {
        let mut sorted: Vec<&RoundRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.round);
        let mut total = 0u64;
        let points = sorted
            .into_iter()
            .map(|r| {
                total += r.flops;
                CurvePoint {
                    sparsity: r.sparsity,
                    train_acc: r.train_acc,
                    test_acc: r.test_acc,
                    test_loss: r.test_loss,
                    cumulative_flops: total,
                }
            })
            .collect();
        Self::new(points)
    }

    /// A curve with only test accuracies filled in, at sparsities `1 - 0.8^k`.
    pub fn from_test_acc(acc: &[f64]) -> Result<Self> {
        Self::new(
            acc.iter()
                .enumerate()
                .map(|(k, &a)| CurvePoint {
                    sparsity: 1.0 - 0.8f64.powi(k as i32),
                    train_acc: a,
                    test_acc: a,
                    test_loss: 0.0,
                    cumulative_flops: 0,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn test_acc(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test_acc).collect()
    }

    pub fn total_flops(&self) -> u64 {
        self.points.last().map_or(0, |p| p.cumulative_flops)
    }

    /// Index of the highest test accuracy, earliest on ties.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.test_acc > self.points[best].test_acc {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveShape {
    SparseDoubleDescent,
    MonotoneWithinTolerance,
    NoisyFlat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SddVerdict {
    pub is_sdd: bool,
    pub shape: CurveShape,
    /// Inclusive index ranges of the plateau, dip, recovery and terminal
    /// decline. Empty unless `is_sdd`; the decline range may be missing when
    /// the recovery peak is the last point.
    pub phases: Vec<(usize, usize)>,
    pub plateau_end: Option<usize>,
    pub dip_index: Option<usize>,
    pub recovery_index: Option<usize>,
    /// Smoothed accuracy drop from the plateau end to the dip.
    pub dip_depth: f64,
    /// Smoothed accuracy gain from the dip to the recovery peak.
    pub recovery_height: f64,
    pub tol: f64,
}

/// 3-point running median; the two endpoints are kept as they are.
pub fn median3(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    for i in 1..xs.len().saturating_sub(1) {
        let mut w = [xs[i - 1], xs[i], xs[i + 1]];
        w.sort_by(f64::total_cmp);
        out[i] = w[1];
    }
    out
}

/// Classifies a test-accuracy curve.
///
/// On the median-smoothed curve the detector walks a running maximum until
/// some point falls more than `tol` below it; that maximum closes the
/// plateau. It then tracks the running minimum until a point rises more than
/// `tol` above it; that minimum is the dip. The recovery peak is the first
/// maximum after the dip and everything after it is the terminal decline.
pub fn detect_sdd(curve: &SparsityCurve, tol: f64) -> Result<SddVerdict> {
    if curve.len() < 4 {
        return Err(Error::input(format!("detector needs at least 4 points, got {}", curve.len())));
    }
    if !(tol >= 0.0) {
        return Err(Error::input(format!("tolerance must be nonnegative, got {tol}")));
    }
    let s = median3(&curve.test_acc());
    let n = s.len();

    let mut peak = 0;
    let mut dip_start = None;
    for j in 1..n {
        if s[j] > s[peak] {
            peak = j;
        } else if s[peak] - s[j] > tol {
            dip_start = Some(j);
            break;
        }
    }

    let mut found = None;
    if let Some(start) = dip_start {
        let mut dip = start;
        for k in start + 1..n {
            if s[k] < s[dip] {
                dip = k;
            } else if s[k] - s[dip] > tol {
                found = Some(dip);
                break;
            }
        }
        if let Some(dip) = found {
            let mut top = dip + 1;
            for k in dip + 1..n {
                if s[k] > s[top] {
                    top = k;
                }
            }
            let mut phases = vec![(0, peak), (peak + 1, dip), (dip + 1, top)];
            if top + 1 < n {
                phases.push((top + 1, n - 1));
            }
            return Ok(SddVerdict {
                is_sdd: true,
                shape: CurveShape::SparseDoubleDescent,
                phases,
                plateau_end: Some(peak),
                dip_index: Some(dip),
                recovery_index: Some(top),
                dip_depth: s[peak] - s[dip],
                recovery_height: s[top] - s[dip],
                tol,
            });
        }
    }

    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let shape = if hi - lo <= tol {
        CurveShape::NoisyFlat
    } else {
        CurveShape::MonotoneWithinTolerance
    };
    Ok(SddVerdict {
        is_sdd: false,
        shape,
        phases: Vec::new(),
        plateau_end: None,
        dip_index: None,
        recovery_index: None,
        dip_depth: 0.0,
        recovery_height: 0.0,
        tol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Decides after the last round of `test_acc` whether pruning should halt:
/// stop once the last `patience` accuracies all sit more than `tol` below
/// the best accuracy seen so far.
pub fn early_stop_round(test_acc: &[f64], patience: usize, tol: f64) -> EarlyStop {
    if test_acc.len() < patience.max(1) {
        return EarlyStop::Continue;
    }
    let best = test_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let recent = &test_acc[test_acc.len() - patience..];
    if recent.iter().all(|&a| a < best - tol) {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

/// Replays the curve round by round and returns the first round at which
/// [`early_stop_round`] says stop.
pub fn first_stop_index(test_acc: &[f64], patience: usize, tol: f64) -> Option<usize> {
    (1..=test_acc.len())
        .find(|&n| early_stop_round(&test_acc[..n], patience, tol) == EarlyStop::Stop)
        .map(|n| n - 1)
}

/// Multiply-adds of one forward pass over the surviving weights, counted as
/// two FLOPs each. Biases and activations are free.
pub fn forward_flops(model: &MlpModel) -> u64 {
    model.layers().iter().map(|l| 2 * l.surviving() as u64).sum()
}

/// Estimated training cost: a backward pass costs about twice the forward.
/// Evaluation passes are not counted.
pub fn training_flops(model: &MlpModel, n_samples: usize, epochs: usize) -> u64 {
    3 * forward_flops(model) * n_samples as u64 * epochs as u64
}

pub fn co2_estimate(flops: f64, flops_per_joule: f64, grams_per_kwh: f64) -> Result<f64> {
    if !(flops_per_joule > 0.0) || !(grams_per_kwh > 0.0) {
        return Err(Error::input(format!(
            "emission factors must be positive, got {flops_per_joule} FLOPs/J and {grams_per_kwh} g/kWh"
        )));
    }
    Ok(flops / flops_per_joule / 3.6e6 * grams_per_kwh)
}
