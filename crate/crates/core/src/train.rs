//! Masked momentum SGD with coupled weight decay and optional distillation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::tensor::{Tape, Tensor, Var};

/// Learning-rate schedule, momentum, weight decay and batching of one
/// training call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerPolicy {
    pub base_lr: f64,
    pub momentum: f64,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    /// Coupled weight decay applied to surviving weights (not biases).
    pub lambda_l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation/test evaluation happens every `eval_interval` epochs and
    /// always after the last epoch.
    pub eval_interval: usize,
}

impl Default for OptimizerPolicy {
    fn default() -> Self {
        OptimizerPolicy {
            base_lr: 0.1,
            momentum: 0.9,
            milestones: vec![80, 120],
            decay_factor: 0.1,
            lambda_l2: 0.0,
            epochs: 160,
            batch_size: 128,
            eval_interval: 1,
        }
    }
}

impl OptimizerPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.lambda_l2 >= 0.0) || !self.lambda_l2.is_finite() {
            return bad(format!("lambda_l2 must be non-negative, got {}", self.lambda_l2));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self, epoch)
    }
}

/// `base_lr · decay_factor^(milestones ≤ epoch)`.
pub fn lr_at(policy: &OptimizerPolicy, epoch: usize) -> f64 {
    let passed = policy.milestones.iter().filter(|&&m| m <= epoch).count();
    policy.base_lr * policy.decay_factor.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[default]
    None,
    /// The unpruned round-0 model of a reference run.
    Dense,
    /// The round of a reference run with the best validation accuracy.
    BestFitPruned,
}

/// Distillation settings as stored in a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub tau: f64,
    pub teacher_kind: TeacherKind,
    /// Run directory of the reference run the teacher is selected from.
    pub teacher: Option<PathBuf>,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.0,
            tau: 4.0,
            teacher_kind: TeacherKind::None,
            teacher: None,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("kd alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("kd tau must be positive, got {}", self.tau)));
        }
        let has_teacher = self.teacher.is_some() && self.teacher_kind != TeacherKind::None;
        if (self.alpha > 0.0) != has_teacher {
            return Err(Error::Config(
                "a teacher (run directory and kind) is required exactly when kd alpha > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.alpha > 0.0
    }
}

/// A loaded teacher together with the distillation weights.
pub struct Distillation<'a> {
    pub alpha: f64,
    pub tau: f64,
    pub teacher: &'a MlpModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Against the (possibly noisy) training labels. Inference-mode on
    /// evaluation epochs, running minibatch accuracy otherwise.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub lr: f64,
}

/// Momentum buffers for every weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros(model: &MlpModel) -> Self {
        Velocity {
            weights: model.layers().iter().map(|l| vec![0.0; l.weight().len()]).collect(),
            biases: model.layers().iter().map(|l| vec![0.0; l.bias().len()]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One momentum SGD update.
///
/// For surviving weights `g' = g + λw`, `v ← μv + g'`, `w ← w − lr·v`;
/// biases take the same update without decay. Masked weights and their
/// velocity are set to exactly zero.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &[LayerGrads],
    velocity: &mut Velocity,
    policy: &OptimizerPolicy,
    epoch: usize,
) -> Result<()> {
    if grads.len() != model.layers().len() || velocity.weights.len() != grads.len() {
        return Err(Error::input(format!(
            "{} gradient entries for {} layers",
            grads.len(),
            model.layers().len()
        )));
    }
    let lr = lr_at(policy, epoch);
    let (mu, lambda) = (policy.momentum, policy.lambda_l2);
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        let g = &grads[li];
        if g.weight.len() != layer.weight().len() || g.bias.len() != layer.bias().len() {
            return Err(Error::input(format!("gradient shape mismatch in layer {li}")));
        }
        let mask = layer.mask().to_vec();
        let vw = &mut velocity.weights[li];
        for (k, w) in layer.weight_mut().iter_mut().enumerate() {
            if mask[k] {
                let gk = g.weight.data()[k] + lambda * *w;
                vw[k] = mu * vw[k] + gk;
                *w -= lr * vw[k];
            } else {
                *w = 0.0;
                vw[k] = 0.0;
            }
        }
        let vb = &mut velocity.biases[li];
        for (k, b) in layer.bias_mut().iter_mut().enumerate() {
            vb[k] = mu * vb[k] + g.bias.data()[k];
            *b -= lr * vb[k];
        }
        if layer.weight().data().iter().chain(layer.bias().data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    Ok(())
}

/// `(1 − α)·CE(student, targets) + α·KL_τ(teacher ‖ student)`.
///
/// With `alpha == 0` the result is the cross-entropy node itself and any
/// teacher logits are ignored.
pub fn total_loss(
    tape: &mut Tape,
    student_logits: Var,
    targets: &[usize],
    teacher_logits: Option<&Tensor>,
    alpha: f64,
    tau: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let ce = tape.softmax_cross_entropy(student_logits, targets)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let teacher = teacher_logits.ok_or_else(|| Error::input("alpha > 0 requires teacher logits"))?;
    let kl = tape.kl_divergence_loss(student_logits, teacher, tau)?;
    let ce_part = tape.scale(ce, 1.0 - alpha)?;
    let kl_part = tape.scale(kl, alpha)?;
    tape.add(ce_part, kl_part)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSet {
    Noisy,
    Clean,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// Accuracy and mean cross-entropy in inference mode.
pub fn evaluate_with_loss(model: &MlpModel, ds: &LabeledDataset, against: LabelSet) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let labels = match against {
        LabelSet::Noisy => ds.labels(),
        LabelSet::Clean => ds.clean_labels(),
    };
    let c = model.class_count();
    let (mut correct, mut loss) = (0usize, 0.0);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let logits = model.predict(&ds.inputs().gather_rows(chunk)?)?;
        for (row, &i) in logits.data().chunks_exact(c).zip(chunk) {
            let target = labels[i];
            if argmax(row) == target {
                correct += 1;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
        }
    }
    let n = ds.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn evaluate(model: &MlpModel, ds: &LabeledDataset, against: LabelSet) -> Result<f64> {
    evaluate_with_loss(model, ds, against).map(|(acc, _)| acc)
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Runs `policy.epochs` epochs of seeded-shuffle minibatch SGD and returns
/// the per-epoch trace. The model keeps its final weights.
pub fn train(
    model: &mut MlpModel,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    policy: &OptimizerPolicy,
    distill: Option<&Distillation<'_>>,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    policy.validate()?;
    for ds in [train_ds, val_ds, test_ds] {
        if ds.dim() != model.input_dim() || ds.class_count() > model.class_count() {
            return Err(Error::Shape {
                op: "train",
                lhs: vec![ds.len(), ds.dim(), ds.class_count()],
                rhs: model.dims(),
            });
        }
    }
    if let Some(d) = distill {
        if d.teacher.input_dim() != model.input_dim() || d.teacher.class_count() != model.class_count() {
            return Err(Error::Shape {
                op: "train",
                lhs: d.teacher.dims(),
                rhs: model.dims(),
            });
        }
    }
    let (alpha, tau) = distill.map_or((0.0, 1.0), |d| (d.alpha, d.tau));
    let c = model.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity = Velocity::zeros(model);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut trace = Vec::with_capacity(policy.epochs);

    for epoch in 0..policy.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(policy.batch_size).enumerate() {
            let x = train_ds.inputs().gather_rows(batch)?;
            let targets: Vec<usize> = batch.iter().map(|&i| train_ds.labels()[i]).collect();
            let teacher_logits = match distill {
                Some(d) => Some(d.teacher.predict(&x).map_err(|e| diverged(e, epoch, bi))?),
                None => None,
            };
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = model.forward(&mut tape, xv).map_err(|e| diverged(e, epoch, bi))?;
            let loss = total_loss(&mut tape, fwd.logits, &targets, teacher_logits.as_ref(), alpha, tau)
                .map_err(|e| diverged(e, epoch, bi))?;
            let loss_value = tape.value(loss).item();
            tape.backward(loss)?;

            for (row, &t) in tape.value(fwd.logits).data().chunks_exact(c).zip(&targets) {
                if argmax(row) == t {
                    correct += 1;
                }
            }
            loss_sum += loss_value * batch.len() as f64;

            let grads = fwd
                .params
                .iter()
                .map(|&(w, b)| {
                    Ok(LayerGrads {
                        weight: tape.take_grad(w).ok_or_else(|| Error::input("missing weight gradient"))?,
                        bias: tape.take_grad(b).ok_or_else(|| Error::input("missing bias gradient"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sgd_step(model, &grads, &mut velocity, policy, epoch).map_err(|e| diverged(e, epoch, bi))?;
        }

        let n = train_ds.len() as f64;
        let mut m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy: None,
            test_accuracy: None,
            test_loss: None,
            lr: lr_at(policy, epoch),
        };
        let last = epoch + 1 == policy.epochs;
        if last || (epoch + 1) % policy.eval_interval == 0 {
            m.train_accuracy = evaluate(model, train_ds, LabelSet::Noisy)?;
            m.val_accuracy = Some(evaluate(model, val_ds, LabelSet::Clean)?);
            let (acc, loss) = evaluate_with_loss(model, test_ds, LabelSet::Clean)?;
            m.test_accuracy = Some(acc);
            m.test_loss = Some(loss);
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:?}",
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy
        );
        trace.push(m);
    }
    Ok(trace)
}
