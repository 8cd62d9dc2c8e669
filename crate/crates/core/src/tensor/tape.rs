use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    SumSquares(Var),
    MaskedLinear {
        x: Var,
        weight: Var,
        bias: Var,
        mask: Vec<bool>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        student: Var,
        student_probs: Vec<f64>,
        teacher_probs: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Linear record of primitive operations in evaluation order.
///
/// Node handles are indices into the record, so every operation's inputs
/// precede it and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Row-wise softmax of `logits / tau` for a batch×classes matrix.
pub fn softmax_rows(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        out.extend(log_softmax_row(row, tau).into_iter().map(f64::exp));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

fn log_softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let sum: f64 = row.iter().map(|&z| (z / tau - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&z| z / tau - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Records a trainable leaf whose gradient will be populated.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let node = &mut self.nodes[v.0];
        let shape = node.value.shape().to_vec();
        node.grad.take().map(|g| Tensor::from_parts(shape, g))
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut c,
        );
        check_finite("matmul", &c)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        check_finite("add", &data)?;
        let shape = va.shape().to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Add(a, b)))
    }

    /// Adds a length-n row vector to every row of a batch×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(row).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (d, b) in chunk.iter_mut().zip(r) {
                *d += b;
            }
        }
        check_finite("add_row", &data)?;
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(&[x, row]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::AddRow(x, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        check_finite("mul", &data)?;
        let shape = va.shape().to_vec();
        let rg = self.requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        check_finite("scale", &data)?;
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Scale(x, factor)))
    }

    /// Elementwise `max(x, 0)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(&[x]);
        self.push(Tensor::from_parts(shape, data), rg, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.requires(&[x]);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), rg, Op::Sum(x)))
    }

    /// Sum of squared entries, `‖x‖²`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        check_finite("sum_squares", &[s])?;
        let rg = self.requires(&[x]);
        Ok(self.push(Tensor::from_parts(vec![], vec![s]), rg, Op::SumSquares(x)))
    }

    /// `x · (weight ⊙ mask)ᵀ + bias` for `x` batch×in, `weight` out×in,
    /// `bias` of length out. Masked weight entries receive zero gradient.
    pub fn masked_linear(&mut self, x: Var, weight: Var, bias: Var, mask: &[bool]) -> Result<Var> {
        let (batch, inp) = self.value(x).dims2()?;
        let (out, w_in) = self.value(weight).dims2()?;
        if w_in != inp {
            return Err(Error::Shape {
                op: "masked_linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        if self.value(bias).len() != out || mask.len() != out * inp {
            return Err(Error::Shape {
                op: "masked_linear",
                lhs: self.value(weight).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let y = kernels::masked_linear_forward(
            self.value(x).data(),
            batch,
            inp,
            self.value(weight).data(),
            mask,
            self.value(bias).data(),
            out,
        );
        check_finite("masked_linear", &y)?;
        let rg = self.requires(&[x, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, out], y),
            rg,
            Op::MaskedLinear {
                x,
                weight,
                bias,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Batch mean of `-log softmax(logits)[target]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::input(format!(
                "{} targets for a batch of {b}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::input(format!("target class {t} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (row, &t) in self.value(logits).data().chunks_exact(c).zip(targets) {
            let logp = log_softmax_row(row, 1.0);
            total -= logp[t];
            probs.extend(logp.into_iter().map(f64::exp));
        }
        let loss = total / b as f64;
        check_finite("softmax_cross_entropy", &[loss])?;
        let rg = self.requires(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![loss]),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Batch mean of `tau² · KL(softmax(teacher/tau) ‖ softmax(student/tau))`.
    /// The teacher logits are a constant.
    pub fn kl_divergence_loss(&mut self, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::input(format!("temperature must be positive, got {tau}")));
        }
        let (b, c) = self.value(student).dims2()?;
        if teacher.shape() != self.value(student).shape() {
            return Err(Error::Shape {
                op: "kl_divergence_loss",
                lhs: self.value(student).shape().to_vec(),
                rhs: teacher.shape().to_vec(),
            });
        }
        let mut student_probs = Vec::with_capacity(b * c);
        let mut teacher_probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (srow, trow) in self
            .value(student)
            .data()
            .chunks_exact(c)
            .zip(teacher.data().chunks_exact(c))
        {
            let ls = log_softmax_row(srow, tau);
            let lt = log_softmax_row(trow, tau);
            let mut row_kl = 0.0;
            for (&s, &t) in ls.iter().zip(&lt) {
                let pt = t.exp();
                if pt > 0.0 {
                    row_kl += pt * (t - s);
                }
            }
            // rounding can push a near-zero divergence slightly negative
            total += row_kl.max(0.0);
            student_probs.extend(ls.into_iter().map(f64::exp));
            teacher_probs.extend(lt.into_iter().map(f64::exp));
        }
        let loss = tau * tau * total / b as f64;
        check_finite("kl_divergence_loss", &[loss])?;
        let rg = self.requires(&[student]);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![loss]),
            rg,
            Op::KlDivergence {
                student,
                student_probs,
                teacher_probs,
                tau,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar root, populating gradients of every node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already populated; call reset_grads first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let contributions = self.backward_rule(idx, &g);
            for (v, gv) in contributions {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("recorded as matrix");
                let (_, n) = self.value(*b).dims2().expect("recorded as matrix");
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, 0.0, &mut da);
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.to_vec()));
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                }
                out.push((*row, dr));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::SumSquares(x) => {
                out.push((*x, self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()))
            }
            Op::MaskedLinear { x, weight, bias, mask } => {
                let (batch, inp) = self.value(*x).dims2().expect("recorded as matrix");
                let (outd, _) = self.value(*weight).dims2().expect("recorded as matrix");
                let grads = kernels::masked_linear_backward(
                    self.value(*x).data(),
                    batch,
                    inp,
                    self.value(*weight).data(),
                    mask,
                    outd,
                    g,
                    self.requires_grad(*x),
                );
                if self.requires_grad(*x) {
                    out.push((*x, grads.dx));
                }
                out.push((*weight, grads.dweight));
                out.push((*bias, grads.dbias));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (b, c) = self.value(*logits).dims2().expect("recorded as matrix");
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * c + t] -= scale;
                }
                out.push((*logits, d));
            }
            Op::KlDivergence {
                student,
                student_probs,
                teacher_probs,
                tau,
            } => {
                let (b, _) = self.value(*student).dims2().expect("recorded as matrix");
                let scale = g[0] * tau / b as f64;
                out.push((
                    *student,
                    student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(s, t)| scale * (s - t))
                        .collect(),
                ));
            }
        }
        out
    }
}
