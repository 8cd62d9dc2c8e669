#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdd_core::tensor::{Tape, Tensor};
use sdd_core::train::total_loss;

/// A small masked MLP with a distillation target and an l2 term, used to
/// compare tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
    pub x: Tensor,
    pub targets: Vec<usize>,
    pub teacher: Tensor,
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Plain-loop forward pass, returning every pre-activation.
pub fn reference_forward(inst: &GradInstance) -> Vec<Vec<f64>> {
    let (batch, mut width) = inst.x.dims2().unwrap();
    let mut h = inst.x.data().to_vec();
    let mut pre = Vec::new();
    let last = inst.weights.len() - 1;
    for (l, w) in inst.weights.iter().enumerate() {
        let (out, inp) = w.dims2().unwrap();
        assert_eq!(inp, width);
        let mut z = vec![0.0; batch * out];
        for b in 0..batch {
            for o in 0..out {
                let mut acc = inst.biases[l].data()[o];
                for i in 0..inp {
                    if inst.masks[l][o * inp + i] {
                        acc += h[b * inp + i] * w.data()[o * inp + i];
                    }
                }
                z[b * out + o] = acc;
            }
        }
        pre.push(z.clone());
        h = if l < last { z.iter().map(|v| v.max(0.0)).collect() } else { z };
        width = out;
    }
    pre
}

pub fn random_grad_instance(seed: u64) -> GradInstance {
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(attempt));
        attempt += 1;
        let depth = rng.random_range(1..=3);
        let mut dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=16)).collect();
        dims[depth] = dims[depth].max(2);
        let batch = rng.random_range(1..=6);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut masks = Vec::new();
        for l in 0..depth {
            let (inp, out) = (dims[l], dims[l + 1]);
            weights.push(Tensor::new(vec![out, inp], uniform(&mut rng, out * inp, 1.0)).unwrap());
            biases.push(Tensor::new(vec![out], uniform(&mut rng, out, 0.5)).unwrap());
            let keep = rng.random_range(0.3..1.0);
            masks.push((0..out * inp).map(|_| rng.random_bool(keep)).collect());
        }
        let classes = dims[depth];
        let inst = GradInstance {
            x: Tensor::new(vec![batch, dims[0]], uniform(&mut rng, batch * dims[0], 1.0)).unwrap(),
            targets: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
            teacher: Tensor::new(vec![batch, classes], uniform(&mut rng, batch * classes, 3.0)).unwrap(),
            alpha: rng.random_range(0.0..1.0),
            tau: rng.random_range(1.0..5.0),
            lambda: rng.random_range(0.0..0.1),
            weights,
            biases,
            masks,
        };
        // stay clear of ReLU kinks, where the loss is not differentiable
        let pre = reference_forward(&inst);
        let hidden = &pre[..pre.len() - 1];
        if hidden.iter().flatten().all(|z| z.abs() > 1e-3) {
            return inst;
        }
    }
}

pub struct GradResult {
    pub loss: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub x: Vec<f64>,
}

pub fn tape_loss(inst: &GradInstance, grads: bool) -> GradResult {
    let mut tape = Tape::new();
    let x = tape.param(inst.x.clone());
    let mut h = x;
    let mut params = Vec::new();
    let last = inst.weights.len() - 1;
    let mut penalty = None;
    for l in 0..inst.weights.len() {
        let w = tape.param(inst.weights[l].clone());
        let b = tape.param(inst.biases[l].clone());
        h = tape.masked_linear(h, w, b, &inst.masks[l]).unwrap();
        if l < last {
            h = tape.relu(h);
        }
        let sq = tape.sum_squares(w).unwrap();
        penalty = Some(match penalty {
            None => sq,
            Some(p) => tape.add(p, sq).unwrap(),
        });
        params.push((w, b));
    }
    let data = total_loss(&mut tape, h, &inst.targets, Some(&inst.teacher), inst.alpha, inst.tau).unwrap();
    let reg = tape.scale(penalty.unwrap(), 0.5 * inst.lambda).unwrap();
    let loss = tape.add(data, reg).unwrap();
    let value = tape.value(loss).item();
    if !grads {
        return GradResult { loss: value, weights: vec![], biases: vec![], x: vec![] };
    }
    tape.backward(loss).unwrap();
    let g = |v| tape.grad(v).unwrap().data().to_vec();
    GradResult {
        loss: value,
        weights: params.iter().map(|&(w, _)| g(w)).collect(),
        biases: params.iter().map(|&(_, b)| g(b)).collect(),
        x: g(x),
    }
}

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute
/// below 1 so that near-zero entries do not divide by round-off.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn perturbed(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] += delta;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Largest error over every weight, bias and input coordinate, using central
/// differences with step `h`. Masked weights are expected to have a zero
/// gradient and a zero numeric derivative.
pub fn max_gradient_error(inst: &GradInstance, h: f64) -> f64 {
    let analytic = tape_loss(inst, true);
    let mut worst: f64 = 0.0;
    let central = |f: &dyn Fn(f64) -> GradInstance| {
        (tape_loss(&f(h), false).loss - tape_loss(&f(-h), false).loss) / (2.0 * h)
    };
    for l in 0..inst.weights.len() {
        for i in 0..inst.weights[l].len() {
            let n = central(&|d| {
                let mut c = inst.clone();
                c.weights[l] = perturbed(&inst.weights[l], i, d);
                c
            });
            worst = worst.max(rel_error(analytic.weights[l][i], n));
        }
        for i in 0..inst.biases[l].len() {
            let n = central(&|d| {
                let mut c = inst.clone();
                c.biases[l] = perturbed(&inst.biases[l], i, d);
                c
            });
            worst = worst.max(rel_error(analytic.biases[l][i], n));
        }
    }
    for i in 0..inst.x.len() {
        let n = central(&|d| {
            let mut c = inst.clone();
            c.x = perturbed(&inst.x, i, d);
            c
        });
        worst = worst.max(rel_error(analytic.x[i], n));
    }
    worst
}
