//! Masked multilayer perceptrons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// A fully connected layer whose forward pass uses `weight ⊙ mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weight: Tensor,
    bias: Tensor,
    mask: Vec<bool>,
    activation: Activation,
}

impl DenseLayer {
    /// `weight` is out×in, `bias` has length out, `mask` is row-major out×in.
    pub fn new(weight: Tensor, bias: Tensor, mask: Vec<bool>, activation: Activation) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::Shape {
                op: "dense_layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if mask.len() != weight.len() {
            return Err(Error::input(format!(
                "mask has {} entries for a {:?} weight",
                mask.len(),
                weight.shape()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            mask,
            activation,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn surviving(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.data_mut()
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.data_mut()
    }

    #[cfg(test)]
    pub(crate) fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    /// Forces masked weight entries to exactly zero.
    pub(crate) fn zero_masked(&mut self) {
        let mask = &self.mask;
        for (w, &m) in self.weight.data_mut().iter_mut().zip(mask) {
            if !m {
                *w = 0.0;
            }
        }
    }
}

/// Tape handles of one forward pass.
pub struct Forward {
    pub logits: Var,
    /// `(weight, bias)` leaves per layer, in layer order.
    pub params: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    input_dim: usize,
    class_count: usize,
}

/// Builds an MLP with ReLU hidden layers and a linear head.
///
/// Weights are drawn from the Kaiming uniform distribution
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases start at zero and masks at one.
pub fn build_mlp(input_dim: usize, hidden_dims: &[usize], class_count: usize, seed: u64) -> Result<MlpModel> {
    if input_dim == 0 || class_count == 0 || hidden_dims.contains(&0) {
        return Err(Error::input(format!(
            "layer widths must be positive: input {input_dim}, hidden {hidden_dims:?}, classes {class_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_dims);
    dims.push(class_count);
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(idx, pair)| {
            let (fan_in, out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            let activation = if idx == last { Activation::None } else { Activation::Relu };
            DenseLayer::new(
                Tensor::from_parts(vec![out, fan_in], w),
                Tensor::zeros(&[out]),
                vec![true; out * fan_in],
                activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpModel {
        layers,
        input_dim,
        class_count,
    })
}

/// All prunable weight entries, ordered by layer index then row-major.
/// Biases are not included.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunableView {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Start offset of each layer in `values`, plus the total length.
    pub offsets: Vec<usize>,
}

impl PrunableView {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_of(&self, flat: usize) -> usize {
        self.offsets.partition_point(|&o| o <= flat) - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl MlpModel {
    /// Chains pre-built layers; the last layer must have no activation.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::input("model needs at least one layer"))?;
        let input_dim = first.in_dim();
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "from_layers",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        let head = layers.last().expect("non-empty");
        if head.activation != Activation::None {
            return Err(Error::input("final layer must emit raw logits"));
        }
        let class_count = head.out_dim();
        Ok(MlpModel {
            layers,
            input_dim,
            class_count,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Widths from input to output, e.g. `[784, 300, 100, 10]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    /// Weights plus biases, counting masked entries.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn surviving_weights(&self) -> usize {
        self.layers.iter().map(DenseLayer::surviving).sum()
    }

    /// Records the forward pass on `tape`, registering every weight and bias
    /// as a trainable leaf.
    pub fn forward(&self, tape: &mut Tape, batch: Var) -> Result<Forward> {
        let (_, width) = tape.value(batch).dims2()?;
        if width != self.input_dim {
            return Err(Error::Shape {
                op: "forward",
                lhs: tape.value(batch).shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let mut h = batch;
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            h = tape.masked_linear(h, w, b, &layer.mask)?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
            params.push((w, b));
        }
        Ok(Forward { logits: h, params })
    }

    /// Inference-mode logits for a batch×input_dim matrix.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let (rows, width) = batch.dims2()?;
        if width != self.input_dim {
            return Err(Error::Shape {
                op: "predict",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let mut h = batch.data().to_vec();
        let mut cur = width;
        for layer in &self.layers {
            let out = layer.out_dim();
            h = kernels::masked_linear_forward(
                &h,
                rows,
                cur,
                layer.weight.data(),
                &layer.mask,
                layer.bias.data(),
                out,
            );
            if layer.activation == Activation::Relu {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "predict" });
        }
        Ok(Tensor::from_parts(vec![rows, cur], h))
    }

    pub fn flatten_prunable(&self) -> PrunableView {
        let mut values = Vec::with_capacity(self.weight_count());
        let mut mask = Vec::with_capacity(self.weight_count());
        let mut offsets = vec![0];
        for layer in &self.layers {
            values.extend_from_slice(layer.weight.data());
            mask.extend_from_slice(&layer.mask);
            offsets.push(values.len());
        }
        PrunableView { values, mask, offsets }
    }

    /// Writes weights and masks back from a view produced by
    /// [`flatten_prunable`](Self::flatten_prunable).
    pub fn write_back(&mut self, view: &PrunableView) -> Result<()> {
        if view.values.len() != self.weight_count() || view.mask.len() != view.values.len() {
            return Err(Error::input(format!(
                "view holds {} entries, model has {} weights",
                view.values.len(),
                self.weight_count()
            )));
        }
        if view.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "write_back" });
        }
        let mut start = 0;
        for layer in &mut self.layers {
            let n = layer.weight.len();
            layer.weight.data_mut().copy_from_slice(&view.values[start..start + n]);
            layer.mask.copy_from_slice(&view.mask[start..start + n]);
            start += n;
        }
        Ok(())
    }

    /// Forces every masked weight to exactly zero.
    pub fn apply_masks(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::zero_masked);
    }

    /// Equal-width histogram of surviving weights over `[min, max]`.
    pub fn weight_histogram(&self, bin_count: usize) -> Result<Histogram> {
        if bin_count < 2 {
            return Err(Error::input(format!("need at least 2 bins, got {bin_count}")));
        }
        let survivors: Vec<f64> = self
            .layers
            .iter()
            .flat_map(|l| l.weight.data().iter().zip(&l.mask).filter(|(_, &m)| m).map(|(&w, _)| w))
            .collect();
        if survivors.is_empty() {
            return Err(Error::EmptyHistogram);
        }
        let min = survivors.iter().copied().fold(f64::INFINITY, f64::min);
        let max = survivors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0usize; bin_count];
        let width = (max - min) / bin_count as f64;
        for &w in &survivors {
            let bin = if width > 0.0 {
                (((w - min) / width) as usize).min(bin_count - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        let n = survivors.len() as f64;
        let mean = survivors.iter().sum::<f64>() / n;
        let variance = survivors.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        Ok(Histogram {
            min,
            max,
            counts,
            mean,
            variance,
        })
    }
}
