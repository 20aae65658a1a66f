use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::XorFeature;
use crate::embedding::BinaryEmbedding;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::scorer::PairScorer;

/// Fully connected layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// ReLU hidden layers and a one-unit sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    layers: Vec<Layer<T>>,
    threshold: T,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> MlpModel<T> {
    pub fn from_layers(layers: Vec<Layer<T>>, threshold: T) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Model(format!("layer {i}: bias length mismatch")));
            }
            if l.inputs() == 0 || l.outputs() == 0 {
                return Err(Error::Model(format!("layer {i}: empty shape")));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Model(format!(
                    "layer {i} expects {} inputs but previous layer has {} outputs",
                    l.inputs(),
                    layers[i - 1].outputs()
                )));
            }
        }
        if layers.last().unwrap().outputs() != 1 {
            return Err(Error::Model("output layer must have one unit".into()));
        }
        if !(threshold > T::zero() && threshold < T::one()) {
            return Err(Error::Model(format!("threshold {threshold} outside (0,1)")));
        }
        Ok(MlpModel { layers, threshold })
    }

    /// He-uniform weights (limit `sqrt(6 / fan_in)`) and zero biases, seeded.
    pub fn init(input: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in.max(1) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    T::of(rng.gen_range(-limit..limit))
                });
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers, T::of(0.5))
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self::from_layers(layers, T::of(0.5))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: T) -> Result<()> {
        if !(t > T::zero() && t < T::one()) {
            return Err(Error::Model(format!("threshold {t} outside (0,1)")));
        }
        self.threshold = t;
        Ok(())
    }

    /// Score of one XOR feature. The first layer sums the weight columns of set
    /// bits, which is exact for `{0,1}` inputs.
    pub fn forward(&self, feature: &XorFeature) -> Result<T> {
        if feature.dim() != self.input_dim() {
            return Err(Error::Model(format!(
                "feature width {} does not match input width {}",
                feature.dim(),
                self.input_dim()
            )));
        }
        let ones: Vec<usize> = feature.bits.ones().collect();
        let first = &self.layers[0];
        let mut act: Array1<T> = Array1::from_shape_fn(first.outputs(), |o| {
            let row = first.weights.row(o);
            ones.iter().fold(first.bias[o], |acc, &i| acc + row[i])
        });
        Ok(self.finish(&mut act))
    }

    /// Score of an arbitrary real input vector.
    pub fn forward_dense(&self, input: &[T]) -> Result<T> {
        if input.len() != self.input_dim() {
            return Err(Error::Model(format!(
                "input width {} does not match {}",
                input.len(),
                self.input_dim()
            )));
        }
        let x = Array1::from(input.to_vec());
        let first = &self.layers[0];
        let mut act = first.weights.dot(&x) + &first.bias;
        Ok(self.finish(&mut act))
    }

    /// Applies the activation of layer 0 to `act`, then runs the remaining layers.
    fn finish(&self, act: &mut Array1<T>) -> T {
        let last = self.layers.len() - 1;
        if last == 0 {
            return sigmoid(act[0]);
        }
        act.mapv_inplace(relu);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let mut z = layer.weights.dot(&*act) + &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            *act = z;
        }
        sigmoid(act[0])
    }

    /// Output logits for a batch (`rows × input`).
    pub fn logits(&self, x: ArrayView2<T>) -> Array1<T> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        a.column(0).to_owned()
    }

    /// Mean binary cross-entropy of the batch against labels in `{0,1}`.
    pub fn loss(&self, x: ArrayView2<T>, y: &[T]) -> T {
        let z = self.logits(x);
        bce_mean(&z, y)
    }

    /// Mean BCE and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, x: ArrayView2<T>, y: &[T]) -> (T, Gradients<T>) {
        let n = x.nrows();
        let last = self.layers.len() - 1;
        // activations[i] is the input to layer i
        let mut activations: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t());
            z += &layer.bias;
            let next = if i < last { z.mapv(relu) } else { z.clone() };
            activations.push(a);
            pre.push(z);
            a = next;
        }
        let logits = pre[last].column(0).to_owned();
        let loss = bce_mean(&logits, y);

        let inv_n = T::one() / T::of(n as f64);
        let mut delta = Array2::from_shape_fn((n, 1), |(r, _)| (sigmoid(logits[r]) - y[r]) * inv_n);
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weights = delta.t().dot(&activations[i]);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                Zip::from(&mut back)
                    .and(&pre[i - 1])
                    .for_each(|g, &z| {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    });
                delta = back;
            }
            grads.push(Layer { weights, bias });
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn bce_mean<T: Scalar>(logits: &Array1<T>, y: &[T]) -> T {
    let total = logits
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (&z, &t)| acc + softplus(z) - t * z);
    total / T::of(y.len().max(1) as f64)
}

impl<T: Scalar> PairScorer for MlpModel<T> {
    /// Panics if the embeddings do not match the model's input width.
    fn score(&self, a: &BinaryEmbedding, b: &BinaryEmbedding) -> f64 {
        let f = super::xor_features(a, b).expect("pair widths match");
        self.forward(&f).expect("feature width matches model").to_f64_lossy()
    }
}
