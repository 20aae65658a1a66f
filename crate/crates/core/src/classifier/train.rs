use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Layer, MlpModel};
use super::{xor_features, XorFeature, DEFAULT_HIDDEN};
use crate::embedding::{BitVector, Embeddings, ImageId};
use crate::error::{Error, Result};
use crate::labels::LabeledPair;
use crate::scalar::Scalar;

/// Mini-batch Adam on binary cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of pairs held out for choosing the decision threshold.
    pub validation_fraction: f64,
    /// The threshold maximizes validation precision subject to this recall floor.
    pub min_recall: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: DEFAULT_HIDDEN.to_vec(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            epochs: 4,
            seed: 42,
            validation_fraction: 0.1,
            min_recall: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Training("optimizer hyperparameters must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Training("Adam betas must be below 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Training("batch size and epochs must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Training("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Training("validation fraction must be in [0,1)".into()));
        }
        if !(self.min_recall > 0.0 && self.min_recall <= 1.0) {
            return Err(Error::Training("min_recall must be in (0,1]".into()));
        }
        Ok(())
    }
}

pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    step: i32,
    m: Vec<Layer<T>>,
    v: Vec<Layer<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &MlpModel<T>, config: &TrainConfig) -> Self {
        let zeros = || -> Vec<Layer<T>> {
            model
                .layers()
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect()
        };
        Adam {
            lr: T::of(config.learning_rate),
            beta1: T::of(config.beta1),
            beta2: T::of(config.beta2),
            epsilon: T::of(config.epsilon),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.epsilon);
        let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Picks the score threshold (predict positive iff `score >= t`) with the highest
/// precision among those reaching `min_recall`; ties go to the higher recall.
/// Returns `None` without both classes.
pub fn choose_threshold(scores: &[f64], labels: &[bool], min_recall: f64) -> Option<ThresholdChoice> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut best: Option<ThresholdChoice> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        if recall + 1e-12 < min_recall {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if best.is_none_or(|b| precision >= b.precision) {
            best = Some(ThresholdChoice {
                threshold: s,
                precision,
                recall,
            });
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub model: MlpModel<T>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<T>,
    pub threshold: Option<ThresholdChoice>,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

fn feature_batch<T: Scalar>(features: &[&BitVector], d: usize) -> Array2<T> {
    let mut x = Array2::zeros((features.len(), d));
    for (r, bits) in features.iter().enumerate() {
        for i in bits.ones() {
            x[[r, i]] = T::one();
        }
    }
    x
}

const MIN_THRESHOLD: f64 = 1e-6;

/// Trains a fresh network on labeled pairs; fully determined by `config.seed`.
pub fn train<T: Scalar>(
    pairs: &[LabeledPair],
    embeddings: &Embeddings,
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Training("no training pairs".into()));
    }
    let d = embeddings.dim();
    let features: Vec<(BitVector, bool)> = pairs
        .iter()
        .map(|p| {
            let a = embeddings.require(p.id_a)?;
            let b = embeddings.require(p.id_b)?;
            Ok((xor_features(a, b)?.bits, p.label))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (features.len() as f64 * config.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = if train_idx.is_empty() { val_idx } else { train_idx };
    let mut train_idx = train_idx.to_vec();

    let mut model = MlpModel::<T>::init(d, &config.hidden, config.seed)?;
    let mut adam = Adam::new(&model, config);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = T::zero();
        for batch in train_idx.chunks(config.batch_size) {
            let bits: Vec<&BitVector> = batch.iter().map(|&i| &features[i].0).collect();
            let x = feature_batch::<T>(&bits, d);
            let y: Vec<T> = batch
                .iter()
                .map(|&i| if features[i].1 { T::one() } else { T::zero() })
                .collect();
            let (loss, grads) = model.loss_and_gradients(x.view(), &y);
            adam.step(&mut model, &grads);
            total += loss * T::of(batch.len() as f64);
        }
        let mean = total / T::of(train_idx.len() as f64);
        log::debug!("epoch {epoch}: loss {mean}");
        epoch_losses.push(mean);
    }

    let pick = |idx: &[usize]| -> Result<Option<ThresholdChoice>> {
        let scores = idx
            .par_iter()
            .map(|&i| {
                let f = XorFeature { bits: features[i].0.clone() };
                model.forward(&f).map(|s| s.to_f64_lossy())
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = idx.iter().map(|&i| features[i].1).collect();
        Ok(choose_threshold(&scores, &labels, config.min_recall))
    };
    let mut threshold = pick(val_idx)?;
    if threshold.is_none() {
        threshold = pick(&train_idx)?;
    }
    if let Some(choice) = &threshold {
        let t = choice.threshold.clamp(MIN_THRESHOLD, 1.0 - MIN_THRESHOLD);
        model.set_threshold(T::of(t))?;
    }
    Ok(TrainReport {
        model,
        epoch_losses,
        threshold,
        train_pairs: train_idx.len(),
        validation_pairs: val_idx.len(),
    })
}

/// Scores pairs in order: `forward(xor_features(a, b))`.
pub fn predict_pairs<T: Scalar>(
    model: &MlpModel<T>,
    pairs: &[(ImageId, ImageId)],
    embeddings: &Embeddings,
) -> Result<Vec<T>> {
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let f = xor_features(embeddings.require(a)?, embeddings.require(b)?)?;
            model.forward(&f)
        })
        .collect()
}
