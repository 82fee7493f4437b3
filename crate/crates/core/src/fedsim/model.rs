//! Model parameters and the two desk-scale classifiers.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use super::data::DatasetShard;
use super::rng::{stream, Purpose};
use crate::error::{domain, Error, Result};

/// A flat parameter (or update) vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return domain("model vectors need at least one coordinate");
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model vector coordinate".into()));
        }
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelVector) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: other.dim() });
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }
}

/// A differentiable training objective over a data shard.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Mean loss over `batch`; overwrites `grad` with its gradient.
    fn loss_grad(&self, params: &[f64], data: &DatasetShard, batch: &[usize], grad: &mut [f64]) -> Result<f64>;

    /// Fraction of `data` classified correctly.
    fn accuracy(&self, params: &[f64], data: &DatasetShard) -> f64;

    fn init(&self, _seed: u64) -> ModelVector {
        ModelVector::zeros(self.dim())
    }

    fn loss(&self, params: &[f64], data: &DatasetShard, batch: &[usize]) -> Result<f64> {
        let mut scratch = vec![0.0; self.dim()];
        self.loss_grad(params, data, batch, &mut scratch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Softmax classifiers. Parameters are laid out layer by layer, each weight
/// matrix row-major (`out × in`) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Logistic { n_features: usize, num_classes: usize },
    Mlp { n_features: usize, hidden: usize, num_classes: usize, activation: Activation },
}

fn log_softmax_grad(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    for z in logits.iter_mut() {
        *z = (*z - lse).exp();
    }
    logits[label] -= 1.0;
    loss
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins, so all-zero logits predict class 0.
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Model {
    pub fn logistic(n_features: usize, num_classes: usize) -> Result<Self> {
        if n_features == 0 || num_classes < 2 {
            return domain("logistic regression needs features and at least two classes");
        }
        Ok(Self::Logistic { n_features, num_classes })
    }

    pub fn mlp(n_features: usize, hidden: usize, num_classes: usize, activation: Activation) -> Result<Self> {
        if n_features == 0 || hidden == 0 || num_classes < 2 {
            return domain("MLP needs features, hidden units and at least two classes");
        }
        Ok(Self::Mlp { n_features, hidden, num_classes, activation })
    }

    pub fn n_features(&self) -> usize {
        match *self {
            Self::Logistic { n_features, .. } | Self::Mlp { n_features, .. } => n_features,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Self::Logistic { num_classes, .. } | Self::Mlp { num_classes, .. } => num_classes,
        }
    }

    /// Logistic regression starts at zero; the MLP draws Glorot-uniform
    /// weights with zero biases.
    fn init_params(&self, seed: u64) -> ModelVector {
        let mut params = vec![0.0; self.dim()];
        if let Self::Mlp { n_features, hidden, num_classes, .. } = *self {
            let mut rng = stream(seed, Purpose::Init, 0, 0, 0);
            let (w1, rest) = params.split_at_mut(hidden * n_features);
            let w2 = &mut rest[hidden..hidden + num_classes * hidden];
            for (w, fan_in, fan_out) in [(w1, n_features, hidden), (w2, hidden, num_classes)] {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                w.iter_mut().for_each(|v| *v = rng.sample(dist));
            }
        }
        ModelVector(params)
    }

    fn check(&self, params: &[f64], data: &DatasetShard) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: params.len() });
        }
        if data.n_features() != self.n_features() {
            return Err(Error::Dimension { expected: self.n_features(), got: data.n_features() });
        }
        if data.num_classes() > self.num_classes() {
            return Err(Error::Dimension { expected: self.num_classes(), got: data.num_classes() });
        }
        Ok(())
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Self::Logistic { n_features, num_classes } => {
                let (w, b) = params.split_at(n_features * num_classes);
                let mut z = vec![0.0; num_classes];
                affine(w, b, x, &mut z);
                z
            }
            Self::Mlp { n_features, hidden, num_classes, activation } => {
                let (w1, rest) = params.split_at(hidden * n_features);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(num_classes * hidden);
                let mut h = vec![0.0; hidden];
                affine(w1, b1, x, &mut h);
                h.iter_mut().for_each(|v| *v = activation.apply(*v));
                let mut z = vec![0.0; num_classes];
                affine(w2, b2, &h, &mut z);
                z
            }
        }
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        argmax(&self.logits(params, x))
    }
}

impl Objective for Model {
    fn dim(&self) -> usize {
        match *self {
            Self::Logistic { n_features, num_classes } => (n_features + 1) * num_classes,
            Self::Mlp { n_features, hidden, num_classes, .. } => (n_features + 1) * hidden + (hidden + 1) * num_classes,
        }
    }

    fn loss_grad(&self, params: &[f64], data: &DatasetShard, batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        self.check(params, data)?;
        if batch.is_empty() {
            return domain("empty batch");
        }
        grad.fill(0.0);
        let mut total = 0.0;
        match *self {
            Self::Logistic { n_features, num_classes } => {
                let (gw, gb) = grad.split_at_mut(n_features * num_classes);
                for &i in batch {
                    let x = data.row(i);
                    let mut z = self.logits(params, x);
                    total += log_softmax_grad(&mut z, data.label(i));
                    for (k, &gz) in z.iter().enumerate() {
                        gb[k] += gz;
                        for (g, &xj) in gw[k * n_features..(k + 1) * n_features].iter_mut().zip(x) {
                            *g += gz * xj;
                        }
                    }
                }
            }
            Self::Mlp { n_features, hidden, num_classes, activation } => {
                let (w1, rest) = params.split_at(hidden * n_features);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(num_classes * hidden);
                let (gw1, grest) = grad.split_at_mut(hidden * n_features);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gw2, gb2) = grest.split_at_mut(num_classes * hidden);
                let mut pre = vec![0.0; hidden];
                let mut h = vec![0.0; hidden];
                let mut z = vec![0.0; num_classes];
                let mut gh = vec![0.0; hidden];
                for &i in batch {
                    let x = data.row(i);
                    affine(w1, b1, x, &mut pre);
                    for (hv, &p) in h.iter_mut().zip(&pre) {
                        *hv = activation.apply(p);
                    }
                    affine(w2, b2, &h, &mut z);
                    total += log_softmax_grad(&mut z, data.label(i));
                    gh.fill(0.0);
                    for (k, &gz) in z.iter().enumerate() {
                        gb2[k] += gz;
                        let row = &w2[k * hidden..(k + 1) * hidden];
                        for (j, g) in gw2[k * hidden..(k + 1) * hidden].iter_mut().enumerate() {
                            *g += gz * h[j];
                            gh[j] += gz * row[j];
                        }
                    }
                    for j in 0..hidden {
                        let gp = gh[j] * activation.derivative(pre[j]);
                        gb1[j] += gp;
                        for (g, &xj) in gw1[j * n_features..(j + 1) * n_features].iter_mut().zip(x) {
                            *g += gp * xj;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let loss = total * inv;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss/gradient (loss = {loss})")));
        }
        Ok(loss)
    }

    fn init(&self, seed: u64) -> ModelVector {
        self.init_params(seed)
    }

    fn accuracy(&self, params: &[f64], data: &DatasetShard) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len()).filter(|&i| self.predict(params, data.row(i)) == data.label(i)).count();
        correct as f64 / data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::data::{gaussian_blobs, BlobSpec};

    #[test]
    fn dimensions() {
        assert_eq!(Model::logistic(32, 10).unwrap().dim(), 330);
        assert_eq!(Model::mlp(4, 3, 2, Activation::Tanh).unwrap().dim(), 15 + 8);
        assert!(Model::logistic(3, 1).is_err());
    }

    #[test]
    fn zero_weights_score_one_over_k() {
        let spec = BlobSpec { n_examples: 1000, n_features: 5, num_classes: 10, center_scale: 1.0, noise_scale: 1.0 };
        let data = gaussian_blobs(&spec, 0).unwrap();
        let model = Model::logistic(5, 10).unwrap();
        assert!((model.accuracy(model.init(0).as_slice(), &data) - 0.1).abs() < 1e-12);
        let all: Vec<usize> = (0..data.len()).collect();
        let loss = model.loss(model.init(0).as_slice(), &data, &all).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let data = DatasetShard::new(vec![1.0, 2.0], 2, vec![0], 2).unwrap();
        let model = Model::logistic(3, 2).unwrap();
        let mut g = vec![0.0; model.dim()];
        assert!(model.loss_grad(&vec![0.0; model.dim()], &data, &[0], &mut g).is_err());
    }

    #[test]
    fn model_vector_ops() {
        let mut a = ModelVector::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.norm(), 5.0);
        a.add_scaled(2.0, &ModelVector::from_vec(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(a.as_slice(), &[5.0, 2.0]);
        assert!(a.add_scaled(1.0, &ModelVector::zeros(3)).is_err());
        assert!(ModelVector::from_vec(vec![f64::INFINITY]).is_err());
    }
}
