//! One-hidden-layer ReLU network with a sigmoid output, trained by Adam on
//! cross-entropy.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{probability, sigmoid, softplus, Dataset, Scorer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 20,
            batch: 256,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let (d, n) = (data.dim(), data.len().max(1) as f64);
        let mut mean = vec![0.0; d];
        for row in data.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - self.mean[i]) * self.scale[i];
        }
    }
}

/// Weights are flat: hidden-by-input matrix, hidden biases, output weights,
/// output bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub dimension: usize,
    pub hidden: usize,
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
}

impl MlpModel {
    pub fn zeros(dimension: usize, hidden: usize) -> Self {
        Self {
            dimension,
            hidden,
            weights: vec![0.0; Self::param_count(dimension, hidden)],
            standardizer: Standardizer::identity(dimension),
        }
    }

    pub fn param_count(dimension: usize, hidden: usize) -> usize {
        hidden * dimension + 2 * hidden + 1
    }

    pub fn output_bias_mut(&mut self) -> &mut f64 {
        self.weights.last_mut().expect("at least the output bias")
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.dimension;
        (w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    /// Output logit for an already standardized input; fills `hidden`.
    fn forward(&self, z: &[f64], hidden: &mut [f64]) -> f64 {
        let (b1, w2, b2) = self.offsets();
        let mut out = self.weights[b2];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.weights[j * self.dimension..(j + 1) * self.dimension];
            let pre = self.weights[b1 + j] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
            *h = pre.max(0.0);
            out += self.weights[w2 + j] * *h;
        }
        out
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.dimension];
        self.standardizer.apply(x, &mut z);
        let mut h = vec![0.0; self.hidden];
        self.forward(&z, &mut h)
    }

    /// Mean cross-entropy over `rows` of `data` and its gradient.
    pub fn loss_and_gradient(&self, data: &Dataset, rows: &[usize]) -> (f64, Vec<f64>) {
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.weights.len()];
        let mut z = vec![0.0; self.dimension];
        let mut h = vec![0.0; self.hidden];
        let mut loss = 0.0;
        let inv = 1.0 / rows.len().max(1) as f64;
        for &r in rows {
            self.standardizer.apply(data.row(r), &mut z);
            let out = self.forward(&z, &mut h);
            let y = data.targets()[r];
            loss += softplus(out) - y * out;
            let d_out = (sigmoid(out) - y) * inv;
            grad[b2] += d_out;
            for j in 0..self.hidden {
                grad[w2 + j] += d_out * h[j];
                if h[j] > 0.0 {
                    let d_pre = d_out * self.weights[w2 + j];
                    grad[b1 + j] += d_pre;
                    let g = &mut grad[j * self.dimension..(j + 1) * self.dimension];
                    for (gi, xi) in g.iter_mut().zip(&z) {
                        *gi += d_pre * xi;
                    }
                }
            }
        }
        (loss * inv, grad)
    }
}

impl Scorer for MlpModel {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        probability(self.logit(features))
    }
}

/// Seeded He-normal hidden weights and zero biases.
pub fn init_mlp(data: &Dataset, params: &MlpParams) -> MlpModel {
    let (d, h) = (data.dim(), params.hidden);
    let mut model = MlpModel::zeros(d, h);
    model.standardizer = Standardizer::fit(data);
    let mut rng = StageRng::seed_from_u64(derive_seed(params.seed, "mlp-init"));
    let hidden_init = Normal::new(0.0, (2.0 / d.max(1) as f64).sqrt()).expect("finite std");
    let out_init = Normal::new(0.0, (1.0 / h.max(1) as f64).sqrt()).expect("finite std");
    let (b1, w2, _) = model.offsets();
    for w in &mut model.weights[..b1] {
        *w = hidden_init.sample(&mut rng);
    }
    for w in &mut model.weights[w2..w2 + h] {
        *w = out_init.sample(&mut rng);
    }
    model
}

pub fn train_mlp(data: &Dataset, params: &MlpParams) -> Result<MlpModel> {
    data.check_binary()?;
    if params.hidden == 0 || params.batch == 0 {
        return Err(Error::ConfigInvalid("mlp hidden and batch must be positive".into()));
    }
    let mut model = init_mlp(data, params);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; model.weights.len()];
    let mut v = vec![0.0; model.weights.len()];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = StageRng::seed_from_u64(derive_seed(params.seed, "mlp-batches"));
    let mut last = f64::NAN;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch) {
            let (loss, grad) = model.loss_and_gradient(data, batch);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
            for (i, g) in grad.into_iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                model.weights[i] -= params.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        last = epoch_loss / data.len() as f64;
    }
    info!("mlp: {} epochs, final loss {last:.5}", params.epochs);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = StageRng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = if i % 2 == 0 { 1.5 } else { -1.5 };
            x.push(c + rng.random_range(-1.0..1.0));
            x.push(-c + rng.random_range(-1.0..1.0));
            y.push(f64::from(u8::from(i % 2 == 0)));
        }
        Dataset::new(x, 2, y).unwrap()
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut m = MlpModel::zeros(3, 4);
        *m.output_bias_mut() = 0.7;
        let s = m.score(&[1.0, -2.0, 9.0]).unwrap();
        assert!((s - 1.0 / (1.0 + (-0.7f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn separates_blobs() {
        let model = train_mlp(
            &blobs(400, 1),
            &MlpParams {
                batch: 32,
                ..Default::default()
            },
        )
        .unwrap();
        let test = blobs(200, 2);
        let correct = test
            .rows()
            .zip(test.targets())
            .filter(|(x, &y)| (model.score_unchecked(x) > 0.5) == (y > 0.5))
            .count();
        assert!(correct as f64 / 200.0 >= 0.95, "{correct}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = blobs(40, 3);
        let params = MlpParams {
            hidden: 8,
            ..Default::default()
        };
        let model = init_mlp(&data, &params);
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = model.loss_and_gradient(&data, &rows);
        let mut rng = StageRng::seed_from_u64(5);
        let step = 1e-5;
        for _ in 0..10 {
            let i = rng.random_range(0..model.weights.len());
            let mut plus = model.clone();
            plus.weights[i] += step;
            let mut minus = model.clone();
            minus.weights[i] -= step;
            let fd = (plus.loss_and_gradient(&data, &rows).0 - minus.loss_and_gradient(&data, &rows).0) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = blobs(100, 6);
        let p = MlpParams {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(train_mlp(&data, &p).unwrap(), train_mlp(&data, &p).unwrap());
    }
}
