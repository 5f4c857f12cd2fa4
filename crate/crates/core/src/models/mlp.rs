//! Fully connected network with equal-width tanh hidden layers and one linear output.
//!
//! The same network backs the binary classifier (logistic loss on the output
//! logit) and the survival-time regressor (weighted mean squared error
//! against observed time).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    /// `mean(log(1 + e^z) - y z)` with y in {0, 1}.
    Logistic,
    /// `mean(w_i (t_i - z_i)^2)`.
    WeightedSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out × in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Glorot-uniform initialisation, zero biases.
    pub fn new(n_inputs: usize, n_hidden_layers: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x4d4c50]);
        let mut sizes = vec![n_inputs];
        sizes.extend(std::iter::repeat_n(width, n_hidden_layers));
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|s| {
                let (fan_in, fan_out) = (s[0], s[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    /// Activations of every layer; the last is the n × 1 output.
    fn forward_all(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t()) + &layer.b;
            if li + 1 < self.layers.len() {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z.clone());
            a = z;
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        self.forward_all(x)
            .pop()
            .expect("at least one layer")
            .column(0)
            .to_vec()
    }

    pub fn loss(&self, x: ArrayView2<'_, f64>, targets: &[f64], weights: &[f64], loss: Loss) -> f64 {
        let out = self.forward(x);
        let n = targets.len() as f64;
        match loss {
            Loss::Logistic => {
                out.iter()
                    .zip(targets)
                    .map(|(&z, &y)| log1p_exp(z) - y * z)
                    .sum::<f64>()
                    / n
            }
            Loss::WeightedSquared => {
                out.iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| w * (t - z) * (t - z))
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Loss and its gradient with respect to every parameter, by backpropagation.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f64>, targets: &[f64], weights: &[f64], loss: Loss) -> (f64, Mlp) {
        let acts = self.forward_all(x);
        let n = targets.len() as f64;
        let out = acts.last().expect("output layer").column(0);
        let (value, delta_out): (f64, Vec<f64>) = match loss {
            Loss::Logistic => (
                out.iter()
                    .zip(targets)
                    .map(|(&z, &y)| log1p_exp(z) - y * z)
                    .sum::<f64>()
                    / n,
                out.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) / n).collect(),
            ),
            Loss::WeightedSquared => (
                out.iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| w * (t - z) * (t - z))
                    .sum::<f64>()
                    / n,
                out.iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| -2.0 * w * (t - z) / n)
                    .collect(),
            ),
        };
        let mut grad = self.zeros_like();
        let mut delta = Array2::from_shape_vec((targets.len(), 1), delta_out).expect("n x 1");
        for li in (0..self.layers.len()).rev() {
            let input = if li == 0 { x.to_owned() } else { acts[li - 1].clone() };
            grad.layers[li].w = delta.t().dot(&input);
            grad.layers[li].b = delta.sum_axis(Axis(0));
            if li > 0 {
                let back = delta.dot(&self.layers[li].w);
                delta = back * acts[li - 1].mapv(|a| 1.0 - a * a);
            }
        }
        (value, grad)
    }

    /// Adam on shuffled mini-batches. Returns the full-data loss before
    /// training and after each epoch.
    pub fn train(
        &mut self,
        x: ArrayView2<'_, f64>,
        targets: &[f64],
        weights: &[f64],
        loss: Loss,
        params: TrainParams,
        seed: u64,
    ) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let np = self.n_params();
        let mut m = vec![0.0; np];
        let mut v = vec![0.0; np];
        let mut step = 0i32;
        let n = targets.len();
        let batch = params.batch_size.clamp(1, n.max(1));
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = vec![self.loss(x, targets, weights, loss)];
        for epoch in 0..params.epochs {
            let mut rng = rng_for(seed, &[0x45504f4348, epoch as u64]);
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let xb = x.select(Axis(0), chunk);
                let tb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let wb: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
                let (_, g) = self.loss_and_grad(xb.view(), &tb, &wb, loss);
                step += 1;
                let c1 = 1.0 - f64::powi(b1, step);
                let c2 = 1.0 - f64::powi(b2, step);
                for (k, (p, gk)) in self.params_mut().zip(g.params()).enumerate() {
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    *p -= params.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
            history.push(self.loss(x, targets, weights, loss));
        }
        history
    }
}

/// Largest relative difference between the backprop gradient and central
/// finite differences over every parameter. Relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as denominator so exact zeros compare cleanly.
pub fn max_gradient_error(net: &Mlp, x: ArrayView2<'_, f64>, targets: &[f64], weights: &[f64], loss: Loss) -> f64 {
    let (_, analytic) = net.loss_and_grad(x, targets, weights, loss);
    let analytic: Vec<f64> = analytic.params().copied().collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (k, a) in analytic.iter().enumerate() {
        let orig = *probe.params().nth(k).expect("param index");
        *probe.params_mut().nth(k).expect("param index") = orig + h;
        let up = probe.loss(x, targets, weights, loss);
        *probe.params_mut().nth(k).expect("param index") = orig - h;
        let down = probe.loss(x, targets, weights, loss);
        *probe.params_mut().nth(k).expect("param index") = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
