//! One-hidden-layer softmax classifier trained by minibatch SGD.
//!
//! The network is `softmax(W2 · relu(W1 · x + b1) + b2)`. The output layer
//! has its own learning rate (`base_lr × output_lr_multiplier`), and the
//! hidden activation is exposed for embedding diagnostics.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "leakaudit-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub base_lr: f64,
    pub output_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl HyperParams {
    /// 1e-4 on the hidden layer, 2e-4 on the output layer, 12 epochs, batches of 64.
    pub fn paper_preset() -> Self {
        Self {
            base_lr: 1e-4,
            output_lr_multiplier: 2.0,
            epochs: 12,
            batch_size: 64,
            seed: 0,
        }
    }

    /// Settings under which the small network converges from scratch on
    /// desk-scale corpora. Keeps the 2× output-layer ratio.
    pub fn desk_preset() -> Self {
        Self {
            base_lr: 0.02,
            output_lr_multiplier: 2.0,
            epochs: 12,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn output_lr(&self) -> f64 {
        self.base_lr * self.output_lr_multiplier
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::paper_preset()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// hidden_dim × input_dim, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// n_classes × hidden_dim, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients with the same layout as [`Model`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros(m: &Model) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn clear(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

struct Forward {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || n_classes == 0 {
            return Err(Error::Input(format!(
                "model dims must be >= 1 (got {input_dim}, {hidden_dim}, {n_classes})"
            )));
        }
        let mut rng = seed::rng(seed::derive(seed, "model-init", 0));
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                .collect::<Vec<_>>()
        };
        let w1 = glorot(input_dim, hidden_dim);
        let w2 = glorot(hidden_dim, n_classes);
        Ok(Self {
            input_dim,
            hidden_dim,
            n_classes,
            seed,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; n_classes],
        })
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Input(format!(
                "feature length {} does not match input_dim {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("features contain non-finite values".into()));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let pre: Vec<f64> = (0..self.hidden_dim)
            .map(|h| self.b1[h] + dot(&self.w1[h * self.input_dim..(h + 1) * self.input_dim], x))
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let logits = (0..self.n_classes)
            .map(|c| self.b2[c] + dot(&self.w2[c * self.hidden_dim..(c + 1) * self.hidden_dim], &hidden))
            .collect();
        Forward {
            pre,
            hidden,
            logits,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x).logits)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Hidden-layer activation `relu(W1 · x + b1)`.
    pub fn hidden_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x).hidden)
    }

    /// Accumulate the gradient of the cross-entropy of one example into `g`
    /// (unscaled) and return that example's loss.
    fn backprop(&self, x: &[f64], label: usize, g: &mut Gradients) -> f64 {
        let f = self.forward(x);
        let loss = log_sum_exp(&f.logits) - f.logits[label];
        let mut dlogits = softmax(&f.logits);
        dlogits[label] -= 1.0;

        let mut dhidden = vec![0.0; self.hidden_dim];
        for (c, &d) in dlogits.iter().enumerate() {
            g.b2[c] += d;
            let row = c * self.hidden_dim..(c + 1) * self.hidden_dim;
            axpy(d, &f.hidden, &mut g.w2[row.clone()]);
            axpy(d, &self.w2[row], &mut dhidden);
        }
        for h in 0..self.hidden_dim {
            if f.pre[h] <= 0.0 {
                continue;
            }
            let d = dhidden[h];
            g.b1[h] += d;
            axpy(d, x, &mut g.w1[h * self.input_dim..(h + 1) * self.input_dim]);
        }
        loss
    }

    /// Mean cross-entropy and its gradient over a batch.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], labels: &[usize]) -> (f64, Gradients) {
        let mut g = Gradients::zeros(self);
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            loss += self.backprop(x, y, &mut g);
        }
        let inv = 1.0 / xs.len() as f64;
        for v in [&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2] {
            v.iter_mut().for_each(|e| *e *= inv);
        }
        (loss * inv, g)
    }

    pub fn loss(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let l = self.forward(x).logits;
                log_sum_exp(&l) - l[y]
            })
            .sum();
        total / xs.len() as f64
    }

    /// One SGD step on a batch with the given gradient.
    pub fn apply_gradients(&mut self, g: &Gradients, hidden_lr: f64, output_lr: f64) {
        axpy(-hidden_lr, &g.w1, &mut self.w1);
        axpy(-hidden_lr, &g.b1, &mut self.b1);
        axpy(-output_lr, &g.w2, &mut self.w2);
        axpy(-output_lr, &g.b2, &mut self.b2);
    }

    /// Minibatch SGD on mean cross-entropy with a seeded per-epoch shuffle.
    pub fn train(&mut self, xs: &[Vec<f64>], labels: &[usize], hp: &HyperParams) -> Result<TrainReport> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::Input(format!(
                "need a non-empty feature set with one label per row ({} rows, {} labels)",
                xs.len(),
                labels.len()
            )));
        }
        if hp.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for x in xs {
            self.check_input(x)?;
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {})",
                self.n_classes
            )));
        }

        let mut rng = seed::rng(seed::derive(hp.seed, "shuffle", 0));
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut g = Gradients::zeros(self);
        let mut trace = Vec::with_capacity(hp.epochs);
        for epoch in 0..hp.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(hp.batch_size) {
                g.clear();
                let mut batch_loss = 0.0;
                for &i in batch {
                    batch_loss += self.backprop(&xs[i], labels[i], &mut g);
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                epoch_loss += batch_loss;
                let scale = 1.0 / batch.len() as f64;
                self.apply_gradients(&g, hp.base_lr * scale, hp.output_lr() * scale);
            }
            let mean = epoch_loss / xs.len() as f64;
            if !mean.is_finite() || self.w2.iter().any(|w| !w.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            trace.push(mean);
        }
        Ok(TrainReport { loss_trace: trace })
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| crate::metrics::argmax(&self.forward(x).logits) == y)
            .count();
        hits as f64 / xs.len().max(1) as f64
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        if idx < a {
            &mut self.w1[idx]
        } else if idx < a + b {
            &mut self.b1[idx - a]
        } else if idx < a + b + c {
            &mut self.w2[idx - a - b]
        } else {
            &mut self.b2[idx - a - b - c]
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&raw)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                row: 0,
                msg: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        let m = ck.model;
        if m.w1.len() != m.input_dim * m.hidden_dim
            || m.b1.len() != m.hidden_dim
            || m.w2.len() != m.hidden_dim * m.n_classes
            || m.b2.len() != m.n_classes
        {
            return Err(Error::Format {
                row: 0,
                msg: "checkpoint parameter shapes do not match its dims".into(),
            });
        }
        Ok(m)
    }
}

impl Gradients {
    fn get(&self, idx: usize) -> f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        if idx < a {
            self.w1[idx]
        } else if idx < a + b {
            self.b1[idx - a]
        } else if idx < a + b + c {
            self.w2[idx - a - b]
        } else {
            self.b2[idx - a - b - c]
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: Model,
}

/// Gradients whose magnitude falls below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Maximum relative error between the analytic gradient and central finite
/// differences, `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
///
/// Every parameter is checked for models with at most 2000 parameters;
/// larger models check a seeded random subset of 200.
pub fn grad_check(model: &Model, xs: &[Vec<f64>], labels: &[usize], eps: f64, seed: u64) -> f64 {
    let (_, analytic) = model.loss_and_gradient(xs, labels);
    let n = model.n_params();
    let indices: Vec<usize> = if n <= 2000 {
        (0..n).collect()
    } else {
        let mut rng = seed::rng(seed::derive(seed, "grad-check", 0));
        let mut v = rand::seq::index::sample(&mut rng, n, 200).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for idx in indices {
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + eps;
        let up = probe.loss(xs, labels);
        *probe.param_mut(idx) = orig - eps;
        let down = probe.loss(xs, labels);
        *probe.param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(idx);
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
