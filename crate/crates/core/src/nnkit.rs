//! One-hidden-layer ReLU softmax classifier with manual backpropagation.
//!
//! The hidden activation is the representation `f(x)` used by the memory
//! scorer and the diversity metric. `W2[c][e]` is the classifier weight that
//! connects hidden unit `e` to class `c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside `log`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    /// hidden_dim x input_dim, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// num_classes x hidden_dim, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Post-ReLU hidden activation.
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Training target: a class index or a distribution over classes.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub id: u64,
    pub x: &'a [f64],
    pub target: Target<'a>,
    pub weight: f64,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `-sum_c target[c] * ln(max(probs[c], eps))`. Supports soft targets.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_EPS).ln())
        .sum()
}

/// Hard-label cross-entropy, `-ln p[label]`.
pub fn cross_entropy_hard(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_EPS).ln()
}

/// Predictive uncertainty `1 - max_c p[c]`.
pub fn predictive_uncertainty(probs: &[f64]) -> f64 {
    let max = probs.iter().copied().fold(0.0, f64::max);
    (1.0 - max).max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

impl Model {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let b_in = 1.0 / (input_dim as f64).sqrt();
        let b_hid = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w1 = uniform(hidden_dim * input_dim, b_in);
        let b1 = uniform(hidden_dim, b_in);
        let w2 = uniform(num_classes * hidden_dim, b_hid);
        let b2 = uniform(num_classes, b_hid);
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; num_classes * hidden_dim],
            b2: vec![0.0; num_classes],
        }
    }

    /// Builds a model from explicit row-major parameter buffers.
    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let checks = [
            (w1.len(), hidden_dim * input_dim),
            (b1.len(), hidden_dim),
            (w2.len(), num_classes * hidden_dim),
            (b2.len(), num_classes),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::Dimension { expected, actual });
            }
        }
        let model = Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1,
            b1,
            w2,
            b2,
        };
        if !model.is_finite() {
            return Err(Error::Input("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Classifier weight from hidden unit `unit` to class `class`.
    pub fn fc_weight(&self, unit: usize, class: usize) -> f64 {
        self.w2[class * self.hidden_dim + unit]
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Parameter buffers in the order `w1, b1, w2, b2`.
    pub fn parameters(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn parameters_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardResult> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> ForwardResult {
        let representation: Vec<f64> = self
            .w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, &b)| (dot(row, x) + b).max(0.0))
            .collect();
        let logits: Vec<f64> = self
            .w2
            .chunks_exact(self.hidden_dim)
            .zip(&self.b2)
            .map(|(row, &b)| dot(row, &representation) + b)
            .collect();
        let probs = softmax(&logits);
        ForwardResult {
            representation,
            logits,
            probs,
        }
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.probs))
    }

    /// Loss of a single sample (unweighted).
    pub fn loss(&self, x: &[f64], target: Target<'_>) -> Result<f64> {
        let fwd = self.forward(x)?;
        self.check_target(target)?;
        Ok(target_loss(&fwd.probs, target))
    }

    fn check_target(&self, target: Target<'_>) -> Result<()> {
        match target {
            Target::Hard(c) if c >= self.num_classes => Err(Error::Input(format!(
                "label {c} out of range for {} classes",
                self.num_classes
            ))),
            Target::Soft(t) if t.len() != self.num_classes => Err(Error::Dimension {
                expected: self.num_classes,
                actual: t.len(),
            }),
            _ => Ok(()),
        }
    }

    /// Backpropagates `dlogits * scale` through the network into `grads`.
    pub fn backprop_logits(
        &self,
        x: &[f64],
        fwd: &ForwardResult,
        dlogits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) {
        let h = self.hidden_dim;
        let mut dhidden = vec![0.0; h];
        for (c, &dz) in dlogits.iter().enumerate() {
            let dz = dz * scale;
            if dz == 0.0 {
                continue;
            }
            grads.b2[c] += dz;
            let row = &self.w2[c * h..(c + 1) * h];
            let grow = &mut grads.w2[c * h..(c + 1) * h];
            for e in 0..h {
                grow[e] += dz * fwd.representation[e];
                dhidden[e] += dz * row[e];
            }
        }
        let d = self.input_dim;
        for e in 0..h {
            if fwd.representation[e] <= 0.0 || dhidden[e] == 0.0 {
                continue;
            }
            let da = dhidden[e];
            grads.b1[e] += da;
            for (g, &xi) in grads.w1[e * d..(e + 1) * d].iter_mut().zip(x) {
                *g += da * xi;
            }
        }
    }

    /// Backpropagates a gradient given with respect to the softmax output.
    pub fn backprop_probs(
        &self,
        x: &[f64],
        fwd: &ForwardResult,
        dprobs: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) {
        // Softmax Jacobian-vector product: p * (g - <p, g>).
        let inner = dot(&fwd.probs, dprobs);
        let dlogits: Vec<f64> = fwd
            .probs
            .iter()
            .zip(dprobs)
            .map(|(&p, &g)| p * (g - inner))
            .collect();
        self.backprop_logits(x, fwd, &dlogits, scale, grads);
    }

    /// Adds `scale * d loss / d theta` for one cross-entropy sample and
    /// returns the unscaled loss.
    pub fn accumulate_cross_entropy(
        &self,
        sample: &TrainSample<'_>,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        if sample.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { id: sample.id });
        }
        let fwd = self.forward(sample.x)?;
        self.check_target(sample.target)?;
        let loss = target_loss(&fwd.probs, sample.target);
        let mut dlogits = fwd.probs.clone();
        match sample.target {
            Target::Hard(c) => dlogits[c] -= 1.0,
            Target::Soft(t) => {
                let mass: f64 = t.iter().sum();
                for (g, &tc) in dlogits.iter_mut().zip(t) {
                    *g = *g * mass - tc;
                }
            }
        }
        if !loss.is_finite() || dlogits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { id: sample.id });
        }
        self.backprop_logits(sample.x, &fwd, &dlogits, scale, grads);
        Ok(loss)
    }

    /// `theta -= lr * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        let gs = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
        for (params, g) in self.parameters_mut().into_iter().zip(gs) {
            for (p, &gi) in params.iter_mut().zip(g.iter()) {
                *p -= lr * gi;
            }
        }
    }

    /// Gradient of the mean weighted cross-entropy over `batch`, together
    /// with that mean loss.
    pub fn batch_gradients(&self, batch: &[TrainSample<'_>]) -> Result<(Gradients, f64)> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let n = batch.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut total = 0.0;
        for sample in batch {
            let loss = self.accumulate_cross_entropy(sample, sample.weight / n, &mut grads)?;
            total += sample.weight * loss;
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { id: batch[0].id });
        }
        Ok((grads, total / n))
    }

    /// One SGD step on the mean weighted cross-entropy of `batch`.
    /// Returns the batch loss measured before the update.
    pub fn sgd_step(&mut self, batch: &[TrainSample<'_>], lr: f64) -> Result<f64> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Input(format!("learning rate must be >= 0, got {lr}")));
        }
        let (grads, loss) = self.batch_gradients(batch)?;
        self.apply_gradients(&grads, lr);
        Ok(loss)
    }
}

fn target_loss(probs: &[f64], target: Target<'_>) -> f64 {
    match target {
        Target::Hard(c) => cross_entropy_hard(probs, c),
        Target::Soft(t) => cross_entropy(probs, t),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Learning-rate schedule over a fixed number of steps or epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `total` (0-based).
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total == 0 {
                    return base;
                }
                let frac = step as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr_schedule {other:?}"))),
        }
    }
}
