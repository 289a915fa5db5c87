//! Scoreable models. Detectors see a model through [`Model`]: an embedding
//! `h(x)`, class logits `f(x)`, and optional input gradients.

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::numkit::{argmax, dot, softmax, DenseMatrix, Real, SpdFactor};

/// Capability record consumed by every detector.
pub trait Model<T: Real> {
    fn input_dim(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    /// Number of logits, or `None` for embedding-only models.
    fn class_count(&self) -> Option<usize>;

    fn embed(&self, x: &[T]) -> Result<Vec<T>>;

    fn logits(&self, x: &[T]) -> Result<Vec<T>>;

    fn supports_input_gradient(&self) -> bool {
        false
    }

    /// `∇_x log max_i softmax(f(x)/T)_i`, argmax frozen at `x`.
    fn grad_log_msp(&self, _x: &[T], _temperature: T) -> Result<Vec<T>> {
        Err(Error::UnsupportedCapability("input gradients"))
    }

    /// Vector-Jacobian product `J_h(x)ᵀ v` of the embedding.
    fn embedding_vjp(&self, _x: &[T], _v: &[T]) -> Result<Vec<T>> {
        Err(Error::UnsupportedCapability("input gradients"))
    }
}

/// `logits(x) = W x + b` with the identity as embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxModel<T> {
    weights: DenseMatrix<T>,
    bias: Vec<T>,
}

impl<T: Real> LinearSoftmaxModel<T> {
    pub fn new(weights: DenseMatrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(classes, dim),
            bias: vec![T::zero(); classes],
        }
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.weights.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.cols(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn raw_logits(&self, x: &[T]) -> Vec<T> {
        (0..self.classes())
            .map(|i| dot(self.weights.row(i), x) + self.bias[i])
            .collect()
    }

    /// Mean cross-entropy over `data`.
    pub fn loss(&self, data: &LabeledDataset<T>) -> T {
        let mut total = T::zero();
        for (x, y) in data.iter() {
            let z = self.raw_logits(x);
            let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - z[y];
        }
        total / T::from_count(data.len())
    }

    /// Full-batch cross-entropy gradient `(∂W, ∂b)`.
    fn loss_gradient(&self, data: &LabeledDataset<T>) -> (DenseMatrix<T>, Vec<T>) {
        let c = self.classes();
        let mut gw = DenseMatrix::zeros(c, self.weights.cols());
        let mut gb = vec![T::zero(); c];
        let n = T::from_count(data.len());
        for (x, y) in data.iter() {
            let p = softmax(&self.raw_logits(x), T::one());
            for i in 0..c {
                let r = (p[i] - if i == y { T::one() } else { T::zero() }) / n;
                gb[i] += r;
                for (g, &xj) in gw.row_mut(i).iter_mut().zip(x) {
                    *g += r * xj;
                }
            }
        }
        (gw, gb)
    }

    pub(crate) fn apply_step(&mut self, gw: &DenseMatrix<T>, gb: &[T], lr: T) {
        for i in 0..self.classes() {
            for (w, &g) in self.weights.row_mut(i).iter_mut().zip(gw.row(i)) {
                *w -= lr * g;
            }
            self.bias[i] -= lr * gb[i];
        }
    }

    pub fn accuracy(&self, data: &LabeledDataset<T>) -> f64 {
        let correct = data
            .iter()
            .filter(|&(x, y)| argmax(&self.raw_logits(x)) == y)
            .count();
        correct as f64 / data.len() as f64
    }
}

impl<T: Real> Model<T> for LinearSoftmaxModel<T> {
    fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn embedding_dim(&self) -> usize {
        self.weights.cols()
    }

    fn class_count(&self) -> Option<usize> {
        Some(self.classes())
    }

    fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(x.to_vec())
    }

    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(self.raw_logits(x))
    }

    fn supports_input_gradient(&self) -> bool {
        true
    }

    fn grad_log_msp(&self, x: &[T], temperature: T) -> Result<Vec<T>> {
        self.check(x)?;
        // log p_k = z_k/T - logsumexp(z/T)  =>  ∇ = (W_k - Σ_i p_i W_i) / T
        let p = softmax(&self.raw_logits(x), temperature);
        let k = argmax(&p);
        let mut g = self.weights.row(k).to_vec();
        for (i, &pi) in p.iter().enumerate() {
            for (gj, &w) in g.iter_mut().zip(self.weights.row(i)) {
                *gj -= pi * w;
            }
        }
        Ok(g.into_iter().map(|v| v / temperature).collect())
    }

    fn embedding_vjp(&self, x: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        if v.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: v.len(),
            });
        }
        Ok(v.to_vec())
    }
}

/// Per-dimension weights `w` of the pairwise distance head.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairwiseHead<T> {
    pub weights: Vec<T>,
}

impl<T: Real> PairwiseHead<T> {
    pub fn ones(dim: usize) -> Self {
        Self {
            weights: vec![T::one(); dim],
        }
    }

    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("pairwise head weight".into()));
        }
        Ok(Self { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Full-batch gradient descent schedule for the linear classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.05,
        }
    }
}

/// Trained model plus its loss after every epoch (index 0 is the initial loss).
#[derive(Clone, Debug)]
pub struct TrainedLinear<T> {
    pub model: LinearSoftmaxModel<T>,
    pub losses: Vec<f64>,
}

/// Zero-initialized full-batch gradient descent on mean cross-entropy.
pub fn train_linear_softmax<T: Real>(train: &LabeledDataset<T>, cfg: &TrainConfig) -> Result<TrainedLinear<T>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train.class_count() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {}", cfg.lr)));
    }
    let lr = T::lit(cfg.lr);
    let mut model = LinearSoftmaxModel::zeros(train.class_count(), train.dim());
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(model.loss(train).to_f64_lossy());
    for epoch in 0..cfg.epochs {
        let (gw, gb) = model.loss_gradient(train);
        model.apply_step(&gw, &gb, lr);
        let loss = model.loss(train).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        losses.push(loss);
    }
    Ok(TrainedLinear { model, losses })
}

/// `∇_x (h(x) − μ)ᵀ Σ⁻¹ (h(x) − μ) = 2 J_h(x)ᵀ Σ⁻¹ (h(x) − μ)`.
pub fn grad_maha_distance<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    mu: &[T],
    sigma: &SpdFactor<T>,
) -> Result<Vec<T>> {
    if !model.supports_input_gradient() {
        return Err(Error::UnsupportedCapability("input gradients"));
    }
    let h = model.embed(x)?;
    if mu.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: h.len(),
            found: mu.len(),
        });
    }
    let diff: Vec<T> = h.iter().zip(mu).map(|(&a, &b)| a - b).collect();
    let v = sigma.solve(&diff)?;
    let two = T::lit(2.0);
    Ok(model.embedding_vjp(x, &v)?.into_iter().map(|g| two * g).collect())
}
