//! Pairwise fine-tuning of the distance head: same/different-class pairs,
//! a logistic link on the weighted squared distance, and per-pair SGD.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{LinearSoftmaxModel, Model, PairwiseHead};
use crate::numkit::{DenseMatrix, Prng, Real};

/// One training pair: `y = 0` same class, `y = 1` different classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub y: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    pub pairs: Vec<Pair<T>>,
    /// Source class of each pair: `(c, c)` or `(c1, c2)`.
    pub classes: Vec<(usize, usize)>,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Even positions hold distinct same-class points, odd positions points
    /// from two distinct classes.
    pub fn parity_holds(&self) -> bool {
        self.pairs.iter().zip(&self.classes).enumerate().all(|(k, (p, &(a, b)))| {
            if k % 2 == 0 {
                p.y == 0 && a == b && p.first != p.second
            } else {
                p.y == 1 && a != b
            }
        })
    }
}

/// Draws `n_pairs` pairs; pair `k` (0-based) is same-class when `k` is even.
pub fn sample_pairs<T: Real>(p: &mut Prng, train: &LabeledDataset<T>, n_pairs: usize) -> Result<PairBatch<T>> {
    let by_class = train.class_indices();
    if by_class.len() < 2 {
        return Err(Error::InsufficientClassSize(format!("{} class(es)", by_class.len())));
    }
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::InsufficientClassSize(format!("class {c} has {} example(s)", idx.len())));
    }
    let pts = train.points();
    let c = by_class.len();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut classes = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        if k % 2 == 0 {
            let class = p.below(c);
            let idx = &by_class[class];
            let i = p.below(idx.len());
            let j = (i + 1 + p.below(idx.len() - 1)) % idx.len();
            pairs.push(Pair {
                first: pts[idx[i]].clone(),
                second: pts[idx[j]].clone(),
                y: 0,
            });
            classes.push((class, class));
        } else {
            let c1 = p.below(c);
            let c2 = (c1 + 1 + p.below(c - 1)) % c;
            let a = &by_class[c1];
            let b = &by_class[c2];
            pairs.push(Pair {
                first: pts[a[p.below(a.len())]].clone(),
                second: pts[b[p.below(b.len())]].clone(),
                y: 1,
            });
            classes.push((c1, c2));
        }
    }
    Ok(PairBatch { pairs, classes })
}

/// `Σ_j w_j (h(x1)_j − h(x2)_j)²`.
pub fn pairwise_logit<T: Real, M: Model<T> + ?Sized>(
    m: &M,
    head: &PairwiseHead<T>,
    x1: &[T],
    x2: &[T],
) -> Result<T> {
    let (a, b) = (m.embed(x1)?, m.embed(x2)?);
    if head.dim() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: head.dim(),
        });
    }
    Ok(head
        .weights
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&w, (&u, &v))| w * (u - v) * (u - v))
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Start from `w = 1`, where the fine-tuned score equals plain POD.
    #[default]
    Ones,
    /// Continue from the head passed in.
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub lr: f64,
    pub init: HeadInit,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            pairs_per_epoch: 50,
            lr: 0.01,
            init: HeadInit::Ones,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::InvalidArgument("epochs and pairs per epoch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn logistic<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `BCE(y, σ(z)) = softplus(z) − y·z`.
fn bce_with_logit<T: Real>(z: T, y: u8) -> T {
    softplus(z) - if y == 1 { z } else { T::zero() }
}

/// Gradient of one pair's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradient<T> {
    pub loss: T,
    pub head: Vec<T>,
    pub beta: T,
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

/// Loss and gradient w.r.t. `(w, β, W, b)` for `BCE(y, σ(Pairwise(x1, x2) − β))`.
///
/// The linear model embeds with the identity, which does not depend on `W`
/// or `b`, so their gradient is exactly zero: fine-tuning only moves the
/// head and `β` for this model.
pub fn pair_gradient<T: Real>(
    m: &LinearSoftmaxModel<T>,
    head: &PairwiseHead<T>,
    beta: T,
    pair: &Pair<T>,
) -> Result<PairGradient<T>> {
    let (loss, head, beta) = head_gradient(m, head, beta, pair)?;
    Ok(PairGradient {
        loss,
        head,
        beta,
        weights: DenseMatrix::zeros(m.classes(), m.input_dim()),
        bias: vec![T::zero(); m.classes()],
    })
}

/// Mean pair loss of a batch.
pub fn batch_loss<T: Real>(m: &LinearSoftmaxModel<T>, head: &PairwiseHead<T>, beta: T, batch: &PairBatch<T>) -> Result<T> {
    let mut total = T::zero();
    for pair in &batch.pairs {
        total += bce_with_logit(pairwise_logit(m, head, &pair.first, &pair.second)? - beta, pair.y);
    }
    Ok(total / T::from_count(batch.len().max(1)))
}

/// Head, offset and loss history from a fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOutcome<T> {
    pub head: PairwiseHead<T>,
    /// Learned logistic offset; reported, never used for scoring.
    pub beta: T,
    /// Mean pre-step pair loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub model: LinearSoftmaxModel<T>,
    pub head: PairwiseHead<T>,
    pub beta: T,
    pub epoch_losses: Vec<f64>,
}

/// Loss and `(w, β)` gradient of one pair for any embedding model.
fn head_gradient<T: Real, M: Model<T> + ?Sized>(
    m: &M,
    head: &PairwiseHead<T>,
    beta: T,
    pair: &Pair<T>,
) -> Result<(T, Vec<T>, T)> {
    let z = pairwise_logit(m, head, &pair.first, &pair.second)? - beta;
    let r = logistic(z) - if pair.y == 1 { T::one() } else { T::zero() };
    let h1 = m.embed(&pair.first)?;
    let h2 = m.embed(&pair.second)?;
    let grad = h1.iter().zip(&h2).map(|(&a, &b)| r * (a - b) * (a - b)).collect();
    Ok((bce_with_logit(z, pair.y), grad, -r))
}

fn sgd<T: Real, M: Model<T> + ?Sized>(
    m: &M,
    head: &PairwiseHead<T>,
    train: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
    p: &mut Prng,
    mut after_pair: impl FnMut(&Pair<T>, &PairwiseHead<T>, T) -> Result<()>,
) -> Result<HeadOutcome<T>> {
    cfg.validate()?;
    if train.dim() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            found: train.dim(),
        });
    }
    let mut head = match cfg.init {
        HeadInit::Ones => PairwiseHead::ones(m.embedding_dim()),
        HeadInit::Keep => head.clone(),
    };
    if head.dim() != m.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.embedding_dim(),
            found: head.dim(),
        });
    }
    let lr = T::lit(cfg.lr);
    let mut beta = T::zero();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch = sample_pairs(p, train, cfg.pairs_per_epoch)?;
        let mut total = T::zero();
        for pair in &batch.pairs {
            after_pair(pair, &head, beta)?;
            let (loss, gw, gb) = head_gradient(m, &head, beta, pair)?;
            total += loss;
            for (w, &g) in head.weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            beta -= lr * gb;
        }
        let mean = (total / T::from_count(batch.len())).to_f64_lossy();
        if !mean.is_finite() || head.weights.iter().any(|w| !w.is_finite()) || !beta.is_finite() {
            return Err(Error::NonFinite(format!("pairwise loss diverged at epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    Ok(HeadOutcome {
        head,
        beta,
        epoch_losses,
    })
}

/// Fits only `(w, β)` on top of a fixed embedding, e.g. ingested features.
pub fn train_head<T: Real, M: Model<T> + ?Sized>(
    m: &M,
    head: &PairwiseHead<T>,
    train: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
    p: &mut Prng,
) -> Result<HeadOutcome<T>> {
    sgd(m, head, train, cfg, p, |_, _, _| Ok(()))
}

/// Per-pair SGD on a fresh batch every epoch, `w` initialized once, with
/// steps on `(w, β, W, b)`.
pub fn train_pairwise<T: Real>(
    m: &LinearSoftmaxModel<T>,
    head: &PairwiseHead<T>,
    train: &LabeledDataset<T>,
    cfg: &FinetuneConfig,
    p: &mut Prng,
) -> Result<FinetuneOutcome<T>> {
    let lr = T::lit(cfg.lr);
    let mut model = m.clone();
    // The embedding the loss sees is independent of (W, b), so stepping
    // `model` while scoring pairs through `m` is exact.
    let out = sgd(m, head, train, cfg, p, |pair, head, beta| {
        let g = pair_gradient(m, head, beta, pair)?;
        model.apply_step(&g.weights, &g.bias, lr);
        Ok(())
    })?;
    Ok(FinetuneOutcome {
        model,
        head: out.head,
        beta: out.beta,
        epoch_losses: out.epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_toy_dataset2, select_exemplars};
    use crate::detectors::{embed_bank, pod_score, podft_score, Accumulator, Scheme};
    use crate::models::{train_linear_softmax, TrainConfig};

    fn two_class(per_class: usize, p: &mut Prng) -> LabeledDataset<f64> {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per_class {
                pts.push(vec![p.gaussian(c as f64 * 4.0, 1.0), p.gaussian(0.0, 1.0)]);
                labels.push(c);
            }
        }
        LabeledDataset::new(pts, labels, 2).unwrap()
    }

    #[test]
    fn four_pairs_alternate() {
        let mut p = Prng::new(1);
        let d = two_class(5, &mut p);
        let b = sample_pairs(&mut p, &d, 4).unwrap();
        assert_eq!(b.pairs.iter().filter(|q| q.y == 0).count(), 2);
        assert_eq!(b.pairs.iter().filter(|q| q.y == 1).count(), 2);
        assert!(b.parity_holds());
    }

    #[test]
    fn minimal_classes_use_both_points() {
        let d = LabeledDataset::new(
            vec![vec![0.0], vec![1.0], vec![5.0], vec![6.0]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let mut p = Prng::new(9);
        let b = sample_pairs(&mut p, &d, 40).unwrap();
        for (q, &(c, _)) in b.pairs.iter().zip(&b.classes).step_by(2) {
            let mut got = [q.first[0], q.second[0]];
            got.sort_by(f64::total_cmp);
            assert_eq!(got, if c == 0 { [0.0, 1.0] } else { [5.0, 6.0] });
        }
    }

    #[test]
    fn same_class_source_is_balanced() {
        let mut p = Prng::new(2);
        let d = two_class(10, &mut p);
        let b = sample_pairs(&mut p, &d, 10_000).unwrap();
        assert!(b.parity_holds());
        let same = b.classes.iter().step_by(2).count();
        let zero = b.classes.iter().step_by(2).filter(|c| c.0 == 0).count();
        let share = zero as f64 / same as f64;
        assert!((share - 0.5).abs() <= 0.03, "{share}");
    }

    #[test]
    fn sampling_preconditions() {
        let one = LabeledDataset::new(vec![vec![0.0], vec![1.0]], vec![0, 0], 1).unwrap();
        assert!(matches!(sample_pairs(&mut Prng::new(0), &one, 2), Err(Error::InsufficientClassSize(_))));
        let thin = LabeledDataset::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0, 0, 1], 2).unwrap();
        assert!(matches!(sample_pairs(&mut Prng::new(0), &thin, 2), Err(Error::InsufficientClassSize(_))));
    }

    #[test]
    fn pairwise_logit_examples() {
        let m = LinearSoftmaxModel::<f64>::zeros(2, 2);
        let head = PairwiseHead::ones(2);
        assert_eq!(pairwise_logit(&m, &head, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(pairwise_logit(&m, &head, &[3.0, -2.0], &[3.0, -2.0]).unwrap(), 0.0);
        let mut p = Prng::new(5);
        let w = PairwiseHead::new(vec![p.gaussian(0.0, 1.0), p.gaussian(0.0, 1.0)]).unwrap();
        for _ in 0..100 {
            let a = [p.gaussian(0.0, 3.0), p.gaussian(0.0, 3.0)];
            let b = [p.gaussian(0.0, 3.0), p.gaussian(0.0, 3.0)];
            assert_eq!(pairwise_logit(&m, &w, &a, &b).unwrap(), pairwise_logit(&m, &w, &b, &a).unwrap());
        }
    }

    #[test]
    fn stable_bce() {
        assert!((bce_with_logit(0.0f64, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logit(800.0f64, 0) - 800.0).abs() < 1e-9);
        assert!(bce_with_logit(800.0f64, 1).abs() < 1e-12);
        assert!((bce_with_logit(-800.0f64, 1) - 800.0).abs() < 1e-9);
    }

    fn agree(analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3)
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let mut p = Prng::new(11);
        let h = 1e-5;
        for _ in 0..40 {
            let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| p.gaussian(0.0, 1.0)).collect()).collect();
            let m = LinearSoftmaxModel::new(DenseMatrix::from_rows(&rows).unwrap(), vec![0.1, -0.2, 0.3]).unwrap();
            let head = PairwiseHead::new(vec![p.gaussian(0.5, 0.3), p.gaussian(0.5, 0.3)]).unwrap();
            let beta = p.gaussian(0.0, 1.0);
            let pair = Pair {
                first: vec![p.gaussian(0.0, 1.0), p.gaussian(0.0, 1.0)],
                second: vec![p.gaussian(0.0, 1.0), p.gaussian(0.0, 1.0)],
                y: (p.below(2)) as u8,
            };
            let g = pair_gradient(&m, &head, beta, &pair).unwrap();
            let loss = |m: &LinearSoftmaxModel<f64>, w: &PairwiseHead<f64>, beta: f64| {
                bce_with_logit(pairwise_logit(m, w, &pair.first, &pair.second).unwrap() - beta, pair.y)
            };
            assert!((g.loss - loss(&m, &head, beta)).abs() < 1e-15);

            for j in 0..2 {
                let (mut up, mut down) = (head.clone(), head.clone());
                up.weights[j] += h;
                down.weights[j] -= h;
                let fd = (loss(&m, &up, beta) - loss(&m, &down, beta)) / (2.0 * h);
                assert!(agree(g.head[j], fd), "w[{j}]: {} vs {fd}", g.head[j]);
            }
            let fd = (loss(&m, &head, beta + h) - loss(&m, &head, beta - h)) / (2.0 * h);
            assert!(agree(g.beta, fd), "beta: {} vs {fd}", g.beta);

            for i in 0..3 {
                for j in 0..2 {
                    let mut dw = DenseMatrix::zeros(3, 2);
                    dw[(i, j)] = 1.0;
                    let (mut up, mut down) = (m.clone(), m.clone());
                    up.apply_step(&dw, &[0.0; 3], -h);
                    down.apply_step(&dw, &[0.0; 3], h);
                    let fd = (loss(&up, &head, beta) - loss(&down, &head, beta)) / (2.0 * h);
                    assert!(agree(g.weights[(i, j)], fd));
                }
                let mut db = [0.0; 3];
                db[i] = 1.0;
                let (mut up, mut down) = (m.clone(), m.clone());
                up.apply_step(&DenseMatrix::zeros(3, 2), &db, -h);
                down.apply_step(&DenseMatrix::zeros(3, 2), &db, h);
                let fd = (loss(&up, &head, beta) - loss(&down, &head, beta)) / (2.0 * h);
                assert!(agree(g.bias[i], fd));
            }
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let b = generate_toy_dataset2::<f64>(0);
        let m = train_linear_softmax(&b.id_train, &TrainConfig::default()).unwrap().model;
        let head = PairwiseHead::ones(2);
        let cfg = FinetuneConfig {
            lr: 0.0,
            ..Default::default()
        };
        let out = train_pairwise(&m, &head, &b.id_train, &cfg, &mut Prng::new(0)).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.head, head);
        assert_eq!(out.beta, 0.0);

        let bank = embed_bank(&m, &select_exemplars(&b.id_train, 5).unwrap()).unwrap();
        let avg = Scheme::new(Accumulator::Average, Accumulator::Average);
        for x in b.id_test.points().iter().chain(&b.ood_test) {
            let a = podft_score(&bank, &out.model, &out.head, x).unwrap();
            let e = pod_score(&bank, &m, x, avg).unwrap();
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn toy2_loss_decreases_at_defaults() {
        for seed in 0..5 {
            let b = generate_toy_dataset2::<f64>(seed);
            let m = train_linear_softmax(&b.id_train, &TrainConfig::default()).unwrap().model;
            let out = train_pairwise(&m, &PairwiseHead::ones(2), &b.id_train, &FinetuneConfig::default(), &mut Prng::new(seed))
                .unwrap();
            let first = out.epoch_losses[0];
            let last = *out.epoch_losses.last().unwrap();
            assert!(last < first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig::default().validate().is_ok());
    }
}
