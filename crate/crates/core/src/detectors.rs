//! The six OOD scores. Every score follows one convention: higher means more
//! in-distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{ExemplarBank, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{grad_maha_distance, Model, PairwiseHead};
use crate::numkit::{argmax, argmin, cholesky, quad_form, sign, softmax, squared_distance, DenseMatrix, Real, SpdFactor};

/// Scoring method identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "msp")]
    Msp,
    #[serde(rename = "odin")]
    Odin,
    #[serde(rename = "maha")]
    Mahalanobis,
    #[serde(rename = "pod")]
    Pod,
    #[serde(rename = "podft")]
    PodFinetune,
    #[serde(rename = "min-distance")]
    MinDistance,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Msp,
        Method::Odin,
        Method::Mahalanobis,
        Method::Pod,
        Method::PodFinetune,
        Method::MinDistance,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Odin => "odin",
            Method::Mahalanobis => "maha",
            Method::Pod => "pod",
            Method::PodFinetune => "podft",
            Method::MinDistance => "min-distance",
        }
    }

    pub fn needs_logits(self) -> bool {
        matches!(self, Method::Msp | Method::Odin)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(Method::Msp),
            "odin" => Ok(Method::Odin),
            "maha" | "mahalanobis" => Ok(Method::Mahalanobis),
            "pod" => Ok(Method::Pod),
            "podft" | "pod+ft" | "pod-ft" => Ok(Method::PodFinetune),
            "min-distance" | "mindist" | "min_distance" => Ok(Method::MinDistance),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Reduction applied over exemplars or classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulator {
    Min,
    Average,
    Max,
}

impl Accumulator {
    pub fn apply<T: Real>(self, values: impl IntoIterator<Item = T>) -> T {
        let mut n = 0usize;
        let mut acc = match self {
            Accumulator::Min => T::infinity(),
            Accumulator::Max => T::neg_infinity(),
            Accumulator::Average => T::zero(),
        };
        for v in values {
            n += 1;
            acc = match self {
                Accumulator::Min => acc.min(v),
                Accumulator::Max => acc.max(v),
                Accumulator::Average => acc + v,
            };
        }
        assert!(n > 0, "accumulator over an empty set");
        match self {
            Accumulator::Average => acc / T::from_count(n),
            _ => acc,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Accumulator::Min => "min",
            Accumulator::Average => "average",
            Accumulator::Max => "max",
        }
    }
}

impl FromStr for Accumulator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" => Ok(Accumulator::Min),
            "average" | "avg" | "mean" => Ok(Accumulator::Average),
            "max" => Ok(Accumulator::Max),
            other => Err(Error::InvalidArgument(format!("unknown accumulator '{other}'"))),
        }
    }
}

/// POD scoring scheme `(g_cls, g_ex)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scheme {
    pub class: Accumulator,
    pub exemplar: Accumulator,
}

impl Scheme {
    pub const fn new(class: Accumulator, exemplar: Accumulator) -> Self {
        Self { class, exemplar }
    }
}

impl Default for Scheme {
    fn default() -> Self {
        Self::new(Accumulator::Min, Accumulator::Average)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.class.name(), self.exemplar.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    /// Accepts `min,average` or `(min, average)`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (a, b) = inner
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("scheme '{s}' is not 'g_cls,g_ex'")))?;
        Ok(Self::new(a.parse()?, b.parse()?))
    }
}

pub fn softmax_score<T: Real>(logits: &[T], temperature: T, class: usize) -> T {
    softmax(logits, temperature)[class]
}

fn max_softmax<T: Real>(logits: &[T], temperature: T) -> T {
    softmax(logits, temperature)
        .into_iter()
        .fold(T::neg_infinity(), T::max)
}

fn check_temperature<T: Real>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

fn check_epsilon<T: Real>(eps: T) -> Result<()> {
    if !(eps >= T::zero()) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    Ok(())
}

pub fn msp_score<T: Real, M: Model<T> + ?Sized>(m: &M, x: &[T]) -> Result<T> {
    Ok(max_softmax(&m.logits(x)?, T::one()))
}

/// Max temperature-scaled softmax at `x̂ = x − ε·sign(−∇ log S(x; T))`.
pub fn odin_score<T: Real, M: Model<T> + ?Sized>(m: &M, x: &[T], temperature: T, eps: T) -> Result<T> {
    check_temperature(temperature)?;
    check_epsilon(eps)?;
    if eps == T::zero() {
        return Ok(max_softmax(&m.logits(x)?, temperature));
    }
    if !m.supports_input_gradient() {
        return Err(Error::UnsupportedCapability("ODIN input preprocessing"));
    }
    let g = m.grad_log_msp(x, temperature)?;
    let shifted: Vec<T> = x.iter().zip(&g).map(|(&xi, &gi)| xi - eps * sign(-gi)).collect();
    Ok(max_softmax(&m.logits(&shifted)?, temperature))
}

/// Class means, shared covariance factor and preprocessing magnitude.
#[derive(Clone, Debug)]
pub struct MahalanobisState<T> {
    means: Vec<Vec<T>>,
    covariance: Option<DenseMatrix<T>>,
    factor: SpdFactor<T>,
    epsilon: T,
}

/// Relative ridge applied to every fitted covariance.
pub const RIDGE_SCALE: f64 = 1e-6;

/// Ridge for covariance `sigma`: `1e-6 · trace/dim`, or `1e-6` when the trace is zero.
pub fn default_ridge<T: Real>(sigma: &DenseMatrix<T>) -> T {
    let scale = sigma.trace() / T::from_count(sigma.rows().max(1));
    if scale > T::zero() {
        T::lit(RIDGE_SCALE) * scale
    } else {
        T::lit(RIDGE_SCALE)
    }
}

impl<T: Real> MahalanobisState<T> {
    /// State from explicit parts, e.g. a forced identity covariance.
    pub fn from_parts(means: Vec<Vec<T>>, factor: SpdFactor<T>, epsilon: T) -> Result<Self> {
        check_epsilon(epsilon)?;
        if means.is_empty() {
            return Err(Error::InvalidArgument("no class means".into()));
        }
        for mu in &means {
            if mu.len() != factor.dim() {
                return Err(Error::DimensionMismatch {
                    expected: factor.dim(),
                    found: mu.len(),
                });
            }
        }
        Ok(Self {
            means,
            covariance: None,
            factor,
            epsilon,
        })
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    /// Un-ridged pooled covariance, when fitted from data.
    pub fn covariance(&self) -> Option<&DenseMatrix<T>> {
        self.covariance.as_ref()
    }

    pub fn factor(&self) -> &SpdFactor<T> {
        &self.factor
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    /// Squared Mahalanobis distance from embedding `h` to every class mean.
    pub fn distances(&self, h: &[T]) -> Result<Vec<T>> {
        self.means
            .iter()
            .map(|mu| {
                let diff: Vec<T> = h.iter().zip(mu).map(|(&a, &b)| a - b).collect();
                quad_form(&self.factor, &diff)
            })
            .collect()
    }
}

/// Class means and pooled within-class covariance (normalized by `N`) of
/// the embeddings of `train`.
pub fn fit_mahalanobis<T: Real, M: Model<T> + ?Sized>(
    m: &M,
    train: &LabeledDataset<T>,
    eps: T,
) -> Result<MahalanobisState<T>> {
    check_epsilon(eps)?;
    train.require_all_classes()?;
    let e = m.embedding_dim();
    let c = train.class_count();
    let embedded: Vec<Vec<T>> = train.points().iter().map(|x| m.embed(x)).collect::<Result<_>>()?;

    let mut means = vec![vec![T::zero(); e]; c];
    let sizes = train.class_sizes();
    for (h, &l) in embedded.iter().zip(train.labels()) {
        for (acc, &v) in means[l].iter_mut().zip(h) {
            *acc += v;
        }
    }
    for (mu, &n) in means.iter_mut().zip(&sizes) {
        let n = T::from_count(n);
        mu.iter_mut().for_each(|v| *v /= n);
    }

    let mut sigma = DenseMatrix::zeros(e, e);
    for (h, &l) in embedded.iter().zip(train.labels()) {
        let d: Vec<T> = h.iter().zip(&means[l]).map(|(&a, &b)| a - b).collect();
        for i in 0..e {
            for j in 0..=i {
                sigma[(i, j)] += d[i] * d[j];
            }
        }
    }
    let n = T::from_count(train.len());
    for i in 0..e {
        for j in 0..=i {
            let v = sigma[(i, j)] / n;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }

    let factor = cholesky(&sigma, default_ridge(&sigma))?;
    Ok(MahalanobisState {
        means,
        covariance: Some(sigma),
        factor,
        epsilon: eps,
    })
}

/// `max_i −(h(x̂) − μ_i)ᵀ Σ⁻¹ (h(x̂) − μ_i)`, where `x̂` steps against the
/// distance gradient of the closest class.
pub fn maha_score<T: Real, M: Model<T> + ?Sized>(s: &MahalanobisState<T>, m: &M, x: &[T]) -> Result<T> {
    let point = if s.epsilon == T::zero() {
        None
    } else {
        if !m.supports_input_gradient() {
            return Err(Error::UnsupportedCapability("Mahalanobis input preprocessing"));
        }
        let closest = argmin(&s.distances(&m.embed(x)?)?);
        let g = grad_maha_distance(m, x, &s.means[closest], &s.factor)?;
        Some(
            x.iter()
                .zip(&g)
                .map(|(&xi, &gi)| xi - s.epsilon * sign(gi))
                .collect::<Vec<T>>(),
        )
    };
    let h = m.embed(point.as_deref().unwrap_or(x))?;
    Ok(s.distances(&h)?
        .into_iter()
        .map(|d| -d)
        .fold(T::neg_infinity(), T::max))
}

/// Embeds every exemplar with `m`.
pub fn embed_bank<T: Real, M: Model<T> + ?Sized>(m: &M, bank: &ExemplarBank<T>) -> Result<ExemplarBank<T>> {
    let mut failure = None;
    let out = bank.map(|z| match m.embed(z) {
        Ok(h) => h,
        Err(e) => {
            failure.get_or_insert(e);
            vec![T::zero(); m.embedding_dim()]
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn check_bank<T: Real>(bank: &ExemplarBank<T>, h: &[T]) -> Result<()> {
    if bank.dim() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: h.len(),
        });
    }
    Ok(())
}

/// Per-class `g_ex` of squared distances from `h` to each exemplar.
pub fn pod_class_scores<T: Real>(bank: &ExemplarBank<T>, h: &[T], exemplar: Accumulator) -> Result<Vec<T>> {
    check_bank(bank, h)?;
    Ok(bank
        .classes()
        .iter()
        .map(|zs| exemplar.apply(zs.iter().map(|z| squared_distance(h, z))))
        .collect())
}

/// `−g_cls_i g_ex_j ‖h(x) − h(z_ij)‖²`. `bank` holds exemplar embeddings.
pub fn pod_score<T: Real, M: Model<T> + ?Sized>(
    bank: &ExemplarBank<T>,
    m: &M,
    x: &[T],
    scheme: Scheme,
) -> Result<T> {
    let h = m.embed(x)?;
    let per_class = pod_class_scores(bank, &h, scheme.exemplar)?;
    Ok(-scheme.class.apply(per_class))
}

/// Negative Euclidean distance to the nearest training point.
pub fn min_distance_score<T: Real>(train: &LabeledDataset<T>, x: &[T]) -> Result<T> {
    nearest_distance(train.points(), x).map(|d| -d)
}

fn nearest_distance<T: Real>(reference: &[Vec<T>], x: &[T]) -> Result<T> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    if reference[0].len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: reference[0].len(),
            found: x.len(),
        });
    }
    Ok(reference
        .iter()
        .map(|z| squared_distance(x, z))
        .fold(T::infinity(), T::min)
        .sqrt())
}

/// Per-class `w`-weighted squared distance averaged over exemplars.
pub fn podft_class_scores<T: Real>(bank: &ExemplarBank<T>, head: &PairwiseHead<T>, h: &[T]) -> Result<Vec<T>> {
    check_bank(bank, h)?;
    if head.dim() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: h.len(),
            found: head.dim(),
        });
    }
    Ok(bank
        .classes()
        .iter()
        .map(|zs| {
            Accumulator::Average.apply(zs.iter().map(|z| {
                head.weights
                    .iter()
                    .zip(h.iter().zip(z))
                    .map(|(&w, (&a, &b))| w * (a - b) * (a - b))
                    .sum::<T>()
            }))
        })
        .collect())
}

/// Negated class average of the weighted class scores.
pub fn podft_score<T: Real, M: Model<T> + ?Sized>(
    bank: &ExemplarBank<T>,
    m: &M,
    head: &PairwiseHead<T>,
    x: &[T],
) -> Result<T> {
    let h = m.embed(x)?;
    Ok(-Accumulator::Average.apply(podft_class_scores(bank, head, &h)?))
}

pub fn predict_msp<T: Real, M: Model<T> + ?Sized>(m: &M, x: &[T]) -> Result<usize> {
    Ok(argmax(&softmax(&m.logits(x)?, T::one())))
}

pub fn predict_pod<T: Real, M: Model<T> + ?Sized>(bank: &ExemplarBank<T>, m: &M, x: &[T]) -> Result<usize> {
    Ok(argmin(&pod_class_scores(bank, &m.embed(x)?, Accumulator::Average)?))
}

pub fn predict_podft<T: Real, M: Model<T> + ?Sized>(
    bank: &ExemplarBank<T>,
    m: &M,
    head: &PairwiseHead<T>,
    x: &[T],
) -> Result<usize> {
    Ok(argmin(&podft_class_scores(bank, head, &m.embed(x)?)?))
}

/// Hyper-parameters attached to a score vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none", default)]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scheme: Option<Scheme>,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none", default)]
    pub exemplars: Option<usize>,
}

/// One method's scores over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorReport<T> {
    pub method: Method,
    pub params: HyperParams,
    pub scores: Vec<T>,
}

/// A fitted, immutable scorer.
#[derive(Clone, Debug)]
pub enum Detector<T> {
    Msp,
    Odin { temperature: T, epsilon: T },
    Mahalanobis(MahalanobisState<T>),
    Pod { bank: ExemplarBank<T>, scheme: Scheme },
    PodFinetune { bank: ExemplarBank<T>, head: PairwiseHead<T> },
    MinDistance { reference: Vec<Vec<T>> },
}

impl<T: Real> Detector<T> {
    pub fn odin(temperature: T, epsilon: T) -> Result<Self> {
        check_temperature(temperature)?;
        check_epsilon(epsilon)?;
        Ok(Detector::Odin { temperature, epsilon })
    }

    /// POD over `exemplars` (raw inputs), embedded once with `m`.
    pub fn pod<M: Model<T> + ?Sized>(m: &M, exemplars: &ExemplarBank<T>, scheme: Scheme) -> Result<Self> {
        Ok(Detector::Pod {
            bank: embed_bank(m, exemplars)?,
            scheme,
        })
    }

    pub fn pod_finetune<M: Model<T> + ?Sized>(
        m: &M,
        exemplars: &ExemplarBank<T>,
        head: PairwiseHead<T>,
    ) -> Result<Self> {
        let bank = embed_bank(m, exemplars)?;
        if head.dim() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                found: head.dim(),
            });
        }
        Ok(Detector::PodFinetune { bank, head })
    }

    pub fn min_distance<M: Model<T> + ?Sized>(m: &M, train: &LabeledDataset<T>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let reference = train.points().iter().map(|x| m.embed(x)).collect::<Result<_>>()?;
        Ok(Detector::MinDistance { reference })
    }

    pub fn method(&self) -> Method {
        match self {
            Detector::Msp => Method::Msp,
            Detector::Odin { .. } => Method::Odin,
            Detector::Mahalanobis(_) => Method::Mahalanobis,
            Detector::Pod { .. } => Method::Pod,
            Detector::PodFinetune { .. } => Method::PodFinetune,
            Detector::MinDistance { .. } => Method::MinDistance,
        }
    }

    pub fn params(&self) -> HyperParams {
        match self {
            Detector::Msp | Detector::MinDistance { .. } => HyperParams::default(),
            Detector::Odin { temperature, epsilon } => HyperParams {
                temperature: Some(temperature.to_f64_lossy()),
                epsilon: Some(epsilon.to_f64_lossy()),
                ..Default::default()
            },
            Detector::Mahalanobis(s) => HyperParams {
                epsilon: Some(s.epsilon.to_f64_lossy()),
                ..Default::default()
            },
            Detector::Pod { bank, scheme } => HyperParams {
                scheme: Some(*scheme),
                exemplars: bank.per_class(),
                ..Default::default()
            },
            Detector::PodFinetune { bank, .. } => HyperParams {
                scheme: Some(Scheme::new(Accumulator::Average, Accumulator::Average)),
                exemplars: bank.per_class(),
                ..Default::default()
            },
        }
    }

    pub fn score<M: Model<T> + ?Sized>(&self, m: &M, x: &[T]) -> Result<T> {
        match self {
            Detector::Msp => msp_score(m, x),
            Detector::Odin { temperature, epsilon } => odin_score(m, x, *temperature, *epsilon),
            Detector::Mahalanobis(s) => maha_score(s, m, x),
            Detector::Pod { bank, scheme } => pod_score(bank, m, x, *scheme),
            Detector::PodFinetune { bank, head } => podft_score(bank, m, head, x),
            Detector::MinDistance { reference } => nearest_distance(reference, &m.embed(x)?).map(|d| -d),
        }
    }

    /// Scores every point, in order.
    pub fn score_all<M: Model<T> + ?Sized>(&self, m: &M, xs: &[Vec<T>]) -> Result<DetectorReport<T>> {
        let scores: Vec<T> = xs.iter().map(|x| self.score(m, x)).collect::<Result<_>>()?;
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("{} score for test point {bad}", self.method())));
        }
        Ok(DetectorReport {
            method: self.method(),
            params: self.params(),
            scores,
        })
    }
}
