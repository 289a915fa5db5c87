//! Sample containers, the two planar toy datasets, low-data subsetting and
//! exemplar selection.

use crate::error::{Error, Result};
use crate::numkit::{Prng, Real};

/// Points in `R^dim` with class labels in `[0, class_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    dim: usize,
    points: Vec<Vec<T>>,
    labels: Vec<usize>,
    class_count: usize,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(points: Vec<Vec<T>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: labels.len(),
            });
        }
        let dim = points.first().map_or(0, Vec::len);
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset point".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            dim,
            points,
            labels,
            class_count,
        })
    }

    /// Like `new`, additionally requiring every class to be present, as a
    /// training set must.
    pub fn new_training(points: Vec<Vec<T>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let d = Self::new(points, labels, class_count)?;
        d.require_all_classes()?;
        Ok(d)
    }

    pub fn require_all_classes(&self) -> Result<()> {
        let sizes = self.class_sizes();
        match sizes.iter().position(|&s| s == 0) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[T], usize)> {
        self.points
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Indices of each class's members, in stored order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            idx[l].push(i);
        }
        idx
    }

    fn subset(&self, keep: &[usize]) -> Self {
        Self {
            dim: self.dim,
            points: keep.iter().map(|&i| self.points[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Output of a toy dataset generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBundle<T> {
    pub id_train: LabeledDataset<T>,
    pub id_test: LabeledDataset<T>,
    pub ood_test: Vec<Vec<T>>,
}

/// Per-class exemplar lists `z_ij` drawn from a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarBank<T> {
    classes: Vec<Vec<Vec<T>>>,
}

impl<T: Real> ExemplarBank<T> {
    pub fn from_classes(classes: Vec<Vec<Vec<T>>>) -> Result<Self> {
        if let Some(class) = classes.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        let dim = classes[0][0].len();
        for z in classes.iter().flatten() {
            if z.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: z.len(),
                });
            }
        }
        Ok(Self { classes })
    }

    /// Every training example, grouped by class.
    pub fn whole(d: &LabeledDataset<T>) -> Result<Self> {
        let mut classes = vec![Vec::new(); d.class_count()];
        for (x, l) in d.iter() {
            classes[l].push(x.to_vec());
        }
        Self::from_classes(classes)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, i: usize) -> &[Vec<T>] {
        &self.classes[i]
    }

    pub fn classes(&self) -> &[Vec<Vec<T>>] {
        &self.classes
    }

    /// Exemplars per class when uniform across classes.
    pub fn per_class(&self) -> Option<usize> {
        let m = self.classes[0].len();
        self.classes.iter().all(|c| c.len() == m).then_some(m)
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].len()
    }

    /// Replaces every exemplar `z` by `f(z)`, e.g. a model embedding.
    pub fn map<U: Real>(&self, mut f: impl FnMut(&[T]) -> Vec<U>) -> Result<ExemplarBank<U>> {
        ExemplarBank::from_classes(
            self.classes
                .iter()
                .map(|c| c.iter().map(|z| f(z)).collect())
                .collect(),
        )
    }
}

fn point<T: Real>(x: f64, y: f64) -> Vec<T> {
    vec![T::lit(x), T::lit(y)]
}

/// `n` points with coordinates drawn independently, x before y.
pub fn produce_cluster<T: Real>(p: &mut Prng, mu: [f64; 2], sigma: [f64; 2], n: usize) -> Vec<Vec<T>> {
    (0..n)
        .map(|_| {
            let x = p.gaussian(mu[0], sigma[0]);
            let y = p.gaussian(mu[1], sigma[1]);
            point(x, y)
        })
        .collect()
}

/// Point `k = 1..=n` sits at angle `2πk/n` around `center`.
pub fn produce_ring<T: Real>(center: [f64; 2], radius: f64, n: usize) -> Vec<Vec<T>> {
    (1..=n)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            point(
                center[0] + radius * theta.cos(),
                center[1] + radius * theta.sin(),
            )
        })
        .collect()
}

const SPLIT_STREAM: u64 = 0x5EED_5B17;

/// Randomly assigns `train_count` of the ID points to training. Both halves
/// keep generation order. Redraws if a class would be absent from training.
fn split<T: Real>(
    seed: u64,
    classes: Vec<Vec<Vec<T>>>,
    train_count: usize,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let class_count = classes.len();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (label, members) in classes.into_iter().enumerate() {
        labels.extend(std::iter::repeat(label).take(members.len()));
        points.extend(members);
    }
    let all = LabeledDataset::new(points, labels, class_count)?;

    let mut p = Prng::derive(seed, SPLIT_STREAM);
    let mut order: Vec<usize> = (0..all.len()).collect();
    loop {
        p.shuffle(&mut order);
        let mut train: Vec<usize> = order[..train_count].to_vec();
        let mut test: Vec<usize> = order[train_count..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        let train_set = all.subset(&train);
        if train_set.require_all_classes().is_ok() {
            return Ok((train_set, all.subset(&test)));
        }
    }
}

/// Two tight ID clusters and one OOD cluster beyond the second, 80/20 split.
pub fn generate_toy_dataset1<T: Real>(seed: u64) -> ToyBundle<T> {
    let mut p = Prng::new(seed);
    let class1 = produce_cluster(&mut p, [-10.0, -10.0], [0.5, 0.5], 100);
    let class2 = produce_cluster(&mut p, [-2.0, -2.0], [0.5, 0.5], 100);
    let ood = produce_cluster(&mut p, [6.5, 6.5], [0.5, 0.5], 40);
    let (id_train, id_test) = split(seed, vec![class1, class2], 160).expect("valid toy layout");
    ToyBundle {
        id_train,
        id_test,
        ood_test: ood,
    }
}

/// Two rings (the first with a few outliers near the origin) and an OOD
/// cluster between them, 50/50 split.
pub fn generate_toy_dataset2<T: Real>(seed: u64) -> ToyBundle<T> {
    let mut p = Prng::new(seed);
    let mut class1 = produce_ring([-5.0, -5.0], 2.5, 9);
    class1.extend(produce_cluster(&mut p, [-0.8, -0.8], [0.2, 0.2], 6));
    let class2 = produce_ring([8.0, 8.0], 2.5, 15);
    let ood = produce_cluster(&mut p, [0.0, 0.0], [0.3, 0.3], 10);
    let (id_train, id_test) = split(seed, vec![class1, class2], 15).expect("valid toy layout");
    ToyBundle {
        id_train,
        id_test,
        ood_test: ood,
    }
}

/// Selector for the built-in toy datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ToyDataset {
    #[serde(rename = "toy1")]
    One,
    #[serde(rename = "toy2")]
    Two,
}

impl ToyDataset {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(Error::InvalidArgument(format!("toy dataset must be 1 or 2, got {i}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "toy1",
            Self::Two => "toy2",
        }
    }

    pub fn generate<T: Real>(self, seed: u64) -> ToyBundle<T> {
        match self {
            Self::One => generate_toy_dataset1(seed),
            Self::Two => generate_toy_dataset2(seed),
        }
    }
}

/// First `⌊fraction · |class|⌋` examples of every class, stored order kept.
pub fn low_data_subset<T: Real>(d: &LabeledDataset<T>, fraction: f64) -> Result<LabeledDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    // absorbs representation error such as 0.29 * 100 = 28.999...
    let quota: Vec<usize> = d
        .class_sizes()
        .iter()
        .map(|&s| (fraction * s as f64 + 1e-9).floor() as usize)
        .collect();
    if let Some(class) = quota.iter().position(|&q| q == 0) {
        return Err(Error::EmptyClass { class });
    }
    let mut taken = vec![0; d.class_count()];
    let keep: Vec<usize> = d
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            (taken[l] < quota[l]).then(|| {
                taken[l] += 1;
                i
            })
        })
        .collect();
    Ok(d.subset(&keep))
}

/// The first `m` examples of each class in stored order.
pub fn select_exemplars<T: Real>(d: &LabeledDataset<T>, m: usize) -> Result<ExemplarBank<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("exemplar count must be positive".into()));
    }
    let mut classes = Vec::with_capacity(d.class_count());
    for (class, members) in d.class_indices().into_iter().enumerate() {
        if members.len() < m {
            return Err(Error::InsufficientExamples {
                class,
                needed: m,
                available: members.len(),
            });
        }
        classes.push(members[..m].iter().map(|&i| d.points()[i].clone()).collect());
    }
    ExemplarBank::from_classes(classes)
}
