//! Orchestration: single cells, hyper-parameter sweeps, the toy suite, and
//! spec-driven experiment runs that produce [`Report`]s.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{low_data_subset, select_exemplars, ExemplarBank, LabeledDataset, ToyBundle, ToyDataset};
use crate::detectors::{fit_mahalanobis, Accumulator, Detector, HyperParams, Method, Scheme};
use crate::error::{Error, Result};
use crate::finetune::{train_head, FinetuneConfig};
use crate::io::{
    ingest_as_model, read_feature_file, win_matrices, FeatureCatalog, FeatureSet, Policy, Preprocessing, Regime,
    Report, ReportRow, Role, Selection,
};
use crate::metrics::{evaluate, EvalResult, ScoredPopulations};
use crate::models::{train_linear_softmax, LinearSoftmaxModel, Model, PairwiseHead, TrainConfig};
use crate::numkit::Prng;

/// Temperature used without OOD access.
pub const FIXED_TEMPERATURE: f64 = 1000.0;
/// Exemplars per class for feature-set POD runs.
pub const FIXED_EXEMPLARS: usize = 20;
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const DEFAULT_LOW_FRACTION: f64 = 0.1;
const FINETUNE_STREAM: u64 = 0xF1AE_7A2E;

const DEFAULT_PAIRS_JSON: &str = include_str!("../configs/default_pairs.json");

#[derive(Deserialize)]
struct PairList {
    pairs: Vec<DatasetPair>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub id: String,
    pub ood: String,
}

/// The 16 (ID, OOD) pairs, overlapping-class pairs already excluded.
pub fn default_pairs() -> Vec<DatasetPair> {
    serde_json::from_str::<PairList>(DEFAULT_PAIRS_JSON)
        .expect("bundled pair list is valid JSON")
        .pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub temperatures: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl SweepGrid {
    pub fn new(temperatures: Vec<f64>, epsilons: Vec<f64>) -> Result<Self> {
        let g = Self { temperatures, epsilons };
        g.validate()?;
        Ok(g)
    }

    /// The ODIN search grid used throughout the benchmark.
    pub fn standard() -> Self {
        Self {
            temperatures: vec![1.0, 10.0, 100.0, 1000.0],
            epsilons: vec![0.0, 0.0005, 0.001, 0.0014, 0.002, 0.0024, 0.005, 0.01, 0.05, 0.1, 0.2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperatures.is_empty() || self.epsilons.is_empty() {
            return Err(Error::InvalidArgument("sweep grid needs temperatures and epsilons".into()));
        }
        if self.temperatures.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument("grid temperatures must be > 0".into()));
        }
        if self.epsilons.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument("grid epsilons must be >= 0".into()));
        }
        Ok(())
    }

    /// Grid points in lexicographic `(T, ε)` order. Mahalanobis has no
    /// temperature, so only `T = 1` is visited for it.
    pub fn points(&self, method: Method) -> Vec<(f64, f64)> {
        let temps = if method == Method::Mahalanobis {
            vec![1.0]
        } else {
            let mut t = self.temperatures.clone();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        };
        let mut eps = self.epsilons.clone();
        eps.sort_by(f64::total_cmp);
        eps.dedup();
        temps
            .iter()
            .flat_map(|&t| eps.iter().map(move |&e| (t, e)))
            .collect()
    }
}

/// Exemplars per class: a count or the whole training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExemplarCount {
    Count(usize),
    #[serde(with = "all_tag")]
    All,
}

mod all_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected a count or \"all\", got '{s}'")))
        }
    }
}

impl std::str::FromStr for ExemplarCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ExemplarCount::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(ExemplarCount::Count(n)),
            _ => Err(Error::InvalidArgument(format!("exemplar count '{s}' is not a positive integer or 'all'"))),
        }
    }
}

impl ExemplarCount {
    pub fn bank(self, train: &LabeledDataset<f64>) -> Result<ExemplarBank<f64>> {
        match self {
            ExemplarCount::All => ExemplarBank::whole(train),
            ExemplarCount::Count(m) => select_exemplars(train, m),
        }
    }
}

/// Fully resolved hyper-parameters of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub temperature: f64,
    pub epsilon: f64,
    pub scheme: Scheme,
    pub exemplars: ExemplarCount,
    pub finetune: FinetuneConfig,
    /// A pre-trained head for POD+FT; trained in place when absent.
    pub head: Option<PairwiseHead<f64>>,
}

impl MethodConfig {
    /// The no-OOD-access defaults.
    pub fn fixed(method: Method) -> Self {
        Self {
            method,
            temperature: match method {
                Method::Odin => FIXED_TEMPERATURE,
                _ => 1.0,
            },
            epsilon: 0.0,
            scheme: Scheme::default(),
            exemplars: ExemplarCount::Count(FIXED_EXEMPLARS),
            finetune: FinetuneConfig::default(),
            head: None,
        }
    }

    /// Hyper-parameters to report; mirrors what the detector actually uses.
    pub fn params(&self) -> HyperParams {
        let m = match self.exemplars {
            ExemplarCount::Count(m) => Some(m),
            ExemplarCount::All => None,
        };
        match self.method {
            Method::Msp | Method::MinDistance => HyperParams::default(),
            Method::Odin => HyperParams {
                temperature: Some(self.temperature),
                epsilon: Some(self.epsilon),
                ..Default::default()
            },
            Method::Mahalanobis => HyperParams {
                epsilon: Some(self.epsilon),
                ..Default::default()
            },
            Method::Pod => HyperParams {
                scheme: Some(self.scheme),
                exemplars: m,
                ..Default::default()
            },
            Method::PodFinetune => HyperParams {
                scheme: Some(Scheme::new(Accumulator::Average, Accumulator::Average)),
                exemplars: m,
                ..Default::default()
            },
        }
    }
}

/// Everything one cell needs: a model, its training set and both test sets.
pub struct Cell<'a> {
    pub model: &'a dyn Model<f64>,
    pub train: &'a LabeledDataset<f64>,
    pub id_test: &'a [Vec<f64>],
    pub ood_test: &'a [Vec<f64>],
    pub seed: u64,
}

pub fn fit_detector(cell: &Cell<'_>, cfg: &MethodConfig) -> Result<Detector<f64>> {
    let m = cell.model;
    Ok(match cfg.method {
        Method::Msp => Detector::Msp,
        Method::Odin => Detector::odin(cfg.temperature, cfg.epsilon)?,
        Method::Mahalanobis => Detector::Mahalanobis(fit_mahalanobis(m, cell.train, cfg.epsilon)?),
        Method::Pod => Detector::pod(m, &cfg.exemplars.bank(cell.train)?, cfg.scheme)?,
        Method::PodFinetune => {
            let head = match &cfg.head {
                Some(h) => h.clone(),
                None => {
                    let mut p = Prng::derive(cell.seed, FINETUNE_STREAM);
                    train_head(m, &PairwiseHead::ones(m.embedding_dim()), cell.train, &cfg.finetune, &mut p)?.head
                }
            };
            Detector::pod_finetune(m, &cfg.exemplars.bank(cell.train)?, head)?
        }
        Method::MinDistance => Detector::min_distance(m, cell.train)?,
    })
}

pub fn score_cell(cell: &Cell<'_>, det: &Detector<f64>) -> Result<EvalResult> {
    let id = det.score_all(cell.model, cell.id_test)?.scores;
    let ood = det.score_all(cell.model, cell.ood_test)?.scores;
    Ok(evaluate(&ScoredPopulations::new(id, ood)?))
}

/// One deterministic `(ID, OOD, method, hyper-parameters, seed)` evaluation.
pub fn run_cell(cell: &Cell<'_>, cfg: &MethodConfig) -> Result<EvalResult> {
    score_cell(cell, &fit_detector(cell, cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub epsilon: f64,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best: SweepPoint,
    pub evaluated: Vec<SweepPoint>,
}

/// Best AUROC, then lowest FNR@95; the earliest point in `(T, ε)` order
/// wins exact ties.
pub fn select_best(points: &[SweepPoint]) -> Option<SweepPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.temperature
            .total_cmp(&b.temperature)
            .then(a.epsilon.total_cmp(&b.epsilon))
    });
    let mut best: Option<SweepPoint> = None;
    for p in sorted {
        let better = match &best {
            None => true,
            Some(b) => p.result.auroc > b.result.auroc || (p.result.auroc == b.result.auroc && p.result.fnr95 < b.result.fnr95),
        };
        if better {
            best = Some(p);
        }
    }
    best
}

/// Evaluates `eval` at every grid point. This selects on OOD test data.
pub fn run_sweep(
    method: Method,
    grid: &SweepGrid,
    mut eval: impl FnMut(f64, f64) -> Result<EvalResult>,
) -> Result<SweepOutcome> {
    if !matches!(method, Method::Odin | Method::Mahalanobis) {
        return Err(Error::InvalidArgument(format!("{method} has no sweepable hyper-parameters")));
    }
    grid.validate()?;
    let evaluated: Vec<SweepPoint> = grid
        .points(method)
        .into_iter()
        .map(|(t, e)| {
            Ok(SweepPoint {
                temperature: t,
                epsilon: e,
                result: eval(t, e)?,
            })
        })
        .collect::<Result<_>>()?;
    let best = select_best(&evaluated).expect("validated grid is non-empty");
    Ok(SweepOutcome { best, evaluated })
}

/// Sweep on a cell whose model computes its own input gradients.
pub fn run_sweep_cell(cell: &Cell<'_>, base: &MethodConfig, grid: &SweepGrid) -> Result<SweepOutcome> {
    run_sweep(base.method, grid, |t, e| {
        run_cell(
            cell,
            &MethodConfig {
                temperature: t,
                epsilon: e,
                ..base.clone()
            },
        )
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy1Result {
    pub msp: f64,
    pub min_distance: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy2Result {
    pub msp: f64,
    pub accuracy: f64,
    pub pod_min_min: f64,
    pub pod_min_average: f64,
    pub pod_average_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySeedResult {
    pub seed: u64,
    pub toy1: Toy1Result,
    pub toy2: Toy2Result,
}

/// AUROCs per seed plus their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySuiteReport {
    pub per_seed: Vec<ToySeedResult>,
    pub mean_toy1: Toy1Result,
    pub mean_toy2: Toy2Result,
}

pub const TOY_SCHEMES: [(&str, Scheme); 3] = [
    ("pod_min_min", Scheme::new(Accumulator::Min, Accumulator::Min)),
    ("pod_min_average", Scheme::new(Accumulator::Min, Accumulator::Average)),
    ("pod_average_average", Scheme::new(Accumulator::Average, Accumulator::Average)),
];

fn toy_cell_result(bundle: &ToyBundle<f64>, model: &LinearSoftmaxModel<f64>, seed: u64, cfg: &MethodConfig) -> Result<f64> {
    let cell = Cell {
        model,
        train: &bundle.id_train,
        id_test: bundle.id_test.points(),
        ood_test: &bundle.ood_test,
        seed,
    };
    Ok(run_cell(&cell, cfg)?.auroc)
}

pub fn run_toy_seed(seed: u64) -> Result<ToySeedResult> {
    let all = |method| MethodConfig {
        exemplars: ExemplarCount::All,
        ..MethodConfig::fixed(method)
    };
    let b1 = ToyDataset::One.generate::<f64>(seed);
    let m1 = train_linear_softmax(&b1.id_train, &TrainConfig::default())?.model;
    let toy1 = Toy1Result {
        msp: toy_cell_result(&b1, &m1, seed, &all(Method::Msp))?,
        min_distance: toy_cell_result(&b1, &m1, seed, &all(Method::MinDistance))?,
        accuracy: m1.accuracy(&b1.id_test),
    };

    let b2 = ToyDataset::Two.generate::<f64>(seed);
    let m2 = train_linear_softmax(&b2.id_train, &TrainConfig::default())?.model;
    let pod = |scheme| {
        toy_cell_result(
            &b2,
            &m2,
            seed,
            &MethodConfig {
                scheme,
                ..all(Method::Pod)
            },
        )
    };
    let toy2 = Toy2Result {
        msp: toy_cell_result(&b2, &m2, seed, &all(Method::Msp))?,
        accuracy: m2.accuracy(&b2.id_test),
        pod_min_min: pod(TOY_SCHEMES[0].1)?,
        pod_min_average: pod(TOY_SCHEMES[1].1)?,
        pod_average_average: pod(TOY_SCHEMES[2].1)?,
    };
    Ok(ToySeedResult { seed, toy1, toy2 })
}

pub fn run_toy_suite(seeds: &[u64]) -> Result<ToySuiteReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("toy suite needs at least one seed".into()));
    }
    let per_seed: Vec<ToySeedResult> = seeds.iter().map(|&s| run_toy_seed(s)).collect::<Result<_>>()?;
    let n = per_seed.len() as f64;
    let mean = |f: &dyn Fn(&ToySeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    Ok(ToySuiteReport {
        mean_toy1: Toy1Result {
            msp: mean(&|r| r.toy1.msp),
            min_distance: mean(&|r| r.toy1.min_distance),
            accuracy: mean(&|r| r.toy1.accuracy),
        },
        mean_toy2: Toy2Result {
            msp: mean(&|r| r.toy2.msp),
            accuracy: mean(&|r| r.toy2.accuracy),
            pod_min_min: mean(&|r| r.toy2.pod_min_min),
            pod_min_average: mean(&|r| r.toy2.pod_min_average),
            pod_average_average: mean(&|r| r.toy2.pod_average_average),
        },
        per_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// A generated toy bundle; its OOD split is the only OOD source.
    Toy(ToyDataset),
    /// OODF files, resolved relative to the spec file.
    Features { id: String, files: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default = "fixed_policy")]
    pub policy: Policy,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<ExemplarCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
}

fn fixed_policy() -> Policy {
    Policy::Fixed
}

impl MethodSpec {
    pub fn fixed(method: Method) -> Self {
        Self {
            method,
            policy: Policy::Fixed,
            temperature: None,
            epsilon: None,
            scheme: None,
            exemplars: None,
            finetune: None,
        }
    }

    fn resolve(&self, default_exemplars: ExemplarCount) -> MethodConfig {
        let base = MethodConfig::fixed(self.method);
        MethodConfig {
            temperature: self.temperature.unwrap_or(base.temperature),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            scheme: self.scheme.unwrap_or(base.scheme),
            exemplars: self.exemplars.unwrap_or(default_exemplars),
            finetune: self.finetune.unwrap_or(base.finetune),
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    /// Share of each class kept in the low regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

impl RegimeSpec {
    pub const FULL: RegimeSpec = RegimeSpec {
        regime: Regime::Full,
        fraction: None,
    };

    pub fn low(fraction: f64) -> Self {
        Self {
            regime: Regime::Low,
            fraction: Some(fraction),
        }
    }

    pub fn apply(&self, train: &LabeledDataset<f64>) -> Result<LabeledDataset<f64>> {
        match self.regime {
            Regime::Full => Ok(train.clone()),
            Regime::Low => low_data_subset(train, self.fraction.unwrap_or(DEFAULT_LOW_FRACTION)),
        }
    }
}

/// A JSON experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: Source,
    /// OOD dataset names for feature sources.
    #[serde(default)]
    pub ood: Vec<String>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "full_only")]
    pub regimes: Vec<RegimeSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<SweepGrid>,
}

fn full_only() -> Vec<RegimeSpec> {
    vec![RegimeSpec::FULL]
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

impl ExperimentSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() || self.regimes.is_empty() {
            return Err(Error::InvalidArgument("spec needs methods, seeds and regimes".into()));
        }
        if let Some(m) = self
            .methods
            .iter()
            .find(|m| m.policy == Policy::Sweep && !matches!(m.method, Method::Odin | Method::Mahalanobis))
        {
            return Err(Error::InvalidArgument(format!("sweep policy is only for ODIN and Mahalanobis, not {}", m.method)));
        }
        if let Source::Features { .. } = self.source {
            if self.ood.is_empty() {
                return Err(Error::InvalidArgument("feature experiments need at least one OOD dataset".into()));
            }
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }
}

/// A model plus the three splits as its inputs.
pub struct Prepared {
    pub model: Box<dyn Model<f64>>,
    pub train: LabeledDataset<f64>,
    pub id_test: Vec<Vec<f64>>,
    pub ood_test: Vec<Vec<f64>>,
    /// Whether `ε` must still be applied by the detector (false when the
    /// features were extracted from already-preprocessed inputs).
    pub applies_epsilon: bool,
}

impl Prepared {
    pub fn cell(&self, seed: u64) -> Cell<'_> {
        Cell {
            model: self.model.as_ref(),
            train: &self.train,
            id_test: &self.id_test,
            ood_test: &self.ood_test,
            seed,
        }
    }
}

/// Turns feature sets into a cell. With logits the stored features act as
/// the model; without, a linear classifier is trained on the embeddings,
/// which then also serve as its inputs.
pub fn prepare_features(
    train: &FeatureSet,
    id_test: &FeatureSet,
    ood_test: &FeatureSet,
    regime: &RegimeSpec,
) -> Result<Prepared> {
    let ing = ingest_as_model::<f64>(train, &[id_test, ood_test])?;
    let subset = regime.apply(&ing.train)?;
    let [id_rows, ood_rows]: [Vec<Vec<f64>>; 2] = ing.tests.try_into().expect("two test sets were ingested");
    if ing.model.has_logits() {
        return Ok(Prepared {
            model: Box::new(ing.model),
            train: subset,
            id_test: id_rows,
            ood_test: ood_rows,
            applies_epsilon: false,
        });
    }
    let model = train_linear_softmax(&subset, &TrainConfig::default())?.model;
    Ok(Prepared {
        model: Box::new(model),
        train: subset,
        id_test: id_rows,
        ood_test: ood_rows,
        applies_epsilon: true,
    })
}

/// The model and (regime-reduced) training set implied by an id_train
/// feature set alone, as [`prepare_features`] would build them.
pub fn model_for_training(train: &FeatureSet, regime: &RegimeSpec) -> Result<(Box<dyn Model<f64>>, LabeledDataset<f64>)> {
    let ing = ingest_as_model::<f64>(train, &[])?;
    let subset = regime.apply(&ing.train)?;
    if ing.model.has_logits() {
        return Ok((Box::new(ing.model), subset));
    }
    let model = train_linear_softmax(&subset, &TrainConfig::default())?.model;
    Ok((Box::new(model), subset))
}

fn prepare_toy(bundle: &ToyBundle<f64>, regime: &RegimeSpec) -> Result<Prepared> {
    let train = regime.apply(&bundle.id_train)?;
    let model = train_linear_softmax(&train, &TrainConfig::default())?.model;
    Ok(Prepared {
        model: Box::new(model),
        train,
        id_test: bundle.id_test.points().to_vec(),
        ood_test: bundle.ood_test.clone(),
        applies_epsilon: true,
    })
}

/// Feature sets for one `(ID, OOD)` pair, with variant lookup by tag.
pub struct FeaturePair<'a> {
    pub catalog: &'a FeatureCatalog,
    pub id: &'a str,
    pub ood: &'a str,
}

impl FeaturePair<'_> {
    pub fn train(&self) -> Result<&FeatureSet> {
        self.catalog
            .find(self.id, Role::IdTrain, Preprocessing::None)
            .ok_or_else(|| Error::MissingLabels(format!("{} (no id_train feature set)", self.id)))
    }

    /// Evaluates `cfg`, fetching pre-applied variants when `ε > 0` and the
    /// features come with their own logits.
    pub fn run_cell(&self, cfg: &MethodConfig, regime: &RegimeSpec, seed: u64) -> Result<EvalResult> {
        let train = self.train()?;
        let plain = |role, name| {
            self.catalog
                .find(name, role, Preprocessing::None)
                .ok_or_else(|| Error::InvalidArgument(format!("no untagged {} feature set for '{name}'", role.name())))
        };
        let (id_plain, ood_plain) = (plain(Role::IdTest, self.id)?, plain(Role::OodTest, self.ood)?);
        let has_logits = train.logits.is_some() && id_plain.logits.is_some() && ood_plain.logits.is_some();
        let needs_variant = has_logits && cfg.epsilon > 0.0 && matches!(cfg.method, Method::Odin | Method::Mahalanobis);
        if !needs_variant {
            let prepared = prepare_features(train, id_plain, ood_plain, regime)?;
            return run_cell(&prepared.cell(seed), cfg);
        }
        let id_v = self.catalog.variant(self.id, Role::IdTest, cfg.method, cfg.temperature, cfg.epsilon)?;
        let ood_v = self.catalog.variant(self.ood, Role::OodTest, cfg.method, cfg.temperature, cfg.epsilon)?;
        let prepared = prepare_features(train, id_v, ood_v, regime)?;
        run_cell(
            &prepared.cell(seed),
            &MethodConfig {
                epsilon: 0.0,
                ..cfg.clone()
            },
        )
    }
}

fn row(id: &str, ood: &str, cfg: &MethodConfig, policy: Policy, regime: Regime, seed: u64, r: EvalResult) -> ReportRow {
    let p = cfg.params();
    ReportRow {
        id: id.to_string(),
        ood: ood.to_string(),
        method: cfg.method,
        policy,
        temperature: p.temperature,
        epsilon: p.epsilon,
        scheme: p.scheme,
        exemplars: p.exemplars,
        regime,
        seed: Some(seed),
        auroc: r.auroc,
        fnr95: r.fnr95,
    }
}

/// Runs every `(OOD, regime, seed, method)` cell of `spec`.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<Report> {
    spec.validate()?;
    let grid = spec.grid.clone().unwrap_or_else(SweepGrid::standard);
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    if spec.methods.iter().any(|m| m.policy == Policy::Sweep) {
        notes.push(SWEEP_NOTE.to_string());
    }
    match &spec.source {
        Source::Toy(toy) => {
            for &seed in &spec.seeds {
                let bundle = toy.generate::<f64>(seed);
                for regime in &spec.regimes {
                    let prepared = prepare_toy(&bundle, regime)?;
                    let cell = prepared.cell(seed);
                    for m in &spec.methods {
                        let cfg = m.resolve(ExemplarCount::All);
                        let (cfg, result) = evaluate_policy(&cfg, m.policy, &grid, |c| run_cell(&cell, c))?;
                        let ood = format!("{}-ood", toy.name());
                        rows.push(row(toy.name(), &ood, &cfg, m.policy, regime.regime, seed, result));
                    }
                }
            }
        }
        Source::Features { id, files } => {
            let paths: Vec<PathBuf> = files.iter().map(|f| base_dir.join(f)).collect();
            let catalog = FeatureCatalog::new(paths.iter().map(|p| read_feature_file(p)).collect::<Result<_>>()?);
            for ood in &spec.ood {
                let pair = FeaturePair {
                    catalog: &catalog,
                    id,
                    ood,
                };
                for regime in &spec.regimes {
                    for &seed in &spec.seeds {
                        for m in &spec.methods {
                            let cfg = m.resolve(ExemplarCount::Count(FIXED_EXEMPLARS));
                            let (cfg, result) =
                                evaluate_policy(&cfg, m.policy, &grid, |c| pair.run_cell(c, regime, seed))?;
                            rows.push(row(id, ood, &cfg, m.policy, regime.regime, seed, result));
                        }
                    }
                }
            }
        }
    }
    build_report(rows, notes)
}

/// Evaluates `cfg` as is, or sweeps it and returns the chosen point.
pub fn evaluate_policy(
    cfg: &MethodConfig,
    policy: Policy,
    grid: &SweepGrid,
    mut eval: impl FnMut(&MethodConfig) -> Result<EvalResult>,
) -> Result<(MethodConfig, EvalResult)> {
    match policy {
        Policy::Fixed => Ok((cfg.clone(), eval(cfg)?)),
        Policy::Sweep => {
            let out = run_sweep(cfg.method, grid, |t, e| {
                eval(&MethodConfig {
                    temperature: t,
                    epsilon: e,
                    ..cfg.clone()
                })
            })?;
            let chosen = MethodConfig {
                temperature: out.best.temperature,
                epsilon: out.best.epsilon,
                ..cfg.clone()
            };
            Ok((chosen, out.best.result))
        }
    }
}

pub const SWEEP_NOTE: &str = "NOTE: sweep selects hyper-parameters on the OOD test data itself \
(the 'with OOD access' setting); its numbers are not comparable to fixed-policy runs.";

/// Per-cell table plus win matrices for every regime present: fixed-policy
/// rows, and, when sweeps exist, sweeps in place of their fixed runs.
pub fn build_report(mut rows: Vec<ReportRow>, notes: Vec<String>) -> Result<Report> {
    rows.sort_by(|a, b| {
        (&a.id, &a.ood, a.regime, a.method, a.policy, a.seed)
            .cmp(&(&b.id, &b.ood, b.regime, b.method, b.policy, b.seed))
    });
    let mut win = win_matrices(&rows, Selection::Fixed, &[])?;
    if rows.iter().any(|r| r.policy == Policy::Sweep) {
        win.extend(win_matrices(&rows, Selection::PreferSweep, &[])?);
    }
    Ok(Report {
        rows,
        win_matrices: win,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_toy_dataset1;
    use crate::detectors::msp_score;
    use crate::io::{FeatureMeta, Preprocessing};
    use crate::metrics::auroc;

    fn toy1_cell_parts(seed: u64) -> (ToyBundle<f64>, LinearSoftmaxModel<f64>) {
        let b = generate_toy_dataset1::<f64>(seed);
        let m = train_linear_softmax(&b.id_train, &TrainConfig::default()).unwrap().model;
        (b, m)
    }

    #[test]
    fn standard_grid() {
        let g = SweepGrid::standard();
        assert_eq!(g.points(Method::Odin).len(), 44);
        assert_eq!(g.points(Method::Mahalanobis).len(), 11);
        assert!(SweepGrid::new(vec![0.0], vec![0.0]).is_err());
        assert!(SweepGrid::new(vec![1.0], vec![-0.1]).is_err());
    }

    #[test]
    fn default_pairs_are_sixteen() {
        let pairs = default_pairs();
        assert_eq!(pairs.len(), 16);
        assert!(!pairs.iter().any(|p| p.id == "CIFAR-10" && p.ood == "STL-10"));
        assert!(!pairs.iter().any(|p| p.id == "CIFAR-100" && p.ood == "CelebA"));
    }

    #[test]
    fn toy_cells_match_expected_gaps() {
        let r = run_toy_seed(0).unwrap();
        assert_eq!(r.toy1.min_distance, 1.0);
        assert_eq!(r.toy1.msp, 0.0);
        assert_eq!(r.toy1.accuracy, 1.0);
        assert_eq!(r.toy2.msp, 1.0);
        assert_eq!(r.toy2.accuracy, 1.0);
    }

    #[test]
    fn degenerate_grid_equals_msp() {
        let (b, m) = toy1_cell_parts(1);
        let cell = Cell {
            model: &m,
            train: &b.id_train,
            id_test: b.id_test.points(),
            ood_test: &b.ood_test,
            seed: 1,
        };
        let grid = SweepGrid::new(vec![1.0], vec![0.0]).unwrap();
        let out = run_sweep_cell(&cell, &MethodConfig::fixed(Method::Odin), &grid).unwrap();
        let msp = run_cell(&cell, &MethodConfig::fixed(Method::Msp)).unwrap();
        assert_eq!(out.best.result, msp);
        let scores: Vec<f64> = b.id_test.points().iter().map(|x| msp_score(&m, x).unwrap()).collect();
        let ood: Vec<f64> = b.ood_test.iter().map(|x| msp_score(&m, x).unwrap()).collect();
        assert_eq!(msp.auroc, auroc(&ScoredPopulations::new(scores, ood).unwrap()));
    }

    #[test]
    fn sweep_dominates_fixed() {
        for seed in 0..3 {
            let b = ToyDataset::Two.generate::<f64>(seed);
            let m = train_linear_softmax(&b.id_train, &TrainConfig::default()).unwrap().model;
            let cell = Cell {
                model: &m,
                train: &b.id_train,
                id_test: b.id_test.points(),
                ood_test: &b.ood_test,
                seed,
            };
            for method in [Method::Odin, Method::Mahalanobis] {
                let fixed = run_cell(&cell, &MethodConfig::fixed(method)).unwrap();
                let swept = run_sweep_cell(&cell, &MethodConfig::fixed(method), &SweepGrid::standard()).unwrap();
                assert!(swept.best.result.auroc >= fixed.auroc);
            }
        }
    }

    #[test]
    fn selection_rules() {
        let p = |t, e, auroc, fnr95| SweepPoint {
            temperature: t,
            epsilon: e,
            result: EvalResult { auroc, fnr95 },
        };
        let best = select_best(&[p(10.0, 0.0, 0.9, 0.3), p(1.0, 0.1, 0.9, 0.2), p(1.0, 0.0, 0.8, 0.0)]).unwrap();
        assert_eq!((best.temperature, best.epsilon), (1.0, 0.1));
        let best = select_best(&[p(10.0, 0.0, 0.9, 0.2), p(1.0, 0.1, 0.9, 0.2)]).unwrap();
        assert_eq!((best.temperature, best.epsilon), (1.0, 0.1));
        assert!(run_sweep(Method::Pod, &SweepGrid::standard(), |_, _| unreachable!()).is_err());
    }

    #[test]
    fn toy_experiment_is_deterministic_and_complete() {
        let spec = ExperimentSpec {
            source: Source::Toy(ToyDataset::One),
            ood: vec![],
            methods: vec![
                MethodSpec::fixed(Method::Msp),
                MethodSpec::fixed(Method::MinDistance),
                MethodSpec::fixed(Method::Mahalanobis),
                MethodSpec {
                    policy: Policy::Sweep,
                    ..MethodSpec::fixed(Method::Odin)
                },
            ],
            regimes: vec![RegimeSpec::FULL, RegimeSpec::low(0.5)],
            seeds: vec![0, 1],
            grid: Some(SweepGrid::new(vec![1.0, 1000.0], vec![0.0, 0.01]).unwrap()),
        };
        let a = run_experiment(&spec, Path::new(".")).unwrap();
        let b = run_experiment(&spec, Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2 * 2 * 4);
        assert_eq!(a.notes, vec![SWEEP_NOTE.to_string()]);
        // fixed and prefer-sweep matrices for both regimes
        assert_eq!(a.win_matrices.len(), 4);
        for w in &a.win_matrices {
            assert_eq!(w.matrix.pair_total, 1);
        }
        let bad = ExperimentSpec {
            methods: vec![MethodSpec {
                policy: Policy::Sweep,
                ..MethodSpec::fixed(Method::Pod)
            }],
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{
              "source": {"features": {"id": "CIFAR-10", "files": ["a.oodf", "b.oodf"]}},
              "ood": ["SVHN"],
              "methods": [{"method": "msp"}, {"method": "odin", "policy": "sweep"}, {"method": "pod", "M": 20},
                          {"method": "podft", "M": "all"}],
              "regimes": [{"regime": "full"}, {"regime": "low", "fraction": 0.1}]
            }"#,
        )
        .unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(spec.methods[1].policy, Policy::Sweep);
        assert_eq!(spec.methods[2].exemplars, Some(ExemplarCount::Count(20)));
        assert_eq!(spec.methods[3].exemplars, Some(ExemplarCount::All));
        assert_eq!(spec.regimes[1], RegimeSpec::low(0.1));
        let back: ExperimentSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<ExemplarCount>(r#""some""#).is_err());
    }

    #[test]
    fn low_regime_changes_only_training_data() {
        let b = ToyDataset::One.generate::<f64>(3);
        let full = prepare_toy(&b, &RegimeSpec::FULL).unwrap();
        let low = prepare_toy(&b, &RegimeSpec::low(0.1)).unwrap();
        assert_eq!(full.id_test, low.id_test);
        assert_eq!(full.ood_test, low.ood_test);
        assert_eq!(low.train, low_data_subset(&b.id_train, 0.1).unwrap());
    }

    fn features(
        role: Role,
        name: &str,
        pre: Preprocessing,
        points: &[Vec<f64>],
        labels: Option<&[usize]>,
        logit_shift: f32,
    ) -> FeatureSet {
        let mut fs = FeatureSet::from_points(
            FeatureMeta {
                dataset: name.into(),
                role,
                preprocessing: Preprocessing::None,
            },
            points,
            labels.map(|l| (l, 2)),
        )
        .unwrap();
        fs.meta.preprocessing = pre;
        fs.c = Some(2);
        fs.logits = Some(
            points
                .iter()
                .flat_map(|p| [p[0] as f32 + logit_shift, -(p[0] as f32)])
                .collect(),
        );
        fs
    }

    #[test]
    fn feature_pairs_fetch_variants() {
        let b = ToyDataset::One.generate::<f64>(0);
        let train = features(Role::IdTrain, "toy", Preprocessing::None, b.id_train.points(), Some(b.id_train.labels()), 0.0);
        let tag = Preprocessing::for_request(Method::Odin, 1000.0, 0.0014);
        let catalog = FeatureCatalog::new(vec![
            train,
            features(Role::IdTest, "toy", Preprocessing::None, b.id_test.points(), None, 0.0),
            features(Role::OodTest, "ood", Preprocessing::None, &b.ood_test, None, 0.0),
            features(Role::IdTest, "toy", tag, b.id_test.points(), None, 5.0),
        ]);
        let pair = FeaturePair {
            catalog: &catalog,
            id: "toy",
            ood: "ood",
        };
        let odin = |eps| MethodConfig {
            epsilon: eps,
            ..MethodConfig::fixed(Method::Odin)
        };
        assert!(pair.run_cell(&odin(0.0), &RegimeSpec::FULL, 0).is_ok());
        // the OOD variant is absent
        assert!(matches!(
            pair.run_cell(&odin(0.0014), &RegimeSpec::FULL, 0),
            Err(Error::MissingPreprocessedVariant { .. })
        ));
    }
}
