//! OODF feature files, ingested feature-table models, and report output.
//!
//! OODF layout (all integers little-endian):
//!
//! ```text
//! "OODF" | u32 version | u32 header_len | header (UTF-8 JSON)
//!        | f32 embeddings[n*e] | f32 logits[n*c]? | u32 labels[n]?
//!        | u64 CRC-64/XZ of every preceding byte
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datasets::LabeledDataset;
use crate::detectors::{Method, Scheme};
use crate::error::{Error, Result};
use crate::metrics::{compare, GridCell, WinMatrix};
use crate::models::Model;
use crate::numkit::Real;

pub const MAGIC: &[u8; 4] = b"OODF";
pub const VERSION: u32 = 1;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub const FLAG_LOGITS: u32 = 1;
pub const FLAG_LABELS: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodTest,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::IdTrain => "id_train",
            Role::IdTest => "id_test",
            Role::OodTest => "ood_test",
        }
    }
}

/// Which input preprocessing, if any, was applied before features were
/// extracted. Serialized as `"none"` or `{"method", "T", "epsilon"}`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Preprocessing {
    #[default]
    None,
    Applied {
        method: Method,
        temperature: f64,
        epsilon: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PreprocessingRepr {
    Tag(String),
    Applied {
        method: Method,
        #[serde(rename = "T", default = "one")]
        temperature: f64,
        epsilon: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Serialize for Preprocessing {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Preprocessing::None => PreprocessingRepr::Tag("none".into()),
            Preprocessing::Applied {
                method,
                temperature,
                epsilon,
            } => PreprocessingRepr::Applied {
                method,
                temperature,
                epsilon,
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Preprocessing {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PreprocessingRepr::deserialize(d)? {
            PreprocessingRepr::Tag(t) if t == "none" => Ok(Preprocessing::None),
            PreprocessingRepr::Tag(t) => Err(serde::de::Error::custom(format!("unknown preprocessing tag '{t}'"))),
            PreprocessingRepr::Applied {
                method,
                temperature,
                epsilon,
            } => Ok(Preprocessing::Applied {
                method,
                temperature,
                epsilon,
            }),
        }
    }
}

impl Preprocessing {
    /// The tag a detector needs for `(method, T, ε)`; `ε = 0` needs none.
    pub fn for_request(method: Method, temperature: f64, epsilon: f64) -> Self {
        if epsilon == 0.0 {
            return Preprocessing::None;
        }
        let temperature = if method == Method::Odin { temperature } else { 1.0 };
        Preprocessing::Applied {
            method,
            temperature,
            epsilon,
        }
    }
}

impl fmt::Display for Preprocessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preprocessing::None => f.write_str("none"),
            Preprocessing::Applied {
                method,
                temperature,
                epsilon,
            } => write!(f, "{method}(T={temperature}, eps={epsilon})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub dataset: String,
    pub role: Role,
    pub preprocessing: Preprocessing,
}

/// Externally computed embeddings (and optionally logits and labels) for
/// one split, stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub meta: FeatureMeta,
    pub e: usize,
    pub c: Option<usize>,
    pub embeddings: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    pub labels: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    e: usize,
    c: Option<usize>,
    flags: u32,
    meta: FeatureMeta,
}

impl FeatureSet {
    pub fn n(&self) -> usize {
        self.embeddings.len().checked_div(self.e).unwrap_or(0)
    }

    /// Embedding (and logit) rows of a point set, e.g. a toy split.
    pub fn from_points<T: Real>(meta: FeatureMeta, points: &[Vec<T>], labels: Option<(&[usize], usize)>) -> Result<Self> {
        let e = points.first().map_or(0, Vec::len);
        let embeddings = points.iter().flatten().map(|v| v.to_f64_lossy() as f32).collect();
        let (c, labels) = match labels {
            Some((l, c)) => (Some(c), Some(l.iter().map(|&v| v as u32).collect())),
            None => (None, None),
        };
        let fs = Self {
            meta,
            e,
            c,
            embeddings,
            logits: None,
            labels,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.e..(i + 1) * self.e]
    }

    pub fn logit_row(&self, i: usize) -> Option<&[f32]> {
        let c = self.c?;
        self.logits.as_ref().map(|l| &l[i * c..(i + 1) * c])
    }

    fn flags(&self) -> u32 {
        (if self.logits.is_some() { FLAG_LOGITS } else { 0 }) | (if self.labels.is_some() { FLAG_LABELS } else { 0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InconsistentHeader(m));
        if self.e == 0 {
            return bad("embedding dimension is 0".into());
        }
        if self.embeddings.is_empty() {
            return bad("feature set has no samples".into());
        }
        if self.embeddings.len() % self.e != 0 {
            return bad(format!("{} embedding values are not a multiple of e={}", self.embeddings.len(), self.e));
        }
        let n = self.n();
        if let Some(l) = &self.logits {
            let Some(c) = self.c else {
                return bad("logits present without a class count".into());
            };
            if c == 0 || l.len() != n * c {
                return bad(format!("{} logit values for n={n}, c={c}", l.len()));
            }
        }
        if self.c == Some(0) {
            return bad("class count is 0".into());
        }
        match (&self.labels, self.meta.role) {
            (None, Role::IdTrain) => return Err(Error::MissingLabels(self.meta.dataset.clone())),
            (Some(_), Role::OodTest) => return bad("OOD test sets carry no ID labels".into()),
            (Some(labels), _) => {
                let Some(c) = self.c else {
                    return bad("labels present without a class count".into());
                };
                if labels.len() != n {
                    return bad(format!("{} labels for n={n}", labels.len()));
                }
                if let Some(l) = labels.iter().find(|&&l| l as usize >= c) {
                    return bad(format!("label {l} out of range for c={c}"));
                }
            }
            (None, _) => {}
        }
        if self.meta.role == Role::IdTrain && self.meta.preprocessing != Preprocessing::None {
            return bad("training features are never preprocessed".into());
        }
        let finite = self.embeddings.iter().chain(self.logits.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("feature values in '{}'", self.meta.dataset)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&Header {
            n: self.n(),
            e: self.e,
            c: self.c,
            flags: self.flags(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.embeddings.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.embeddings.iter().chain(self.logits.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in self.labels.iter().flatten() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let crc = CHECKSUM.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() >= 8 {
            let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
            if version != VERSION {
                return Err(Error::VersionMismatch {
                    found: version,
                    expected: VERSION,
                });
            }
        }
        if bytes.len() < 20 {
            return Err(Error::ChecksumFailure {
                stored: 0,
                computed: CHECKSUM.checksum(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = CHECKSUM.checksum(body);
        if stored != computed {
            return Err(Error::ChecksumFailure { stored, computed });
        }

        let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| Error::InconsistentHeader(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&body[12..header_end])
            .map_err(|e| Error::InconsistentHeader(format!("header JSON: {e}")))?;
        if header.n == 0 || header.e == 0 {
            return Err(Error::InconsistentHeader(format!("n={}, e={}", header.n, header.e)));
        }
        if header.flags & !(FLAG_LOGITS | FLAG_LABELS) != 0 {
            return Err(Error::InconsistentHeader(format!("unknown flags {:#x}", header.flags)));
        }
        let has_logits = header.flags & FLAG_LOGITS != 0;
        let has_labels = header.flags & FLAG_LABELS != 0;
        let c = header.c.unwrap_or(0);
        if has_logits && header.c.is_none() {
            return Err(Error::InconsistentHeader("logit flag without class count".into()));
        }
        let words = header.n * header.e + if has_logits { header.n * c } else { 0 } + if has_labels { header.n } else { 0 };
        let payload = &body[header_end..];
        if payload.len() != 4 * words {
            return Err(Error::InconsistentHeader(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                4 * words
            )));
        }
        let mut chunks = payload.chunks_exact(4).map(|b| <[u8; 4]>::try_from(b).unwrap());
        let embeddings: Vec<f32> = chunks.by_ref().take(header.n * header.e).map(f32::from_le_bytes).collect();
        let logits = has_logits.then(|| chunks.by_ref().take(header.n * c).map(f32::from_le_bytes).collect());
        let labels = has_labels.then(|| chunks.by_ref().take(header.n).map(u32::from_le_bytes).collect());
        let fs = FeatureSet {
            meta: header.meta,
            e: header.e,
            c: header.c,
            embeddings,
            logits,
            labels,
        };
        fs.validate()?;
        Ok(fs)
    }
}

pub fn write_feature_file(fs: &FeatureSet, path: &Path) -> Result<()> {
    let bytes = fs.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSet::from_bytes(&bytes)
}

/// A gradient-free model over stored features. Its input rows are
/// `[embedding | logits]`, as produced by [`Ingested`]; `embed` and
/// `logits` slice them back out.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedModel {
    e: usize,
    c: Option<usize>,
    has_logits: bool,
    source: String,
}

impl IngestedModel {
    fn check<T: Real>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.e + if self.has_logits { self.c.unwrap_or(0) } else { 0 }
    }

    pub fn has_logits(&self) -> bool {
        self.has_logits
    }
}

impl<T: Real> Model<T> for IngestedModel {
    fn input_dim(&self) -> usize {
        IngestedModel::input_dim(self)
    }

    fn embedding_dim(&self) -> usize {
        self.e
    }

    fn class_count(&self) -> Option<usize> {
        self.c
    }

    fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        Ok(x[..self.e].to_vec())
    }

    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        if !self.has_logits {
            return Err(Error::MissingLogits(self.source.clone()));
        }
        Ok(x[self.e..].to_vec())
    }
}

/// An ingested model plus its training set and test sets as model inputs.
#[derive(Clone, Debug)]
pub struct Ingested<T> {
    pub model: IngestedModel,
    pub train: LabeledDataset<T>,
    pub tests: Vec<Vec<Vec<T>>>,
}

fn rows<T: Real>(fs: &FeatureSet, with_logits: bool) -> Vec<Vec<T>> {
    (0..fs.n())
        .map(|i| {
            let mut row: Vec<T> = fs.embedding(i).iter().map(|&v| T::lit(f64::from(v))).collect();
            if with_logits {
                row.extend(fs.logit_row(i).unwrap_or(&[]).iter().map(|&v| T::lit(f64::from(v))));
            }
            row
        })
        .collect()
}

/// Builds the model view over `train` and `tests`. Logits are used only when
/// every set carries them.
pub fn ingest_as_model<T: Real>(train: &FeatureSet, tests: &[&FeatureSet]) -> Result<Ingested<T>> {
    train.validate()?;
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels(train.meta.dataset.clone()))?;
    for t in tests {
        t.validate()?;
        if t.e != train.e {
            return Err(Error::DimensionMismatch {
                expected: train.e,
                found: t.e,
            });
        }
        if let (Some(a), Some(b)) = (train.c, t.c) {
            if a != b {
                return Err(Error::DimensionMismatch { expected: a, found: b });
            }
        }
    }
    let has_logits = train.logits.is_some() && tests.iter().all(|t| t.logits.is_some());
    let c = train.c.unwrap_or_else(|| labels.iter().max().map_or(1, |&m| m as usize + 1));
    let model = IngestedModel {
        e: train.e,
        c: Some(c),
        has_logits,
        source: train.meta.dataset.clone(),
    };
    let train_set = LabeledDataset::new(
        rows(train, has_logits),
        labels.iter().map(|&l| l as usize).collect(),
        c,
    )?;
    Ok(Ingested {
        model,
        train: train_set,
        tests: tests.iter().map(|t| rows(t, has_logits)).collect(),
    })
}

/// Feature sets indexed by `(dataset, role, preprocessing)`.
#[derive(Clone, Debug, Default)]
pub struct FeatureCatalog {
    sets: Vec<FeatureSet>,
}

impl FeatureCatalog {
    pub fn new(sets: Vec<FeatureSet>) -> Self {
        Self { sets }
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        Ok(Self::new(
            paths.iter().map(|p| read_feature_file(p.as_ref())).collect::<Result<_>>()?,
        ))
    }

    pub fn sets(&self) -> &[FeatureSet] {
        &self.sets
    }

    pub fn find(&self, dataset: &str, role: Role, preprocessing: Preprocessing) -> Option<&FeatureSet> {
        self.sets
            .iter()
            .find(|s| s.meta.dataset == dataset && s.meta.role == role && s.meta.preprocessing == preprocessing)
    }

    /// The test set a detector needs for `(method, T, ε)`.
    pub fn variant(&self, dataset: &str, role: Role, method: Method, temperature: f64, epsilon: f64) -> Result<&FeatureSet> {
        self.find(dataset, role, Preprocessing::for_request(method, temperature, epsilon))
            .ok_or_else(|| Error::MissingPreprocessedVariant {
                dataset: dataset.to_string(),
                method: method.to_string(),
                temperature,
                epsilon,
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Hyper-parameters fixed without looking at OOD data.
    Fixed,
    /// Hyper-parameters selected on the OOD test data.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Full,
    Low,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::Low => "low",
        }
    }
}

/// One evaluated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub ood: String,
    pub method: Method,
    pub policy: Policy,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<usize>,
    pub regime: Regime,
    /// `None` for a seed average.
    #[serde(default)]
    pub seed: Option<u64>,
    pub auroc: f64,
    pub fnr95: f64,
}

impl ReportRow {
    /// Name of the row's method in win matrices; sweeps are kept apart from
    /// fixed-policy runs.
    pub fn label(&self) -> String {
        match self.policy {
            Policy::Fixed => self.method.id().to_string(),
            Policy::Sweep => format!("{}+sweep", self.method.id()),
        }
    }

    pub fn pair(&self) -> String {
        format!("{}/{}", self.id, self.ood)
    }

    fn key(&self) -> String {
        format!(
            "{} {} {} {:?} T={:?} eps={:?} scheme={:?} M={:?} {} seed={:?}",
            self.id,
            self.ood,
            self.method,
            self.policy,
            self.temperature.map(f64::to_bits),
            self.epsilon.map(f64::to_bits),
            self.scheme.map(|s| s.to_string()),
            self.exemplars,
            self.regime.name(),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeWins {
    pub regime: Regime,
    #[serde(default)]
    pub selection: Selection,
    pub matrix: WinMatrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub win_matrices: Vec<RegimeWins>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Fails on the first repeated row key.
pub fn check_unique(rows: &[ReportRow]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in rows {
        if !seen.insert(r.key()) {
            return Err(Error::DuplicateRow(r.key()));
        }
    }
    Ok(())
}

/// Which rows enter a win matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Fixed-policy rows only.
    #[default]
    Fixed,
    /// For each method its sweep row when one exists, else the fixed row.
    PreferSweep,
    /// Every policy as its own entry.
    All,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Fixed => "fixed",
            Selection::PreferSweep => "prefer-sweep",
            Selection::All => "all",
        }
    }
}

/// Win matrices per regime over seed-averaged rows. `methods` filters and
/// orders the compared methods; empty means all, in method order.
pub fn win_matrices(rows: &[ReportRow], selection: Selection, methods: &[Method]) -> Result<Vec<RegimeWins>> {
    check_unique(rows)?;
    let averaged = average_seeds(rows);
    let mut out = Vec::new();
    for regime in [Regime::Full, Regime::Low] {
        let mut chosen: Vec<&ReportRow> = averaged
            .iter()
            .filter(|r| r.regime == regime)
            .filter(|r| methods.is_empty() || methods.contains(&r.method))
            .filter(|r| match selection {
                Selection::Fixed => r.policy == Policy::Fixed,
                Selection::All => true,
                Selection::PreferSweep => {
                    r.policy == Policy::Sweep
                        || !averaged.iter().any(|o| {
                            o.regime == regime && o.method == r.method && o.pair() == r.pair() && o.policy == Policy::Sweep
                        })
                }
            })
            .collect();
        if chosen.is_empty() {
            continue;
        }
        let rank = |m: Method| {
            if methods.is_empty() {
                Method::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
            } else {
                methods.iter().position(|&x| x == m).unwrap_or(usize::MAX)
            }
        };
        chosen.sort_by_key(|r| (rank(r.method), r.policy));
        let cells: Vec<GridCell> = chosen
            .iter()
            .map(|r| GridCell {
                pair: r.pair(),
                method: match selection {
                    Selection::All => r.label(),
                    _ => r.method.id().to_string(),
                },
                result: crate::metrics::EvalResult {
                    auroc: r.auroc,
                    fnr95: r.fnr95,
                },
            })
            .collect();
        out.push(RegimeWins {
            regime,
            selection,
            matrix: compare(&cells)?,
        });
    }
    Ok(out)
}

/// Collapses rows differing only in seed into their mean (seed `None`).
/// Rows without a seed are kept as they are.
pub fn average_seeds(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut groups: Vec<(ReportRow, usize)> = Vec::new();
    for r in rows {
        let mut base = r.clone();
        base.seed = None;
        match groups.iter_mut().find(|(g, _)| g.key() == base.key()) {
            Some((g, n)) => {
                g.auroc += r.auroc;
                g.fnr95 += r.fnr95;
                *n += 1;
            }
            None => groups.push((base, 1)),
        }
    }
    groups
        .into_iter()
        .map(|(mut g, n)| {
            g.auroc /= n as f64;
            g.fnr95 /= n as f64;
            g
        })
        .collect()
}

pub fn write_report_json(report: &Report, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a report file: a full report, a bare list of rows, or one row.
pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text).map_err(|e| Error::BadReport {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_report(text: &str) -> serde_json::Result<Report> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(match value {
        serde_json::Value::Array(_) => Report {
            rows: serde_json::from_value(value)?,
            ..Default::default()
        },
        serde_json::Value::Object(ref o) if o.contains_key("rows") => serde_json::from_value(value)?,
        _ => Report {
            rows: vec![serde_json::from_value(value)?],
            ..Default::default()
        },
    })
}

/// Rows of every `*.json` report in `dir`, in file-name order.
pub fn read_report_dir(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_report(&p)?.rows);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no report rows found in {}", dir.display())));
    }
    Ok(rows)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Comma-separated table with columns padded to a common width.
pub fn aligned_csv(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let last = cells.len().saturating_sub(1);
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == last {
                s.push_str(cell);
            } else {
                s.push_str(&format!("{:<width$}, ", cell, width = w));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn rows_csv(rows: &[ReportRow]) -> String {
    let header = ["id", "ood", "method", "policy", "T", "epsilon", "scheme", "M", "regime", "seed", "auroc", "fnr95"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.ood.clone(),
                r.method.id().to_string(),
                format!("{:?}", r.policy).to_lowercase(),
                opt(r.temperature),
                opt(r.epsilon),
                r.scheme.map(|s| format!("\"{s}\"")).unwrap_or_default(),
                opt(r.exemplars),
                r.regime.name().to_string(),
                r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
                format!("{:.4}", r.auroc),
                format!("{:.4}", r.fnr95),
            ]
        })
        .collect();
    aligned_csv(&header, &body)
}

/// Win counts as `row beats column` with `wins/total` cells.
pub fn win_matrix_csv(w: &RegimeWins) -> String {
    let corner = format!("{} ({})", w.regime.name(), w.selection.name());
    let mut header = vec![corner.as_str()];
    header.extend(w.matrix.methods.iter().map(String::as_str));
    let body: Vec<Vec<String>> = w
        .matrix
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut row = vec![m.clone()];
            row.extend((0..w.matrix.methods.len()).map(|j| {
                if i == j {
                    "---".to_string()
                } else {
                    format!("{}/{}", w.matrix.wins[i][j], w.matrix.pair_total)
                }
            }));
            row
        })
        .collect();
    aligned_csv(&header, &body)
}

pub fn report_csv(report: &Report) -> String {
    let mut out = rows_csv(&report.rows);
    for w in &report.win_matrices {
        out.push('\n');
        out.push_str(&win_matrix_csv(w));
    }
    out
}

pub fn write_report_csv(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}
