//! AUROC, FNR at 95% TNR, and the win-count comparison between methods.
//! ID examples are the positive class; scores are "higher is more ID".

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPopulations<T> {
    id: Vec<T>,
    ood: Vec<T>,
}

impl<T: Real> ScoredPopulations<T> {
    pub fn new(id: Vec<T>, ood: Vec<T>) -> Result<Self> {
        if id.is_empty() || ood.is_empty() {
            return Err(Error::InvalidArgument("both score populations must be non-empty".into()));
        }
        if let Some(v) = id.iter().chain(&ood).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {v}")));
        }
        Ok(Self { id, ood })
    }

    pub fn id(&self) -> &[T] {
        &self.id
    }

    pub fn ood(&self) -> &[T] {
        &self.ood
    }

    /// The same scores with the roles of the populations exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.ood.clone(),
            ood: self.id.clone(),
        }
    }
}

/// Doubled Mann–Whitney statistic `2·#{id > ood} + #{id = ood}`.
fn doubled_u<T: Real>(s: &ScoredPopulations<T>) -> u128 {
    let mut all: Vec<(T, bool)> = s
        .id
        .iter()
        .map(|&v| (v, true))
        .chain(s.ood.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    let mut ood_below: u128 = 0;
    let mut total: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut id_here, mut ood_here) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                id_here += 1;
            } else {
                ood_here += 1;
            }
            j += 1;
        }
        total += id_here * (2 * ood_below + ood_here);
        ood_below += ood_here;
        i = j;
    }
    total
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half. `O(n log n)`.
pub fn auroc<T: Real>(s: &ScoredPopulations<T>) -> f64 {
    let pairs = 2 * s.id.len() as u128 * s.ood.len() as u128;
    doubled_u(s) as f64 / pairs as f64
}

/// Fraction of ID scores at or below the `⌈0.95·n_ood⌉`-th smallest OOD score.
pub fn fnr_at_tnr95<T: Real>(s: &ScoredPopulations<T>) -> f64 {
    let mut ood = s.ood.clone();
    ood.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = ood.len();
    let k = (95 * n).div_ceil(100);
    let tau = ood[k - 1];
    s.id.iter().filter(|&&v| v <= tau).count() as f64 / s.id.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub fnr95: f64,
}

pub fn evaluate<T: Real>(s: &ScoredPopulations<T>) -> EvalResult {
    EvalResult {
        auroc: auroc(s),
        fnr95: fnr_at_tnr95(s),
    }
}

/// Higher AUROC wins, then lower FNR@95, then the lexicographically
/// earlier method id.
pub fn beats(a: &EvalResult, a_id: &str, b: &EvalResult, b_id: &str) -> bool {
    match a.auroc.partial_cmp(&b.auroc) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => match a.fnr95.partial_cmp(&b.fnr95) {
            Some(Ordering::Less) => true,
            Some(Ordering::Greater) => false,
            _ => a_id < b_id,
        },
    }
}

/// One evaluated `(pair, method)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub pair: String,
    pub method: String,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub methods: Vec<String>,
    /// `wins[i][j]`: pairs on which method `i` beats method `j`.
    pub wins: Vec<Vec<usize>>,
    pub pair_total: usize,
}

impl WinMatrix {
    pub fn index_of(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    /// Wins of `a` over `b`, if both are present.
    pub fn get(&self, a: &str, b: &str) -> Option<usize> {
        Some(self.wins[self.index_of(a)?][self.index_of(b)?])
    }
}

/// Win counts over a complete `(pair × method)` grid. Methods keep their
/// order of first appearance.
pub fn compare(cells: &[GridCell]) -> Result<WinMatrix> {
    let mut methods: Vec<String> = Vec::new();
    let mut pairs: BTreeSet<&str> = BTreeSet::new();
    let mut table: BTreeMap<(&str, &str), EvalResult> = BTreeMap::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
        pairs.insert(&c.pair);
        if table.insert((&c.pair, &c.method), c.result).is_some() {
            return Err(Error::DuplicateRow(format!("{} / {}", c.pair, c.method)));
        }
    }
    let missing: Vec<String> = pairs
        .iter()
        .flat_map(|p| methods.iter().map(move |m| (*p, m.as_str())))
        .filter(|key| !table.contains_key(key))
        .map(|(p, m)| format!("{p} / {m}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteGrid { missing });
    }

    let k = methods.len();
    let mut wins = vec![vec![0; k]; k];
    for p in &pairs {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let a = &table[&(*p, methods[i].as_str())];
                    let b = &table[&(*p, methods[j].as_str())];
                    if beats(a, &methods[i], b, &methods[j]) {
                        wins[i][j] += 1;
                    }
                }
            }
        }
    }
    Ok(WinMatrix {
        methods,
        wins,
        pair_total: pairs.len(),
    })
}
