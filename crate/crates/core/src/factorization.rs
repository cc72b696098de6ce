//! Long-term preference modeling: biased matrix factorization trained by SGD
//! on explicit ratings, plus extraction of each user's top-20 preference set.
//!
//! The item factors double as the shared preference space: short-term sets
//! produced by [`crate::sequence`] carry these same vectors, so long and
//! short aggregates can be compared directly.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Interaction, ItemId, UserId};
use crate::linalg::dot;
use crate::rng::stream_rng;
use crate::snapshot::Snapshot;

/// Size of every long- and short-term preference set.
pub const PREFERENCE_SET_SIZE: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}: objective {value}")]
    Diverged { epoch: usize, value: f64 },
    #[error("user {0} is unknown to the factor model")]
    UnknownUser(UserId),
    #[error("only {available} scorable catalog items, {PREFERENCE_SET_SIZE} required")]
    CatalogTooSmall { available: usize },
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
    #[error("malformed factor table: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfHyper {
    pub dim: usize,
    pub lr: f64,
    pub reg: f64,
    pub epochs: usize,
    /// Standard deviation of the normal factor initializer.
    pub init_std: f64,
}

impl Default for MfHyper {
    fn default() -> Self {
        Self {
            dim: 80,
            lr: 0.005,
            reg: 0.02,
            epochs: 20,
            init_std: 0.1,
        }
    }
}

/// Dense row table keyed by entity id.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    ids: Vec<u32>,
    index: BTreeMap<u32, usize>,
    factors: Vec<f64>,
    bias: Vec<f64>,
}

impl Table {
    fn new(ids: Vec<u32>, dim: usize) -> Self {
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self {
            factors: vec![0.0; ids.len() * dim],
            bias: vec![0.0; ids.len()],
            ids,
            index,
        }
    }

    fn row(&self, idx: usize, dim: usize) -> &[f64] {
        &self.factors[idx * dim..(idx + 1) * dim]
    }
}

/// Biased factorization model: `r(u,i) = mean + b_u + b_i + p_u . q_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FactorTables", try_from = "FactorTables")]
pub struct FactorModel {
    dim: usize,
    global_mean: f64,
    users: Table,
    items: Table,
}

/// Result of [`FactorModel::predict`]; `cold` marks a fallback prediction for
/// an unseen user or item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affinity {
    pub value: f64,
    pub cold: bool,
}

impl FactorModel {
    /// A model with all-zero factors and biases.
    pub fn zeros(dim: usize, global_mean: f64, users: Vec<UserId>, items: Vec<ItemId>) -> Self {
        Self {
            dim,
            global_mean,
            users: Table::new(users, dim),
            items: Table::new(items, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.users.ids
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.items.ids
    }

    pub fn user_factors(&self, user: UserId) -> Option<&[f64]> {
        self.users.index.get(&user).map(|&i| self.users.row(i, self.dim))
    }

    pub fn item_factors(&self, item: ItemId) -> Option<&[f64]> {
        self.items.index.get(&item).map(|&i| self.items.row(i, self.dim))
    }

    pub fn user_bias(&self, user: UserId) -> Option<f64> {
        self.users.index.get(&user).map(|&i| self.users.bias[i])
    }

    pub fn item_bias(&self, item: ItemId) -> Option<f64> {
        self.items.index.get(&item).map(|&i| self.items.bias[i])
    }

    pub fn set_user(&mut self, user: UserId, bias: f64, factors: &[f64]) -> Result<(), FactorError> {
        let idx = *self.users.index.get(&user).ok_or(FactorError::UnknownUser(user))?;
        self.users.bias[idx] = bias;
        self.users.factors[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(factors);
        Ok(())
    }

    pub fn set_item(&mut self, item: ItemId, bias: f64, factors: &[f64]) -> Result<(), FactorError> {
        let idx = *self
            .items
            .index
            .get(&item)
            .ok_or_else(|| FactorError::Malformed(format!("unknown item {item}")))?;
        self.items.bias[idx] = bias;
        self.items.factors[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(factors);
        Ok(())
    }

    /// Predicted affinity. Unknown entities fall back to the global mean plus
    /// whatever bias terms are known, flagged as cold.
    pub fn predict(&self, user: UserId, item: ItemId) -> Affinity {
        let u = self.users.index.get(&user).copied();
        let i = self.items.index.get(&item).copied();
        let mut value = self.global_mean;
        if let Some(u) = u {
            value += self.users.bias[u];
        }
        if let Some(i) = i {
            value += self.items.bias[i];
        }
        match (u, i) {
            (Some(u), Some(i)) => Affinity {
                value: value + dot(self.users.row(u, self.dim), self.items.row(i, self.dim)),
                cold: false,
            },
            _ => Affinity { value, cold: true },
        }
    }

    /// The training objective over `train`, computed from scratch: for every
    /// rating, squared error plus `reg` times the squared norms of the
    /// parameters it touches.
    pub fn objective(&self, train: &[Rating], reg: f64) -> f64 {
        let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
        train
            .iter()
            .map(|e| {
                let r = self.predict(e.user_id, e.item_id).value;
                let mut term = (e.value - r).powi(2);
                if let (Some(p), Some(q)) = (self.user_factors(e.user_id), self.item_factors(e.item_id)) {
                    let bu = self.user_bias(e.user_id).unwrap_or(0.0);
                    let bi = self.item_bias(e.item_id).unwrap_or(0.0);
                    term += reg * (sq(p) + sq(q) + bu * bu + bi * bi);
                }
                term
            })
            .sum()
    }

    pub fn mean_user_factor_norm(&self) -> f64 {
        let n = self.users.ids.len().max(1) as f64;
        (0..self.users.ids.len())
            .map(|i| crate::linalg::l2_norm(self.users.row(i, self.dim)))
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorTraining {
    pub model: FactorModel,
    /// Objective after each epoch.
    pub epoch_objective: Vec<f64>,
    /// Final objective, with the L2 term tracked incrementally through SGD.
    pub tracked_objective: f64,
}

/// A real-valued `(user, item, rating)` observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub value: f64,
}

impl From<&Interaction> for Rating {
    fn from(e: &Interaction) -> Self {
        Self {
            user_id: e.user_id,
            item_id: e.item_id,
            value: f64::from(e.rating),
        }
    }
}

/// Fit biased matrix factorization by SGD on explicit ratings.
pub fn train_factors(train: &[Interaction], hyper: &MfHyper, seed: u64) -> Result<FactorTraining, FactorError> {
    let ratings: Vec<Rating> = train.iter().map(Rating::from).collect();
    train_factors_on(&ratings, hyper, seed)
}

/// Fit on real-valued ratings.
///
/// Each epoch visits the ratings in a seeded shuffled order. The objective
/// is `sum over ratings of (r - r_hat)^2 + reg * (b_u^2 + b_i^2 + |p_u|^2 + |q_i|^2)`,
/// so each parameter's penalty is weighted by its rating count. The penalty
/// part is tracked incrementally through the updates.
pub fn train_factors_on(train: &[Rating], hyper: &MfHyper, seed: u64) -> Result<FactorTraining, FactorError> {
    if train.is_empty() {
        return Err(FactorError::EmptyTrainingSet);
    }
    if hyper.dim == 0 || !(hyper.lr > 0.0) || hyper.reg < 0.0 || hyper.init_std < 0.0 {
        return Err(FactorError::Hyper(format!("{hyper:?}")));
    }
    let dim = hyper.dim;
    let mut users: Vec<UserId> = train.iter().map(|e| e.user_id).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<ItemId> = train.iter().map(|e| e.item_id).collect();
    items.sort_unstable();
    items.dedup();

    let global_mean = train.iter().map(|e| e.value).sum::<f64>() / train.len() as f64;
    let mut model = FactorModel::zeros(dim, global_mean, users, items);

    if hyper.init_std > 0.0 {
        let normal = Normal::new(0.0, hyper.init_std).expect("positive std");
        let mut rng = stream_rng(seed, "mf-init", 0);
        for x in model.users.factors.iter_mut().chain(model.items.factors.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
    }

    let rows: Vec<(usize, usize, f64)> = train
        .iter()
        .map(|e| {
            (
                model.users.index[&e.user_id],
                model.items.index[&e.item_id],
                e.value,
            )
        })
        .collect();

    let (lr, reg) = (hyper.lr, hyper.reg);
    let mut user_count = vec![0.0f64; model.users.ids.len()];
    let mut item_count = vec![0.0f64; model.items.ids.len()];
    for &(u, i, _) in &rows {
        user_count[u] += 1.0;
        item_count[i] += 1.0;
    }
    let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    let mut penalty: f64 = (0..user_count.len())
        .map(|u| user_count[u] * (sq(model.users.row(u, dim)) + model.users.bias[u].powi(2)))
        .chain((0..item_count.len()).map(|i| item_count[i] * (sq(model.items.row(i, dim)) + model.items.bias[i].powi(2))))
        .sum();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epoch_objective = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut rng = stream_rng(seed, "mf-epoch", epoch as u64);
        order.shuffle(&mut rng);
        for &k in &order {
            let (u, i, r) = rows[k];
            let pu = &mut model.users.factors[u * dim..(u + 1) * dim];
            let qi = &mut model.items.factors[i * dim..(i + 1) * dim];
            let pred = global_mean + model.users.bias[u] + model.items.bias[i] + dot(pu, qi);
            let err = r - pred;

            let bu = model.users.bias[u];
            let bi = model.items.bias[i];
            let new_bu = bu + lr * (err - reg * bu);
            let new_bi = bi + lr * (err - reg * bi);
            let (nu, ni) = (user_count[u], item_count[i]);
            penalty += nu * (new_bu * new_bu - bu * bu) + ni * (new_bi * new_bi - bi * bi);
            model.users.bias[u] = new_bu;
            model.items.bias[i] = new_bi;

            for f in 0..dim {
                let (p, q) = (pu[f], qi[f]);
                let np = p + lr * (err * q - reg * p);
                let nq = q + lr * (err * p - reg * q);
                penalty += nu * (np * np - p * p) + ni * (nq * nq - q * q);
                pu[f] = np;
                qi[f] = nq;
            }
        }

        let sse: f64 = rows
            .iter()
            .map(|&(u, i, r)| {
                let pred = global_mean
                    + model.users.bias[u]
                    + model.items.bias[i]
                    + dot(model.users.row(u, dim), model.items.row(i, dim));
                (r - pred).powi(2)
            })
            .sum();
        let value = sse + reg * penalty;
        if !value.is_finite() {
            return Err(FactorError::Diverged { epoch, value });
        }
        log::debug!("mf epoch {epoch}: objective {value:.6}");
        epoch_objective.push(value);
    }

    let tracked_objective = match epoch_objective.last() {
        Some(&v) => v,
        None => model.objective(train, reg),
    };
    Ok(FactorTraining {
        model,
        epoch_objective,
        tracked_objective,
    })
}

/// The `k` highest-scoring items, ties broken by ascending
/// item id. Non-finite scores sort last.
pub fn top_items(mut scored: Vec<(ItemId, f64)>, k: usize) -> Vec<(ItemId, f64)> {
    scored.sort_by(|a, b| match (a.1.is_nan(), b.1.is_nan()) {
        (false, false) => b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)),
        (true, true) => a.0.cmp(&b.0),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
    });
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferenceKind {
    Long,
    Short,
}

/// A user's top preferred items with their shared-space vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub user_id: UserId,
    pub kind: PreferenceKind,
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Build a preference set from scored candidates, attaching the item factors
/// of `model` to each selected item.
pub(crate) fn preference_set_from_scores(
    model: &FactorModel,
    user_id: UserId,
    kind: PreferenceKind,
    scored: Vec<(ItemId, f64)>,
) -> Result<PreferenceSet, FactorError> {
    if scored.len() < PREFERENCE_SET_SIZE {
        return Err(FactorError::CatalogTooSmall {
            available: scored.len(),
        });
    }
    let top = top_items(scored, PREFERENCE_SET_SIZE);
    let vectors = top
        .iter()
        .map(|(item, _)| model.item_factors(*item).expect("scored items have factors").to_vec())
        .collect();
    Ok(PreferenceSet {
        user_id,
        kind,
        items: top.iter().map(|(i, _)| *i).collect(),
        scores: top.iter().map(|(_, s)| *s).collect(),
        vectors,
    })
}

/// Top-20 catalog items by predicted affinity, including items the user has
/// already rated. Catalog items without factors (never rated in training)
/// cannot be placed in the preference space and are skipped.
pub fn long_term_preferences<I>(model: &FactorModel, user: UserId, catalog: I) -> Result<PreferenceSet, FactorError>
where
    I: IntoIterator<Item = ItemId>,
{
    if model.user_factors(user).is_none() {
        return Err(FactorError::UnknownUser(user));
    }
    let scored: Vec<(ItemId, f64)> = catalog
        .into_iter()
        .filter(|i| model.item_factors(*i).is_some())
        .map(|i| (i, model.predict(user, i).value))
        .collect();
    preference_set_from_scores(model, user, PreferenceKind::Long, scored)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FactorRow {
    id: u32,
    bias: f64,
    factors: Vec<f64>,
}

/// On-disk layout of a [`FactorModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorTables {
    dim: usize,
    global_mean: f64,
    users: Vec<FactorRow>,
    items: Vec<FactorRow>,
}

fn rows_of(t: &Table, dim: usize) -> Vec<FactorRow> {
    t.ids
        .iter()
        .enumerate()
        .map(|(i, &id)| FactorRow {
            id,
            bias: t.bias[i],
            factors: t.row(i, dim).to_vec(),
        })
        .collect()
}

fn table_of(rows: Vec<FactorRow>, dim: usize) -> Result<Table, FactorError> {
    let mut t = Table::new(rows.iter().map(|r| r.id).collect(), dim);
    if t.index.len() != t.ids.len() {
        return Err(FactorError::Malformed("duplicate ids".into()));
    }
    for (i, r) in rows.into_iter().enumerate() {
        if r.factors.len() != dim || r.factors.iter().any(|x| !x.is_finite()) {
            return Err(FactorError::Malformed(format!("row {} is not {dim} finite values", r.id)));
        }
        t.bias[i] = r.bias;
        t.factors[i * dim..(i + 1) * dim].copy_from_slice(&r.factors);
    }
    Ok(t)
}

impl From<FactorModel> for FactorTables {
    fn from(m: FactorModel) -> Self {
        Self {
            dim: m.dim,
            global_mean: m.global_mean,
            users: rows_of(&m.users, m.dim),
            items: rows_of(&m.items, m.dim),
        }
    }
}

impl TryFrom<FactorTables> for FactorModel {
    type Error = FactorError;

    fn try_from(t: FactorTables) -> Result<Self, FactorError> {
        Ok(Self {
            dim: t.dim,
            global_mean: t.global_mean,
            users: table_of(t.users, t.dim)?,
            items: table_of(t.items, t.dim)?,
        })
    }
}

impl Snapshot for FactorModel {
    const KIND: &'static str = "curio-factors";
    const VERSION: u32 = 1;
}
