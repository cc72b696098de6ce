//! Offline evaluation: ranking metrics, re-ranking strategy comparison and
//! the session-length sweep.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, Percent, UserId};
use crate::curiosity::CuriosityProfile;
use crate::reranker::{rank_all, Candidate, RerankError};
use crate::rng::derive_seed;

pub const DEFAULT_KS: [usize; 4] = [5, 10, 15, 20];
pub const DEFAULT_SWEEP: [u32; 6] = [5, 10, 15, 20, 25, 30];
/// Curiosity histogram resolution; bins are `[0, 0.1), ..., [0.9, 1.0]`.
pub const CURIOSITY_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {len} recommended items")]
    KTooLarge { k: usize, len: usize },
    #[error("relevant set is empty")]
    NoRelevant,
    #[error("no unexpectedness score for user {user}, item {item}")]
    MissingScore { user: UserId, item: ItemId },
    #[error("no curiosity for user {0}")]
    MissingCuriosity(UserId),
    #[error("nothing to evaluate")]
    NoUsers,
    #[error(transparent)]
    Rerank(#[from] RerankError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `(|top-k ∩ relevant| / k, |top-k ∩ relevant| / |relevant|)`.
pub fn precision_recall_at_k(recommended: &[ItemId], relevant: &HashSet<ItemId>, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > recommended.len() {
        return Err(EvalError::KTooLarge {
            k,
            len: recommended.len(),
        });
    }
    if relevant.is_empty() {
        return Err(EvalError::NoRelevant);
    }
    let hits = recommended[..k].iter().filter(|i| relevant.contains(i)).count() as f64;
    Ok((hits / k as f64, hits / relevant.len() as f64))
}

/// Mean over users of the mean unexpectedness of each user's top `k`.
pub fn unexp_at_k(lists: &[(UserId, Vec<ItemId>)], scores: &HashMap<(UserId, ItemId), f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if lists.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let mut total = 0.0;
    for (user, items) in lists {
        if k > items.len() {
            return Err(EvalError::KTooLarge { k, len: items.len() });
        }
        let mut acc = 0.0;
        for &item in &items[..k] {
            acc += scores
                .get(&(*user, item))
                .ok_or(EvalError::MissingScore { user: *user, item })?;
        }
        total += acc / k as f64;
    }
    Ok(total / lists.len() as f64)
}

/// One user's scored evaluation pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCandidates {
    pub user_id: UserId,
    pub positive: ItemId,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Each user's own curiosity as the blend weight.
    CuriosityWeighted,
    /// The same weight for every user.
    Fixed(f64),
    UsefulOnly,
    UnexpOnly,
}

impl Strategy {
    pub fn standard() -> [Strategy; 4] {
        [
            Strategy::CuriosityWeighted,
            Strategy::Fixed(0.5),
            Strategy::UsefulOnly,
            Strategy::UnexpOnly,
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::CuriosityWeighted => "curiosity_weighted".into(),
            Strategy::Fixed(c) => format!("fixed_{c}"),
            Strategy::UsefulOnly => "useful_only".into(),
            Strategy::UnexpOnly => "unexp_only".into(),
        }
    }

    fn weight(&self, curiosity: f64) -> f64 {
        match self {
            Strategy::CuriosityWeighted => curiosity,
            Strategy::Fixed(c) => *c,
            Strategy::UsefulOnly => 0.0,
            Strategy::UnexpOnly => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub unexp: f64,
}

/// Rank every user's pool under one strategy; lists are in user order.
pub fn rank_pools(pools: &[UserCandidates], curiosity: &BTreeMap<UserId, f64>, strategy: Strategy) -> Result<Vec<(UserId, Vec<ItemId>)>> {
    pools
        .par_iter()
        .map(|p| {
            let c = *curiosity
                .get(&p.user_id)
                .ok_or(EvalError::MissingCuriosity(p.user_id))?;
            let list = rank_all(p.user_id, strategy.weight(c), &p.candidates)?;
            Ok((p.user_id, list.item_ids()))
        })
        .collect()
}

/// Precision, recall and unexp at each `k` for each strategy, macro-averaged
/// over users. The single held-out positive is the relevant set.
pub fn compare_strategies(
    pools: &[UserCandidates],
    curiosity: &BTreeMap<UserId, f64>,
    strategies: &[Strategy],
    ks: &[usize],
) -> Result<Vec<MetricRow>> {
    if pools.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let scores: HashMap<(UserId, ItemId), f64> = pools
        .iter()
        .flat_map(|p| p.candidates.iter().map(move |c| ((p.user_id, c.item_id), c.unexp)))
        .collect();
    let relevant: Vec<HashSet<ItemId>> = pools.iter().map(|p| HashSet::from([p.positive])).collect();
    let mut rows = Vec::new();
    for &strategy in strategies {
        let lists = rank_pools(pools, curiosity, strategy)?;
        for &k in ks {
            let mut precision = 0.0;
            let mut recall = 0.0;
            for ((_, items), rel) in lists.iter().zip(&relevant) {
                let (p, r) = precision_recall_at_k(items, rel, k)?;
                precision += p;
                recall += r;
            }
            let n = lists.len() as f64;
            rows.push(MetricRow {
                strategy: strategy.label(),
                k,
                precision: precision / n,
                recall: recall / n,
                unexp: unexp_at_k(&lists, &scores, k)?,
            });
        }
    }
    Ok(rows)
}

/// Bin index of a curiosity value; 1.0 lands in the last bin.
pub fn curiosity_bin(c: f64) -> usize {
    ((c * CURIOSITY_BINS as f64).floor() as usize).min(CURIOSITY_BINS - 1)
}

pub fn curiosity_histogram(profiles: &[CuriosityProfile]) -> [usize; CURIOSITY_BINS] {
    let mut bins = [0; CURIOSITY_BINS];
    for p in profiles {
        bins[curiosity_bin(p.curiosity)] += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub x: Percent,
    pub seed: u64,
    pub profiles: Vec<CuriosityProfile>,
    pub histogram: [usize; CURIOSITY_BINS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepOutcome {
    Done(SweepResult),
    Failed { x: Percent, seed: u64, error: String },
}

impl SweepOutcome {
    pub fn x(&self) -> Percent {
        match self {
            SweepOutcome::Done(r) => r.x,
            SweepOutcome::Failed { x, .. } => *x,
        }
    }
}

/// Seed used for the sweep point at `x`.
pub fn sweep_seed(master: u64, x: Percent) -> u64 {
    derive_seed(master, "sweep", u64::from(x.get()))
}

/// Run `profiles_at` once per `x` in order with a per-`x` seed. A failing
/// point is recorded and the remaining points still run.
pub fn sweep_x<E, F>(xs: &[Percent], master_seed: u64, mut profiles_at: F) -> Vec<SweepOutcome>
where
    E: std::fmt::Display,
    F: FnMut(Percent, u64) -> std::result::Result<Vec<CuriosityProfile>, E>,
{
    xs.iter()
        .map(|&x| {
            let seed = sweep_seed(master_seed, x);
            match profiles_at(x, seed) {
                Ok(profiles) => SweepOutcome::Done(SweepResult {
                    x,
                    seed,
                    histogram: curiosity_histogram(&profiles),
                    profiles,
                }),
                Err(e) => {
                    log::warn!("sweep point x={x} failed: {e}");
                    SweepOutcome::Failed {
                        x,
                        seed,
                        error: e.to_string(),
                    }
                }
            }
        })
        .collect()
}

/// Area under the ROC curve from positive and negative scores, ties counted
/// as one half.
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank-sum with average ranks over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * all[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}
