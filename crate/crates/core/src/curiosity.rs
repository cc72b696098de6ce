//! Per-user diversive curiosity.
//!
//! Curiosity blends two signals in `[0, 1]`:
//! - how far the short-term taste has drifted from the long-term one, as the
//!   Euclidean distance between L2-normalized aggregate vectors, halved;
//! - how diverse the short-term set is, as one minus its intra-list
//!   similarity, where item similarity is the cosine of their co-occurrence
//!   across all users' short-term sets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, Percent, UserId};
use crate::factorization::{PreferenceKind, PreferenceSet, PREFERENCE_SET_SIZE};
use crate::linalg::l2_norm;

#[derive(Debug, Error, PartialEq)]
pub enum CuriosityError {
    #[error("preference set of user {user} has {found} items, expected {PREFERENCE_SET_SIZE}")]
    SetSize { user: UserId, found: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("item {0} is not in the co-occurrence index")]
    UnknownItem(ItemId),
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("expected a {expected:?} preference set for user {user}")]
    Kind { user: UserId, expected: PreferenceKind },
    #[error("user {0} has no long-term preference set")]
    MissingLongTerm(UserId),
}

pub type Result<T> = std::result::Result<T, CuriosityError>;

/// Element-wise mean of a preference set's 20 vectors.
pub fn aggregate_vector(set: &PreferenceSet) -> Result<Vec<f64>> {
    if set.vectors.len() != PREFERENCE_SET_SIZE {
        return Err(CuriosityError::SetSize {
            user: set.user_id,
            found: set.vectors.len(),
        });
    }
    let dim = set.vectors[0].len();
    let mut sum = vec![0.0; dim];
    for v in &set.vectors {
        if v.len() != dim {
            return Err(CuriosityError::Dimension(dim, v.len()));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = set.vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Difference {
    /// Distance between the normalized vectors, in `[0, 2]`.
    pub raw: f64,
    /// `raw / 2`.
    pub norm: f64,
    /// Set when either vector is all zeros; both values are then 0.
    pub degenerate: bool,
}

/// Distance between the directions of the long- and short-term aggregates.
pub fn preference_difference(long: &[f64], short: &[f64]) -> Result<Difference> {
    if long.len() != short.len() {
        return Err(CuriosityError::Dimension(long.len(), short.len()));
    }
    if long.iter().chain(short).any(|x| !x.is_finite()) {
        return Err(CuriosityError::NonFinite("aggregate vector"));
    }
    let (nl, ns) = (l2_norm(long), l2_norm(short));
    if nl == 0.0 || ns == 0.0 {
        return Ok(Difference {
            raw: 0.0,
            norm: 0.0,
            degenerate: true,
        });
    }
    let sq: f64 = long
        .iter()
        .zip(short)
        .map(|(a, b)| {
            let d = a / nl - b / ns;
            d * d
        })
        .sum();
    // Round-off can push antipodal pairs a hair past 2.
    let raw = sq.sqrt().min(2.0);
    Ok(Difference {
        raw,
        norm: raw / 2.0,
        degenerate: false,
    })
}

/// For each item, the sorted ids of users whose short-term set contains it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CooccurrenceIndex {
    users: BTreeMap<ItemId, Vec<UserId>>,
    population: usize,
}

impl CooccurrenceIndex {
    pub fn build<'a, I>(short_sets: I) -> Self
    where
        I: IntoIterator<Item = &'a PreferenceSet>,
    {
        let mut users: BTreeMap<ItemId, Vec<UserId>> = BTreeMap::new();
        let mut population = 0;
        for set in short_sets {
            population += 1;
            for &item in &set.items {
                users.entry(item).or_default().push(set.user_id);
            }
        }
        for list in users.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { users, population }
    }

    /// Direct construction from item user lists, mainly for tests.
    pub fn from_user_lists(lists: BTreeMap<ItemId, Vec<UserId>>) -> Self {
        let mut users = lists;
        let mut all: Vec<UserId> = Vec::new();
        for list in users.values_mut() {
            list.sort_unstable();
            list.dedup();
            all.extend_from_slice(list);
        }
        users.retain(|_, l| !l.is_empty());
        all.sort_unstable();
        all.dedup();
        Self {
            users,
            population: all.len(),
        }
    }

    pub fn users(&self, item: ItemId) -> Option<&[UserId]> {
        self.users.get(&item).map(Vec::as_slice)
    }

    /// Number of users whose sets were indexed.
    pub fn population(&self) -> usize {
        self.population
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

fn intersection_size(a: &[UserId], b: &[UserId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|U_m ∩ U_n| / sqrt(|U_m| |U_n|)`.
pub fn cooccurrence_cosine(index: &CooccurrenceIndex, m: ItemId, n: ItemId) -> Result<f64> {
    let um = index.users(m).ok_or(CuriosityError::UnknownItem(m))?;
    let un = index.users(n).ok_or(CuriosityError::UnknownItem(n))?;
    let common = intersection_size(um, un) as f64;
    // sqrt of the integer product makes identical sets exactly 1.
    let denom = ((um.len() as u64 * un.len() as u64) as f64).sqrt();
    Ok((common / denom).min(1.0))
}

/// One minus the mean co-occurrence cosine over all unordered item pairs of
/// the set.
pub fn short_term_diversity(index: &CooccurrenceIndex, set: &PreferenceSet) -> Result<f64> {
    if set.items.len() != PREFERENCE_SET_SIZE {
        return Err(CuriosityError::SetSize {
            user: set.user_id,
            found: set.items.len(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..set.items.len() {
        for b in a + 1..set.items.len() {
            total += cooccurrence_cosine(index, set.items[a], set.items[b])?;
            pairs += 1;
        }
    }
    Ok((1.0 - total / pairs as f64).clamp(0.0, 1.0))
}

pub fn curiosity_score(diff_norm: f64, div: f64) -> Result<f64> {
    for (name, value) in [("diff_norm", diff_norm), ("div", div)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(CuriosityError::OutOfRange { name, value });
        }
    }
    Ok((diff_norm + div) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuriosityProfile {
    pub user_id: UserId,
    pub diff_raw: f64,
    pub diff_norm: f64,
    pub div: f64,
    pub curiosity: f64,
    pub x_used: Percent,
    pub degenerate: bool,
}

pub fn user_profile(long: &PreferenceSet, short: &PreferenceSet, index: &CooccurrenceIndex, x: Percent) -> Result<CuriosityProfile> {
    for (set, expected) in [(long, PreferenceKind::Long), (short, PreferenceKind::Short)] {
        if set.kind != expected {
            return Err(CuriosityError::Kind {
                user: set.user_id,
                expected,
            });
        }
    }
    let diff = preference_difference(&aggregate_vector(long)?, &aggregate_vector(short)?)?;
    let div = short_term_diversity(index, short)?;
    Ok(CuriosityProfile {
        user_id: short.user_id,
        diff_raw: diff.raw,
        diff_norm: diff.norm,
        div,
        curiosity: curiosity_score(diff.norm, div)?,
        x_used: x,
        degenerate: diff.degenerate,
    })
}

/// Profiles for every user with a short-term set, ordered by user id. The
/// co-occurrence index is built from all of `short`.
pub fn compute_profiles(long: &[PreferenceSet], short: &[PreferenceSet], x: Percent) -> Result<Vec<CuriosityProfile>> {
    let index = CooccurrenceIndex::build(short);
    let long_by_user: BTreeMap<UserId, &PreferenceSet> = long.iter().map(|s| (s.user_id, s)).collect();
    let mut profiles: Vec<CuriosityProfile> = short
        .par_iter()
        .map(|s| {
            let l = long_by_user
                .get(&s.user_id)
                .ok_or(CuriosityError::MissingLongTerm(s.user_id))?;
            user_profile(l, s, &index, x)
        })
        .collect::<Result<_>>()?;
    profiles.sort_by_key(|p| p.user_id);
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(user: UserId, kind: PreferenceKind, items: Vec<ItemId>, vectors: Vec<Vec<f64>>) -> PreferenceSet {
        PreferenceSet {
            user_id: user,
            kind,
            scores: vec![0.0; items.len()],
            items,
            vectors,
        }
    }

    #[test]
    fn aggregate_of_copies_is_the_vector() {
        let v = vec![0.3, -1.2, 7.0];
        let s = set(1, PreferenceKind::Long, (1..=20).collect(), vec![v.clone(); 20]);
        let agg = aggregate_vector(&s).unwrap();
        for (a, b) in agg.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_halves_cancel() {
        let mut vs = vec![vec![1.0, 0.0]; 10];
        vs.extend(vec![vec![-1.0, 0.0]; 10]);
        let s = set(1, PreferenceKind::Long, (1..=20).collect(), vs);
        assert_eq!(aggregate_vector(&s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn wrong_set_size_is_rejected() {
        let s = set(4, PreferenceKind::Long, (1..=19).collect(), vec![vec![1.0]; 19]);
        assert_eq!(
            aggregate_vector(&s).unwrap_err(),
            CuriosityError::SetSize { user: 4, found: 19 }
        );
    }

    #[test]
    fn difference_reference_values() {
        let d = preference_difference(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((d.raw, d.norm), (0.0, 0.0));
        let d = preference_difference(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert!((d.raw - 2f64.sqrt()).abs() < 1e-12);
        assert!((d.norm - 0.5f64.sqrt()).abs() < 1e-12);
        let d = preference_difference(&[0.2, -0.5], &[-0.2, 0.5]).unwrap();
        assert!((d.raw - 2.0).abs() < 1e-12);
        assert!((d.norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_aggregate_is_degenerate() {
        let d = preference_difference(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.norm, 0.0);
        assert!(matches!(
            preference_difference(&[f64::NAN, 0.0], &[1.0, 0.0]),
            Err(CuriosityError::NonFinite(_))
        ));
    }

    #[test]
    fn cosine_reference_values() {
        let mut lists = BTreeMap::new();
        lists.insert(1, vec![1, 2, 3, 4]);
        lists.insert(2, (1..=9).collect());
        lists.insert(3, vec![4, 3, 2, 1]);
        lists.insert(4, vec![20, 21]);
        let idx = CooccurrenceIndex::from_user_lists(lists);
        assert_eq!(cooccurrence_cosine(&idx, 1, 3).unwrap(), 1.0);
        assert_eq!(cooccurrence_cosine(&idx, 1, 4).unwrap(), 0.0);
        assert_eq!(
            cooccurrence_cosine(&idx, 1, 99).unwrap_err(),
            CuriosityError::UnknownItem(99)
        );
    }

    #[test]
    fn cosine_three_of_four_and_nine() {
        let mut lists = BTreeMap::new();
        lists.insert(1, vec![1, 2, 3, 10]);
        lists.insert(2, (1..=9).collect());
        let idx = CooccurrenceIndex::from_user_lists(lists);
        assert!((cooccurrence_cosine(&idx, 1, 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diversity_extremes() {
        let items: Vec<ItemId> = (1..=20).collect();
        let shared = BTreeMap::from_iter(items.iter().map(|&i| (i, vec![1, 2, 3])));
        let s = set(1, PreferenceKind::Short, items.clone(), vec![vec![0.0]; 20]);
        assert_eq!(short_term_diversity(&CooccurrenceIndex::from_user_lists(shared), &s).unwrap(), 0.0);
        let disjoint = BTreeMap::from_iter(items.iter().map(|&i| (i, vec![i])));
        assert_eq!(short_term_diversity(&CooccurrenceIndex::from_user_lists(disjoint), &s).unwrap(), 1.0);
    }

    #[test]
    fn score_reference_values() {
        assert_eq!(curiosity_score(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(curiosity_score(0.4, 0.6).unwrap(), 0.5);
        assert_eq!(curiosity_score(1.0, 1.0).unwrap(), 1.0);
        assert!(curiosity_score(1.2, 0.0).is_err());
        assert!(curiosity_score(0.5, f64::NAN).is_err());
    }
}
