//! Curiosity-weighted blending of usefulness and unexpectedness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, UserId};

#[derive(Debug, Error, PartialEq)]
pub enum RerankError {
    #[error("curiosity {0} is outside [0, 1]")]
    Curiosity(f64),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("requested top {requested} of only {available} candidates")]
    TooFew { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, RerankError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: ItemId,
    pub useful: f64,
    pub unexp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub useful: f64,
    pub unexp: f64,
    pub serendipity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user_id: UserId,
    pub curiosity: f64,
    pub items: Vec<ScoredCandidate>,
}

impl RecommendationList {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|c| c.item_id).collect()
    }
}

/// `(1 - curiosity) * useful + curiosity * unexp`, with no rescaling of
/// either term.
pub fn serendipity_score(curiosity: f64, useful: f64, unexp: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&curiosity) {
        return Err(RerankError::Curiosity(curiosity));
    }
    Ok((1.0 - curiosity) * useful + curiosity * unexp)
}

/// Every candidate scored and sorted by descending serendipity, ties broken
/// by ascending item id.
pub fn rank_all(user_id: UserId, curiosity: f64, candidates: &[Candidate]) -> Result<RecommendationList> {
    if candidates.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    let mut items = candidates
        .iter()
        .map(|c| {
            Ok(ScoredCandidate {
                user_id,
                item_id: c.item_id,
                useful: c.useful,
                unexp: c.unexp,
                serendipity: serendipity_score(curiosity, c.useful, c.unexp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    items.sort_by(|a, b| b.serendipity.total_cmp(&a.serendipity).then(a.item_id.cmp(&b.item_id)));
    Ok(RecommendationList {
        user_id,
        curiosity,
        items,
    })
}

/// Top `n` of [`rank_all`].
pub fn rerank(user_id: UserId, curiosity: f64, candidates: &[Candidate], n: usize) -> Result<RecommendationList> {
    if n > candidates.len() {
        return Err(RerankError::TooFew {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut list = rank_all(user_id, curiosity, candidates)?;
    list.items.truncate(n);
    Ok(list)
}
