//! Global-to-local matching: coarse correspondences from high-level
//! keypoint matches filtered by RANSAC, fine correspondences from low-level
//! matches inside local cells, and a weighted SVD solve.

mod fine;
mod ransac;
mod register;
mod svd;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{distance_sq_within, DescriptorSet};
use crate::detectors::ScoreSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use fine::local_cell_match;
pub use ransac::{ransac_transform, RansacOutcome, RansacParams};
pub use register::{register, MatchingParams, RegisterConfig, RegistrationRecord, RegistrationResult, StageTimings};
pub use svd::weighted_svd;

/// Which half of the pipeline produced a correspondence set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Coarse,
    Fine,
}

/// Index pairs `(source, target)` with nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet<T: Real> {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Vec<T>,
    pub tier: Tier,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn empty(tier: Tier) -> Self {
        Self {
            pairs: Vec::new(),
            weights: Vec::new(),
            tier,
        }
    }

    /// Pairs with unit weights.
    pub fn unweighted(pairs: Vec<(usize, usize)>, tier: Tier) -> Self {
        let weights = vec![T::one(); pairs.len()];
        Self { pairs, weights, tier }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks index bounds and that weights are finite and nonnegative.
    pub fn validate(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        if self.weights.len() != self.pairs.len() {
            return Err(Error::validation("correspondence weights and pairs differ in length"));
        }
        if let Some(&(s, t)) = self.pairs.iter().find(|&&(s, t)| s >= n_src || t >= n_tgt) {
            return Err(Error::validation(format!("correspondence ({s}, {t}) out of range")));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w >= T::zero()) {
            return Err(Error::validation("correspondence weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// Rewrites local indices through the given lookup tables.
    pub fn remap(&self, src_map: &[usize], tgt_map: &[usize]) -> Self {
        Self {
            pairs: self.pairs.iter().map(|&(s, t)| (src_map[s], tgt_map[t])).collect(),
            weights: self.weights.clone(),
            tier: self.tier,
        }
    }

    /// Pairs where `mask` is set.
    pub fn filter(&self, mask: &[bool]) -> Self {
        Self {
            pairs: self.pairs.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect(),
            weights: self.weights.iter().zip(mask).filter(|(_, &m)| m).map(|(w, _)| *w).collect(),
            tier: self.tier,
        }
    }

    /// Drops repeated `(source, target)` pairs, keeping the largest weight.
    /// First-occurrence order is preserved.
    pub fn dedup(&self) -> Self {
        let mut slot: HashMap<(usize, usize), usize> = HashMap::with_capacity(self.len());
        let mut pairs = Vec::new();
        let mut weights: Vec<T> = Vec::new();
        for (&p, &w) in self.pairs.iter().zip(&self.weights) {
            match slot.get(&p) {
                Some(&k) => {
                    if w > weights[k] {
                        weights[k] = w;
                    }
                }
                None => {
                    slot.insert(p, pairs.len());
                    pairs.push(p);
                    weights.push(w);
                }
            }
        }
        Self {
            pairs,
            weights,
            tier: self.tier,
        }
    }
}

/// Index of the nearest row of `set` to `query`, lowest index on ties.
pub(crate) fn nearest_row<T: Real>(query: &[T], set: &DescriptorSet<T>, candidates: &[usize]) -> Option<usize> {
    let mut best: Option<(T, usize)> = None;
    for &j in candidates {
        let bound = best.map_or(T::max_value().expect("bounded"), |(bd, _)| bd);
        if let Some(d) = distance_sq_within(query, set.row(j), bound) {
            if best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                best = Some((d, j));
            }
        }
    }
    best.map(|(_, j)| j)
}

/// Nearest neighbors in feature space from every source row into the
/// target. With `mutual`, only pairs that are each other's nearest
/// neighbor survive. Weights are 1.
pub fn match_features<T: Real>(
    src: &DescriptorSet<T>,
    tgt: &DescriptorSet<T>,
    mutual: bool,
) -> Result<CorrespondenceSet<T>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::validation("feature matching needs nonempty descriptor sets"));
    }
    if src.dim() != tgt.dim() {
        return Err(Error::validation(format!(
            "descriptor dimensions differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let all_src: Vec<usize> = (0..src.len()).collect();
    let all_tgt: Vec<usize> = (0..tgt.len()).collect();
    let forward: Vec<usize> = (0..src.len())
        .into_par_iter()
        .map(|i| nearest_row(src.row(i), tgt, &all_tgt).expect("nonempty"))
        .collect();
    let pairs = if mutual {
        let backward: Vec<usize> = (0..tgt.len())
            .into_par_iter()
            .map(|j| nearest_row(tgt.row(j), src, &all_src).expect("nonempty"))
            .collect();
        forward
            .iter()
            .enumerate()
            .filter(|&(i, &j)| backward[j] == i)
            .map(|(i, &j)| (i, j))
            .collect()
    } else {
        forward.into_iter().enumerate().collect()
    };
    Ok(CorrespondenceSet::unweighted(pairs, Tier::Coarse))
}

/// Keeps the `ceil(top_fraction * N)` pairs whose source point has the
/// highest low-level detection score (ties by source, then target index),
/// reweighted by that score.
pub fn select_fine_subset<T: Real>(
    all_fine: &CorrespondenceSet<T>,
    scores_low: &ScoreSet<T>,
    top_fraction: f64,
) -> Result<CorrespondenceSet<T>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::validation("top_fraction must lie in (0, 1]"));
    }
    all_fine.validate(scores_low.len(), usize::MAX)?;
    let det = scores_low.detection();
    let mut order: Vec<usize> = (0..all_fine.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (all_fine.pairs[a], all_fine.pairs[b]);
        det[pb.0]
            .partial_cmp(&det[pa.0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(pa.cmp(&pb))
    });
    let keep = (top_fraction * all_fine.len() as f64).ceil() as usize;
    order.truncate(keep.min(all_fine.len()));
    Ok(CorrespondenceSet {
        pairs: order.iter().map(|&k| all_fine.pairs[k]).collect(),
        weights: order.iter().map(|&k| det[all_fine.pairs[k].0]).collect(),
        tier: Tier::Fine,
    })
}
