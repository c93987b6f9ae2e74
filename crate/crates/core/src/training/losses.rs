use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::scalar::Real;

/// A scalar loss with its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLoss<T: Real> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Target detection score for each of the four ranks, highest rank first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetScores {
    pub c3: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl Default for TargetScores {
    fn default() -> Self {
        Self {
            c3: 1.0,
            c2: 0.75,
            c1: 0.25,
            c0: 0.0,
        }
    }
}

impl TargetScores {
    pub fn validate(&self) -> Result<()> {
        let in_unit = [self.c3, self.c2, self.c1, self.c0]
            .iter()
            .all(|c| (0.0..=1.0).contains(c));
        if in_unit && self.c3 > self.c2 && self.c2 > self.c1 && self.c1 > self.c0 {
            Ok(())
        } else {
            Err(Error::validation("target scores must satisfy 1 >= c3 > c2 > c1 > c0 >= 0"))
        }
    }

    pub fn for_rank(&self, rank: u8) -> Option<f64> {
        match rank {
            3 => Some(self.c3),
            2 => Some(self.c2),
            1 => Some(self.c1),
            0 => Some(self.c0),
            _ => None,
        }
    }
}

/// Mean squared error between predicted scores and the target score of
/// each sample's rank.
pub fn rating_loss<T: Real>(scores: &[T], ranks: &[u8], targets: &TargetScores) -> Result<ScalarLoss<T>> {
    targets.validate()?;
    if scores.is_empty() || scores.len() != ranks.len() {
        return Err(Error::validation(format!(
            "rating loss needs equal nonempty inputs, got {} scores and {} ranks",
            scores.len(),
            ranks.len()
        )));
    }
    let m = T::of_usize(scores.len());
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &r) in scores.iter().zip(ranks) {
        let c = targets
            .for_rank(r)
            .ok_or_else(|| Error::validation(format!("rank {r} outside 0..=3")))?;
        let diff = s - T::of(c);
        loss += diff * diff;
        grad.push(two * diff / m);
    }
    Ok(ScalarLoss { loss: loss / m, grad })
}

/// Ground-truth overlap bits: a source point overlaps when its gt-aligned
/// position has a target point within `radius`; target bits likewise
/// against the aligned source.
pub fn overlap_labels<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    gt: &RigidTransform<T>,
    radius: f64,
) -> Result<(Vec<bool>, Vec<bool>)> {
    if !(radius > 0.0) {
        return Err(Error::validation("overlap radius must be positive"));
    }
    let aligned = gt.apply(source)?;
    let r = T::of(radius);
    let src_bits = if target.is_empty() {
        vec![false; source.len()]
    } else {
        let tgt_index = SpatialIndex::from_points(target.points().to_vec());
        near_any(aligned.points(), &tgt_index, r)
    };
    let tgt_bits = if source.is_empty() {
        vec![false; target.len()]
    } else {
        let src_index = SpatialIndex::from_points(aligned.into_points());
        near_any(target.points(), &src_index, r)
    };
    Ok((src_bits, tgt_bits))
}

fn near_any<T: Real>(queries: &[nalgebra::Point3<T>], index: &SpatialIndex<T>, r: T) -> Vec<bool> {
    let mut scratch = Vec::new();
    queries
        .iter()
        .map(|q| {
            index.radius_into(q, r, &mut scratch);
            !scratch.is_empty()
        })
        .collect()
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of overlap predictions, with predictions
/// clamped to `[1e-7, 1 - 1e-7]`. The gradient is zero where the clamp is
/// active.
pub fn overlap_loss<T: Real>(pred: &[T], labels: &[bool]) -> Result<ScalarLoss<T>> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::validation(format!(
            "overlap loss needs equal nonempty inputs, got {} predictions and {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let lo = T::of(BCE_CLAMP);
    let hi = T::one() - lo;
    let m = T::of_usize(pred.len());
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(labels) {
        if !p.is_finite() {
            return Err(Error::validation("overlap predictions must be finite"));
        }
        let q = p.max(lo).min(hi);
        let active = p >= lo && p <= hi;
        if y {
            loss -= q.ln();
            grad.push(if active { -T::one() / (q * m) } else { T::zero() });
        } else {
            loss -= (T::one() - q).ln();
            grad.push(if active { T::one() / ((T::one() - q) * m) } else { T::zero() });
        }
    }
    Ok(ScalarLoss { loss: loss / m, grad })
}

/// The five loss terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub descriptor_high: f64,
    pub descriptor_low: f64,
    pub overlap: f64,
    pub matchability_high: f64,
    pub matchability_low: f64,
}

impl LossComponents {
    fn as_array(&self) -> [f64; 5] {
        [
            self.descriptor_high,
            self.descriptor_low,
            self.overlap,
            self.matchability_high,
            self.matchability_low,
        ]
    }
}

/// Per-term weights of the objective. All ones by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub descriptor_high: f64,
    pub descriptor_low: f64,
    pub overlap: f64,
    pub matchability_high: f64,
    pub matchability_low: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            descriptor_high: 1.0,
            descriptor_low: 1.0,
            overlap: 1.0,
            matchability_high: 1.0,
            matchability_low: 1.0,
        }
    }
}

impl LossWeights {
    fn as_array(&self) -> [f64; 5] {
        [
            self.descriptor_high,
            self.descriptor_low,
            self.overlap,
            self.matchability_high,
            self.matchability_low,
        ]
    }
}

/// Weighted sum of the loss terms (a plain sum with default weights).
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    let c = components.as_array();
    if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation("loss components must be finite and nonnegative"));
    }
    let w = weights.as_array();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("loss weights must be finite"));
    }
    Ok(c.iter().zip(w).map(|(c, w)| c * w).sum())
}
