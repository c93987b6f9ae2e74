use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::scalar::Real;

use super::Negatives;

/// Radii (m) separating positives, ignored points and negatives around an
/// aligned anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingRadii {
    pub positive: f64,
    pub negative_local: f64,
    pub negative_global: f64,
}

impl Default for SamplingRadii {
    fn default() -> Self {
        Self {
            positive: 0.0375,
            negative_local: 0.05,
            negative_global: 0.1,
        }
    }
}

impl SamplingRadii {
    pub fn validate(&self) -> Result<()> {
        let ok = self.positive > 0.0
            && self.positive < self.negative_local
            && self.negative_local < self.negative_global
            && self.negative_global.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::validation(
                "sampling radii must satisfy 0 < positive < negative_local < negative_global",
            ))
        }
    }
}

/// Why an anchor could not contribute to a loss or label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoPositives,
    NoGlobalNegatives,
    NoLocalNegatives,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::NoPositives => "no_positives",
            SkipReason::NoGlobalNegatives => "no_global_negatives",
            SkipReason::NoLocalNegatives => "no_local_negatives",
        })
    }
}

/// Anchors in the source cloud with their positive and negative target
/// indices.
///
/// For the gt-aligned anchor position `a`, target point `q` is a positive
/// when `|q - a| <= positive`, a local negative when
/// `negative_local < |q - a| < negative_global`, and a global negative when
/// `|q - a| > negative_global`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub global_negatives: Vec<Vec<usize>>,
    pub local_negatives: Vec<Vec<usize>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negatives(&self, mode: Negatives) -> &[Vec<usize>] {
        match mode {
            Negatives::Global => &self.global_negatives,
            Negatives::Local => &self.local_negatives,
        }
    }

    /// `None` when anchor `i` has the sets needed under `mode`.
    pub fn skip_reason(&self, i: usize, mode: Negatives) -> Option<SkipReason> {
        if self.positives[i].is_empty() {
            Some(SkipReason::NoPositives)
        } else if self.negatives(mode)[i].is_empty() {
            Some(match mode {
                Negatives::Global => SkipReason::NoGlobalNegatives,
                Negatives::Local => SkipReason::NoLocalNegatives,
            })
        } else {
            None
        }
    }

    pub(crate) fn validate_against(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        let n = self.anchors.len();
        if self.positives.len() != n || self.global_negatives.len() != n || self.local_negatives.len() != n {
            return Err(Error::validation("sample batch set lists differ in length"));
        }
        if self.anchors.iter().any(|&a| a >= n_src) {
            return Err(Error::validation("anchor index out of range"));
        }
        let in_range = |sets: &[Vec<usize>]| sets.iter().flatten().all(|&j| j < n_tgt);
        if !(in_range(&self.positives) && in_range(&self.global_negatives) && in_range(&self.local_negatives)) {
            return Err(Error::validation("sample index out of range for target"));
        }
        Ok(())
    }
}

/// Samples up to `n_anchors` anchors uniformly (seeded) among the source
/// points that have at least one positive, and classifies every target
/// point against each anchor.
pub fn build_sample_batch<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    gt: &RigidTransform<T>,
    radii: &SamplingRadii,
    n_anchors: usize,
    seed: u64,
) -> Result<SampleBatch> {
    radii.validate()?;
    source.ensure_nonempty()?;
    let tgt_index = SpatialIndex::new(target)?;
    let aligned = gt.apply(source)?;
    let r_p = T::of(radii.positive);

    let mut scratch = Vec::new();
    let eligible: Vec<usize> = (0..aligned.len())
        .filter(|&i| {
            tgt_index.radius_into(&aligned.points()[i], r_p, &mut scratch);
            !scratch.is_empty()
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoCorrespondence(format!(
            "no source point of '{}' has a target point within {} m under the ground truth",
            source.id(),
            radii.positive
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n_anchors.min(eligible.len());
    let mut anchors: Vec<usize> = index::sample(&mut rng, eligible.len(), take)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    anchors.sort_unstable();

    let rl2 = T::of(radii.negative_local) * T::of(radii.negative_local);
    let rg = T::of(radii.negative_global);
    let rg2 = rg * rg;
    let tgt_pts = target.points();
    let mut batch = SampleBatch::default();
    let mut ball = Vec::new();
    for &a in &anchors {
        let center = aligned.points()[a];
        tgt_index.radius_into(&center, r_p, &mut scratch);
        batch.positives.push(scratch.clone());

        tgt_index.radius_into(&center, rg, &mut ball);
        let local: Vec<usize> = ball
            .iter()
            .copied()
            .filter(|&j| {
                let d2 = (tgt_pts[j] - center).norm_squared();
                d2 > rl2 && d2 < rg2
            })
            .collect();
        batch.local_negatives.push(local);

        // Complement of the closed ball of radius negative_global.
        let mut global = Vec::with_capacity(tgt_pts.len() - ball.len());
        let mut it = ball.iter().peekable();
        for j in 0..tgt_pts.len() {
            if it.peek() == Some(&&j) {
                it.next();
            } else {
                global.push(j);
            }
        }
        batch.global_negatives.push(global);
    }
    batch.anchors = anchors;
    Ok(batch)
}
