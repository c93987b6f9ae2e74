//! Inference-time saliency scores and score-proportional keypoint sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{distance, distance_sq_within, DescriptorSet, Level};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Spatial neighbors compared against in the saliency statistic.
    pub k: usize,
    /// Percentile of the saliency statistic mapped to score 1.
    pub percentile: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            k: 8,
            percentile: 0.95,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::validation("saliency needs k >= 2"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::validation("saliency percentile must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-point scores of one level. `detection` is always the product of
/// `matchability` and `overlap`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<T: Real> {
    level: Level,
    matchability: Vec<T>,
    overlap: Vec<T>,
    detection: Vec<T>,
}

impl<T: Real> ScoreSet<T> {
    pub fn new(level: Level, matchability: Vec<T>, overlap: Vec<T>) -> Result<Self> {
        if matchability.len() != overlap.len() {
            return Err(Error::validation("matchability and overlap lengths differ"));
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !matchability.iter().all(unit) || !overlap.iter().all(unit) {
            return Err(Error::validation("scores must lie in [0, 1]"));
        }
        let detection = matchability.iter().zip(&overlap).map(|(&m, &o)| m * o).collect();
        Ok(Self {
            level,
            matchability,
            overlap,
            detection,
        })
    }

    /// Scores where only the detection column is known (overlap of one).
    pub fn from_detection(level: Level, detection: Vec<T>) -> Result<Self> {
        let ones = vec![T::one(); detection.len()];
        Self::new(level, detection, ones)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.detection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detection.is_empty()
    }

    pub fn matchability(&self) -> &[T] {
        &self.matchability
    }

    pub fn overlap(&self) -> &[T] {
        &self.overlap
    }

    pub fn detection(&self) -> &[T] {
        &self.detection
    }
}

/// JSON sidecar form of a [`ScoreSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub level: Level,
    pub matchability: Vec<f64>,
    pub overlap: Vec<f64>,
    pub detection: Vec<f64>,
}

impl<T: Real> From<&ScoreSet<T>> for ScoreRecord {
    fn from(s: &ScoreSet<T>) -> Self {
        let widen = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
        Self {
            level: s.level,
            matchability: widen(&s.matchability),
            overlap: widen(&s.overlap),
            detection: widen(&s.detection),
        }
    }
}

/// Indices sampled from a cloud at one level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub level: Level,
    pub seed: u64,
    /// How many fewer than requested could be drawn.
    pub shortfall: usize,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Local feature distinctiveness: the mean descriptor distance from each
/// point to its `k` nearest spatial neighbors, divided by the given
/// percentile of that statistic over the cloud and clamped to `[0, 1]`.
pub fn score_saliency<T: Real>(
    descs: &DescriptorSet<T>,
    index: &SpatialIndex<T>,
    params: &DetectorParams,
) -> Result<Vec<T>> {
    params.validate()?;
    let n = index.len();
    if descs.len() != n {
        return Err(Error::validation("descriptor count differs from cloud size"));
    }
    if n < params.k + 1 {
        return Err(Error::validation(format!(
            "saliency with k = {} needs at least {} points, got {n}",
            params.k,
            params.k + 1
        )));
    }
    let k = params.k;
    let points = index.points();
    let stat: Vec<T> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = index.knn_unchecked(&points[i], k + 1);
            let mut sum = T::zero();
            let mut used = 0;
            for &j in nn.iter().filter(|&&j| j != i).take(k) {
                sum += distance(descs.row(i), descs.row(j));
                used += 1;
            }
            sum / T::of_usize(used)
        })
        .collect();

    let reference = percentile(&stat, params.percentile);
    if !(reference > T::zero()) {
        return Ok(vec![T::zero(); n]);
    }
    Ok(stat
        .into_iter()
        .map(|s| (s / reference).min(T::one()).max(T::zero()))
        .collect())
}

/// Nearest-rank percentile.
fn percentile<T: Real>(values: &[T], q: f64) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Exact nearest-neighbor search in feature space. Rows are sorted by
/// their projection on the leading principal direction; a projection gap
/// bounds the true distance from below, which ends each scan early.
struct ProjectedRows<'a, T: Real> {
    set: &'a DescriptorSet<T>,
    axis: Vec<T>,
    /// (projection, row) sorted by projection.
    sorted: Vec<(T, usize)>,
}

impl<'a, T: Real> ProjectedRows<'a, T> {
    fn new(set: &'a DescriptorSet<T>) -> Self {
        let axis = principal_axis(set);
        let mut sorted: Vec<(T, usize)> = (0..set.len()).map(|j| (dot(set.row(j), &axis), j)).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        Self { set, axis, sorted }
    }

    fn nearest_distance(&self, query: &[T]) -> T {
        let p = dot(query, &self.axis);
        // Rounding in the projections is far below this slack.
        let slack = T::of(1e-9);
        let start = self.sorted.partition_point(|&(v, _)| v < p);
        let mut best = T::max_value().expect("bounded");
        let (mut lo, mut hi) = (start, start);
        loop {
            let gap_lo = (lo > 0).then(|| p - self.sorted[lo - 1].0);
            let gap_hi = (hi < self.sorted.len()).then(|| self.sorted[hi].0 - p);
            let (gap, k) = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), Some(b)) if a <= b => (a, lo - 1),
                (Some(a), None) => (a, lo - 1),
                (_, Some(b)) => (b, hi),
            };
            let g = (gap - slack).max(T::zero());
            if g * g > best {
                break;
            }
            if k < lo {
                lo -= 1;
            } else {
                hi += 1;
            }
            if let Some(d) = distance_sq_within(query, self.set.row(self.sorted[k].1), best) {
                best = best.min(d);
            }
        }
        best.sqrt()
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Leading eigenvector of the row covariance by power iteration.
fn principal_axis<T: Real>(set: &DescriptorSet<T>) -> Vec<T> {
    let (n, dim) = (set.len(), set.dim());
    let mut mean = vec![T::zero(); dim];
    for j in 0..n {
        for (m, &x) in mean.iter_mut().zip(set.row(j)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= T::of_usize(n.max(1)));
    let mut cov = vec![T::zero(); dim * dim];
    for j in 0..n {
        let row = set.row(j);
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in 0..dim {
                cov[a * dim + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let mut v = vec![T::one() / T::of_usize(dim).sqrt(); dim];
    for _ in 0..64 {
        let mut w: Vec<T> = (0..dim).map(|a| dot(&cov[a * dim..(a + 1) * dim], &v)).collect();
        let norm = dot(&w, &w).sqrt();
        if !(norm > T::zero()) {
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
    }
    v
}

/// Nearest-neighbor feature distance from each source row into `tgt`.
pub(crate) fn nearest_feature_distances<T: Real>(src: &DescriptorSet<T>, tgt: &DescriptorSet<T>) -> Vec<T> {
    let rows = ProjectedRows::new(tgt);
    (0..src.len()).into_par_iter().map(|i| rows.nearest_distance(src.row(i))).collect()
}

/// Overlap likelihood of each source point from how well its descriptor is
/// matched in the target: `exp(-(d_nn / sigma)^2)`, where `sigma` is the
/// median nearest-neighbor distance.
pub fn score_overlap_heuristic<T: Real>(src: &DescriptorSet<T>, tgt: &DescriptorSet<T>) -> Result<Vec<T>> {
    if tgt.is_empty() {
        return Err(Error::validation("target descriptor set is empty"));
    }
    if src.dim() != tgt.dim() || src.level() != tgt.level() {
        return Err(Error::validation("descriptor sets differ in level or dimension"));
    }
    let d_nn = nearest_feature_distances(src, tgt);
    if d_nn.is_empty() {
        return Ok(Vec::new());
    }
    let sigma = median(&d_nn);
    Ok(d_nn
        .into_iter()
        .map(|d| {
            if sigma > T::zero() {
                let r = d / sigma;
                (-(r * r)).exp()
            } else if d == T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect())
}

fn median<T: Real>(values: &[T]) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::of(2.0)
    }
}

/// Draws `n` distinct indices without replacement with probability
/// proportional to detection score, using exponential keys
/// `ln(u) / w` (one uniform `u` per point, in index order).
///
/// Points with zero score are never chosen; if fewer than `n` points have a
/// positive score all of them are returned and the gap is recorded in
/// `shortfall`.
pub fn sample_keypoints<T: Real>(scores: &ScoreSet<T>, n: usize, seed: u64) -> Result<KeypointSet> {
    if n == 0 {
        return Err(Error::validation("keypoint count must be >= 1"));
    }
    let det = scores.detection();
    if !det.iter().any(|&w| w > T::zero()) {
        return Err(Error::DegenerateScores("all detection scores are zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(det.len());
    for (i, &w) in det.iter().enumerate() {
        // Uniform on (0, 1].
        let u = 1.0 - rng.random::<f64>();
        if w > T::zero() {
            keyed.push((u.ln() / w.as_f64(), i));
        }
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let take = n.min(keyed.len());
    Ok(KeypointSet {
        indices: keyed[..take].iter().map(|&(_, i)| i).collect(),
        level: scores.level(),
        seed,
        shortfall: n - take,
    })
}
