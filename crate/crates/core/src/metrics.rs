//! Registration and correspondence quality measures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::detectors::KeypointSet;
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::matching::CorrespondenceSet;
use crate::scalar::Real;

/// Geodesic angle between two rotations, degrees, in `[0, 180]`.
pub fn rotation_error<T: Real>(est: &RigidTransform<T>, gt: &RigidTransform<T>) -> f64 {
    let m = gt.rotation().transpose() * est.rotation();
    let f = |r: usize, c: usize| m[(r, c)].as_f64();
    // atan2 keeps full precision near 0 and 180 degrees, where acos does not.
    let s = 0.5 * ((f(2, 1) - f(1, 2)).powi(2) + (f(0, 2) - f(2, 0)).powi(2) + (f(1, 0) - f(0, 1)).powi(2)).sqrt();
    let c = 0.5 * (m.trace().as_f64() - 1.0);
    s.atan2(c).to_degrees()
}

pub fn translation_error<T: Real>(est: &RigidTransform<T>, gt: &RigidTransform<T>) -> f64 {
    (est.translation() - gt.translation()).norm().as_f64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    /// Registration recall bounds (strict).
    pub rre_max_deg: f64,
    pub rte_max: f64,
    /// Correspondence inlier distance (inclusive).
    pub inlier_tau: f64,
    /// A pair counts toward FMR when its inlier ratio strictly exceeds this.
    pub fmr_threshold: f64,
    pub repeatability_radius: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self::KITTI
    }
}

impl MetricThresholds {
    pub const KITTI: Self = Self {
        rre_max_deg: 5.0,
        rte_max: 2.0,
        inlier_tau: 0.1,
        fmr_threshold: 0.05,
        repeatability_radius: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.rre_max_deg) || !pos(self.rte_max) || !pos(self.inlier_tau) || !pos(self.repeatability_radius) {
            return Err(Error::validation("metric thresholds must be positive"));
        }
        if !(0.0..1.0).contains(&self.fmr_threshold) {
            return Err(Error::validation("fmr_threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub rre: f64,
    pub rte: f64,
    pub inlier_ratio: f64,
    pub fmr_hit: bool,
    pub repeatability: f64,
    pub registered: bool,
}

impl PairEvaluation {
    /// Derives the hit flags from the raw measures.
    pub fn new(rre: f64, rte: f64, inlier_ratio: f64, repeatability: f64, th: &MetricThresholds) -> Self {
        Self {
            rre,
            rte,
            inlier_ratio,
            fmr_hit: inlier_ratio > th.fmr_threshold,
            repeatability,
            registered: rre < th.rre_max_deg && rte < th.rte_max,
        }
    }
}

/// Fraction of pairs with `rre < rre_max` and `rte < rte_max`.
pub fn registration_recall(evals: &[PairEvaluation], rre_max: f64, rte_max: f64) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::validation("registration recall of an empty list"));
    }
    let hits = evals.iter().filter(|e| e.rre < rre_max && e.rte < rte_max).count();
    Ok(hits as f64 / evals.len() as f64)
}

/// Inlier ratio of a correspondence set; `empty` is set when there were no
/// pairs, in which case the ratio is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlierRatio {
    pub ratio: f64,
    pub empty: bool,
}

/// Fraction of pairs with `|gt(src_i) - tgt_j| <= tau`.
pub fn inlier_ratio<T: Real>(
    corr: &CorrespondenceSet<T>,
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    gt: &RigidTransform<T>,
    tau: f64,
) -> Result<InlierRatio> {
    corr.validate(src.len(), tgt.len())?;
    if corr.is_empty() {
        return Ok(InlierRatio { ratio: 0.0, empty: true });
    }
    let tau = T::of(tau);
    let hits = corr
        .pairs
        .iter()
        .filter(|&&(s, t)| (gt.apply_point(&src.points()[s]) - tgt.points()[t]).norm() <= tau)
        .count();
    Ok(InlierRatio {
        ratio: hits as f64 / corr.len() as f64,
        empty: false,
    })
}

/// Fraction of inlier ratios strictly above `threshold`.
pub fn feature_matching_recall(irs: &[f64], threshold: f64) -> Result<f64> {
    if irs.is_empty() {
        return Err(Error::validation("feature matching recall of an empty list"));
    }
    Ok(irs.iter().filter(|&&ir| ir > threshold).count() as f64 / irs.len() as f64)
}

/// Fraction of source keypoints whose ground-truth image has a target
/// keypoint within `r`.
pub fn repeatability<T: Real>(
    kp_src: &KeypointSet,
    kp_tgt: &KeypointSet,
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    gt: &RigidTransform<T>,
    r: f64,
) -> Result<f64> {
    if kp_src.is_empty() || kp_tgt.is_empty() {
        return Err(Error::validation("repeatability needs nonempty keypoint sets"));
    }
    if kp_src.indices.iter().any(|&i| i >= src.len()) || kp_tgt.indices.iter().any(|&i| i >= tgt.len()) {
        return Err(Error::validation("keypoint index out of range"));
    }
    let index = SpatialIndex::new(&tgt.select(&kp_tgt.indices))?;
    let r = T::of(r);
    let hits = kp_src
        .indices
        .iter()
        .filter(|&&i| {
            let p = gt.apply_point(&src.points()[i]);
            let j = index.knn_unchecked(&p, 1)[0];
            (index.points()[j] - p).norm() <= r
        })
        .count();
    Ok(hits as f64 / kp_src.len() as f64)
}

/// Metrics of one sample-count setting over all pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub samples: usize,
    pub pairs: Vec<PairEvaluation>,
    pub registration_recall: f64,
    pub mean_rre: f64,
    pub median_rre: f64,
    pub mean_rte: f64,
    pub median_rte: f64,
    pub mean_inlier_ratio: f64,
    pub feature_matching_recall: f64,
    pub mean_repeatability: f64,
    /// Pairs that failed to register at all (counted with infinite errors).
    pub failures: usize,
}

impl MetricBlock {
    pub fn from_pairs(samples: usize, pairs: Vec<PairEvaluation>, failures: usize, th: &MetricThresholds) -> Result<Self> {
        let rr = registration_recall(&pairs, th.rre_max_deg, th.rte_max)?;
        let irs: Vec<f64> = pairs.iter().map(|p| p.inlier_ratio).collect();
        let fmr = feature_matching_recall(&irs, th.fmr_threshold)?;
        let col = |f: fn(&PairEvaluation) -> f64| pairs.iter().map(f).collect::<Vec<f64>>();
        let rre = col(|p| p.rre);
        let rte = col(|p| p.rte);
        Ok(Self {
            samples,
            registration_recall: rr,
            mean_rre: mean(&rre),
            median_rre: median(&rre),
            mean_rte: mean(&rte),
            median_rte: median(&rte),
            mean_inlier_ratio: mean(&irs),
            feature_matching_recall: fmr,
            mean_repeatability: mean(&col(|p| p.repeatability)),
            failures,
            pairs,
        })
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Which registration recall definition the numbers use.
    pub recall_definition: String,
    pub thresholds: MetricThresholds,
    pub blocks: Vec<MetricBlock>,
    /// Free-form echo of the configuration that produced the report.
    pub config: serde_json::Value,
}

impl BenchmarkReport {
    pub fn new(thresholds: MetricThresholds, blocks: Vec<MetricBlock>, config: serde_json::Value) -> Self {
        Self {
            recall_definition: format!(
                "pose thresholds: RRE < {} deg and RTE < {} m",
                thresholds.rre_max_deg, thresholds.rte_max
            ),
            thresholds,
            blocks,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Metric rows by sample-count columns.
    pub fn to_table(&self) -> String {
        let rows: [(&str, fn(&MetricBlock) -> f64, bool); 8] = [
            ("RR (%)", |b| b.registration_recall * 100.0, true),
            ("FMR (%)", |b| b.feature_matching_recall * 100.0, true),
            ("IR (%)", |b| b.mean_inlier_ratio * 100.0, true),
            ("Rep (%)", |b| b.mean_repeatability * 100.0, true),
            ("RRE mean (deg)", |b| b.mean_rre, false),
            ("RRE median (deg)", |b| b.median_rre, false),
            ("RTE mean (cm)", |b| b.mean_rte * 100.0, false),
            ("RTE median (cm)", |b| b.median_rte * 100.0, false),
        ];
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("# samples".len());
        let col_w = 10;
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "# samples");
        for b in &self.blocks {
            let _ = write!(out, " {:>col_w$}", b.samples);
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(label_w + (col_w + 1) * self.blocks.len()));
        for (label, f, pct) in rows {
            let _ = write!(out, "{label:<label_w$}");
            for b in &self.blocks {
                let v = f(b);
                if pct {
                    let _ = write!(out, " {v:>col_w$.1}");
                } else {
                    let _ = write!(out, " {v:>col_w$.3}");
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<label_w$}", "failures");
        for b in &self.blocks {
            let _ = write!(out, " {:>col_w$}", b.failures);
        }
        out.push('\n');
        let _ = writeln!(out, "RR definition: {}", self.recall_definition);
        out
    }
}
