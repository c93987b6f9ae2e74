use nalgebra::Point3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svd::weighted_svd;
use super::CorrespondenceSet;
use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Iterations evaluated per parallel batch. Results do not depend on it.
const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Residual (meters) at or below which a pair is an inlier.
    pub inlier_threshold: f64,
    pub sample_size: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Smallest consensus accepted; never below `sample_size`.
    pub min_inliers: usize,
    /// Smallest consensus as a fraction of all pairs.
    pub min_inlier_ratio: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            inlier_threshold: 0.05,
            sample_size: 3,
            confidence: 0.999,
            seed: 0,
            min_inliers: 3,
            min_inlier_ratio: 0.28,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 3 {
            return Err(Error::validation("RANSAC sample_size must be >= 3"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::validation("RANSAC confidence must lie in (0, 1)"));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::validation("RANSAC inlier_threshold must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err(Error::validation("RANSAC min_inlier_ratio must lie in [0, 1]"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("RANSAC max_iterations must be >= 1"));
        }
        Ok(())
    }

    fn required_inliers(&self, pairs: usize) -> usize {
        let by_ratio = (self.min_inlier_ratio * pairs as f64).ceil() as usize;
        self.min_inliers.max(self.sample_size).max(by_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome<T: Real> {
    pub transform: RigidTransform<T>,
    /// Residual under `transform` is within the threshold.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

/// Iterations needed to draw one all-inlier sample with the given
/// confidence at the observed inlier ratio.
fn iterations_needed(confidence: f64, inlier_ratio: f64, sample_size: usize, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn residuals<T: Real>(t: &RigidTransform<T>, src: &[Point3<T>], tgt: &[Point3<T>]) -> Vec<T> {
    src.iter().zip(tgt).map(|(s, d)| (t.apply_point(s) - d).norm()).collect()
}

struct Trial<T: Real> {
    transform: RigidTransform<T>,
    inliers: usize,
}

fn run_trial<T: Real>(
    iteration: usize,
    params: &RansacParams,
    src: &[Point3<T>],
    tgt: &[Point3<T>],
    ones: &[T],
) -> Option<Trial<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(iteration as u64);
    let picks = index::sample(&mut rng, src.len(), params.sample_size);
    let s: Vec<Point3<T>> = picks.iter().map(|i| src[i]).collect();
    let d: Vec<Point3<T>> = picks.iter().map(|i| tgt[i]).collect();
    let transform = weighted_svd(&s, &d, &ones[..params.sample_size]).ok()?;
    let thr = T::of(params.inlier_threshold);
    let inliers = src
        .iter()
        .zip(tgt)
        .filter(|(a, b)| (transform.apply_point(a) - *b).norm() <= thr)
        .count();
    Some(Trial { transform, inliers })
}

/// Robust rigid transform from putative correspondences.
///
/// Each iteration fits a minimal sample with [`weighted_svd`] and counts
/// pairs within `inlier_threshold`; the search stops once the confidence
/// bound is met. The winner is refit on its inliers and the returned mask is
/// recomputed under the returned transform. Iteration `i` draws from its own
/// seeded stream, so the result is independent of thread count.
pub fn ransac_transform<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    corr: &CorrespondenceSet<T>,
    params: &RansacParams,
) -> Result<RansacOutcome<T>> {
    params.validate()?;
    corr.validate(src.len(), tgt.len())?;
    let n = corr.len();
    if n < params.sample_size {
        return Err(Error::NoCorrespondence(format!(
            "{n} correspondences, RANSAC needs at least {}",
            params.sample_size
        )));
    }
    let ps: Vec<Point3<T>> = corr.pairs.iter().map(|&(s, _)| src.points()[s]).collect();
    let pt: Vec<Point3<T>> = corr.pairs.iter().map(|&(_, t)| tgt.points()[t]).collect();
    let ones = vec![T::one(); params.sample_size];

    let mut best: Option<Trial<T>> = None;
    let mut needed = params.max_iterations;
    let mut done = 0;
    'search: while done < needed {
        let end = (done + BATCH).min(needed);
        let trials: Vec<Option<Trial<T>>> = (done..end)
            .into_par_iter()
            .map(|i| run_trial(i, params, &ps, &pt, &ones))
            .collect();
        for trial in trials {
            done += 1;
            if let Some(t) = trial {
                if best.as_ref().is_none_or(|b| t.inliers > b.inliers) {
                    needed = iterations_needed(
                        params.confidence,
                        t.inliers as f64 / n as f64,
                        params.sample_size,
                        params.max_iterations,
                    );
                    best = Some(t);
                }
            }
            if done >= needed {
                break 'search;
            }
        }
    }

    let thr = T::of(params.inlier_threshold);
    let no_consensus = |best: Option<&Trial<T>>| {
        let (best_inliers, best_median_residual) = match best {
            Some(b) => (b.inliers, median(residuals(&b.transform, &ps, &pt)).as_f64()),
            None => (0, f64::INFINITY),
        };
        Error::NoConsensus {
            iterations: done,
            best_inliers,
            best_median_residual,
        }
    };
    let best = match best {
        Some(b) if b.inliers >= params.required_inliers(ps.len()) => b,
        other => return Err(no_consensus(other.as_ref())),
    };

    let mut transform = best.transform;
    let mut mask: Vec<bool> = residuals(&transform, &ps, &pt).into_iter().map(|r| r <= thr).collect();
    let mut count = mask.iter().filter(|&&m| m).count();
    // Refit on the consensus set while that does not lose inliers.
    for _ in 0..4 {
        let (s, d): (Vec<_>, Vec<_>) = ps.iter().zip(&pt).zip(&mask).filter(|(_, &m)| m).map(|((a, b), _)| (*a, *b)).unzip();
        let Ok(refit) = weighted_svd(&s, &d, &vec![T::one(); s.len()]) else {
            break;
        };
        let refit_mask: Vec<bool> = residuals(&refit, &ps, &pt).into_iter().map(|r| r <= thr).collect();
        let refit_count = refit_mask.iter().filter(|&&m| m).count();
        if refit_count < count {
            break;
        }
        let converged = refit_mask == mask;
        transform = refit;
        mask = refit_mask;
        count = refit_count;
        if converged {
            break;
        }
    }

    Ok(RansacOutcome {
        transform,
        inliers: mask,
        inlier_count: count,
        iterations: done,
    })
}

fn median<T: Real>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v[v.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Tier;
    use nalgebra::Vector3;
    use rand::Rng;

    fn scene(seed: u64, n: usize, inlier_ratio: f64) -> (PointCloud<f64>, PointCloud<f64>, CorrespondenceSet<f64>, RigidTransform<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let gt = RigidTransform::from_axis_angle(&axis, rng.random_range(-3.0..3.0), Vector3::new(0.5, -1.0, 2.0)).unwrap();
        let src: Vec<Point3<f64>> = (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
            .collect();
        let n_in = (inlier_ratio * n as f64).round() as usize;
        let tgt: Vec<Point3<f64>> = src
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < n_in {
                    gt.apply_point(p)
                } else {
                    gt.apply_point(&Point3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
                }
            })
            .collect();
        let corr = CorrespondenceSet::unweighted((0..n).map(|i| (i, i)).collect(), Tier::Coarse);
        (PointCloud::new("s", src).unwrap(), PointCloud::new("t", tgt).unwrap(), corr, gt)
    }

    #[test]
    fn noiseless_consistent_pairs() {
        let (s, t, c, gt) = scene(0, 50, 1.0);
        let out = ransac_transform(&s, &t, &c, &RansacParams::default()).unwrap();
        assert!(out.transform.max_abs_diff(&gt) < 1e-9);
        assert_eq!(out.inlier_count, 50);
        assert!(out.inliers.iter().all(|&m| m));
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn forty_percent_inliers() {
        let params = RansacParams {
            max_iterations: 1000,
            ..Default::default()
        };
        for seed in 0..20 {
            let (s, t, c, gt) = scene(seed, 200, 0.4);
            let out = ransac_transform(&s, &t, &c, &RansacParams { seed, ..params }).unwrap();
            assert!(out.transform.max_abs_diff(&gt) < 1e-6, "seed {seed}");
            assert!(out.inliers[..80].iter().all(|&m| m));
        }
    }

    #[test]
    fn mask_is_exact_under_returned_transform() {
        let (s, t, c, _) = scene(5, 100, 0.5);
        let params = RansacParams::default();
        let out = ransac_transform(&s, &t, &c, &params).unwrap();
        for (k, &(a, b)) in c.pairs.iter().enumerate() {
            let r = (out.transform.apply_point(&s.points()[a]) - t.points()[b]).norm();
            assert_eq!(out.inliers[k], r <= params.inlier_threshold);
        }
    }

    #[test]
    fn all_outliers_give_no_consensus() {
        let (s, t, c, _) = scene(9, 5, 0.0);
        let params = RansacParams {
            inlier_threshold: 1e-4,
            min_inliers: 4,
            ..Default::default()
        };
        let err = ransac_transform(&s, &t, &c, &params).unwrap_err();
        assert!(matches!(err, Error::NoConsensus { iterations, .. } if iterations == params.max_iterations));
    }

    #[test]
    fn deterministic_and_validated() {
        let (s, t, c, _) = scene(11, 80, 0.3);
        let p = RansacParams { seed: 4, ..Default::default() };
        assert_eq!(ransac_transform(&s, &t, &c, &p).unwrap(), ransac_transform(&s, &t, &c, &p).unwrap());
        assert!(ransac_transform(&s, &t, &c, &RansacParams { sample_size: 2, ..p }).is_err());
        assert!(ransac_transform(&s, &t, &c, &RansacParams { confidence: 1.0, ..p }).is_err());
        let few = CorrespondenceSet::unweighted(vec![(0, 0), (1, 1)], Tier::Coarse);
        assert!(ransac_transform(&s, &t, &few, &p).is_err());
    }

    #[test]
    fn iteration_bound() {
        assert_eq!(iterations_needed(0.999, 1.0, 3, 100), 1);
        assert_eq!(iterations_needed(0.999, 0.0, 3, 100), 100);
        // ln(0.001) / ln(1 - 0.4^3) = 104.5...
        assert_eq!(iterations_needed(0.999, 0.4, 3, 50_000), 105);
    }
}
