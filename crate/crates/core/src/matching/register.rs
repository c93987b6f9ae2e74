use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fine::mutual_in_cells;
use super::ransac::{ransac_transform, RansacParams};
use super::svd::weighted_svd;
use super::{match_features, select_fine_subset, CorrespondenceSet, Tier};
use crate::cloud::{PointCloud, RigidTransform};
use crate::descriptors::{compute_descriptors_with, estimate_normals_indexed, DescriptorParams, DescriptorSet, Level};
use crate::detectors::{sample_keypoints, score_overlap_heuristic, score_saliency, DetectorParams, KeypointSet, ScoreSet};
use crate::error::{Error, Result, Stage};
use crate::index::SpatialIndex;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingParams {
    /// High-level keypoints sampled per cloud for coarse matching.
    pub coarse_samples: usize,
    /// Low-level keypoints sampled per cloud as fine candidates. Unset
    /// means every point may take part in fine matching.
    pub fine_samples: Option<usize>,
    pub mutual: bool,
    pub cell_radius: f64,
    pub top_fraction: f64,
    /// Select the top fraction inside each cell instead of over the pooled
    /// fine set.
    pub per_cell_selection: bool,
    /// Drop fine matches whose residual under the coarse transform exceeds
    /// the RANSAC inlier threshold, before selection.
    pub coarse_gate: bool,
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self {
            coarse_samples: 1000,
            fine_samples: None,
            mutual: true,
            cell_radius: 0.1,
            top_fraction: 0.5,
            per_cell_selection: false,
            coarse_gate: true,
        }
    }
}

impl MatchingParams {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 3 {
            return Err(Error::validation("coarse_samples must be >= 3"));
        }
        if self.fine_samples == Some(0) {
            return Err(Error::validation("fine_samples must be >= 1 when set"));
        }
        if !(self.cell_radius > 0.0 && self.cell_radius.is_finite()) {
            return Err(Error::validation("cell_radius must be positive"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::validation("top_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Everything [`register`] needs. `seed` drives keypoint sampling and the
/// RANSAC streams; `ransac.seed` is ignored here.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub descriptors: DescriptorParams,
    pub detector: DetectorParams,
    pub ransac: RansacParams,
    pub matching: MatchingParams,
    pub seed: u64,
}

impl RegisterConfig {
    pub fn validate(&self) -> Result<()> {
        self.descriptors.validate()?;
        self.detector.validate()?;
        self.ransac.validate()?;
        self.matching.validate()
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub descriptors: f64,
    pub detection: f64,
    pub coarse: f64,
    pub fine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult<T: Real> {
    pub transform: RigidTransform<T>,
    /// RANSAC estimate before fine refinement.
    pub coarse_transform: RigidTransform<T>,
    /// Coarse matches in cloud indices.
    pub coarse: CorrespondenceSet<T>,
    pub coarse_inliers: Vec<bool>,
    /// Selected fine subset the final transform is solved from.
    pub fine: CorrespondenceSet<T>,
    /// Fine matches before subset selection.
    pub fine_candidates: usize,
    pub inlier_count: usize,
    pub iterations_used: usize,
    pub keypoints_src: KeypointSet,
    pub keypoints_tgt: KeypointSet,
    pub timings: StageTimings,
}

/// JSON form of a [`RegistrationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub coarse_rotation: [f64; 9],
    pub coarse_translation: [f64; 3],
    pub coarse_pairs: Vec<[usize; 2]>,
    pub fine_pairs: Vec<[usize; 2]>,
    pub fine_weights: Vec<f64>,
    pub inlier_count: usize,
    pub iterations_used: usize,
    pub timings_ms: StageTimings,
}

impl<T: Real> From<&RegistrationResult<T>> for RegistrationRecord {
    fn from(r: &RegistrationResult<T>) -> Self {
        let pairs = |c: &CorrespondenceSet<T>| c.pairs.iter().map(|&(a, b)| [a, b]).collect();
        Self {
            rotation: r.transform.rotation_row_major(),
            translation: r.transform.translation_array(),
            coarse_rotation: r.coarse_transform.rotation_row_major(),
            coarse_translation: r.coarse_transform.translation_array(),
            coarse_pairs: pairs(&r.coarse),
            fine_pairs: pairs(&r.fine),
            fine_weights: r.fine.weights.iter().map(|w| w.as_f64()).collect(),
            inlier_count: r.inlier_count,
            iterations_used: r.iterations_used,
            timings_ms: r.timings,
        }
    }
}

struct Side<T: Real> {
    index: SpatialIndex<T>,
    low: DescriptorSet<T>,
    high: DescriptorSet<T>,
}

fn describe<T: Real>(cloud: &PointCloud<T>, params: &DescriptorParams) -> Result<Side<T>> {
    let index = SpatialIndex::new(cloud)?;
    let normals = estimate_normals_indexed(&index, params.normal_radius)?;
    let low = compute_descriptors_with(&index, &normals, Level::Low, params);
    let high = compute_descriptors_with(&index, &normals, Level::High, params);
    Ok(Side { index, low, high })
}

struct Scores<T: Real> {
    low: ScoreSet<T>,
    high: ScoreSet<T>,
}

/// Saliency per level times one overlap estimate shared by both levels.
fn score<T: Real>(side: &Side<T>, other: &Side<T>, params: &DetectorParams) -> Result<Scores<T>> {
    let overlap = score_overlap_heuristic(&side.high, &other.high)?;
    let low = ScoreSet::new(Level::Low, score_saliency(&side.low, &side.index, params)?, overlap.clone())?;
    let high = ScoreSet::new(Level::High, score_saliency(&side.high, &side.index, params)?, overlap)?;
    Ok(Scores { low, high })
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Coarse-to-fine registration of `src` onto `tgt`.
///
/// Descriptors at both levels feed saliency and overlap scores; high-level
/// keypoints sampled in proportion to detection score are matched in
/// feature space and filtered by RANSAC. Low-level matches are then
/// collected in the cells around every coarse inlier pair, the best-scored
/// fraction is kept, and a weighted SVD over it gives the final transform.
pub fn register<T: Real>(src: &PointCloud<T>, tgt: &PointCloud<T>, config: &RegisterConfig) -> Result<RegistrationResult<T>> {
    config.validate()?;
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let (s, t) = rayon::join(|| describe(src, &config.descriptors), || describe(tgt, &config.descriptors));
    let (s, t) = (s.map_err(|e| e.at(Stage::Descriptors))?, t.map_err(|e| e.at(Stage::Descriptors))?);
    timings.descriptors = elapsed_ms(t0);

    let t0 = Instant::now();
    let detection = || -> Result<_> {
        let ss = score(&s, &t, &config.detector)?;
        let st = score(&t, &s, &config.detector)?;
        let n = config.matching.coarse_samples;
        let kp_s = sample_keypoints(&ss.high, n, config.seed)?;
        let kp_t = sample_keypoints(&st.high, n, config.seed.wrapping_add(1))?;
        Ok((ss, st, kp_s, kp_t))
    };
    let (ss, st, kp_s, kp_t) = detection().map_err(|e| e.at(Stage::Detection))?;
    timings.detection = elapsed_ms(t0);

    let t0 = Instant::now();
    let coarse_stage = || -> Result<_> {
        let local = match_features(&s.high.select(&kp_s.indices), &t.high.select(&kp_t.indices), config.matching.mutual)?;
        let coarse = local.remap(&kp_s.indices, &kp_t.indices);
        let ransac = RansacParams {
            seed: config.seed.wrapping_add(2),
            ..config.ransac
        };
        let outcome = ransac_transform(src, tgt, &coarse, &ransac)?;
        Ok((coarse, outcome))
    };
    let (coarse, outcome) = coarse_stage().map_err(|e| e.at(Stage::Coarse))?;
    timings.coarse = elapsed_ms(t0);

    let t0 = Instant::now();
    let fine_stage = || -> Result<_> {
        let mp = &config.matching;
        let allowed = |kp: Option<KeypointSet>, n: usize| {
            kp.map(|k| {
                let mut mask = vec![false; n];
                k.indices.iter().for_each(|&i| mask[i] = true);
                mask
            })
        };
        let (allow_s, allow_t) = match mp.fine_samples {
            Some(n) => (
                allowed(Some(sample_keypoints(&ss.low, n, config.seed.wrapping_add(3))?), src.len()),
                allowed(Some(sample_keypoints(&st.low, n, config.seed.wrapping_add(4))?), tgt.len()),
            ),
            None => (None, None),
        };
        let r = T::of(mp.cell_radius);
        let gate = T::of(config.ransac.inlier_threshold);
        let anchors: Vec<(usize, usize)> = coarse.filter(&outcome.inliers).pairs;
        let cells: Vec<CorrespondenceSet<T>> = anchors
            .par_iter()
            .map(|&(a, b)| {
                let keep = |mask: &Option<Vec<bool>>, v: Vec<usize>| match mask {
                    Some(m) => v.into_iter().filter(|&i| m[i]).collect(),
                    None => v,
                };
                let cs = keep(&allow_s, s.index.radius_query(&s.index.points()[a], r).expect("positive radius"));
                let ct = keep(&allow_t, t.index.radius_query(&t.index.points()[b], r).expect("positive radius"));
                let cell = mutual_in_cells(&cs, &ct, &s.low, &t.low, ss.low.detection());
                if mp.coarse_gate {
                    let mask: Vec<bool> = cell
                        .pairs
                        .iter()
                        .map(|&(i, j)| (outcome.transform.apply_point(&src.points()[i]) - tgt.points()[j]).norm() <= gate)
                        .collect();
                    cell.filter(&mask)
                } else {
                    cell
                }
            })
            .collect();

        let pooled = |sets: Vec<CorrespondenceSet<T>>| {
            let mut all = CorrespondenceSet::empty(Tier::Fine);
            for c in sets {
                all.pairs.extend(c.pairs);
                all.weights.extend(c.weights);
            }
            all.dedup()
        };
        let candidates = pooled(cells.clone()).len();
        let fine = if mp.per_cell_selection {
            let picked = cells
                .iter()
                .map(|c| select_fine_subset(c, &ss.low, mp.top_fraction))
                .collect::<Result<Vec<_>>>()?;
            pooled(picked)
        } else {
            select_fine_subset(&pooled(cells), &ss.low, mp.top_fraction)?
        };
        if fine.len() < 3 {
            return Err(Error::NoCorrespondence(format!(
                "{} fine correspondences after selection, need at least 3",
                fine.len()
            )));
        }
        let ps: Vec<_> = fine.pairs.iter().map(|&(a, _)| src.points()[a]).collect();
        let pt: Vec<_> = fine.pairs.iter().map(|&(_, b)| tgt.points()[b]).collect();
        let transform = weighted_svd(&ps, &pt, &fine.weights)?;
        Ok((fine, candidates, transform))
    };
    let (fine, fine_candidates, transform) = fine_stage().map_err(|e| e.at(Stage::Fine))?;
    timings.fine = elapsed_ms(t0);

    Ok(RegistrationResult {
        transform,
        coarse_transform: outcome.transform,
        coarse,
        coarse_inliers: outcome.inliers,
        fine,
        fine_candidates,
        inlier_count: outcome.inlier_count,
        iterations_used: outcome.iterations,
        keypoints_src: kp_s,
        keypoints_tgt: kp_t,
        timings,
    })
}
