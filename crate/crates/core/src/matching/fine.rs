use super::{nearest_row, CorrespondenceSet, Tier};
use crate::descriptors::DescriptorSet;
use crate::detectors::ScoreSet;
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::scalar::Real;

/// Mutual-nearest low-level feature matches between the radius cells around
/// the two endpoints of a coarse pair. Each match is weighted by the
/// low-level detection score of its source point. An empty cell gives an
/// empty set.
pub fn local_cell_match<T: Real>(
    src: &SpatialIndex<T>,
    tgt: &SpatialIndex<T>,
    coarse_pair: (usize, usize),
    src_low: &DescriptorSet<T>,
    tgt_low: &DescriptorSet<T>,
    src_scores: &ScoreSet<T>,
    cell_radius: f64,
) -> Result<CorrespondenceSet<T>> {
    if !(cell_radius > 0.0 && cell_radius.is_finite()) {
        return Err(Error::validation("cell radius must be positive"));
    }
    let (a, b) = coarse_pair;
    if a >= src.len() || b >= tgt.len() {
        return Err(Error::validation(format!("coarse pair ({a}, {b}) out of range")));
    }
    if src_low.len() != src.len() || tgt_low.len() != tgt.len() || src_scores.len() != src.len() {
        return Err(Error::validation("descriptor or score count differs from cloud size"));
    }
    if src_low.dim() != tgt_low.dim() {
        return Err(Error::validation("low-level descriptor dimensions differ"));
    }
    let r = T::of(cell_radius);
    let cell_s = src.radius_query(&src.points()[a], r)?;
    let cell_t = tgt.radius_query(&tgt.points()[b], r)?;
    Ok(mutual_in_cells(&cell_s, &cell_t, src_low, tgt_low, src_scores.detection()))
}

pub(crate) fn mutual_in_cells<T: Real>(
    cell_s: &[usize],
    cell_t: &[usize],
    src_low: &DescriptorSet<T>,
    tgt_low: &DescriptorSet<T>,
    src_det: &[T],
) -> CorrespondenceSet<T> {
    let mut out = CorrespondenceSet::empty(Tier::Fine);
    if cell_s.is_empty() || cell_t.is_empty() {
        return out;
    }
    for &i in cell_s {
        let j = nearest_row(src_low.row(i), tgt_low, cell_t).expect("nonempty cell");
        if nearest_row(tgt_low.row(j), src_low, cell_s) == Some(i) {
            out.pairs.push((i, j));
            out.weights.push(src_det[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{PointCloud, RigidTransform};
    use crate::descriptors::Level;
    use nalgebra::{Point3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index(pts: Vec<Point3<f64>>) -> SpatialIndex<f64> {
        SpatialIndex::new(&PointCloud::new("c", pts).unwrap()).unwrap()
    }

    fn scores(n: usize) -> ScoreSet<f64> {
        ScoreSet::from_detection(Level::Low, (0..n).map(|i| 1.0 / (1 + i) as f64).collect()).unwrap()
    }

    #[test]
    fn single_point_cells() {
        let s = index(vec![Point3::origin(), Point3::new(5.0, 0.0, 0.0)]);
        let t = index(vec![Point3::new(9.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)]);
        let ds = DescriptorSet::new(Level::Low, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let dt = DescriptorSet::new(Level::Low, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = local_cell_match(&s, &t, (0, 1), &ds, &dt, &scores(2), 0.1).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn empty_cell_gives_empty_set() {
        let s = index(vec![Point3::origin()]);
        let t = index(vec![Point3::new(1.0, 0.0, 0.0)]);
        let d = DescriptorSet::new(Level::Low, 1, vec![1.0]).unwrap();
        // A cell around an existing point always holds that point, so the
        // empty case is only reachable through the helper.
        let m = mutual_in_cells::<f64>(&[], &[0], &d, &d, &[1.0]);
        assert!(m.is_empty());
        assert!(local_cell_match(&s, &t, (0, 0), &d, &d, &scores(1), 0.0).is_err());
        assert!(local_cell_match(&s, &t, (0, 3), &d, &d, &scores(1), 0.1).is_err());
    }

    #[test]
    fn duplicated_patch_reproduces_gt_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 60;
        let patch: Vec<Point3<f64>> = (0..n)
            .map(|_| Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect();
        let gt = RigidTransform::from_axis_angle(&Vector3::new(0.3, 1.0, -0.2), 0.7, Vector3::new(2.0, 0.0, 1.0)).unwrap();
        // Target is shuffled so the map is not the identity.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let tgt: Vec<Point3<f64>> = perm.iter().map(|&i| gt.apply_point(&patch[i])).collect();
        let feats: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
        let ds = DescriptorSet::new(Level::Low, 4, feats.clone()).unwrap();
        let dt = ds.select(&perm);
        let s = index(patch);
        let t = index(tgt);
        let m = local_cell_match(&s, &t, (0, n - 1), &ds, &dt, &scores(n), 1.0).unwrap();
        assert_eq!(m.len(), n);
        for &(a, b) in &m.pairs {
            assert_eq!(perm[b], a);
        }
    }

    #[test]
    fn random_cells_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pts = |rng: &mut ChaCha8Rng| -> Vec<Point3<f64>> {
                (0..80).map(|_| Point3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>())).collect()
            };
            let (ps, pt) = (pts(&mut rng), pts(&mut rng));
            let ds = DescriptorSet::new(Level::Low, 3, (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
            let dt = DescriptorSet::new(Level::Low, 3, (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
            let (a, b) = (rng.random_range(0..80), rng.random_range(0..80));
            let r = 0.35;
            let cs: Vec<usize> = (0..80).filter(|&i| (ps[i] - ps[a]).norm() <= r).collect();
            let ct: Vec<usize> = (0..80).filter(|&j| (pt[j] - pt[b]).norm() <= r).collect();
            let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            let argmin = |q: &[f64], set: &DescriptorSet<f64>, cell: &[usize]| {
                *cell.iter().min_by(|&&u, &&v| d(q, set.row(u)).partial_cmp(&d(q, set.row(v))).unwrap()).unwrap()
            };
            let expect: Vec<(usize, usize)> = cs
                .iter()
                .map(|&i| (i, argmin(ds.row(i), &dt, &ct)))
                .filter(|&(i, j)| argmin(dt.row(j), &ds, &cs) == i)
                .collect();
            let m = local_cell_match(&index(ps), &index(pt), (a, b), &ds, &dt, &scores(80), r).unwrap();
            assert_eq!(m.pairs, expect);
        }
    }
}
