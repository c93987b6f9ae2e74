use nalgebra::{Matrix3, Point3, Vector3, SVD};

use crate::cloud::{rotation_tolerance, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative eigenvalue floor below which a weighted point set counts as
/// collinear or coincident.
fn rank_tolerance<T: Real>() -> T {
    (T::default_epsilon() * T::of(1e3)).max(T::of(1e-12))
}

/// Weighted least-squares rigid transform mapping `src` onto `tgt`
/// (weighted Kabsch).
pub fn weighted_svd<T: Real>(src: &[Point3<T>], tgt: &[Point3<T>], weights: &[T]) -> Result<RigidTransform<T>> {
    let n = src.len();
    if tgt.len() != n || weights.len() != n {
        return Err(Error::validation("weighted_svd inputs differ in length"));
    }
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("need at least 3 pairs, got {n}")));
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= T::zero()) {
        return Err(Error::validation("weights must be finite and >= 0"));
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    if !(total > T::zero()) {
        return Err(Error::validation("weights sum to zero"));
    }

    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for ((s, t), &w) in src.iter().zip(tgt).zip(weights) {
        cs += s.coords * w;
        ct += t.coords * w;
    }
    cs /= total;
    ct /= total;

    let mut h = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for ((s, t), &w) in src.iter().zip(tgt).zip(weights) {
        let a = s.coords - cs;
        let b = t.coords - ct;
        h += a * b.transpose() * w;
        cov += a * a.transpose() * w;
    }

    // Rank of the source spread: two nonzero eigenvalues are needed to pin
    // the rotation.
    let eig = cov.symmetric_eigenvalues();
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(ev[0] > T::zero()) || ev[1] <= ev[0] * rank_tolerance::<T>() {
        return Err(Error::DegenerateGeometry("source points are collinear or coincident".into()));
    }

    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant();
    let mut fix = Matrix3::identity();
    if d < T::zero() {
        // Flip the axis of the smallest singular value.
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].partial_cmp(&svd.singular_values[b]).unwrap_or(std::cmp::Ordering::Equal))
            .expect("3 values");
        fix[(smallest, smallest)] = -T::one();
    }
    let r = v * fix * u.transpose();
    let t = ct - r * cs;

    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    if !(ortho <= rotation_tolerance::<T>()) {
        return Err(Error::DegenerateGeometry("SVD did not produce a rotation".into()));
    }
    Ok(RigidTransform::new_unchecked(r, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
        let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let angle = rng.random_range(-3.1..3.1);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        RigidTransform::from_axis_angle(&axis, angle, t).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn weighted_residual(t: &RigidTransform<f64>, s: &[Point3<f64>], d: &[Point3<f64>], w: &[f64]) -> f64 {
        s.iter().zip(d).zip(w).map(|((a, b), &w)| w * (t.apply_point(a) - b).norm_squared()).sum()
    }

    /// Horn's closed form: the rotation is the top eigenvector of a 4x4
    /// matrix built from the cross-covariance.
    fn horn(s: &[Point3<f64>], d: &[Point3<f64>], w: &[f64]) -> RigidTransform<f64> {
        let total: f64 = w.iter().sum();
        let cs = s.iter().zip(w).fold(Vector3::zeros(), |a, (p, &w)| a + p.coords * w) / total;
        let cd = d.iter().zip(w).fold(Vector3::zeros(), |a, (p, &w)| a + p.coords * w) / total;
        let mut m = Matrix3::zeros();
        for ((a, b), &w) in s.iter().zip(d).zip(w) {
            m += (a.coords - cs) * (b.coords - cd).transpose() * w;
        }
        let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
        let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
        let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
        #[rustfmt::skip]
        let n = Matrix4::new(
            sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
            syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
            szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
        );
        let eig = SymmetricEigen::new(n);
        let k = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(k);
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let r = rot.to_rotation_matrix().into_inner();
        RigidTransform::new(r, cd - r * cs).unwrap()
    }

    #[test]
    fn identity_on_identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_points(&mut rng, 20);
        let t = weighted_svd(&p, &p, &vec![1.0; 20]).unwrap();
        assert!(t.max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn exact_fit_recovers_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let gt = random_transform(&mut rng);
            let n = rng.random_range(3..40);
            let s = random_points(&mut rng, n);
            let d: Vec<_> = s.iter().map(|p| gt.apply_point(p)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..2.0)).collect();
            let t = weighted_svd(&s, &d, &w).unwrap();
            assert!(t.max_abs_diff(&gt) < 1e-9, "{}", t.max_abs_diff(&gt));
            assert!(RigidTransform::new(*t.rotation(), *t.translation()).is_ok());
        }
    }

    #[test]
    fn noisy_fit_is_optimal_and_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let gt = random_transform(&mut rng);
            let s = random_points(&mut rng, 30);
            let d: Vec<_> = s
                .iter()
                .map(|p| gt.apply_point(p) + Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * 0.1)
                .collect();
            let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..1.0)).collect();
            let t = weighted_svd(&s, &d, &w).unwrap();
            assert!(t.max_abs_diff(&horn(&s, &d, &w)) < 1e-9);

            let best = weighted_residual(&t, &s, &d, &w);
            for _ in 0..1000 {
                let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                let step = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 1e-3;
                let nudge = RigidTransform::from_axis_angle(&axis, rng.random_range(-1e-3..1e-3), step).unwrap();
                assert!(weighted_residual(&nudge.compose(&t), &s, &d, &w) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_transform(&mut rng);
        let s = random_points(&mut rng, 15);
        let d: Vec<_> = s.iter().map(|p| gt.apply_point(p) + Vector3::new(0.01, -0.02, 0.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..1.0)).collect();
        let base = weighted_svd(&s, &d, &w).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            assert!(weighted_svd(&s, &d, &scaled).unwrap().max_abs_diff(&base) < 1e-9);
        }
    }

    #[test]
    fn reflection_is_corrected() {
        // Mirror image of a tetrahedron: the best rotation must still be proper.
        let s = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let d: Vec<_> = s.iter().map(|p| Point3::new(p.x, p.y, -p.z)).collect();
        let t = weighted_svd::<f64>(&s, &d, &[1.0; 4]).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(weighted_svd(&line, &line, &[1.0; 5]), Err(Error::DegenerateGeometry(_))));
        let same = vec![Point3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(weighted_svd(&same, &same, &[1.0; 4]), Err(Error::DegenerateGeometry(_))));
        let tri = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        assert!(weighted_svd(&tri, &tri, &[1.0; 3]).is_ok());
        assert!(matches!(weighted_svd(&tri[..2], &tri[..2], &[1.0; 2]), Err(Error::DegenerateGeometry(_))));
        // Zero weight on one vertex leaves only a segment.
        assert!(matches!(weighted_svd(&tri, &tri, &[1.0, 1.0, 0.0]), Err(Error::DegenerateGeometry(_))));
        assert!(weighted_svd(&tri, &tri, &[0.0; 3]).is_err());
        assert!(weighted_svd(&tri, &tri, &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn f32_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_transform(&mut rng).cast::<f32>();
        let s: Vec<Point3<f32>> = random_points(&mut rng, 20).iter().map(|p| p.cast()).collect();
        let d: Vec<_> = s.iter().map(|p| gt.apply_point(p)).collect();
        let t = weighted_svd(&s, &d, &[1.0f32; 20]).unwrap();
        assert!(t.max_abs_diff(&gt) < 1e-4);
    }
}
