//! Point clouds and rigid transforms.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// An ordered set of finite 3D points (meters) with an opaque label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    id: String,
    points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    /// Builds a cloud, rejecting any non-finite coordinate.
    pub fn new(id: impl Into<String>, points: Vec<Point3<T>>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::validation(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            id: id.into(),
            points,
        })
    }

    pub fn from_slice(id: impl Into<String>, coords: &[[T; 3]]) -> Result<Self> {
        Self::new(
            id,
            coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect(),
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub(crate) fn ensure_nonempty(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::validation(format!("cloud '{}' is empty", self.id)))
        } else {
            Ok(())
        }
    }

    /// Sub-cloud made of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Option<Point3<T>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc: Vector3<T>, p| acc + p.coords);
        Some(Point3::from(sum / T::of_usize(self.points.len())))
    }

    /// Largest pairwise distance bound: the diagonal of the bounding box.
    pub fn bbox_diagonal(&self) -> T {
        let Some(first) = self.points.first() else {
            return T::zero();
        };
        let (mut lo, mut hi) = (first.coords, first.coords);
        for p in &self.points {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        (hi - lo).norm()
    }
}

/// Tolerance used to validate rotation matrices.
///
/// 1e-9 for `f64`; widened to a small multiple of machine epsilon for
/// narrower types.
pub fn rotation_tolerance<T: Real>() -> T {
    let eps = T::default_epsilon() * T::of(64.0);
    eps.max(T::of(1e-9))
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::validation("transform has non-finite entries"));
        }
        let tol = rotation_tolerance::<T>();
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > tol) {
            return Err(Error::validation("rotation is not orthonormal"));
        }
        if (rotation.determinant() - T::one()).abs() > tol {
            return Err(Error::validation("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Skips validation. The caller guarantees the invariants.
    pub(crate) fn new_unchecked(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new_unchecked(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new_unchecked(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, translation: Vector3<T>) -> Result<Self> {
        let norm = axis.norm();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::validation("rotation axis must be a nonzero finite vector"));
        }
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Ok(Self::new_unchecked(rot.into_inner(), translation))
    }

    /// Row-major rotation and translation, as stored in JSON files.
    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        let r = Matrix3::from_row_slice(&rotation.map(T::of));
        let t = Vector3::new(T::of(translation[0]), T::of(translation[1]), T::of(translation[2]));
        Self::new(r, t)
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        let mut out = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 3 + col] = r[(row, col)].as_f64();
            }
        }
        out
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [
            self.translation.x.as_f64(),
            self.translation.y.as_f64(),
            self.translation.z.as_f64(),
        ]
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Transforms every point, keeping order and count.
    pub fn apply(&self, cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
        PointCloud::new(
            cloud.id(),
            cloud.points().iter().map(|p| self.apply_point(p)).collect(),
        )
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new_unchecked(rt, -(rt * self.translation))
    }

    /// Largest elementwise difference in rotation and translation.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let r = (self.rotation - other.rotation).amax();
        let t = (self.translation - other.translation).amax();
        r.max(t)
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform::new_unchecked(
            self.rotation.map(|v| U::of(v.as_f64())),
            self.translation.map(|v| U::of(v.as_f64())),
        )
    }
}

/// Free-function form of [`RigidTransform::apply`].
pub fn apply_transform<T: Real>(
    cloud: &PointCloud<T>,
    transform: &RigidTransform<T>,
) -> Result<PointCloud<T>> {
    transform.apply(cloud)
}

pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    t.inverse()
}
