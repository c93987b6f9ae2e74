//! Synthetic scan pairs with known ground truth.
//!
//! A scene is a dense surface sample of a recipe shape. Source and target
//! are two slabs of that sample along a seeded horizontal direction; their
//! shared band sets the overlap. The target is then noised, partly replaced
//! by outliers and moved by the ground-truth transform.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::io::TransformRecord;
use crate::scalar::Real;

const MAX_ATTEMPTS: usize = 100;
const OVERLAP_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Plane,
    Box,
    Room,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Points in the source cloud.
    pub points: usize,
    /// Target fraction of source points that have a target point within
    /// `overlap_radius` under the ground truth.
    pub overlap: f64,
    pub overlap_radius: f64,
    /// Per-axis Gaussian noise on the target, meters.
    pub noise: f64,
    /// Fraction of target points replaced by uniform points in its bounding box.
    pub outliers: f64,
    /// Fixed ground truth; drawn from `seed` when absent.
    pub gt: Option<TransformRecord>,
    /// Largest rotation angle of a drawn ground truth, degrees.
    pub max_angle_deg: f64,
    /// Largest per-axis translation of a drawn ground truth, meters.
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Room,
            points: 5000,
            overlap: 0.7,
            overlap_radius: 0.0375,
            noise: 0.005,
            outliers: 0.0,
            gt: None,
            max_angle_deg: 180.0,
            max_translation: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.overlap) || !unit(self.outliers) {
            return Err(Error::validation("overlap and outlier fractions must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::validation("noise sigma must be >= 0"));
        }
        if !(self.overlap_radius > 0.0) {
            return Err(Error::validation("overlap radius must be positive"));
        }
        if self.points < 10 {
            return Err(Error::validation("scene needs at least 10 points"));
        }
        if !(0.0..=180.0).contains(&self.max_angle_deg) || !(self.max_translation >= 0.0) {
            return Err(Error::validation("ground-truth ranges out of bounds"));
        }
        if let Some(gt) = &self.gt {
            gt.to_transform::<f64>()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T: Real> {
    pub src: PointCloud<T>,
    pub tgt: PointCloud<T>,
    /// Maps `src` onto `tgt`.
    pub gt: RigidTransform<T>,
    /// Source points with a target point within the overlap radius under `gt`.
    pub src_overlap: Vec<bool>,
    /// Target points with a source point within the overlap radius under `gt`.
    pub tgt_overlap: Vec<bool>,
    /// Fraction of `src_overlap` that is set.
    pub overlap: f64,
}

/// A planar patch `origin + s*u + t*v`, `s, t` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Quad {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Quad(Quad),
    Triangle([Vector3<f64>; 3]),
    /// Lateral surface of an upright cylinder plus its top disc.
    Cylinder { base: Vector3<f64>, radius: f64, height: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Quad(q) => q.u.cross(&q.v).norm(),
            Surface::Triangle([a, b, c]) => 0.5 * (b - a).cross(&(c - a)).norm(),
            Surface::Cylinder { radius, height, .. } => {
                2.0 * std::f64::consts::PI * radius * height + std::f64::consts::PI * radius * radius
            }
            Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match *self {
            Surface::Quad(q) => q.origin + q.u * rng.random::<f64>() + q.v * rng.random::<f64>(),
            Surface::Triangle([a, b, c]) => {
                let r1 = rng.random::<f64>().sqrt();
                let r2 = rng.random::<f64>();
                a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
            }
            Surface::Cylinder { base, radius, height } => {
                let side = 2.0 * radius * height;
                let top = radius * radius;
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                if rng.random::<f64>() * (side + top) < side {
                    base + Vector3::new(radius * theta.cos(), radius * theta.sin(), height * rng.random::<f64>())
                } else {
                    let rho = radius * rng.random::<f64>().sqrt();
                    base + Vector3::new(rho * theta.cos(), rho * theta.sin(), height)
                }
            }
            Surface::Sphere { center, radius } => {
                let d: [f64; 3] = UnitSphere.sample(rng);
                center + Vector3::from(d) * radius
            }
        }
    }
}

/// The five visible faces of an axis-aligned box resting on `z = base.z`.
fn box_faces(base: Vector3<f64>, size: Vector3<f64>, out: &mut Vec<Surface>) {
    let (x, y, z) = (Vector3::x() * size.x, Vector3::y() * size.y, Vector3::z() * size.z);
    for q in [
        Quad { origin: base + z, u: x, v: y },
        Quad { origin: base, u: x, v: z },
        Quad { origin: base + y, u: x, v: z },
        Quad { origin: base, u: y, v: z },
        Quad { origin: base + x, u: y, v: z },
    ] {
        out.push(Surface::Quad(q));
    }
}

fn recipe(shape: Shape, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let mut s = Vec::new();
    match shape {
        Shape::Plane => s.push(Surface::Quad(Quad {
            origin: Vector3::zeros(),
            u: Vector3::x() * 1.5,
            v: Vector3::y() * 1.2,
        })),
        Shape::Box => {
            box_faces(Vector3::zeros(), Vector3::new(0.6, 0.4, 0.3), &mut s);
            s.push(Surface::Quad(Quad {
                origin: Vector3::new(-0.3, -0.3, 0.0),
                u: Vector3::x() * 1.2,
                v: Vector3::y() * 1.0,
            }));
        }
        Shape::Room => {
            // Irregular footprint and uneven walls, so no half of the room is congruent to another.
            let (w, d) = (1.5, 1.2);
            let z = Vector3::z();
            let mut jitter = |sx: f64, sy: f64| Vector3::new(sx * rng.random_range(0.0..0.2), sy * rng.random_range(0.0..0.2), 0.0);
            let corners = [
                jitter(-1.0, -1.0),
                Vector3::new(w, 0.0, 0.0) + jitter(1.0, -1.0),
                Vector3::new(w, d, 0.0) + jitter(1.0, 1.0),
                Vector3::new(0.0, d, 0.0) + jitter(-1.0, 1.0),
            ];
            s.push(Surface::Triangle([corners[0], corners[1], corners[2]]));
            s.push(Surface::Triangle([corners[0], corners[2], corners[3]]));
            for k in 0..4 {
                let (a, b) = (corners[k], corners[(k + 1) % 4]);
                s.push(Surface::Quad(Quad { origin: a, u: b - a, v: z * rng.random_range(0.7..1.2) }));
            }
            for _ in 0..rng.random_range(4..=6) {
                let size = Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.5));
                let base = Vector3::new(rng.random_range(0.05..w - 0.05 - size.x), rng.random_range(0.05..d - 0.05 - size.y), 0.0);
                box_faces(base, size, &mut s);
            }
            let radius = rng.random_range(0.05..0.12);
            s.push(Surface::Cylinder {
                base: Vector3::new(rng.random_range(0.2..w - 0.2), rng.random_range(0.2..d - 0.2), 0.0),
                radius,
                height: rng.random_range(0.2..0.6),
            });
            let radius = rng.random_range(0.08..0.15);
            s.push(Surface::Sphere {
                center: Vector3::new(rng.random_range(0.2..w - 0.2), rng.random_range(0.2..d - 0.2), rng.random_range(0.3..0.8)),
                radius,
            });
        }
    }
    s
}

fn sample_surfaces(surfaces: &[Surface], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut cumulative = Vec::with_capacity(surfaces.len());
    let mut total = 0.0;
    for s in surfaces {
        total += s.area();
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let pick = rng.random::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= pick).min(surfaces.len() - 1);
            surfaces[k].sample(rng)
        })
        .collect()
}

fn draw_gt(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<RigidTransform<f64>> {
    if let Some(gt) = &spec.gt {
        return gt.to_transform();
    }
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random::<f64>() * spec.max_angle_deg.to_radians();
    let m = spec.max_translation;
    let t = Vector3::new(
        rng.random_range(-1.0..=1.0) * m,
        rng.random_range(-1.0..=1.0) * m,
        rng.random_range(-1.0..=1.0) * m,
    );
    RigidTransform::from_axis_angle(&Vector3::from(axis), angle, t)
}

/// Marks points of `a` that have a point of `b` within `radius`.
fn coverage<T: Real>(a: &[Point3<T>], b: &PointCloud<T>, radius: f64) -> Vec<bool> {
    let index = SpatialIndex::new(b).expect("nonempty");
    let r = T::of(radius);
    a.iter().map(|p| index.knn_unchecked(p, 1).first().is_some_and(|&j| (b.points()[j] - p).norm() <= r)).collect()
}

struct Crop<T: Real> {
    src: Vec<Point3<T>>,
    tgt: Vec<Point3<T>>,
    src_overlap: Vec<bool>,
    overlap: f64,
}

/// Source keeps the lowest `keep` fraction along `dir`, target the highest.
fn crop<T: Real>(
    spec: &SceneSpec,
    surfaces: &[Surface],
    dir: &Vector3<f64>,
    keep: f64,
    gt: &RigidTransform<T>,
    seed: u64,
) -> Crop<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = ((spec.points as f64) / keep).ceil() as usize;
    let base = sample_surfaces(surfaces, total, &mut rng);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| base[a].dot(dir).total_cmp(&base[b].dot(dir)).then(a.cmp(&b)));
    let n = spec.points.min(total);
    let mut src_idx = order[..n].to_vec();
    let mut tgt_idx = order[total - n..].to_vec();
    src_idx.sort_unstable();
    tgt_idx.sort_unstable();

    let cast = |v: &Vector3<f64>| Point3::new(T::of(v.x), T::of(v.y), T::of(v.z));
    let src: Vec<Point3<T>> = src_idx.iter().map(|&i| cast(&base[i])).collect();
    let mut tgt_local: Vec<Point3<T>> = tgt_idx.iter().map(|&i| cast(&base[i])).collect();

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("sigma >= 0");
        for p in &mut tgt_local {
            *p += Vector3::new(T::of(normal.sample(&mut rng)), T::of(normal.sample(&mut rng)), T::of(normal.sample(&mut rng)));
        }
    }
    let n_out = (spec.outliers * tgt_local.len() as f64).round() as usize;
    if n_out > 0 {
        let (mut lo, mut hi) = (tgt_local[0].coords, tgt_local[0].coords);
        for p in &tgt_local {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        let victims = rand::seq::index::sample(&mut rng, tgt_local.len(), n_out);
        for k in victims {
            let mut q = Vector3::zeros();
            for a in 0..3 {
                q[a] = lo[a] + (hi[a] - lo[a]) * T::of(rng.random::<f64>());
            }
            tgt_local[k] = Point3::from(q);
        }
    }
    let tgt: Vec<Point3<T>> = tgt_local.iter().map(|p| gt.apply_point(p)).collect();
    let moved: Vec<Point3<T>> = src.iter().map(|p| gt.apply_point(p)).collect();
    let tgt_cloud = PointCloud::new("t", tgt.clone()).expect("finite");
    let src_overlap = coverage(&moved, &tgt_cloud, spec.overlap_radius);
    let overlap = src_overlap.iter().filter(|&&m| m).count() as f64 / src.len() as f64;
    Crop { src, tgt, src_overlap, overlap }
}

/// Deterministic scan pair for `spec`.
pub fn generate_scene<T: Real>(spec: &SceneSpec) -> Result<Scene<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surfaces = recipe(spec.shape, &mut rng);
    let gt64 = draw_gt(spec, &mut rng)?;
    let gt = gt64.cast::<T>();
    let sample_seed: u64 = rng.random();

    let mut best_gap = f64::INFINITY;
    for _ in 0..MAX_ATTEMPTS {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
        let attempt_seed: u64 = rng.random();
        let run = |keep: f64| crop::<T>(spec, &surfaces, &dir, keep, &gt, sample_seed ^ attempt_seed);

        // Overlap grows with the kept fraction; bisect for the target.
        let full = run(1.0);
        let found = if spec.overlap >= 1.0 - OVERLAP_SLACK && (full.overlap - spec.overlap).abs() <= OVERLAP_SLACK {
            Some(full)
        } else {
            let (mut lo, mut hi) = (0.05, 1.0);
            let mut hit = None;
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let c = run(mid);
                let gap = c.overlap - spec.overlap;
                best_gap = best_gap.min(gap.abs());
                if gap.abs() <= OVERLAP_SLACK * 0.5 {
                    hit = Some(c);
                    break;
                }
                if gap < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hit
        };
        if let Some(c) = found {
            let src = PointCloud::new(format!("scene-{}-src", spec.seed), c.src)?;
            let tgt = PointCloud::new(format!("scene-{}-tgt", spec.seed), c.tgt)?;
            let back = gt.inverse();
            let tgt_in_src: Vec<Point3<T>> = tgt.points().iter().map(|p| back.apply_point(p)).collect();
            let tgt_overlap = coverage(&tgt_in_src, &src, spec.overlap_radius);
            return Ok(Scene {
                src,
                tgt,
                gt,
                src_overlap: c.src_overlap,
                tgt_overlap,
                overlap: c.overlap,
            });
        }
    }
    Err(Error::Generation(format!(
        "overlap {:.3} not reached within {MAX_ATTEMPTS} attempts (closest gap {best_gap:.3})",
        spec.overlap
    )))
}
