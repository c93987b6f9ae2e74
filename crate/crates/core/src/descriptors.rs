//! Handcrafted dual-level point descriptors.
//!
//! Both levels are soft-binned histograms of three pairwise normal-angle
//! features taken over a spherical neighborhood. The low level uses a small
//! radius; the high level a large one and additionally carries the
//! neighborhood's normalized covariance spectrum. The angle features use
//! absolute cosines, so they are independent of normal sign as well as of
//! rigid motion.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::scalar::Real;

/// Receptive-field level of a descriptor or score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    fn tag(self) -> u8 {
        match self {
            Level::Low => 0,
            Level::High => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Level::Low),
            1 => Ok(Level::High),
            t => Err(Error::Parse(format!("unknown descriptor level byte {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorParams {
    /// Neighborhood radius of the low level (m).
    pub low_radius: f64,
    /// Neighborhood radius of the high level (m).
    pub high_radius: f64,
    /// Neighborhood radius for normal estimation (m).
    pub normal_radius: f64,
    /// Histogram bins per angular feature.
    pub bins: usize,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            low_radius: 0.1,
            high_radius: 0.4,
            normal_radius: 0.1,
            bins: 11,
        }
    }
}

impl DescriptorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_radius > 0.0 && self.low_radius < self.high_radius && self.high_radius.is_finite()) {
            return Err(Error::validation("descriptor radii must satisfy 0 < low < high"));
        }
        if !(self.normal_radius > 0.0 && self.normal_radius.is_finite()) {
            return Err(Error::validation("normal radius must be positive"));
        }
        if self.bins < 2 {
            return Err(Error::validation("descriptor bins must be >= 2"));
        }
        Ok(())
    }

    pub fn radius(&self, level: Level) -> f64 {
        match level {
            Level::Low => self.low_radius,
            Level::High => self.high_radius,
        }
    }

    /// Output dimension at `level`.
    pub fn dimension(&self, level: Level) -> usize {
        match level {
            Level::Low => 3 * self.bins,
            Level::High => 3 * self.bins + 3,
        }
    }
}

/// Per-point feature vectors at one level, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet<T: Real> {
    level: Level,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> DescriptorSet<T> {
    pub fn new(level: Level, dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("descriptor dimension must be >= 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::validation(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("descriptor entries must be finite"));
        }
        Ok(Self { level, dim, data })
    }

    pub fn from_rows(level: Level, rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("descriptor rows have unequal lengths"));
        }
        Self::new(level, dim, rows.concat())
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            level: self.level,
            dim: self.dim,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> DescriptorSet<U> {
        DescriptorSet {
            level: self.level,
            dim: self.dim,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "feature dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(distance(a, b))
}

#[inline]
pub(crate) fn distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Squared distance, or `None` once the partial sum exceeds `bound`.
#[inline]
pub(crate) fn distance_sq_within<T: Real>(a: &[T], b: &[T], bound: T) -> Option<T> {
    let mut acc = T::zero();
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        for (&x, &y) in ca.iter().zip(cb) {
            acc += (x - y) * (x - y);
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

/// Unit normals from the smallest-eigenvalue eigenvector of each point's
/// neighborhood covariance.
///
/// Normals point away from the cloud centroid; when that is undecided the
/// largest-magnitude component is made positive. Neighborhoods with fewer
/// than three points, or with collinear points, yield `(0, 0, 0)`.
pub fn estimate_normals<T: Real>(cloud: &PointCloud<T>, radius: f64) -> Result<Vec<Vector3<T>>> {
    let index = SpatialIndex::new(cloud)?;
    estimate_normals_indexed(&index, radius)
}

pub fn estimate_normals_indexed<T: Real>(index: &SpatialIndex<T>, radius: f64) -> Result<Vec<Vector3<T>>> {
    if !(radius > 0.0) {
        return Err(Error::validation("normal radius must be positive"));
    }
    let points = index.points();
    let centroid = centroid(points);
    let r = T::of(radius);
    Ok((0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |nbrs, i| {
            index.radius_into(&points[i], r, nbrs);
            if nbrs.len() < 3 {
                return Vector3::zeros();
            }
            let Some(eig) = neighborhood_eigen(points, nbrs) else {
                return Vector3::zeros();
            };
            let (order, trace) = sorted_spectrum(&eig);
            // Rank < 2 means no well-defined tangent plane.
            if !(trace > T::zero()) || eig.eigenvalues[order[1]] <= trace * T::of(1e-10) {
                return Vector3::zeros();
            }
            let mut n: Vector3<T> = eig.eigenvectors.column(order[2]).into_owned();
            n.normalize_mut();
            orient(&mut n, &(points[i] - centroid));
            n
        })
        .collect())
}

fn centroid<T: Real>(points: &[Point3<T>]) -> Point3<T> {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc: Vector3<T>, p| acc + p.coords);
    Point3::from(sum / T::of_usize(points.len().max(1)))
}

fn orient<T: Real>(n: &mut Vector3<T>, outward: &Vector3<T>) {
    let dot = n.dot(outward);
    let scale = outward.norm() * T::of(1e-9);
    let flip = if dot.abs() > scale {
        dot < T::zero()
    } else {
        n[n.iamax()] < T::zero()
    };
    if flip {
        *n = -*n;
    }
}

fn neighborhood_eigen<T: Real>(points: &[Point3<T>], nbrs: &[usize]) -> Option<SymmetricEigen<T, nalgebra::U3>> {
    let n = T::of_usize(nbrs.len());
    let mean = nbrs
        .iter()
        .fold(Vector3::zeros(), |acc: Vector3<T>, &j| acc + points[j].coords)
        / n;
    let mut cov = Matrix3::zeros();
    for &j in nbrs {
        let d = points[j].coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    if !cov.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(SymmetricEigen::new(cov))
}

/// Eigenvalue indices sorted descending, plus the (clamped) trace.
fn sorted_spectrum<T: Real>(eig: &SymmetricEigen<T, nalgebra::U3>) -> ([usize; 3], T) {
    let ev = &eig.eigenvalues;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| ev[b].partial_cmp(&ev[a]).unwrap_or(std::cmp::Ordering::Equal));
    let trace = ev.iter().fold(T::zero(), |acc, &v| acc + v.max(T::zero()));
    (order, trace)
}

/// Adds `value` in [0, 1] to `hist` with linear interpolation between the
/// two closest bin centers.
#[inline]
fn soft_bin<T: Real>(hist: &mut [T], value: T, weight: T) {
    let bins = hist.len();
    let pos = value.max(T::zero()).min(T::one()) * T::of_usize(bins - 1);
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo.as_f64() as usize;
    if lo + 1 >= bins {
        hist[bins - 1] += weight;
    } else {
        hist[lo] += weight * (T::one() - frac);
        hist[lo + 1] += weight * frac;
    }
}

/// Descriptors of every point at `level`.
pub fn compute_descriptors<T: Real>(
    cloud: &PointCloud<T>,
    level: Level,
    params: &DescriptorParams,
) -> Result<DescriptorSet<T>> {
    params.validate()?;
    let index = SpatialIndex::new(cloud)?;
    let normals = estimate_normals_indexed(&index, params.normal_radius)?;
    Ok(compute_descriptors_with(&index, &normals, level, params))
}

/// As [`compute_descriptors`], reusing a prebuilt index and normals.
pub fn compute_descriptors_with<T: Real>(
    index: &SpatialIndex<T>,
    normals: &[Vector3<T>],
    level: Level,
    params: &DescriptorParams,
) -> DescriptorSet<T> {
    let points = index.points();
    let bins = params.bins;
    let dim = params.dimension(level);
    let radius = T::of(params.radius(level));

    let rows: Vec<Vec<T>> = (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |nbrs, i| {
            let mut row = vec![T::zero(); dim];
            let ni = normals[i];
            if ni == Vector3::zeros() {
                return row;
            }
            index.radius_into(&points[i], radius, nbrs);
            let mut pairs = 0usize;
            {
                let (h_src, rest) = row.split_at_mut(bins);
                let (h_tgt, rest) = rest.split_at_mut(bins);
                let h_nn = &mut rest[..bins];
                for &j in nbrs.iter() {
                    let nj = normals[j];
                    if j == i || nj == Vector3::zeros() {
                        continue;
                    }
                    let d = points[j] - points[i];
                    let len = d.norm();
                    if !(len > T::zero()) {
                        continue;
                    }
                    let u = d / len;
                    soft_bin(h_src, ni.dot(&u).abs(), T::one());
                    soft_bin(h_tgt, nj.dot(&u).abs(), T::one());
                    soft_bin(h_nn, ni.dot(&nj).abs(), T::one());
                    pairs += 1;
                }
            }
            if pairs == 0 {
                return row;
            }
            let inv = T::one() / T::of_usize(pairs);
            for v in row[..3 * bins].iter_mut() {
                *v *= inv;
            }
            if level == Level::High {
                if let Some(eig) = neighborhood_eigen(points, nbrs) {
                    let (order, trace) = sorted_spectrum(&eig);
                    if trace > T::zero() {
                        for (slot, &k) in order.iter().enumerate() {
                            row[3 * bins + slot] = eig.eigenvalues[k].max(T::zero()) / trace;
                        }
                    }
                }
            }
            let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            row
        })
        .collect();

    DescriptorSet {
        level,
        dim,
        data: rows.concat(),
    }
}

const DUMP_MAGIC: &[u8; 4] = b"HDRG";

/// Sidecar written next to a binary dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub level: Level,
    pub count: usize,
    pub dim: usize,
    pub params: Option<DescriptorParams>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Little-endian binary encoding: magic, level byte, u32 count, u32 dim,
/// then row-major `f32` values.
pub fn encode_dump<T: Real>(set: &DescriptorSet<T>) -> Result<Vec<u8>> {
    let count = u32::try_from(set.len()).map_err(|_| Error::validation("too many descriptors"))?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::validation("dimension too large"))?;
    let mut out = Vec::with_capacity(13 + 4 * set.data.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.push(set.level.tag());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dump<T: Real>(bytes: &[u8]) -> Result<DescriptorSet<T>> {
    if bytes.len() < 13 || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::Parse("not a descriptor dump (bad magic)".into()));
    }
    let level = Level::from_tag(bytes[4])?;
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (word(5), word(9));
    let body = &bytes[13..];
    if body.len() != count * dim * 4 {
        return Err(Error::Parse(format!(
            "dump body is {} bytes, header implies {}",
            body.len(),
            count * dim * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    DescriptorSet::new(level, dim, data)
}

/// Writes the binary dump to `path` and its JSON sidecar to `path.json`.
pub fn write_dump<T: Real>(path: &Path, set: &DescriptorSet<T>, params: Option<&DescriptorParams>) -> Result<()> {
    fs::write(path, encode_dump(set)?)?;
    let sidecar = DumpSidecar {
        level: set.level,
        count: set.len(),
        dim: set.dim,
        params: params.copied(),
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_dump<T: Real>(path: &Path) -> Result<DescriptorSet<T>> {
    decode_dump(&fs::read(path)?)
}
