//! Immutable kd-tree answering closed-ball radius queries and k-nearest
//! neighbor queries with exact brute-force semantics.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Real;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Spatial index over a snapshot of a cloud's points.
#[derive(Debug, Clone)]
pub struct SpatialIndex<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> SpatialIndex<T> {
    pub fn new(cloud: &PointCloud<T>) -> Result<Self> {
        cloud.ensure_nonempty()?;
        Ok(Self::from_points(cloud.points().to_vec()))
    }

    pub(crate) fn from_points(points: Vec<Point3<T>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build(&points, &mut order, 0, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    /// Indices of all points with `|p - center| <= radius`, ascending.
    pub fn radius_query(&self, center: &Point3<T>, radius: T) -> Result<Vec<usize>> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(Error::validation("radius must be positive and finite"));
        }
        let mut out = Vec::new();
        self.radius_into(center, radius, &mut out);
        Ok(out)
    }

    /// Same as [`radius_query`](Self::radius_query) for callers that have
    /// already validated the radius; reuses `out`.
    pub(crate) fn radius_into(&self, center: &Point3<T>, radius: T, out: &mut Vec<usize>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let reach = radius * (T::one() + T::default_epsilon() * T::of(16.0));
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[*start..*end] {
                        if (self.points[i] - center).norm_squared() <= r2 {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = center[*axis] - *value;
                    if diff <= reach {
                        stack.push(*left);
                    }
                    if -diff <= reach {
                        stack.push(*right);
                    }
                }
            }
        }
        out.sort_unstable();
    }

    /// The `k` nearest points in nondecreasing distance order, ties broken
    /// by lower index.
    pub fn knn_query(&self, center: &Point3<T>, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::validation(format!(
                "k = {k} outside 1..={}",
                self.points.len()
            )));
        }
        Ok(self.knn_unchecked(center, k))
    }

    pub(crate) fn knn_unchecked(&self, center: &Point3<T>, k: usize) -> Vec<usize> {
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(0, center, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        found.into_iter().map(|c| c.index).collect()
    }

    fn knn_visit(&self, id: usize, center: &Point3<T>, k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        match &self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let cand = Candidate {
                        dist2: (self.points[i] - center).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = center[*axis] - *value;
                let (near, far) = if diff <= T::zero() {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.knn_visit(near, center, k, heap);
                let plane2 = diff * diff;
                let slack = T::one() + T::default_epsilon() * T::of(16.0);
                if heap.len() < k || plane2 <= heap.peek().expect("nonempty").dist2 * slack {
                    self.knn_visit(far, center, k, heap);
                }
            }
        }
    }
}

/// Free-function form of [`SpatialIndex::new`].
pub fn build_index<T: Real>(cloud: &PointCloud<T>) -> Result<SpatialIndex<T>> {
    SpatialIndex::new(cloud)
}

fn build<T: Real>(points: &[Point3<T>], order: &mut [usize], offset: usize, nodes: &mut Vec<Node<T>>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = points[order[0]].coords;
    let mut hi = lo;
    for &i in order.iter() {
        lo = lo.inf(&points[i].coords);
        hi = hi.sup(&points[i].coords);
    }
    let axis = (hi - lo).imax();
    if !(hi[axis] > lo[axis]) {
        // All points coincide.
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(Ordering::Equal)
    });
    let value = points[order[mid]][axis];
    // Left holds coordinates <= value, right holds >= value.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[derive(Debug, Clone, Copy)]
struct Candidate<T> {
    dist2: T,
    index: usize,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .partial_cmp(&other.dist2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_radius(points: &[Point3<f64>], c: &Point3<f64>, r: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| (points[i] - c).norm_squared() <= r * r)
            .collect()
    }

    fn brute_knn(points: &[Point3<f64>], c: &Point3<f64>, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - c).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        PointCloud::new("r", pts).unwrap()
    }

    fn grid3() -> PointCloud<f64> {
        let mut pts = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        PointCloud::new("grid", pts).unwrap()
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let empty = PointCloud::<f64>::new("e", vec![]).unwrap();
        assert!(build_index(&empty).is_err());
    }

    #[test]
    fn single_point() {
        let c = PointCloud::new("one", vec![Point3::new(1.0, 2.0, 3.0)]).unwrap();
        let idx = build_index(&c).unwrap();
        assert_eq!(idx.radius_query(&Point3::new(1.0, 2.0, 3.0), 1e-6).unwrap(), vec![0]);
        assert_eq!(idx.knn_query(&Point3::origin(), 1).unwrap(), vec![0]);
    }

    #[test]
    fn grid_center_unit_ball() {
        let idx = build_index(&grid3()).unwrap();
        let hits = idx.radius_query(&Point3::new(1.0, 1.0, 1.0), 1.0).unwrap();
        assert_eq!(hits.len(), 7);
        let pts = idx.points();
        for i in hits {
            assert!((pts[i] - Point3::new(1.0, 1.0, 1.0)).norm() <= 1.0);
        }
    }

    #[test]
    fn radius_edge_cases() {
        let grid = grid3();
        let idx = build_index(&grid).unwrap();
        assert!(idx.radius_query(&Point3::new(0.5, 0.5, 0.5), 0.1).unwrap().is_empty());
        let all = idx
            .radius_query(&grid.centroid().unwrap(), grid.bbox_diagonal())
            .unwrap();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
        assert!(idx.radius_query(&Point3::origin(), 0.0).is_err());
        assert!(idx.radius_query(&Point3::origin(), -1.0).is_err());
    }

    #[test]
    fn knn_edge_cases() {
        let grid = grid3();
        let idx = build_index(&grid).unwrap();
        assert_eq!(idx.knn_query(&Point3::new(2.0, 0.0, 1.0), 1).unwrap(), vec![19]);
        assert!(idx.knn_query(&Point3::origin(), 0).is_err());
        assert!(idx.knn_query(&Point3::origin(), 28).is_err());
        let c = Point3::new(1.0, 1.0, 1.0);
        let all = idx.knn_query(&c, 27).unwrap();
        assert_eq!(all, brute_knn(grid.points(), &c, 27));
        // Ties among the six face neighbors resolve by index.
        assert_eq!(&all[..7], &[13, 4, 10, 12, 14, 16, 22]);
    }

    #[test]
    fn matches_linear_scan_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 500);
        let idx = build_index(&cloud).unwrap();
        for _ in 0..20 {
            let c = Point3::new(
                rng.random_range(-0.1..1.1),
                rng.random_range(-0.1..1.1),
                rng.random_range(-0.1..1.1),
            );
            let r = rng.random_range(0.01..0.4);
            assert_eq!(idx.radius_query(&c, r).unwrap(), brute_radius(cloud.points(), &c, r));
            let k = rng.random_range(1..60);
            assert_eq!(idx.knn_query(&c, k).unwrap(), brute_knn(cloud.points(), &c, k));
        }
    }

    #[test]
    fn duplicate_points_are_all_found() {
        let pts = vec![Point3::new(0.5, 0.5, 0.5); 40];
        let idx = SpatialIndex::from_points(pts);
        assert_eq!(idx.radius_query(&Point3::new(0.5, 0.5, 0.5), 1e-9).unwrap().len(), 40);
        assert_eq!(idx.knn_query(&Point3::origin(), 5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn knn_is_contained_in_radius_of_kth(seed in 0u64..1000, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 120);
            let idx = build_index(&cloud).unwrap();
            let c = Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let nn = idx.knn_query(&c, k).unwrap();
            let kth = (cloud.points()[nn[k - 1]] - c).norm();
            // sqrt then square may round one ulp below the squared distance.
            let ball = idx.radius_query(&c, (kth * (1.0 + 1e-12)).max(1e-12)).unwrap();
            for i in nn {
                prop_assert!(ball.contains(&i));
            }
        }
    }
}
