//! K-means superpoints over normalized position and weighted color.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::pointcloud::PointCloud;
use crate::rng::RngStream;

/// Segment count used for full-size indoor scenes.
pub const FULL_SCALE_SEGMENTS: usize = 2000;

/// A partition of `0..n` into `num_segments` non-empty segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentAssignment {
    segment_of: Vec<usize>,
    num_segments: usize,
}

impl SegmentAssignment {
    /// Validates that every id is below `num_segments` and every segment is used.
    pub fn new(segment_of: Vec<usize>, num_segments: usize) -> Result<Self> {
        let mut used = vec![false; num_segments];
        for (i, &s) in segment_of.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::InvalidParam(format!(
                    "point {i} has segment id {s}, expected < {num_segments}"
                )));
            }
            used[s] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::PartitionViolation(empty));
        }
        Ok(Self {
            segment_of,
            num_segments,
        })
    }

    /// Every point in its own segment, in index order.
    pub fn singletons(n: usize) -> Self {
        Self {
            segment_of: (0..n).collect(),
            num_segments: n,
        }
    }

    pub fn num_points(&self) -> usize {
        self.segment_of.len()
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_of(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &s in &self.segment_of {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_segments];
        for (i, &s) in self.segment_of.iter().enumerate() {
            out[s].push(i);
        }
        out
    }

    /// One decimal id per line.
    pub fn to_lines(&self) -> String {
        let mut s = String::with_capacity(self.segment_of.len() * 4);
        for id in &self.segment_of {
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub target_segments: usize,
    pub max_iters: usize,
    /// Stop once the largest centroid move, relative to the feature-space
    /// diagonal, drops below this.
    pub tol: f64,
    pub color_weight: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            target_segments: 32,
            max_iters: 100,
            tol: 1e-4,
            color_weight: 1.0,
            seed: 0,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_segments < 1 || self.max_iters < 1 {
            return Err(Error::InvalidParam(
                "kmeans needs target_segments >= 1 and max_iters >= 1".into(),
            ));
        }
        if !(self.tol >= 0.0) || !(self.color_weight >= 0.0) {
            return Err(Error::InvalidParam("kmeans tol and color_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-point features: positions min-max scaled to `[0, 1]` per axis
/// (degenerate axes map to 0.5), then colors times `color_weight`.
pub fn segment_features(cloud: &PointCloud, color_weight: f64) -> Matrix {
    let pos = cloud.positions();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..cloud.len() {
        for k in 0..3 {
            lo[k] = lo[k].min(pos.get(i, k));
            hi[k] = hi[k].max(pos.get(i, k));
        }
    }
    Matrix::from_fn(cloud.len(), 6, |i, k| {
        if k < 3 {
            let span = hi[k] - lo[k];
            if span > 0.0 {
                (pos.get(i, k) - lo[k]) / span
            } else {
                0.5
            }
        } else {
            color_weight * cloud.colors().get(i, k - 3)
        }
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(features: &Matrix, k: usize, rng: &mut RngStream) -> Matrix {
    let n = features.rows();
    let dim = features.cols();
    let mut centers = Matrix::zeros(k, dim);
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), centers.row(0))).collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform(0.0, total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), centers.row(c)));
        }
    }
    centers
}

/// Nearest center per point (lowest index wins ties).
fn assign(features: &Matrix, centers: &Matrix, labels: &mut [usize], dists: &mut [f64]) {
    for i in 0..features.rows() {
        let x = features.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centers.rows() {
            let d = sq_dist(x, centers.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(features: &Matrix, centers: &mut Matrix, labels: &mut [usize], dists: &mut [f64]) {
    let k = centers.rows();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &d) in dists.iter().enumerate() {
            if counts[labels[i]] > 1 && d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // n >= k guarantees a donor cluster with two or more points
        let i = far.expect("kmeans called with fewer points than clusters");
        counts[labels[i]] -= 1;
        counts[empty] = 1;
        labels[i] = empty;
        dists[i] = 0.0;
        centers.row_mut(empty).copy_from_slice(features.row(i));
    }
}

fn update_centers(features: &Matrix, labels: &[usize], centers: &mut Matrix) {
    let k = centers.rows();
    let mut sums = Matrix::zeros(k, features.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s * inv;
        }
    }
}

fn objective(features: &Matrix, centers: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(features.row(i), centers.row(l)))
        .sum()
}

/// Result of a traced K-means run.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub assignment: SegmentAssignment,
    /// Sum of squared distances to centroids after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_segments(cloud: &PointCloud, cfg: &KMeansConfig) -> SegmentAssignment {
    kmeans_segments_traced(cloud, cfg).assignment
}

/// Lloyd iterations from k-means++ seeds on [`segment_features`].
pub fn kmeans_segments_traced(cloud: &PointCloud, cfg: &KMeansConfig) -> KMeansRun {
    let n = cloud.len();
    let k = cfg.target_segments.clamp(1, n);
    if n <= cfg.target_segments {
        return KMeansRun {
            assignment: SegmentAssignment::singletons(n),
            objective: vec![0.0],
            iterations: 0,
        };
    }

    let features = segment_features(cloud, cfg.color_weight);
    let diag = {
        let mut d = 0.0;
        for k in 0..features.cols() {
            let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(features.get(i, k)), hi.max(features.get(i, k)))
            });
            d += (hi - lo) * (hi - lo);
        }
        d.sqrt().max(f64::MIN_POSITIVE)
    };

    let mut rng = RngStream::new(cfg.seed);
    let mut centers = kmeans_pp(&features, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        assign(&features, &centers, &mut labels, &mut dists);
        repair_empty(&features, &mut centers, &mut labels, &mut dists);
        let before = centers.clone();
        update_centers(&features, &labels, &mut centers);
        trace.push(objective(&features, &centers, &labels));

        let shift = (0..k)
            .map(|c| sq_dist(before.row(c), centers.row(c)).sqrt())
            .fold(0.0, f64::max);
        if shift / diag < cfg.tol {
            break;
        }
    }

    // Canonical ids: order of first appearance.
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    debug_assert_eq!(next, k);

    KMeansRun {
        assignment: SegmentAssignment {
            segment_of: labels,
            num_segments: k,
        },
        objective: trace,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(points: &[[f64; 3]], colors: &[[f64; 3]]) -> PointCloud {
        let p: Vec<Vec<f64>> = points.iter().map(|r| r.to_vec()).collect();
        let c: Vec<Vec<f64>> = colors.iter().map(|r| r.to_vec()).collect();
        PointCloud::new(Matrix::from_rows(&p).unwrap(), Matrix::from_rows(&c).unwrap(), None)
            .unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut s = RngStream::new(seed);
        PointCloud::new(
            Matrix::from_fn(n, 3, |_, _| s.uniform(0.0, 4.0)),
            Matrix::from_fn(n, 3, |_, _| s.uniform(0.0, 1.0)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn features_min_max_endpoints() {
        let c = cloud_from(&[[0.0; 3], [1.0; 3]], &[[1.0; 3], [0.0; 3]]);
        let f = segment_features(&c, 0.5);
        assert_eq!(f.row(0), &[0.0, 0.0, 0.0, 0.5, 0.5, 0.5]);
        assert_eq!(f.row(1), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let f = segment_features(&c, 0.0);
        assert!(f.row(0)[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn features_degenerate_axis() {
        let c = cloud_from(&[[3.0, -1.0, 2.0]], &[[0.2, 0.3, 0.4]]);
        assert_eq!(&segment_features(&c, 1.0).row(0)[..3], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn small_scene_gets_singletons() {
        let c = random_cloud(5, 1);
        let seg = kmeans_segments(&c, &KMeansConfig { target_segments: 8, ..Default::default() });
        assert_eq!(seg, SegmentAssignment::singletons(5));
    }

    #[test]
    fn duplicate_points_still_partition() {
        let c = cloud_from(&[[1.0; 3]; 10], &[[0.5; 3]; 10]);
        let seg = kmeans_segments(&c, &KMeansConfig { target_segments: 4, ..Default::default() });
        assert_eq!(seg.num_segments(), 4);
        assert!(seg.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn assignment_validation() {
        assert!(matches!(
            SegmentAssignment::new(vec![0, 0, 2], 3),
            Err(Error::PartitionViolation(1))
        ));
        assert!(SegmentAssignment::new(vec![0, 3], 3).is_err());
        assert_eq!(SegmentAssignment::new(vec![1, 0, 1], 2).unwrap().sizes(), vec![1, 2]);
    }

    #[test]
    fn objective_is_monotone_and_run_is_deterministic() {
        let c = random_cloud(300, 2);
        let cfg = KMeansConfig { target_segments: 12, seed: 4, ..Default::default() };
        let a = kmeans_segments_traced(&c, &cfg);
        for w in a.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let b = kmeans_segments_traced(&c, &cfg);
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn to_lines_format() {
        let s = SegmentAssignment::new(vec![0, 1, 0], 2).unwrap();
        assert_eq!(s.to_lines(), "0\n1\n0\n");
    }
}
