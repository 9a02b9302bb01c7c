//! Point-set primitives: exact L1 neighbor search, neighborhood
//! normalization into the field cube, and chamfer distance.
//!
//! Neighbor search is an exact brute-force scan, O(N) per query and O(N²)
//! for a whole cloud. Every other module builds on these functions.

use std::cmp::Ordering;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a point, rejecting NaN and infinite components.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let p = Point3 { x, y, z };
        if p.is_finite() {
            Ok(p)
        } else {
            Err(invalid(format!("non-finite point ({x}, {y}, {z})")))
        }
    }

    /// Builds a point without the finiteness check. Meant for values derived
    /// from already-validated points.
    #[inline]
    pub const fn raw(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::raw(a[0], a[1], a[2])
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn l1_dist(self, other: Point3) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs() + (self.z - other.z).abs()
    }

    #[inline]
    pub fn sq_dist(self, other: Point3) -> f64 {
        let d = self - other;
        d.dot(d)
    }

    /// Chebyshev norm.
    #[inline]
    pub fn linf_norm(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    #[inline]
    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl Add for Point3 {
    type Output = Point3;
    #[inline]
    fn add(self, o: Point3) -> Point3 {
        Point3::raw(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    #[inline]
    fn sub(self, o: Point3) -> Point3 {
        Point3::raw(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn mul(self, s: f64) -> Point3 {
        Point3::raw(self.x * s, self.y * s, self.z * s)
    }
}

/// A non-empty, finite, ordered point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub fn from_arrays(coords: &[[f64; 3]]) -> Result<Self> {
        PointCloud::new(coords.iter().copied().map(Point3::from_array).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

/// A center point, its neighbors, and the same set mapped into the
/// `[-1, 1]^3` field cube with the center first at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalNeighborhood {
    pub center: Point3,
    pub neighbors: Vec<Point3>,
    pub normalized: Vec<Point3>,
    /// Divisor applied after centering.
    pub scale: f64,
}

impl LocalNeighborhood {
    /// Total point count K, center included.
    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` points closest to `query` in L1 distance, ordered by
/// (distance, index). A query that belongs to the cloud finds itself.
pub fn knn_l1(cloud: &PointCloud, query: Point3, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n == 0 {
        return Err(invalid("knn on an empty cloud"));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} outside [1, {n}]")));
    }
    if !query.is_finite() {
        return Err(invalid("knn query is not finite"));
    }
    let mut dists: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.l1_dist(query), i))
        .collect();
    if k < n {
        dists.select_nth_unstable_by(k - 1, by_dist_then_index);
        dists.truncate(k);
    }
    dists.sort_unstable_by(by_dist_then_index);
    Ok(dists.into_iter().map(|(_, i)| i).collect())
}

/// All points within L1 distance `radius` of `query` (inclusive), ordered
/// by (distance, index). May be empty.
pub fn radius_neighbors_l1(cloud: &PointCloud, query: Point3, radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid(format!("radius must be positive and finite, got {radius}")));
    }
    let mut hits: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d = p.l1_dist(query);
            (d <= radius).then_some((d, i))
        })
        .collect();
    hits.sort_unstable_by(by_dist_then_index);
    Ok(hits.into_iter().map(|(_, i)| i).collect())
}

/// Centers the neighborhood on `center` and divides by the scale, which is
/// `scale_override` if given and otherwise the largest Chebyshev distance
/// from the center to a neighbor. The farthest neighbor therefore lands on
/// a face of the cube. A zero scale maps everything to the origin.
pub fn normalize_neighborhood(
    center: Point3,
    neighbor_points: &[Point3],
    scale_override: Option<f64>,
) -> Result<LocalNeighborhood> {
    let scale = match scale_override {
        Some(s) => {
            if !(s > 0.0) || !s.is_finite() {
                return Err(invalid(format!("scale override must be positive, got {s}")));
            }
            s
        }
        None => {
            if neighbor_points.is_empty() {
                return Err(invalid(
                    "neighborhood needs at least one neighbor unless a scale is given",
                ));
            }
            neighbor_points
                .iter()
                .map(|&p| (p - center).linf_norm())
                .fold(0.0, f64::max)
        }
    };

    let mut normalized = Vec::with_capacity(neighbor_points.len() + 1);
    normalized.push(Point3::ORIGIN);
    if scale == 0.0 {
        normalized.resize(neighbor_points.len() + 1, Point3::ORIGIN);
    } else {
        normalized.extend(neighbor_points.iter().map(|&p| {
            let d = p - center;
            Point3::raw(d.x / scale, d.y / scale, d.z / scale)
        }));
    }
    Ok(LocalNeighborhood {
        center,
        neighbors: neighbor_points.to_vec(),
        normalized,
        scale,
    })
}

pub const DEFAULT_BASE_K: usize = 64;
pub const DEFAULT_BASE_N: usize = 2048;

/// Neighbor count proportional to cloud size: 64 neighbors per 2048 points,
/// clamped to `[4, total_points]`.
pub fn adaptive_k(total_points: usize, base_k: usize, base_n: usize) -> Result<usize> {
    if total_points < 2 {
        return Err(invalid(format!(
            "adaptive k needs at least 2 points, got {total_points}"
        )));
    }
    if base_n == 0 {
        return Err(invalid("base_n must be positive"));
    }
    let k = (base_k as f64 * total_points as f64 / base_n as f64).round() as usize;
    Ok(k.max(4).min(total_points))
}

/// Nearest point of `to` for every point of `from`, squared distance and
/// index. Ties go to the lowest index.
pub(crate) fn nearest_sq(from: &[Point3], to: &[Point3]) -> Vec<(f64, usize)> {
    from.iter()
        .map(|&p| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, &q) in to.iter().enumerate() {
                let d = p.sq_dist(q);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best
        })
        .collect()
}

/// Chamfer distance together with the nearest-match assignments in both
/// directions, which the reverse pass treats as constant.
#[derive(Debug, Clone)]
pub struct ChamferMatch {
    pub value: f64,
    /// For each point of `a`, index of its nearest point in `b`.
    pub a_to_b: Vec<usize>,
    /// For each point of `b`, index of its nearest point in `a`.
    pub b_to_a: Vec<usize>,
}

pub fn chamfer_match(a: &[Point3], b: &[Point3]) -> Result<ChamferMatch> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance needs two non-empty point sets"));
    }
    let ab = nearest_sq(a, b);
    let ba = nearest_sq(b, a);
    let fwd = ab.iter().map(|d| d.0).sum::<f64>() / a.len() as f64;
    let bwd = ba.iter().map(|d| d.0).sum::<f64>() / b.len() as f64;
    Ok(ChamferMatch {
        value: fwd + bwd,
        a_to_b: ab.into_iter().map(|d| d.1).collect(),
        b_to_a: ba.into_iter().map(|d| d.1).collect(),
    })
}

/// Symmetric chamfer distance: mean squared distance from each point to
/// its nearest neighbor in the other set, summed over both directions.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(chamfer_match(a.points(), b.points())?.value)
}

/// Gradient of [`chamfer_match`]'s value with respect to the points of `a`,
/// holding the assignments fixed.
pub(crate) fn chamfer_grad_a(a: &[Point3], b: &[Point3], m: &ChamferMatch) -> Vec<Point3> {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut g = vec![Point3::ORIGIN; a.len()];
    for (i, &j) in m.a_to_b.iter().enumerate() {
        g[i] = g[i] + (a[i] - b[j]) * (2.0 / na);
    }
    for (j, &i) in m.b_to_a.iter().enumerate() {
        g[i] = g[i] + (a[i] - b[j]) * (2.0 / nb);
    }
    g
}
