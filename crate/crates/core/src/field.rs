//! The shape field: a dense `R×R×R×C` grid over the cube `[-1, 1]^3`,
//! sampled with trilinear interpolation and max-pooled over a normalized
//! neighborhood to give one C-dimensional embedding per point.
//!
//! Nodes use the align-corners convention: node `i` on an axis sits at
//! `-1 + 2i/(R-1)`. Embedding a K-point neighborhood performs 8K weighted
//! corner reads, so a whole cloud costs O(8NK) on top of the neighbor search.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{knn_l1, normalize_neighborhood, LocalNeighborhood, Point3, PointCloud};

/// Slack allowed outside the cube before a query is rejected.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Values drawn from `[-a, a]`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform(0.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    resolution: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FieldGrid {
    /// Wraps raw values laid out `[ix][iy][iz][c]` with `ix` slowest.
    pub fn from_values(resolution: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(resolution, channels)?;
        let expected = resolution.pow(3) * channels;
        if values.len() != expected {
            return Err(invalid(format!(
                "grid of {resolution}^3 x {channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid values must be finite"));
        }
        Ok(FieldGrid {
            resolution,
            channels,
            values,
        })
    }

    pub fn constant(resolution: usize, channels: usize, value: &[f64]) -> Result<Self> {
        if value.len() != channels {
            return Err(invalid("constant value length must equal channel count"));
        }
        let nodes = resolution.pow(3);
        let values = value.iter().copied().cycle().take(nodes * channels).collect();
        FieldGrid::from_values(resolution, channels, values)
    }

    /// Grid whose node values are `f(node_position)` per channel.
    pub fn from_fn(
        resolution: usize,
        channels: usize,
        mut f: impl FnMut(Point3, usize) -> f64,
    ) -> Result<Self> {
        check_dims(resolution, channels)?;
        let mut values = Vec::with_capacity(resolution.pow(3) * channels);
        for ix in 0..resolution {
            for iy in 0..resolution {
                for iz in 0..resolution {
                    let p = Point3::raw(
                        node_coord(ix, resolution),
                        node_coord(iy, resolution),
                        node_coord(iz, resolution),
                    );
                    for c in 0..channels {
                        values.push(f(p, c));
                    }
                }
            }
        }
        FieldGrid::from_values(resolution, channels, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of trainable values, `R^3 * C`.
    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Offset of node `(ix, iy, iz)` channel 0 in [`values`](Self::values).
    #[inline]
    pub fn node_offset(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ((ix * self.resolution + iy) * self.resolution + iz) * self.channels
    }

    pub fn node(&self, ix: usize, iy: usize, iz: usize) -> &[f64] {
        let o = self.node_offset(ix, iy, iz);
        &self.values[o..o + self.channels]
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize, c: usize) -> f64 {
        self.values[self.node_offset(ix, iy, iz) + c]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, c: usize, v: f64) {
        let o = self.node_offset(ix, iy, iz) + c;
        self.values[o] = v;
    }
}

fn check_dims(resolution: usize, channels: usize) -> Result<()> {
    if resolution < 2 {
        return Err(invalid(format!("grid resolution must be >= 2, got {resolution}")));
    }
    if channels < 1 {
        return Err(invalid("grid needs at least one channel"));
    }
    Ok(())
}

/// Coordinate of node `i` along one axis.
#[inline]
pub fn node_coord(i: usize, resolution: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (resolution - 1) as f64
}

/// Deterministic grid initialization.
pub fn init_grid(resolution: usize, channels: usize, scheme: InitScheme, seed: u64) -> Result<FieldGrid> {
    check_dims(resolution, channels)?;
    let n = resolution.pow(3) * channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = match scheme {
        InitScheme::Uniform(a) => {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(invalid(format!("uniform half-width must be >= 0, got {a}")));
            }
            if a == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
        }
        InitScheme::Normal(sigma) => {
            let dist = Normal::new(0.0, sigma)
                .map_err(|e| invalid(format!("bad normal sigma {sigma}: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    FieldGrid::from_values(resolution, channels, values)
}

/// One embedding vector per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    channels: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * channels {
            return Err(invalid("embedding matrix shape does not match data length"));
        }
        Ok(EmbeddingMatrix {
            rows,
            channels,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.channels.max(1)).take(self.rows)
    }
}

/// Corners and blend weights used for one trilinear query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerWeights {
    /// Offsets of channel 0 of each corner node in the grid's value array.
    pub offsets: [usize; 8],
    pub weights: [f64; 8],
    /// Fractional position inside the cell along x, y, z.
    pub frac: [f64; 3],
}

/// Everything the reverse pass needs from one neighborhood embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpTape {
    resolution: usize,
    channels: usize,
    pub samples: Vec<CornerWeights>,
    /// Row index attaining the max, per channel. Ties go to the lowest row.
    pub argmax: Vec<usize>,
}

#[inline]
fn axis_cell(x: f64, resolution: usize) -> (usize, f64) {
    let x = x.clamp(-1.0, 1.0);
    let cells = (resolution - 1) as f64;
    let mut u = (x + 1.0) * 0.5 * cells;
    let r = u.round();
    // Pull float noise onto the node so node queries are exact.
    if (u - r).abs() <= 1e-14 * cells.max(1.0) {
        u = r;
    }
    let i0 = (u.floor() as usize).min(resolution - 2);
    (i0, u - i0 as f64)
}

/// Corner nodes and weights for query `q`.
pub fn corner_weights(grid: &FieldGrid, q: Point3) -> Result<CornerWeights> {
    let lim = 1.0 + DOMAIN_TOLERANCE;
    if !(q.x.abs() <= lim && q.y.abs() <= lim && q.z.abs() <= lim) {
        return Err(Error::OutOfDomain(q.to_array()));
    }
    let r = grid.resolution;
    let (ix, tx) = axis_cell(q.x, r);
    let (iy, ty) = axis_cell(q.y, r);
    let (iz, tz) = axis_cell(q.z, r);
    let wx = [1.0 - tx, tx];
    let wy = [1.0 - ty, ty];
    let wz = [1.0 - tz, tz];
    let mut offsets = [0usize; 8];
    let mut weights = [0.0; 8];
    for b in 0..8 {
        let (dx, dy, dz) = ((b >> 2) & 1, (b >> 1) & 1, b & 1);
        offsets[b] = grid.node_offset(ix + dx, iy + dy, iz + dz);
        weights[b] = wx[dx] * wy[dy] * wz[dz];
    }
    Ok(CornerWeights {
        offsets,
        weights,
        frac: [tx, ty, tz],
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Nested lerps along z, y, then x. Mathematically the weighted corner
/// sum, but exact at nodes and on constant regions.
#[inline]
fn blend_into(grid: &FieldGrid, cw: &CornerWeights, out: &mut [f64]) {
    let [tx, ty, tz] = cw.frac;
    let v = &grid.values;
    for (ch, acc) in out.iter_mut().enumerate() {
        let at = |b: usize| v[cw.offsets[b] + ch];
        let z00 = lerp(at(0), at(1), tz);
        let z01 = lerp(at(2), at(3), tz);
        let z10 = lerp(at(4), at(5), tz);
        let z11 = lerp(at(6), at(7), tz);
        *acc = lerp(lerp(z00, z01, ty), lerp(z10, z11, ty), tx);
    }
}

/// Trilinear sample of every channel at `q`.
pub fn sample_trilinear(grid: &FieldGrid, q: Point3) -> Result<Vec<f64>> {
    let cw = corner_weights(grid, q)?;
    let mut out = vec![0.0; grid.channels];
    blend_into(grid, &cw, &mut out);
    Ok(out)
}

/// Channel-wise max of trilinear samples over already-normalized points,
/// with the tape for [`grad_embed_wrt_grid`].
pub fn embed_normalized(grid: &FieldGrid, normalized: &[Point3]) -> Result<(Vec<f64>, InterpTape)> {
    if normalized.is_empty() {
        return Err(invalid("cannot embed an empty neighborhood"));
    }
    let c = grid.channels;
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    let mut row = vec![0.0; c];
    let mut samples = Vec::with_capacity(normalized.len());
    for (k, &q) in normalized.iter().enumerate() {
        let cw = corner_weights(grid, q)?;
        blend_into(grid, &cw, &mut row);
        for ch in 0..c {
            if row[ch] > best[ch] {
                best[ch] = row[ch];
                argmax[ch] = k;
            }
        }
        samples.push(cw);
    }
    Ok((
        best,
        InterpTape {
            resolution: grid.resolution,
            channels: c,
            samples,
            argmax,
        },
    ))
}

/// Embedding of one normalized neighborhood: sample every point, then
/// max-pool each channel over the points. The center always samples the
/// grid's central feature.
pub fn embed_neighborhood(grid: &FieldGrid, nbhd: &LocalNeighborhood) -> Result<Vec<f64>> {
    Ok(embed_normalized(grid, &nbhd.normalized)?.0)
}

pub fn embed_neighborhood_taped(
    grid: &FieldGrid,
    nbhd: &LocalNeighborhood,
) -> Result<(Vec<f64>, InterpTape)> {
    embed_normalized(grid, &nbhd.normalized)
}

/// Normalized neighborhood of `center` among `context`: its `k` nearest
/// points in L1 distance. When the center is itself `context[self_index]`
/// it counts toward `k` but is not repeated as a neighbor.
pub fn point_neighborhood(context: &PointCloud, center: Point3, self_index: Option<usize>, k: usize) -> Result<LocalNeighborhood> {
    let idx = knn_l1(context, center, k)?;
    let pts = context.points();
    let mut neighbors: Vec<Point3> = idx
        .iter()
        .filter(|&&j| Some(j) != self_index)
        .map(|&j| pts[j])
        .collect();
    neighbors.truncate(k.saturating_sub(1));
    if neighbors.is_empty() {
        normalize_neighborhood(center, &neighbors, Some(1.0))
    } else {
        normalize_neighborhood(center, &neighbors, None)
    }
}

/// Neighborhoods for every point of a cloud, in input order.
pub fn cloud_neighborhoods(cloud: &PointCloud, k: usize) -> Result<Vec<LocalNeighborhood>> {
    check_k(k, cloud.len())?;
    cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, &p)| point_neighborhood(cloud, p, Some(i), k))
        .collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} outside [1, {n}]")));
    }
    Ok(())
}

/// Embeddings of the points at `queries` (indices into `context`), each
/// using its `k` nearest neighbors within `context`.
pub fn embed_context_rows(
    grid: &FieldGrid,
    context: &PointCloud,
    queries: &[usize],
    k: usize,
) -> Result<EmbeddingMatrix> {
    check_k(k, context.len())?;
    let rows: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|&i| {
            let p = *context
                .points()
                .get(i)
                .ok_or_else(|| invalid(format!("query index {i} out of range")))?;
            let nb = point_neighborhood(context, p, Some(i), k)?;
            embed_neighborhood(grid, &nb)
        })
        .collect::<Result<_>>()?;
    EmbeddingMatrix::new(queries.len(), grid.channels, rows.concat())
}

/// Embedding of every point of `cloud` from its `k`-point neighborhood.
pub fn embed_cloud(grid: &FieldGrid, cloud: &PointCloud, k: usize) -> Result<EmbeddingMatrix> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    embed_context_rows(grid, cloud, &all, k)
}

/// Dense gradient buffer shaped like a [`FieldGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    resolution: usize,
    channels: usize,
    pub values: Vec<f64>,
}

impl GridGradient {
    pub fn zeros_like(grid: &FieldGrid) -> Self {
        GridGradient {
            resolution: grid.resolution,
            channels: grid.channels,
            values: vec![0.0; grid.values.len()],
        }
    }

    pub fn merge(&mut self, other: &GridGradient) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(invalid("cannot merge gradients of different grid shapes"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }
}

/// Adds `d embedding / d grid` contracted with `upstream` into `grad`.
/// Each channel's gradient reaches only the eight corners of its argmax
/// sample.
pub fn grad_embed_wrt_grid(
    grid: &FieldGrid,
    upstream: &[f64],
    tape: &InterpTape,
    grad: &mut GridGradient,
) -> Result<()> {
    if tape.resolution != grid.resolution
        || tape.channels != grid.channels
        || grad.resolution != grid.resolution
        || grad.channels != grid.channels
    {
        return Err(invalid("tape or gradient buffer does not match grid shape"));
    }
    if upstream.len() != grid.channels {
        return Err(invalid("upstream gradient length must equal channel count"));
    }
    for (ch, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let s = &tape.samples[tape.argmax[ch]];
        for (&o, &w) in s.offsets.iter().zip(&s.weights) {
            grad.values[o + ch] += g * w;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn rand_grid(r: usize, c: usize, seed: u64) -> FieldGrid {
        init_grid(r, c, InitScheme::Uniform(1.0), seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_grid(16, 32, InitScheme::Uniform(0.1), 7).unwrap();
        let b = init_grid(16, 32, InitScheme::Uniform(0.1), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 131072);
        assert!(a.values().iter().all(|v| v.abs() <= 0.1));
        let z = init_grid(2, 1, InitScheme::Uniform(0.0), 99).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        let n = init_grid(4, 2, InitScheme::Normal(0.5), 1).unwrap();
        assert_eq!(n, init_grid(4, 2, InitScheme::Normal(0.5), 1).unwrap());
        assert!(init_grid(1, 4, InitScheme::default(), 0).is_err());
        assert!(init_grid(4, 0, InitScheme::default(), 0).is_err());
    }

    #[test]
    fn node_queries_are_exact() {
        for r in [2, 3, 5, 16] {
            let g = rand_grid(r, 3, r as u64);
            for ix in 0..r {
                for iy in 0..r {
                    for iz in 0..r {
                        let q = Point3::raw(node_coord(ix, r), node_coord(iy, r), node_coord(iz, r));
                        assert_eq!(sample_trilinear(&g, q).unwrap(), g.node(ix, iy, iz));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_grid_reproduces_value() {
        let g = FieldGrid::constant(5, 2, &[0.25, -3.0]).unwrap();
        for q in [[0.1, -0.7, 0.33], [1.0, 1.0, -1.0], [0.0, 0.0, 0.0]] {
            let s = sample_trilinear(&g, Point3::from_array(q)).unwrap();
            assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] + 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_x_field_on_two_node_grid() {
        let g = FieldGrid::from_fn(2, 1, |p, _| p.x).unwrap();
        let s = sample_trilinear(&g, Point3::raw(0.5, 0.0, 0.0)).unwrap();
        assert_eq!(s, vec![0.5]);
    }

    #[test]
    fn domain_checks() {
        let g = rand_grid(4, 1, 0);
        assert!(sample_trilinear(&g, Point3::raw(1.0 + 1e-10, 0.0, -1.0 - 5e-10)).is_ok());
        assert!(matches!(
            sample_trilinear(&g, Point3::raw(1.0 + 1e-8, 0.0, 0.0)),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn embed_neighborhood_examples() {
        let g = FieldGrid::constant(4, 3, &[1.0, 2.0, 3.0]).unwrap();
        let nb = normalize_neighborhood(
            Point3::ORIGIN,
            &[Point3::raw(0.2, 0.1, 0.0), Point3::raw(-0.3, 0.0, 0.4)],
            None,
        )
        .unwrap();
        let e = embed_neighborhood(&g, &nb).unwrap();
        for (a, b) in e.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let r = rand_grid(5, 4, 3);
        let lone = normalize_neighborhood(Point3::raw(1.0, 2.0, 3.0), &[], Some(1.0)).unwrap();
        assert_eq!(embed_neighborhood(&r, &lone).unwrap(), r.node(2, 2, 2));

        let xf = FieldGrid::from_fn(8, 2, |p, c| if c == 0 { p.x } else { -p.y }).unwrap();
        let nb = normalize_neighborhood(
            Point3::ORIGIN,
            &[Point3::raw(2.0, 1.0, 0.0), Point3::raw(-1.0, 0.5, 0.3)],
            None,
        )
        .unwrap();
        assert!((embed_neighborhood(&xf, &nb).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn embed_cloud_shape_and_permutation() {
        let g = rand_grid(6, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let cloud = PointCloud::from_arrays(&pts).unwrap();
        let e = embed_cloud(&g, &cloud, 8).unwrap();
        assert_eq!((e.rows(), e.channels()), (60, 5));

        let perm: Vec<usize> = (0..60).map(|i| (i * 7) % 60).collect();
        let permuted = PointCloud::from_arrays(&perm.iter().map(|&i| pts[i]).collect::<Vec<_>>()).unwrap();
        let ep = embed_cloud(&g, &permuted, 8).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(ep.row(row), e.row(src));
        }

        let c = FieldGrid::constant(3, 2, &[0.5, 0.5]).unwrap();
        let ec = embed_cloud(&c, &cloud, 4).unwrap();
        assert!(ec.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn gradient_at_node_and_zero_upstream() {
        let g = rand_grid(5, 3, 1);
        let nb = normalize_neighborhood(Point3::ORIGIN, &[], Some(1.0)).unwrap();
        let (_, tape) = embed_neighborhood_taped(&g, &nb).unwrap();
        let mut grad = GridGradient::zeros_like(&g);
        grad_embed_wrt_grid(&g, &[0.0, 0.0, 0.0], &tape, &mut grad).unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));

        grad_embed_wrt_grid(&g, &[0.0, 1.0, 0.0], &tape, &mut grad).unwrap();
        let o = g.node_offset(2, 2, 2) + 1;
        for (i, &v) in grad.values.iter().enumerate() {
            assert_eq!(v, if i == o { 1.0 } else { 0.0 });
        }

        let other = rand_grid(4, 3, 1);
        assert!(grad_embed_wrt_grid(&other, &[1.0; 3], &tape, &mut GridGradient::zeros_like(&other)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for trial in 0..20 {
            let mut g = rand_grid(4, 3, 100 + trial);
            let pts: Vec<Point3> = (0..6)
                .map(|_| Point3::raw(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let nb = normalize_neighborhood(pts[0], &pts[1..], None).unwrap();
            let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, tape) = embed_neighborhood_taped(&g, &nb).unwrap();
            let mut grad = GridGradient::zeros_like(&g);
            grad_embed_wrt_grid(&g, &upstream, &tape, &mut grad).unwrap();
            let h = 1e-5;
            for idx in 0..g.parameter_count() {
                let orig = g.values()[idx];
                g.values_mut()[idx] = orig + h;
                let (ep, tp) = embed_neighborhood_taped(&g, &nb).unwrap();
                g.values_mut()[idx] = orig - h;
                let (em, tm) = embed_neighborhood_taped(&g, &nb).unwrap();
                g.values_mut()[idx] = orig;
                if tp.argmax != tape.argmax || tm.argmax != tape.argmax {
                    continue;
                }
                let fd: f64 = ep.iter().zip(&em).zip(&upstream).map(|((a, b), u)| u * (a - b) / (2.0 * h)).sum();
                let an = grad.values[idx];
                let scale = fd.abs().max(an.abs());
                assert!((fd - an).abs() <= 1e-4 * scale + 1e-10, "idx {idx}: fd {fd} vs {an}");
                if an != 0.0 {
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    fn arb_unit() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-1.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn weights_form_partition_of_unity(q in arb_unit(), r in 2usize..17) {
            let g = FieldGrid::constant(r, 1, &[0.0]).unwrap();
            let cw = corner_weights(&g, Point3::from_array(q)).unwrap();
            prop_assert!(cw.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((cw.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sampling_is_linear_in_grid(q in arb_unit(), s1 in any::<u64>(), s2 in any::<u64>(), lambda in -5.0f64..5.0) {
            let a = rand_grid(4, 3, s1);
            let b = rand_grid(4, 3, s2);
            let sum = FieldGrid::from_values(4, 3, a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
            let scaled = FieldGrid::from_values(4, 3, a.values().iter().map(|x| lambda * x).collect()).unwrap();
            let q = Point3::from_array(q);
            let (sa, sb) = (sample_trilinear(&a, q).unwrap(), sample_trilinear(&b, q).unwrap());
            for (c, v) in sample_trilinear(&sum, q).unwrap().iter().enumerate() {
                prop_assert!((v - sa[c] - sb[c]).abs() < 1e-12);
            }
            for (c, v) in sample_trilinear(&scaled, q).unwrap().iter().enumerate() {
                prop_assert!((v - lambda * sa[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn embedding_ignores_neighbor_order(pts in prop::collection::vec(arb_unit(), 2..20), seed in any::<u64>()) {
            let g = rand_grid(5, 4, seed);
            let pts: Vec<Point3> = pts.into_iter().map(Point3::from_array).collect();
            let nb = normalize_neighborhood(pts[0], &pts[1..], None).unwrap();
            let mut rev: Vec<Point3> = pts[1..].to_vec();
            rev.reverse();
            let nb2 = normalize_neighborhood(pts[0], &rev, None).unwrap();
            prop_assert_eq!(embed_neighborhood(&g, &nb).unwrap(), embed_neighborhood(&g, &nb2).unwrap());
        }

        #[test]
        fn raising_argmax_cell_never_lowers_embedding(pts in prop::collection::vec(arb_unit(), 2..12), seed in any::<u64>(), bump in 0.0f64..2.0) {
            let g = rand_grid(4, 2, seed);
            let pts: Vec<Point3> = pts.into_iter().map(Point3::from_array).collect();
            let nb = normalize_neighborhood(pts[0], &pts[1..], None).unwrap();
            let (before, tape) = embed_neighborhood_taped(&g, &nb).unwrap();
            for ch in 0..2 {
                let o = tape.samples[tape.argmax[ch]].offsets[0] + ch;
                let mut g2 = g.clone();
                g2.values_mut()[o] += bump;
                let after = embed_neighborhood(&g2, &nb).unwrap();
                prop_assert!(after[ch] >= before[ch]);
            }
            // 8 corner reads per point.
            prop_assert_eq!(tape.samples.len(), nb.len());
        }
    }
}
