//! Analysis tools for a trained grid: curvature response on
//! semi-ellipsoids, max-projected weight slices, linear probes over frozen
//! features, and a small synthetic shape dataset to train and probe on.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{embed_neighborhood, FieldGrid};
use crate::geometry::{normalize_neighborhood, Point3, PointCloud};
use crate::pretrain::heads::{log_softmax, nll_grad_logits};
use crate::pretrain::{adam_step, derive_seed, Activation, AdamState, Layer, Matrix, Mlp, SetNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiEllipsoidSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl SemiEllipsoidSpec {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        SemiEllipsoidSpec {
            a,
            b,
            c,
            n_theta: 32,
            n_phi: 64,
        }
    }
}

/// Upper half of an axis-aligned ellipsoid on a regular `(theta, phi)`
/// grid, `theta` in `[0, pi/2]`, `phi` in `[0, 2 pi)`. The peak
/// `(0, 0, c)` comes first and appears once.
pub fn gen_semi_ellipsoid(spec: &SemiEllipsoidSpec) -> Result<PointCloud> {
    let SemiEllipsoidSpec { a, b, c, n_theta, n_phi } = *spec;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(invalid("ellipsoid radii must be positive"));
    }
    if n_theta < 2 || n_phi < 1 {
        return Err(invalid("need n_theta >= 2 and n_phi >= 1"));
    }
    let mut pts = Vec::with_capacity(1 + (n_theta - 1) * n_phi);
    pts.push(Point3::raw(0.0, 0.0, c));
    for i in 1..n_theta {
        let theta = FRAC_PI_2 * i as f64 / (n_theta - 1) as f64;
        let (st, ct) = theta.sin_cos();
        for j in 0..n_phi {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            let (sp, cp) = phi.sin_cos();
            pts.push(Point3::raw(a * st * cp, b * st * sp, c * ct));
        }
    }
    PointCloud::new(pts)
}

/// Radii swept by [`curvature_response`]: 0.1 to 2.0 in steps of 0.1.
pub fn curvature_radii() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

/// Embedding of the peak of each semi-ellipsoid in the sweep along `axis`
/// (the other two radii fixed at 1), with every other surface point as its
/// neighborhood. Rows follow the radius order.
pub fn curvature_response(grid: &FieldGrid, axis: Axis, n_theta: usize, n_phi: usize) -> Result<Matrix> {
    let radii = curvature_radii();
    let rows: Vec<Vec<f64>> = radii
        .par_iter()
        .map(|&r| {
            let mut abc = [1.0; 3];
            abc[axis.index()] = r;
            let spec = SemiEllipsoidSpec {
                a: abc[0],
                b: abc[1],
                c: abc[2],
                n_theta,
                n_phi,
            };
            let cloud = gen_semi_ellipsoid(&spec)?;
            let pts = cloud.points();
            let nb = normalize_neighborhood(pts[0], &pts[1..], None)?;
            embed_neighborhood(grid, &nb)
        })
        .collect::<Result<_>>()?;
    Matrix::new(radii.len(), grid.channels(), rows.concat())
}

/// True when some channel varies across the rows.
pub fn response_is_nonconstant(m: &Matrix) -> bool {
    (0..m.cols).any(|c| sample_std((0..m.rows).map(|r| m.row(r)[c])) > 0.0)
}

fn sample_std(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Per-channel rank correlation between the swept radius and the response.
pub fn response_correlations(m: &Matrix) -> Vec<Option<f64>> {
    let radii = curvature_radii();
    (0..m.cols)
        .map(|c| {
            let col: Vec<f64> = (0..m.rows).map(|r| m.row(r)[c]).collect();
            spearman(&radii[..m.rows.min(radii.len())], &col)
        })
        .collect()
}

/// Max-projection of every channel along `axis`: `C` matrices of `R×R`.
/// For `X` the remaining indices are `[iy][iz]`, for `Y` `[ix][iz]`, for
/// `Z` `[ix][iy]`.
pub fn weight_slices(grid: &FieldGrid, axis: Axis) -> Vec<Matrix> {
    let r = grid.resolution();
    let mut out = vec![Matrix::new(r, r, vec![f64::NEG_INFINITY; r * r]).unwrap(); grid.channels()];
    for ix in 0..r {
        for iy in 0..r {
            for iz in 0..r {
                let (u, v) = match axis {
                    Axis::X => (iy, iz),
                    Axis::Y => (ix, iz),
                    Axis::Z => (ix, iy),
                };
                for (c, &val) in grid.node(ix, iy, iz).iter().enumerate() {
                    let cell = &mut out[c].data[u * r + v];
                    if val > *cell {
                        *cell = val;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere = 0,
    Cube = 1,
    Cylinder = 2,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Cylinder];

    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub cloud: PointCloud,
    pub normals: Vec<Point3>,
    pub label: usize,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = Point3::raw(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v * (1.0 / n);
        }
    }
}

/// Surface points and outward normals of one shape, centered at the origin.
pub fn gen_shape(class: ShapeClass, n_points: usize, noise_sigma: f64, seed: u64) -> Result<SyntheticShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    match class {
        ShapeClass::Sphere => {
            let r = rng.gen_range(0.5..=1.0);
            for _ in 0..n_points {
                let u = unit_vector(&mut rng);
                pts.push(u * r);
                normals.push(u);
            }
        }
        ShapeClass::Cube => {
            let h = rng.gen_range(0.5..=1.0);
            for _ in 0..n_points {
                let face = rng.gen_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.gen_range(-h..=h), rng.gen_range(-h..=h), rng.gen_range(-h..=h)];
                p[axis] = sign * h;
                let mut n = [0.0; 3];
                n[axis] = sign;
                pts.push(Point3::from_array(p));
                normals.push(Point3::from_array(n));
            }
        }
        ShapeClass::Cylinder => {
            let r: f64 = rng.gen_range(0.4..=0.9);
            let hh: f64 = rng.gen_range(0.4..=1.0);
            let side = 2.0 * PI * r * 2.0 * hh;
            let cap = PI * r * r;
            let total = side + 2.0 * cap;
            for _ in 0..n_points {
                let pick = rng.gen_range(0.0..total);
                if pick < side {
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let (s, c) = phi.sin_cos();
                    pts.push(Point3::raw(r * c, r * s, rng.gen_range(-hh..=hh)));
                    normals.push(Point3::raw(c, s, 0.0));
                } else {
                    let sign = if pick < side + cap { 1.0 } else { -1.0 };
                    let rho = r * rng.gen::<f64>().sqrt();
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let (s, c) = phi.sin_cos();
                    pts.push(Point3::raw(rho * c, rho * s, sign * hh));
                    normals.push(Point3::raw(0.0, 0.0, sign));
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        for p in &mut pts {
            let e = Point3::raw(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            *p = *p + e * noise_sigma;
        }
    }
    Ok(SyntheticShape {
        cloud: PointCloud::new(pts)?,
        normals,
        label: class.label(),
    })
}

/// Balanced spheres, cubes and cylinders, interleaved by class.
pub fn gen_synthetic_dataset(
    n_per_class: usize,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<SyntheticShape>> {
    gen_dataset_of(&ShapeClass::ALL, n_per_class, n_points, noise_sigma, seed)
}

/// Like [`gen_synthetic_dataset`] restricted to the given classes.
pub fn gen_dataset_of(
    classes: &[ShapeClass],
    n_per_class: usize,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<SyntheticShape>> {
    if n_per_class < 1 {
        return Err(invalid("need at least one shape per class"));
    }
    if n_points < 8 {
        return Err(invalid("need at least 8 points per shape"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    let jobs: Vec<(usize, ShapeClass)> = (0..n_per_class)
        .flat_map(|i| classes.iter().map(move |&c| (i, c)))
        .collect();
    jobs.par_iter()
        .map(|&(i, c)| gen_shape(c, n_points, noise_sigma, derive_seed(seed, c.label() as u64 + 1, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Max over rows, then one dense layer.
    MaxFc,
    /// Shared dense layer per row, max over rows, dense layer.
    #[serde(alias = "pointwise")]
    PointwiseFcMaxFc,
    /// All rows concatenated into one vector, then one dense layer.
    #[serde(alias = "flatten")]
    FlattenFc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// Width of the shared layer in [`ProbeMode::PointwiseFcMaxFc`].
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.001,
            batch_size: 16,
            train_fraction: 0.8,
            hidden: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

enum ProbeNet {
    Pooled(Mlp),
    Set(SetNet),
    Flat(Mlp),
}

impl ProbeNet {
    fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(match self {
            ProbeNet::Pooled(m) => m.forward(&max_rows(x))?.0,
            ProbeNet::Set(s) => s.forward(x)?.0,
            ProbeNet::Flat(m) => m.forward(&x.data)?.0,
        })
    }

    fn slices(&self) -> Vec<&[f64]> {
        match self {
            ProbeNet::Pooled(m) | ProbeNet::Flat(m) => m.slices(),
            ProbeNet::Set(s) => {
                let mut v = s.shared.slices();
                v.extend(s.head.slices());
                v
            }
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ProbeNet::Pooled(m) | ProbeNet::Flat(m) => m.slices_mut(),
            ProbeNet::Set(s) => {
                let mut v = s.shared.slices_mut();
                v.extend(s.head.slices_mut());
                v
            }
        }
    }

    /// Adds the cross-entropy gradient for one example into `grads`.
    fn accumulate(&self, x: &Matrix, label: usize, grads: &mut ProbeNet) -> Result<()> {
        match (self, grads) {
            (ProbeNet::Pooled(m), ProbeNet::Pooled(g)) => {
                let (z, t) = m.forward(&max_rows(x))?;
                m.backward(&t, &nll_grad_logits(&log_softmax(&z), label), g);
            }
            (ProbeNet::Flat(m), ProbeNet::Flat(g)) => {
                let (z, t) = m.forward(&x.data)?;
                m.backward(&t, &nll_grad_logits(&log_softmax(&z), label), g);
            }
            (ProbeNet::Set(s), ProbeNet::Set(g)) => {
                let (z, t) = s.forward(x)?;
                s.backward(&t, &nll_grad_logits(&log_softmax(&z), label), g);
            }
            _ => unreachable!("gradient buffer built from the same probe"),
        }
        Ok(())
    }

    fn zeros_like(&self) -> ProbeNet {
        match self {
            ProbeNet::Pooled(m) => ProbeNet::Pooled(m.zeros_like()),
            ProbeNet::Flat(m) => ProbeNet::Flat(m.zeros_like()),
            ProbeNet::Set(s) => ProbeNet::Set(s.zeros_like()),
        }
    }
}

fn max_rows(x: &Matrix) -> Vec<f64> {
    (0..x.cols)
        .map(|c| (0..x.rows).map(|r| x.row(r)[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Trains a linear classifier of the given form on frozen per-shape
/// features and reports accuracy on a seeded held-out split.
pub fn linear_probe(data: &[(Matrix, usize)], mode: ProbeMode, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if data.len() < 2 {
        return Err(invalid("linear probe needs at least two examples"));
    }
    let n_classes = data.iter().map(|d| d.1).max().unwrap() + 1;
    let distinct = {
        let mut l: Vec<usize> = data.iter().map(|d| d.1).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(invalid("linear probe needs at least two classes"));
    }
    let (rows, cols) = (data[0].0.rows, data[0].0.cols);
    if rows == 0 || cols == 0 {
        return Err(invalid("probe features must be non-empty"));
    }
    if data.iter().any(|d| d.0.cols != cols || (mode == ProbeMode::FlattenFc && d.0.rows != rows)) {
        return Err(invalid("probe features have inconsistent shapes"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(invalid("train fraction must lie in (0, 1)"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((data.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, data.len() - 1);
    let (train, test) = order.split_at(n_train);
    let mut train = train.to_vec();

    let single = |i: usize, o: usize, rng: &mut ChaCha8Rng| Mlp {
        layers: vec![Layer::init(i, o, Activation::Identity, rng)],
    };
    let mut net = match mode {
        ProbeMode::MaxFc => ProbeNet::Pooled(single(cols, n_classes, &mut rng)),
        ProbeMode::PointwiseFcMaxFc => ProbeNet::Set(SetNet {
            shared: single(cols, cfg.hidden, &mut rng),
            head: single(cfg.hidden, n_classes, &mut rng),
        }),
        ProbeMode::FlattenFc => ProbeNet::Flat(single(rows * cols, n_classes, &mut rng)),
    };
    let mut adam = AdamState::new(&net.slices().iter().map(|s| s.len()).collect::<Vec<_>>());
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size.max(1)) {
            let mut grads = net.zeros_like();
            for &i in batch {
                net.accumulate(&data[i].0, data[i].1, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            let g: Vec<Vec<f64>> = grads
                .slices()
                .iter()
                .map(|s| s.iter().map(|v| v * scale).collect())
                .collect();
            let g: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            adam_step(&mut adam, &mut net.slices_mut(), &g, cfg.lr)?;
        }
    }
    let accuracy = |idx: &[usize]| -> Result<f64> {
        let mut hits = 0;
        for &i in idx {
            if argmax(&net.logits(&data[i].0)?) == data[i].1 {
                hits += 1;
            }
        }
        Ok(hits as f64 / idx.len() as f64)
    };
    Ok(ProbeReport {
        mode,
        train_accuracy: accuracy(&train)?,
        test_accuracy: accuracy(test)?,
        n_train: train.len(),
        n_test: test.len(),
        n_classes,
    })
}
