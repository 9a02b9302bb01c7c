//! Fitting the field grid through pretext tasks.
//!
//! A forward pass embeds a subset of a shape's points, appends their
//! coordinates, runs a task head and evaluates the loss. The reverse pass
//! walks the same path backwards: loss, head, row split, embedding
//! max-pool, trilinear weights, grid.

pub mod adam;
pub mod heads;
pub mod loss;
pub mod mlp;
mod train;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{embed_normalized, grad_embed_wrt_grid, FieldGrid, GridGradient, InterpTape};
use crate::geometry::{adaptive_k, ChamferMatch, Point3, PointCloud, DEFAULT_BASE_K, DEFAULT_BASE_N};
use crate::field::point_neighborhood;

pub use adam::{adam_step, step_decay_lr, AdamState};
pub use heads::{
    classify_head_forward, normal_head_forward, recon_decoder_forward, HeadWidths, SetNet,
};
pub use loss::{loss_classification, loss_normal, loss_reconstruction};
pub use mlp::{Activation, Layer, Matrix, Mlp};
pub use train::{train_pretext, EpochRecord, TrainOutcome, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTask {
    #[serde(alias = "recon")]
    Reconstruction,
    #[serde(alias = "normal")]
    NormalEstimation,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    TrainGrid,
    FreezeGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub task: PretextTask,
    /// Embedding rows fed to the reconstruction and classification heads.
    pub n_s: usize,
    /// Points produced by the reconstruction decoder.
    pub n_out: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    /// Neighbors per point; `None` scales 64 per 2048 points.
    pub k: Option<usize>,
    pub seed: u64,
    pub weight_mode: WeightMode,
    pub batch_size: usize,
    pub eval_fraction: f64,
    pub widths: HeadWidths,
    pub sign_invariant_normals: bool,
    /// Defaults to one more than the largest label.
    pub n_classes: Option<usize>,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            task: PretextTask::Reconstruction,
            n_s: 24,
            n_out: 256,
            epochs: 150,
            base_lr: 0.001,
            decay_factor: 0.2,
            decay_every_epochs: 50,
            k: None,
            seed: 0,
            weight_mode: WeightMode::TrainGrid,
            batch_size: 8,
            eval_fraction: 0.2,
            widths: HeadWidths::default(),
            sign_invariant_normals: false,
            n_classes: None,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 {
            return Err(invalid("n_s must be at least 1"));
        }
        if self.n_out == 0 {
            return Err(invalid("n_out must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(invalid(format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if !(self.base_lr > 0.0) {
            return Err(invalid("base learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(invalid("eval fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn k_for(&self, n_points: usize) -> Result<usize> {
        match self.k {
            Some(k) if k >= 1 && k <= n_points => Ok(k),
            Some(k) => Err(invalid(format!("k = {k} outside [1, {n_points}]"))),
            None => adaptive_k(n_points, DEFAULT_BASE_K, DEFAULT_BASE_N),
        }
    }
}

/// Learning rate at `epoch` under the configured step decay.
pub fn lr_at(epoch: usize, cfg: &PretextConfig) -> f64 {
    step_decay_lr(epoch, cfg.base_lr, cfg.decay_factor, cfg.decay_every_epochs)
}

/// One training shape with whatever supervision it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub normals: Option<Vec<Point3>>,
    pub label: Option<usize>,
}

/// Task-specific trainable head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    Reconstruction(SetNet),
    Normal(Mlp),
    Supervised(SetNet),
}

impl Heads {
    pub fn init(task: PretextTask, channels: usize, cfg: &PretextConfig, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = channels + 3;
        let w = &cfg.widths;
        match task {
            PretextTask::Reconstruction => Heads::Reconstruction(SetNet::init(
                input,
                &w.shared,
                &w.reconstruction,
                3 * cfg.n_out,
                &mut rng,
            )),
            PretextTask::NormalEstimation => Heads::Normal(heads::normal_head_init(input, &w.normal, &mut rng)),
            PretextTask::Supervised => Heads::Supervised(SetNet::init(
                input,
                &w.shared,
                &w.classification,
                n_classes,
                &mut rng,
            )),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Heads::Reconstruction(n) => Heads::Reconstruction(n.zeros_like()),
            Heads::Normal(m) => Heads::Normal(m.zeros_like()),
            Heads::Supervised(n) => Heads::Supervised(n.zeros_like()),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            Heads::Reconstruction(n) | Heads::Supervised(n) => {
                let mut v = n.shared.slices();
                v.extend(n.head.slices());
                v
            }
            Heads::Normal(m) => m.slices(),
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Heads::Reconstruction(n) | Heads::Supervised(n) => {
                let mut v = n.shared.slices_mut();
                v.extend(n.head.slices_mut());
                v
            }
            Heads::Normal(m) => m.slices_mut(),
        }
    }

    pub fn add_assign(&mut self, other: &Heads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Grid and head trained together. `generation` advances with every
/// optimizer step so a recorded pass can tell when it has gone stale.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub grid: FieldGrid,
    pub heads: Heads,
    generation: u64,
}

impl Model {
    pub fn new(grid: FieldGrid, heads: Heads) -> Self {
        Model {
            grid,
            heads,
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks parameters as changed; outstanding passes become stale.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    /// Trainable parameter groups: the grid (unless frozen), then the head.
    pub fn trainable_mut(&mut self, mode: WeightMode) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        if mode == WeightMode::TrainGrid {
            v.push(self.grid.values_mut());
        }
        v.extend(self.heads.slices_mut());
        v
    }

    pub fn trainable_shapes(&self, mode: WeightMode) -> Vec<usize> {
        let mut v = Vec::new();
        if mode == WeightMode::TrainGrid {
            v.push(self.grid.parameter_count());
        }
        v.extend(self.heads.slices().iter().map(|s| s.len()));
        v
    }
}

/// A shape with its neighborhoods already normalized. Neighborhoods depend
/// only on geometry, so they are computed once and reused every epoch.
#[derive(Debug, Clone)]
pub struct PreparedShape {
    pub points: Vec<Point3>,
    pub neighborhoods: Vec<Vec<Point3>>,
    pub normals: Option<Vec<Point3>>,
    pub label: Option<usize>,
}

impl PreparedShape {
    pub fn new(sample: &TrainSample, k: usize) -> Result<Self> {
        let cloud = &sample.cloud;
        let neighborhoods = cloud
            .points()
            .par_iter()
            .enumerate()
            .map(|(i, &p)| Ok(point_neighborhood(cloud, p, Some(i), k)?.normalized))
            .collect::<Result<Vec<_>>>()?;
        if let Some(n) = &sample.normals {
            if n.len() != cloud.len() {
                return Err(invalid("normals count does not match point count"));
            }
        }
        Ok(PreparedShape {
            points: cloud.points().to_vec(),
            neighborhoods,
            normals: sample.normals.clone(),
            label: sample.label,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone)]
enum HeadTape {
    Reconstruction {
        tape: heads::SetTape,
        grad_pred: Vec<Point3>,
        matches: ChamferMatch,
    },
    Normal {
        tape: heads::NormalTape,
        grad_unit: Vec<Point3>,
    },
    Supervised {
        tape: heads::ClassifyTape,
        grad_logits: Vec<f64>,
    },
}

/// Everything recorded by [`forward_sample`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    generation: u64,
    pub loss: f64,
    /// Task metric: chamfer, mean cosine, or 1/0 for a correct class.
    pub metric: f64,
    pub rows: Vec<usize>,
    interp: Vec<InterpTape>,
    head: HeadTape,
}

impl ForwardPass {
    /// Discrete choices made during the pass (argmaxes, ReLU gates, nearest
    /// matches). Finite differences are only meaningful where this does not
    /// change.
    pub fn signature(&self) -> Vec<u64> {
        let mut s = Vec::new();
        for t in &self.interp {
            s.extend(t.argmax.iter().map(|&a| a as u64));
        }
        match &self.head {
            HeadTape::Reconstruction { tape, matches, .. } => {
                tape.signature(&mut s);
                s.extend(matches.a_to_b.iter().chain(&matches.b_to_a).map(|&i| i as u64));
            }
            HeadTape::Normal { tape, .. } => tape.signature(&mut s),
            HeadTape::Supervised { tape, .. } => tape.set.signature(&mut s),
        }
        s
    }
}

/// Builds the `[embedding, xyz]` rows for the chosen points.
pub fn embedding_rows(grid: &FieldGrid, shape: &PreparedShape, rows: &[usize]) -> Result<(Matrix, Vec<InterpTape>)> {
    let c = grid.channels();
    let mut m = Matrix::zeros(rows.len(), c + 3);
    let mut tapes = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let nb = shape
            .neighborhoods
            .get(i)
            .ok_or_else(|| invalid(format!("row {i} outside shape of {} points", shape.len())))?;
        let (e, t) = embed_normalized(grid, nb)?;
        let out = m.row_mut(r);
        out[..c].copy_from_slice(&e);
        out[c..].copy_from_slice(&shape.points[i].to_array());
        tapes.push(t);
    }
    Ok((m, tapes))
}

/// Forward pass of one shape through grid, head and loss.
pub fn forward_sample(
    model: &Model,
    shape: &PreparedShape,
    rows: &[usize],
    sign_invariant_normals: bool,
) -> Result<ForwardPass> {
    let (m, interp) = embedding_rows(&model.grid, shape, rows)?;
    let (loss, metric, head) = match &model.heads {
        Heads::Reconstruction(net) => {
            let n_out = net.head.output_dim() / 3;
            let (pred, tape) = recon_decoder_forward(net, &m, n_out)?;
            let (loss, grad_pred, matches) = loss::reconstruction_with_grad(&pred, &shape.points)?;
            (loss, loss, HeadTape::Reconstruction { tape, grad_pred, matches })
        }
        Heads::Normal(mlp) => {
            let gt_all = shape
                .normals
                .as_ref()
                .ok_or_else(|| invalid("normal estimation needs ground-truth normals"))?;
            let gt: Vec<Point3> = rows.iter().map(|&i| gt_all[i]).collect();
            let (pred, tape) = normal_head_forward(mlp, &m)?;
            let (loss, grad_unit) = loss::normal_with_grad(&pred, &gt, sign_invariant_normals)?;
            let cos = loss::loss_normal(&pred, &gt, false).map(|l| 1.0 - l)?;
            (loss, cos, HeadTape::Normal { tape, grad_unit })
        }
        Heads::Supervised(net) => {
            let label = shape
                .label
                .ok_or_else(|| invalid("supervised pretext needs a label"))?;
            let n_classes = net.head.output_dim();
            let (lp, tape) = classify_head_forward(net, &m, n_classes)?;
            let loss = loss_classification(&lp, label)?;
            let predicted = lp
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > lp[best] { i } else { best });
            let grad_logits = heads::nll_grad_logits(&lp, label);
            (
                loss,
                f64::from(u8::from(predicted == label)),
                HeadTape::Supervised { tape, grad_logits },
            )
        }
    };
    Ok(ForwardPass {
        generation: model.generation,
        loss,
        metric,
        rows: rows.to_vec(),
        interp,
        head,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grid: Option<GridGradient>,
    pub heads: Heads,
}

impl Gradients {
    pub fn zeros(model: &Model, mode: WeightMode) -> Self {
        Gradients {
            grid: (mode == WeightMode::TrainGrid).then(|| GridGradient::zeros_like(&model.grid)),
            heads: model.heads.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        match (&mut self.grid, &other.grid) {
            (Some(a), Some(b)) => a.merge(b)?,
            (None, None) => {}
            _ => return Err(invalid("cannot merge gradients with different grid modes")),
        }
        self.heads.add_assign(&other.heads);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        if let Some(g) = &mut self.grid {
            g.scale(s);
        }
        self.heads.scale(s);
    }

    /// Parameter groups in the same order as [`Model::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        if let Some(g) = &self.grid {
            v.push(&g.values);
        }
        v.extend(self.heads.slices());
        v
    }
}

/// Reverse pass: gradient of `upstream * loss` with respect to the head
/// and, for [`WeightMode::TrainGrid`], the grid.
pub fn backward_pass(model: &Model, pass: &ForwardPass, upstream: f64, mode: WeightMode) -> Result<Gradients> {
    if pass.generation != model.generation {
        return Err(Error::InvalidState(format!(
            "forward pass recorded at generation {} but model is at {}",
            pass.generation, model.generation
        )));
    }
    let mut grads = Gradients::zeros(model, mode);
    let grad_rows = match (&model.heads, &pass.head, &mut grads.heads) {
        (Heads::Reconstruction(net), HeadTape::Reconstruction { tape, grad_pred, .. }, Heads::Reconstruction(g)) => {
            let flat: Vec<f64> = grad_pred.iter().flat_map(|p| (*p * upstream).to_array()).collect();
            net.backward(tape, &flat, g)
        }
        (Heads::Normal(mlp), HeadTape::Normal { tape, grad_unit }, Heads::Normal(g)) => {
            let scaled: Vec<Point3> = grad_unit.iter().map(|&p| p * upstream).collect();
            heads::normal_head_backward(mlp, tape, &scaled, g)
        }
        (Heads::Supervised(net), HeadTape::Supervised { tape, grad_logits }, Heads::Supervised(g)) => {
            let scaled: Vec<f64> = grad_logits.iter().map(|v| v * upstream).collect();
            net.backward(&tape.set, &scaled, g)
        }
        _ => return Err(Error::InvalidState("forward pass was recorded for a different task".into())),
    };
    if let Some(gg) = &mut grads.grid {
        let c = model.grid.channels();
        for (r, tape) in pass.interp.iter().enumerate() {
            grad_embed_wrt_grid(&model.grid, &grad_rows.row(r)[..c], tape, gg)?;
        }
    }
    Ok(grads)
}

/// SplitMix64-style mixing of a base seed with two counters.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
