use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, backward_pass, derive_seed, forward_sample, lr_at, AdamState, Gradients, Heads, Model,
    PreparedShape, PretextConfig, PretextTask, TrainSample,
};
use crate::error::{invalid, Result};
use crate::field::FieldGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Held-out loss before the first update.
    pub initial_eval_loss: f64,
    /// Held-out metric after the last epoch: chamfer distance, mean cosine
    /// similarity, or accuracy depending on the task.
    pub final_eval_metric: f64,
    /// Training-set metric after the last epoch, same units.
    pub final_train_metric: f64,
    pub wall_clock_seconds: f64,
    pub config: PretextConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub grid: FieldGrid,
    pub heads: Heads,
    pub report: TrainReport,
}

fn rows_for(task: PretextTask, n_points: usize, n_s: usize, seed: u64) -> Vec<usize> {
    match task {
        PretextTask::NormalEstimation => (0..n_points).collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, n_points, n_s.min(n_points)).into_vec()
        }
    }
}

/// Mean loss and metric over `shapes` without touching parameters.
fn evaluate(model: &Model, shapes: &[&PreparedShape], cfg: &PretextConfig, tag: u64) -> Result<(f64, f64)> {
    if shapes.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let results: Vec<(f64, f64)> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rows = rows_for(cfg.task, s.len(), cfg.n_s, derive_seed(cfg.seed, tag, i as u64));
            let pass = forward_sample(model, s, &rows, cfg.sign_invariant_normals)?;
            Ok((pass.loss, pass.metric))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().map(|r| r.1).sum::<f64>() / n,
    ))
}

const EVAL_TAG: u64 = u64::MAX;
const TRAIN_METRIC_TAG: u64 = u64::MAX - 1;

/// Trains the grid (unless frozen) and a fresh task head on `dataset`.
///
/// A seeded shuffle holds out `eval_fraction` of the shapes. Each epoch
/// visits the rest in shuffled mini-batches; per-sample gradients are
/// computed in parallel and summed in batch order so results do not depend
/// on thread scheduling.
pub fn train_pretext(dataset: &[TrainSample], cfg: &PretextConfig, grid: FieldGrid) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    if dataset.len() < 2 {
        return Err(invalid("pretraining needs at least two shapes"));
    }
    let n_classes = match cfg.task {
        PretextTask::NormalEstimation => {
            if dataset.iter().any(|s| s.normals.is_none()) {
                return Err(invalid("normal estimation needs normals for every shape"));
            }
            0
        }
        PretextTask::Supervised => {
            let labels: Option<Vec<usize>> = dataset.iter().map(|s| s.label).collect();
            let labels = labels.ok_or_else(|| invalid("supervised pretext needs a label for every shape"))?;
            let needed = labels.iter().max().unwrap() + 1;
            let n = cfg.n_classes.unwrap_or(needed);
            if n < needed || n < 2 {
                return Err(invalid(format!("{n} classes cannot hold label {}", needed - 1)));
            }
            n
        }
        PretextTask::Reconstruction => 0,
    };

    let prepared: Vec<PreparedShape> = dataset
        .iter()
        .map(|s| PreparedShape::new(s, cfg.k_for(s.cloud.len())?))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0)));
    let n_eval = ((prepared.len() as f64 * cfg.eval_fraction).round() as usize).clamp(1, prepared.len() - 1);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let eval_set: Vec<&PreparedShape> = eval_idx.iter().map(|&i| &prepared[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let heads = Heads::init(cfg.task, grid.channels(), cfg, n_classes, derive_seed(cfg.seed, 1, 0));
    let mut model = Model::new(grid, heads);
    let mut adam = AdamState::new(&model.trainable_shapes(cfg.weight_mode));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));

    let (initial_eval_loss, _) = evaluate(&model, &eval_set, cfg, EVAL_TAG)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        train_order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in train_order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &prepared[i];
                    let rows = rows_for(
                        cfg.task,
                        s.len(),
                        cfg.n_s,
                        derive_seed(cfg.seed, 3 + epoch as u64, i as u64),
                    );
                    let pass = forward_sample(&model, s, &rows, cfg.sign_invariant_normals)?;
                    let g = backward_pass(&model, &pass, 1.0, cfg.weight_mode)?;
                    Ok((pass.loss, g))
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros(&model, cfg.weight_mode);
            for (loss, g) in &per_sample {
                loss_sum += loss;
                total.add_assign(g)?;
            }
            total.scale(1.0 / batch.len() as f64);
            let grads = total.slices();
            adam_step(&mut adam, &mut model.trainable_mut(cfg.weight_mode), &grads, lr)?;
            model.touch();
        }
        let (eval_loss, _) = evaluate(&model, &eval_set, cfg, EVAL_TAG)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_order.len() as f64,
            eval_loss,
        });
    }

    let (_, final_eval_metric) = evaluate(&model, &eval_set, cfg, EVAL_TAG)?;
    let train_set: Vec<&PreparedShape> = train_idx.iter().map(|&i| &prepared[i]).collect();
    let (_, final_train_metric) = evaluate(&model, &train_set, cfg, TRAIN_METRIC_TAG)?;
    let report = TrainReport {
        epochs,
        initial_eval_loss,
        final_eval_metric,
        final_train_metric,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
        seed: cfg.seed,
    };
    Ok(TrainOutcome {
        grid: model.grid,
        heads: model.heads,
        report,
    })
}
