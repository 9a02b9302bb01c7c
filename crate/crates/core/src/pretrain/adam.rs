//! Adam with bias correction, and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameter groups of the given lengths.
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }
}

/// One bias-corrected Adam update over every parameter group.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(invalid(format!(
            "adam expects {} parameter groups, got {} params and {} grads",
            state.first.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.first[i].len() || g.len() != p.len() {
            return Err(invalid(format!("adam group {i} shape mismatch")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[gi];
        let v = &mut state.second[gi];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr * decay_factor^floor(epoch / decay_every)`.
pub fn step_decay_lr(epoch: usize, base_lr: f64, decay_factor: f64, decay_every: usize) -> f64 {
    let drops = epoch.checked_div(decay_every).unwrap_or(0);
    base_lr * decay_factor.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        adam_step(&mut s, &mut [p.as_mut_slice()], &[&[0.0; 3]], 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        let mut s = AdamState::new(&[1]);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut [p.as_mut_slice()], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let run = || {
            let mut s = AdamState::new(&[2, 1]);
            let mut a = vec![0.3, 0.1];
            let mut b = vec![-1.0];
            for i in 0..10 {
                let g1 = [i as f64 * 0.1, -0.2];
                let g2 = [0.7];
                adam_step(&mut s, &mut [a.as_mut_slice(), b.as_mut_slice()], &[&g1, &g2], 0.01).unwrap();
            }
            (a, b)
        };
        assert_eq!(run(), run());
        let mut s = AdamState::new(&[2]);
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut s, &mut [p.as_mut_slice()], &[&[0.0; 3]], 0.1).is_err());
    }

    #[test]
    fn schedule() {
        assert_eq!(step_decay_lr(0, 0.001, 0.2, 50), 0.001);
        assert!((step_decay_lr(50, 0.001, 0.2, 50) - 0.0002).abs() < 1e-18);
        assert!((step_decay_lr(149, 0.001, 0.2, 50) - 4e-5).abs() < 1e-18);
    }
}
