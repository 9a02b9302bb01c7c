//! Task heads that sit on top of the `[embedding, xyz]` rows.
//!
//! Reconstruction and classification share one shape: a per-row MLP,
//! channel-wise max over rows, then a plain MLP. Normal estimation is a
//! per-row MLP followed by L2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Matrix, Mlp, MlpTape};
use crate::error::{invalid, Result};
use crate::geometry::Point3;

/// Rows whose raw normal has a smaller norm than this map to
/// [`FALLBACK_NORMAL`] and pass no gradient.
pub const NORMAL_EPS: f64 = 1e-12;
pub const FALLBACK_NORMAL: Point3 = Point3::raw(0.0, 0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWidths {
    /// Per-row MLP widths before the max-pool (ReLU throughout).
    pub shared: Vec<usize>,
    /// Hidden widths after the pool for reconstruction.
    pub reconstruction: Vec<usize>,
    /// Hidden widths after the pool for classification.
    pub classification: Vec<usize>,
    /// Hidden widths of the per-row normal MLP.
    pub normal: Vec<usize>,
}

impl Default for HeadWidths {
    fn default() -> Self {
        HeadWidths {
            shared: vec![64, 128, 256],
            reconstruction: vec![512],
            classification: vec![128],
            normal: vec![64, 64],
        }
    }
}

/// Per-row MLP, max-pool over rows, trailing MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetNet {
    pub shared: Mlp,
    pub head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetTape {
    rows: Vec<MlpTape>,
    pooled_width: usize,
    /// Row attaining the pooled max per feature; ties go to the lowest row.
    pub argmax: Vec<usize>,
    head: MlpTape,
}

impl SetTape {
    pub fn signature(&self, out: &mut Vec<u64>) {
        out.extend(self.argmax.iter().map(|&a| a as u64));
        for t in &self.rows {
            out.extend(t.relu_pattern().map(u64::from));
        }
        out.extend(self.head.relu_pattern().map(u64::from));
    }
}

impl SetNet {
    pub fn init(input: usize, shared: &[usize], head: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut sd = vec![input];
        sd.extend_from_slice(shared);
        let mut hd = vec![*sd.last().unwrap()];
        hd.extend_from_slice(head);
        hd.push(output);
        SetNet {
            shared: Mlp::init(&sd, Activation::Relu, Activation::Relu, rng),
            head: Mlp::init(&hd, Activation::Relu, Activation::Identity, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SetNet {
            shared: self.shared.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shared.validate()?;
        self.head.validate()?;
        if self.shared.output_dim() != self.head.input_dim() {
            return Err(invalid("pooled width does not match head input"));
        }
        Ok(())
    }

    pub fn forward(&self, rows: &Matrix) -> Result<(Vec<f64>, SetTape)> {
        if rows.rows == 0 {
            return Err(invalid("set network needs at least one row"));
        }
        if rows.cols != self.shared.input_dim() {
            return Err(invalid(format!(
                "row width {} does not match network input {}",
                rows.cols,
                self.shared.input_dim()
            )));
        }
        let width = self.shared.output_dim();
        let mut pooled = vec![f64::NEG_INFINITY; width];
        let mut argmax = vec![0usize; width];
        let mut tapes = Vec::with_capacity(rows.rows);
        for r in 0..rows.rows {
            let (feat, tape) = self.shared.forward(rows.row(r))?;
            for (j, &v) in feat.iter().enumerate() {
                if v > pooled[j] {
                    pooled[j] = v;
                    argmax[j] = r;
                }
            }
            tapes.push(tape);
        }
        let (out, head) = self.head.forward(&pooled)?;
        Ok((
            out,
            SetTape {
                rows: tapes,
                pooled_width: width,
                argmax,
                head,
            },
        ))
    }

    /// Returns the gradient with respect to every input row.
    pub fn backward(&self, tape: &SetTape, grad_out: &[f64], grads: &mut SetNet) -> Matrix {
        let g_pooled = self.head.backward(&tape.head, grad_out, &mut grads.head);
        let n = tape.rows.len();
        let mut per_row = vec![vec![0.0; tape.pooled_width]; n];
        for (j, &g) in g_pooled.iter().enumerate() {
            per_row[tape.argmax[j]][j] += g;
        }
        let mut out = Matrix::zeros(n, self.shared.input_dim());
        for (r, g) in per_row.iter().enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let gx = self.shared.backward(&tape.rows[r], g, &mut grads.shared);
            out.row_mut(r).copy_from_slice(&gx);
        }
        out
    }

    pub fn add_assign(&mut self, other: &SetNet) {
        self.shared.add_assign(&other.shared);
        self.head.add_assign(&other.head);
    }
}

/// Reconstruction decoder: `n_out` points from the pooled row features.
pub fn recon_decoder_forward(params: &SetNet, rows: &Matrix, n_out: usize) -> Result<(Vec<Point3>, SetTape)> {
    if params.head.output_dim() != 3 * n_out {
        return Err(invalid(format!(
            "decoder outputs {} values, expected 3 x {n_out}",
            params.head.output_dim()
        )));
    }
    let (flat, tape) = params.forward(rows)?;
    let pts = flat.chunks_exact(3).map(|c| Point3::raw(c[0], c[1], c[2])).collect();
    Ok((pts, tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyTape {
    pub set: SetTape,
    pub log_probs: Vec<f64>,
}

/// Class log-probabilities via log-softmax of the set network's logits.
pub fn classify_head_forward(params: &SetNet, rows: &Matrix, n_classes: usize) -> Result<(Vec<f64>, ClassifyTape)> {
    if params.head.output_dim() != n_classes {
        return Err(invalid(format!(
            "classifier outputs {} logits, expected {n_classes}",
            params.head.output_dim()
        )));
    }
    let (logits, set) = params.forward(rows)?;
    let log_probs = log_softmax(&logits);
    Ok((
        log_probs.clone(),
        ClassifyTape { set, log_probs },
    ))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Gradient of `-log_probs[label]` with respect to the logits.
pub fn nll_grad_logits(log_probs: &[f64], label: usize) -> Vec<f64> {
    log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| lp.exp() - if i == label { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalTape {
    rows: Vec<MlpTape>,
    raw: Vec<Point3>,
}

impl NormalTape {
    pub fn signature(&self, out: &mut Vec<u64>) {
        for t in &self.rows {
            out.extend(t.relu_pattern().map(u64::from));
        }
        out.extend(self.raw.iter().map(|r| u64::from(r.norm() < NORMAL_EPS)));
    }
}

pub fn normal_head_init(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Mlp {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(3);
    Mlp::init(&dims, Activation::Relu, Activation::Identity, rng)
}

/// Unit normal per row.
pub fn normal_head_forward(params: &Mlp, rows: &Matrix) -> Result<(Vec<Point3>, NormalTape)> {
    if rows.cols != params.input_dim() {
        return Err(invalid(format!(
            "row width {} does not match normal head input {}",
            rows.cols,
            params.input_dim()
        )));
    }
    if params.output_dim() != 3 {
        return Err(invalid("normal head must output 3 values"));
    }
    let mut tapes = Vec::with_capacity(rows.rows);
    let mut raw = Vec::with_capacity(rows.rows);
    let mut out = Vec::with_capacity(rows.rows);
    for r in 0..rows.rows {
        let (y, t) = params.forward(rows.row(r))?;
        let v = Point3::raw(y[0], y[1], y[2]);
        let n = v.norm();
        out.push(if n < NORMAL_EPS { FALLBACK_NORMAL } else { v * (1.0 / n) });
        raw.push(v);
        tapes.push(t);
    }
    Ok((out, NormalTape { rows: tapes, raw }))
}

/// Back through normalization and the per-row MLP.
pub fn normal_head_backward(params: &Mlp, tape: &NormalTape, grad_unit: &[Point3], grads: &mut Mlp) -> Matrix {
    let mut out = Matrix::zeros(tape.rows.len(), params.input_dim());
    for (r, (&v, &g)) in tape.raw.iter().zip(grad_unit).enumerate() {
        let n = v.norm();
        if n < NORMAL_EPS {
            continue;
        }
        // d(v/|v|) = (I - u u^T) / |v|
        let u = v * (1.0 / n);
        let graw = (g - u * u.dot(g)) * (1.0 / n);
        let gx = params.backward(&tape.rows[r], &graw.to_array(), grads);
        out.row_mut(r).copy_from_slice(&gx);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Matrix {
        Matrix::new(n, w, (0..n * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight-line re-implementation with explicit loops over named
    /// weights, sharing nothing with `Mlp::forward`.
    fn oracle_dense(layers: &[super::super::mlp::Layer], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in layers {
            let mut next = Vec::new();
            for o in 0..l.outputs {
                let mut s = l.bias[o];
                for i in 0..l.inputs {
                    s += l.weight[o * l.inputs + i] * cur[i];
                }
                next.push(match l.activation {
                    Activation::Relu => if s > 0.0 { s } else { 0.0 },
                    Activation::Identity => s,
                });
            }
            cur = next;
        }
        cur
    }

    fn oracle_set(net: &SetNet, rows: &Matrix) -> Vec<f64> {
        let feats: Vec<Vec<f64>> = (0..rows.rows).map(|r| oracle_dense(&net.shared.layers, rows.row(r))).collect();
        let pooled: Vec<f64> = (0..feats[0].len())
            .map(|j| feats.iter().map(|f| f[j]).fold(f64::MIN, f64::max))
            .collect();
        oracle_dense(&net.head.layers, &pooled)
    }

    #[test]
    fn decoder_zero_params_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SetNet::init(7, &[8, 16], &[12], 3 * 5, &mut rng);
        let zero = net.zeros_like();
        let rows = rand_rows(&mut rng, 6, 7);
        let (pts, _) = recon_decoder_forward(&zero, &rows, 5).unwrap();
        assert!(pts.iter().all(|&p| p == Point3::ORIGIN));

        let (a, _) = recon_decoder_forward(&net, &rows, 5).unwrap();
        let mut rev = Matrix::zeros(6, 7);
        for r in 0..6 {
            rev.row_mut(r).copy_from_slice(rows.row(5 - r));
        }
        let (b, _) = recon_decoder_forward(&net, &rev, 5).unwrap();
        assert_eq!(a, b);

        assert!(recon_decoder_forward(&net, &rand_rows(&mut rng, 6, 6), 5).is_err());
        assert!(recon_decoder_forward(&net, &rows, 4).is_err());
    }

    #[test]
    fn decoder_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let net = SetNet::init(5, &[9, 11], &[13], 3 * 4, &mut rng);
            let rows = rand_rows(&mut rng, 4, 5);
            let (pts, _) = recon_decoder_forward(&net, &rows, 4).unwrap();
            let want = oracle_set(&net, &rows);
            for (p, w) in pts.iter().flat_map(|p| p.to_array()).zip(want) {
                assert!((p - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn classifier_outputs_log_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = SetNet::init(5, &[6], &[7], 4, &mut rng);
        let rows = rand_rows(&mut rng, 3, 5);
        let (lp, _) = classify_head_forward(&net.zeros_like(), &rows, 4).unwrap();
        assert!(lp.iter().all(|&v| (v - 0.25f64.ln()).abs() < 1e-15));
        let (lp, _) = classify_head_forward(&net, &rows, 4).unwrap();
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        let want = log_softmax(&oracle_set(&net, &rows));
        for (a, b) in lp.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(classify_head_forward(&net, &rows, 3).is_err());
    }

    #[test]
    fn normal_head_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = normal_head_init(5, &[8, 8], &mut rng);
        let rows = rand_rows(&mut rng, 10, 5);
        let (zero, _) = normal_head_forward(&head.zeros_like(), &rows).unwrap();
        assert!(zero.iter().all(|&n| n == FALLBACK_NORMAL));
        let (ns, _) = normal_head_forward(&head, &rows).unwrap();
        for (r, n) in ns.iter().enumerate() {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            let raw = oracle_dense(&head.layers, rows.row(r));
            let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
            assert!((n.x - raw[0] / len).abs() <= 1e-12);
            assert!((n.y - raw[1] / len).abs() <= 1e-12);
            assert!((n.z - raw[2] / len).abs() <= 1e-12);
        }
        assert!(normal_head_forward(&head, &rand_rows(&mut rng, 2, 4)).is_err());
    }
}
