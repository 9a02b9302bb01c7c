//! Pretext losses and their gradients with respect to the predictions.

use crate::error::{invalid, Result};
use crate::geometry::{chamfer_grad_a, chamfer_match, ChamferMatch, Point3, PointCloud};

/// Chamfer distance between predicted and ground-truth point sets.
pub fn loss_reconstruction(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    Ok(chamfer_match(pred.points(), gt.points())?.value)
}

/// Chamfer loss, its gradient with respect to `pred`, and the matches used.
pub fn reconstruction_with_grad(pred: &[Point3], gt: &[Point3]) -> Result<(f64, Vec<Point3>, ChamferMatch)> {
    let m = chamfer_match(pred, gt)?;
    let g = chamfer_grad_a(pred, gt, &m);
    Ok((m.value, g, m))
}

#[inline]
fn cosine(p: Point3, g: Point3) -> (f64, f64, f64) {
    let (np, ng) = (p.norm(), g.norm());
    let denom = np * ng;
    if denom == 0.0 {
        return (0.0, np, ng);
    }
    (p.dot(g) / denom, np, ng)
}

/// Mean of `1 - cos` over rows, or `1 - |cos|` when `sign_invariant`.
pub fn loss_normal(pred: &[Point3], gt: &[Point3], sign_invariant: bool) -> Result<f64> {
    Ok(normal_with_grad(pred, gt, sign_invariant)?.0)
}

pub fn normal_with_grad(pred: &[Point3], gt: &[Point3], sign_invariant: bool) -> Result<(f64, Vec<Point3>)> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "normal loss shape mismatch: {} predictions, {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("normal loss needs at least one row"));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let (c, np, ng) = cosine(p, g);
        let (term, sign) = if sign_invariant {
            (1.0 - c.abs(), if c < 0.0 { -1.0 } else { 1.0 })
        } else {
            (1.0 - c, 1.0)
        };
        total += term;
        if np == 0.0 || ng == 0.0 {
            grads.push(Point3::ORIGIN);
            continue;
        }
        // d cos / d p = g / (|p||g|) - cos p / |p|^2
        let dcos = g * (1.0 / (np * ng)) - p * (c / (np * np));
        grads.push(dcos * (-sign / n));
    }
    Ok((total / n, grads))
}

/// Negative log-likelihood of `label`.
pub fn loss_classification(log_probs: &[f64], label: usize) -> Result<f64> {
    log_probs
        .get(label)
        .map(|lp| -lp)
        .ok_or_else(|| invalid(format!("label {label} outside {} classes", log_probs.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_examples() {
        let a = PointCloud::from_arrays(&[[0., 0., 0.], [1., 2., 3.]]).unwrap();
        assert_eq!(loss_reconstruction(&a, &a).unwrap(), 0.0);
        let p = PointCloud::from_arrays(&[[0., 0., 0.]]).unwrap();
        let q = PointCloud::from_arrays(&[[0., 3., 0.]]).unwrap();
        assert_eq!(loss_reconstruction(&p, &q).unwrap(), 18.0);
    }

    #[test]
    fn reconstruction_matches_brute_force() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n| {
                (0..n)
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect::<Vec<[f64; 3]>>()
            };
            let a = mk(&mut rng, 13);
            let b = mk(&mut rng, 7);
            let d2 = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>();
            let dir = |x: &[[f64; 3]], y: &[[f64; 3]]| {
                x.iter().map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
            };
            let want = dir(&a, &b) + dir(&b, &a);
            let got = loss_reconstruction(&PointCloud::from_arrays(&a).unwrap(), &PointCloud::from_arrays(&b).unwrap()).unwrap();
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn normal_examples() {
        let g = vec![Point3::raw(0., 0., 1.), Point3::raw(1., 0., 0.)];
        assert_eq!(loss_normal(&g, &g, false).unwrap(), 0.0);
        let neg: Vec<Point3> = g.iter().map(|&p| p * -1.0).collect();
        assert_eq!(loss_normal(&neg, &g, false).unwrap(), 2.0);
        assert_eq!(loss_normal(&neg, &g, true).unwrap(), 0.0);
        let orth = vec![Point3::raw(1., 0., 0.), Point3::raw(0., 1., 0.)];
        assert_eq!(loss_normal(&orth, &g, false).unwrap(), 1.0);
        assert!(loss_normal(&orth, &g[..1], false).is_err());
    }

    #[test]
    fn normal_gradient_finite_difference() {
        let p = vec![Point3::raw(0.3, -0.2, 0.9), Point3::raw(-0.5, 0.4, 0.1)];
        let g = vec![Point3::raw(0., 0.6, 0.8), Point3::raw(1., 0., 0.)];
        for inv in [false, true] {
            let (_, grad) = normal_with_grad(&p, &g, inv).unwrap();
            let h = 1e-6;
            for r in 0..2 {
                for a in 0..3 {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    let mut arr = pp[r].to_array();
                    arr[a] += h;
                    pp[r] = Point3::from_array(arr);
                    let mut arr = pm[r].to_array();
                    arr[a] -= h;
                    pm[r] = Point3::from_array(arr);
                    let fd = (loss_normal(&pp, &g, inv).unwrap() - loss_normal(&pm, &g, inv).unwrap()) / (2.0 * h);
                    assert!((fd - grad[r].to_array()[a]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn classification_loss() {
        let lp = [0.25f64.ln(); 4];
        assert!((loss_classification(&lp, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(loss_classification(&lp, 4).is_err());
    }
}
