use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Which objective a dataset trains with.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Per-class sigmoid BCE with the given class weights.
    WeightedOva(Vec<f64>),
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn loss_ce<T: Scalar>(logits: &[T], classes: usize, targets: &[usize]) -> Result<(T, Vec<T>)> {
    let n = targets.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::Shape(format!(
            "{} logits for {n} targets x {classes} classes",
            logits.len()
        )));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - log_z).exp() * inv_n;
        }
        g[t] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// `(1 / (N*C)) Σ_n Σ_c w_c BCE(σ(z_nc), y_nc)` and its analytic gradient.
pub fn loss_weighted_ova<T: Scalar>(
    logits: &[T],
    classes: usize,
    targets: &[T],
    weights: &[T],
) -> Result<(T, Vec<T>)> {
    if weights.len() != classes {
        return Err(Error::Shape(format!(
            "{} class weights for {classes} classes",
            weights.len()
        )));
    }
    if logits.len() != targets.len() || classes == 0 || !logits.len().is_multiple_of(classes) || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets ({classes} classes)",
            logits.len(),
            targets.len()
        )));
    }
    let scale = T::one() / T::from_usize(logits.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (&z, &y)) in logits.iter().zip(targets).enumerate() {
        let w = weights[i % classes];
        // softplus(z) - y z, written to stay finite for large |z|
        let bce = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        loss += w * bce;
        let sig = T::one() / (T::one() + (-z).exp());
        grad[i] = w * (sig - y) * scale;
    }
    Ok((loss * scale, grad))
}

/// Inverse-frequency class weights `N / (C * N_c)`, clamped to `[0.1, 10]`.
pub fn class_weights(targets: &[f32], classes: usize) -> Vec<f64> {
    let n = targets.len() / classes.max(1);
    (0..classes)
        .map(|c| {
            let pos = targets.iter().skip(c).step_by(classes).filter(|&&y| y > 0.5).count();
            if pos == 0 {
                10.0
            } else {
                (n as f64 / (classes as f64 * pos as f64)).clamp(0.1, 10.0)
            }
        })
        .collect()
}

pub(crate) fn weights_as<T: Scalar>(w: &[f64]) -> Vec<T> {
    w.iter().map(|&v| lit(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 4, 33] {
            let (l, _) = loss_ce(&vec![0.7f64; 3 * c], c, &[0, 1, c - 1]).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let (l, g) = loss_ce(&[50.0f64, 0.0, 0.0], 3, &[0]).unwrap();
        assert!(l < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        assert!(loss_ce(&[0.0f32; 4], 2, &[0, 2]).is_err());
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-6;
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut s = Stream::new(4, &[]);
        let logits: Vec<f64> = (0..15).map(|_| 2.0 * s.normal()).collect();
        let targets = [0, 4, 2];
        let (_, g) = loss_ce(&logits, 5, &targets).unwrap();
        let fd = finite_diff(|z| loss_ce(z, 5, &targets).unwrap().0, &logits);
        for (a, n) in g.iter().zip(&fd) {
            assert!(rel(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn ova_at_zero_logits_is_ln2() {
        let (l, _) = loss_weighted_ova(&[0.0f64; 6], 3, &[0.5; 6], &[1.0; 3]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ova_zero_weight_zero_gradient() {
        let (_, g) = loss_weighted_ova(&[1.0f64, -2.0, 0.5, 3.0], 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn ova_gradient_matches_finite_differences() {
        let mut s = Stream::new(5, &[]);
        let logits: Vec<f64> = (0..12).map(|_| 3.0 * s.normal()).collect();
        let targets: Vec<f64> = (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let w = [0.5, 2.0, 1.0, 4.0];
        let (_, g) = loss_weighted_ova(&logits, 4, &targets, &w).unwrap();
        let fd = finite_diff(|z| loss_weighted_ova(z, 4, &targets, &w).unwrap().0, &logits);
        for (a, n) in g.iter().zip(&fd) {
            assert!(rel(*a, *n) < 1e-4, "{a} vs {n}");
        }
        assert!(loss_weighted_ova(&logits, 4, &targets, &w[..3]).is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        // 4 samples, class 0 positive in all, class 1 in one, class 2 never.
        let t = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let w = class_weights(&t, 3);
        assert!((w[0] - 4.0 / 12.0).abs() < 1e-12);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(w[2], 10.0);
    }
}
