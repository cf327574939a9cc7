//! Losses returning `(value, gradient w.r.t. the first argument)`.
//! Values are batch means.

use ndarray::{Array2, Zip};

use super::{lit, Real};
use crate::error::{validation, Result};

/// Mean softmax cross-entropy of `logits` (`n × classes`) against class ids.
pub fn softmax_cross_entropy<S: Real>(logits: &Array2<S>, labels: &[usize]) -> Result<(S, Array2<S>)> {
    let (n, c) = logits.dim();
    if n != labels.len() {
        return validation(format!("{n} logit rows but {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return validation(format!("label {bad} out of range for {c} classes"));
    }
    let inv_n: S = lit(1.0 / n.max(1) as f64);
    let mut grad = Array2::zeros((n, c));
    let mut total = S::zero();
    for (i, (row, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let m = row.fold(S::neg_infinity(), |a, &b| a.max(b));
        let z: S = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[labels[i]];
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - lse).exp() * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean binary cross-entropy on single-logit rows against 0/1 targets.
pub fn bce_with_logits<S: Real>(logits: &Array2<S>, labels: &[usize]) -> Result<(S, Array2<S>)> {
    let (n, c) = logits.dim();
    if c != 1 || n != labels.len() {
        return validation(format!("binary loss expects n × 1 logits, got {n} × {c} for {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return validation(format!("binary label {bad} not in {{0, 1}}"));
    }
    let inv_n: S = lit(1.0 / n.max(1) as f64);
    let mut total = S::zero();
    let mut grad = Array2::zeros((n, 1));
    for (i, &y) in labels.iter().enumerate() {
        let z = logits[[i, 0]];
        let y: S = lit(y as f64);
        total += z.max(S::zero()) - z * y + (S::one() + (-z.abs()).exp()).ln();
        let p = S::one() / (S::one() + (-z).exp());
        grad[[i, 0]] = (p - y) * inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean squared error over every element.
pub fn mse<S: Real>(pred: &Array2<S>, target: &Array2<S>) -> (S, Array2<S>) {
    assert_eq!(pred.dim(), target.dim(), "mse shape mismatch");
    let diff = pred - target;
    let k: S = lit(1.0 / diff.len().max(1) as f64);
    let value = diff.iter().map(|&d| d * d).sum::<S>() * k;
    let two: S = lit(2.0);
    (value, diff.mapv(|d| two * d * k))
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions, averaged over
/// rows. Returns `(value, d/dmu, d/dlogvar)`.
pub fn gaussian_kl<S: Real>(mu: &Array2<S>, logvar: &Array2<S>) -> (S, Array2<S>, Array2<S>) {
    assert_eq!(mu.dim(), logvar.dim());
    let n = mu.nrows().max(1);
    let inv_n: S = lit(1.0 / n as f64);
    let half: S = lit(0.5);
    let mut total = S::zero();
    let mut gmu = Array2::zeros(mu.raw_dim());
    let mut glv = Array2::zeros(mu.raw_dim());
    Zip::from(&mut gmu).and(&mut glv).and(mu).and(logvar).for_each(|gm, gl, &m, &lv| {
        let e = lv.exp();
        total += half * (m * m + e - S::one() - lv);
        *gm = m * inv_n;
        *gl = half * (e - S::one()) * inv_n;
    });
    (total * inv_n, gmu, glv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Array2::<f64>::zeros((3, 10));
        let (l, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn extreme_matching_logits_give_zero_loss() {
        let logits = array![[60.0f64, 0.0, 0.0]];
        let (l, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Array2::<f64>::zeros((1, 10));
        assert!(softmax_cross_entropy(&logits, &[10]).is_err());
        assert!(bce_with_logits(&Array2::<f64>::zeros((1, 1)), &[2]).is_err());
    }

    #[test]
    fn bce_matches_closed_form() {
        let (l, _) = bce_with_logits(&array![[0.0f64]], &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let z = Array2::<f64>::zeros((2, 4));
        let (kl, gm, gl) = gaussian_kl(&z, &z);
        assert_eq!(kl, 0.0);
        assert!(gm.iter().chain(gl.iter()).all(|&g| g == 0.0));
    }
}
