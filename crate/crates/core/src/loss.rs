//! Per-item losses with their gradients w.r.t. the inputs.

use crate::error::{Error, Result};
use crate::nn::ops::{log_softmax, softmax};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// `mean_b −Σ_k q_bk log p_bk` for probability rows `p` and one-hot rows `q`.
pub fn multinomial_log_loss(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::contract(format!(
            "{} prediction rows vs {} target rows",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (b, (pr, qr)) in p.iter().zip(q).enumerate() {
        if pr.len() != qr.len() {
            return Err(Error::contract(format!("row {b}: width mismatch")));
        }
        let sum: f64 = pr.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || pr.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(format!("row {b} is not a distribution (sum {sum})")));
        }
        let ones = qr.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || qr.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("target row {b} is not one-hot")));
        }
        total -= pr
            .iter()
            .zip(qr)
            .map(|(pk, qk)| qk * pk.max(PROB_CLAMP).ln())
            .sum::<f64>();
    }
    Ok(total / p.len() as f64)
}

/// Softmax cross-entropy against a class index; returns (loss, d loss/d logits).
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let loss = -lp[target];
    let mut grad: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (loss.max(0.0), grad)
}

/// `KL(softmax(teacher) ‖ softmax(student))`, teacher treated as constant.
/// Returns (loss, d loss/d student logits).
pub fn kl_divergence(teacher_logits: &[f64], student_logits: &[f64]) -> (f64, Vec<f64>) {
    let lt = log_softmax(teacher_logits);
    let ls = log_softmax(student_logits);
    let pt: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
    let kl: f64 = pt
        .iter()
        .zip(lt.iter().zip(&ls))
        .map(|(p, (a, b))| p * (a - b))
        .sum();
    let ps = softmax(student_logits);
    let grad = ps.iter().zip(&pt).map(|(s, t)| s - t).collect();
    (kl.max(0.0), grad)
}

/// Mean squared error over the vector, target treated as constant.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    (loss, grad)
}

pub fn one_hot(k: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn log_loss_analytic_values() {
        let l = multinomial_log_loss(&[vec![0.5, 0.5]], &[vec![1.0, 0.0]]).unwrap();
        assert!((l - LN_2).abs() < 1e-15);
        let uniform = vec![1.0 / 512.0; 512];
        let l = multinomial_log_loss(&[uniform], &[one_hot(512, 17)]).unwrap();
        assert!((l - 512f64.ln()).abs() < 1e-12);
        assert!((l - 6.238325).abs() < 1e-6);
        let l = multinomial_log_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]]).unwrap();
        assert!(l <= 1e-9);
    }

    #[test]
    fn log_loss_rejects_bad_inputs() {
        assert!(multinomial_log_loss(&[vec![0.7, 0.7]], &[vec![1.0, 0.0]]).is_err());
        assert!(multinomial_log_loss(&[vec![0.5, 0.5]], &[vec![0.5, 0.5]]).is_err());
        assert!(multinomial_log_loss(&[], &[]).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_loss() {
        let logits = [0.3, -1.2, 2.0];
        let (ce, grad) = cross_entropy(&logits, 1);
        let l = multinomial_log_loss(&[softmax(&logits)], &[one_hot(3, 1)]).unwrap();
        assert!((ce - l).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn kl_identity_and_gradient() {
        let z = [0.1, 2.0, -0.4, 0.0];
        let (kl, g) = kl_divergence(&z, &z);
        assert!(kl <= 1e-9);
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let t = [1.0, -0.5, 0.25, 0.0];
        let f = |s: &[f64]| kl_divergence(&t, s).0;
        let (_, g) = kl_divergence(&t, &z);
        for i in 0..4 {
            let mut p = z;
            let mut m = z;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mse_gradient() {
        let (l, g) = mse(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(l, 2.5);
        assert_eq!(g, vec![1.0, 2.0]);
    }
}
