//! Linear evaluation of frozen student features.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::LabeledDataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::nn::ops::argmax;
use crate::nn::Blob;
use crate::train::{epoch_order, eval_views};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.001,
            batch: 32,
            epochs: 50,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::Config(format!("probe lr and batch must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Pooled block-3 features of center-cropped views, one row per item.
pub fn extract_frozen_features(student: &EncoderParams, data: &LabeledDataset) -> Result<Blob> {
    let views = eval_views(data, student.config.input_frames);
    let rows = par::map(&views, |x| student.student_features(x));
    let d = student.config.block_channels[2];
    let mut out = Blob::zeros(rows.len(), d);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r?);
    }
    Ok(out)
}

/// Softmax classifier on per-dimension standardized features.
///
/// The standardization statistics come from the training table; together
/// with `weight` and `bias` the probe stays a single affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[t × d]`
    pub weight: Blob,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.weight.rows
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        (0..self.classes())
            .map(|k| self.bias[k] + self.weight.row(k).iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn check_aligned(features: &Blob, labels: &[usize]) -> Result<()> {
    if features.rows != labels.len() {
        return Err(Error::contract(format!(
            "{} feature rows vs {} labels",
            features.rows,
            labels.len()
        )));
    }
    Ok(())
}

/// SGD on mean softmax cross-entropy. The probe sees only the feature
/// table, so the encoder cannot be updated.
pub fn train_linear_probe(
    features: &Blob,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    cfg.validate()?;
    check_aligned(features, labels)?;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::contract("probe labels contain a single class"));
    }
    let (n, d) = features.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    let mut init = rng::stage_rng(seed, "probe-init");
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let weight_data = (0..classes * d).map(|_| normal.sample(&mut init)).collect();
    let mut probe = LinearProbe {
        mean,
        inv_std,
        weight: Blob::from_vec(classes, d, weight_data),
        bias: vec![0.0; classes],
    };
    let z: Vec<Vec<f64>> = (0..n).map(|i| probe.standardize(features.row(i))).collect();
    for epoch in 1..=cfg.epochs {
        for batch in epoch_order(n, seed, "probe-order", epoch).chunks(cfg.batch) {
            let mut gw = Blob::zeros(classes, d);
            let mut gb = vec![0.0; classes];
            let s = 1.0 / batch.len() as f64;
            for &i in batch {
                let logits: Vec<f64> = (0..classes)
                    .map(|k| probe.bias[k] + probe.weight.row(k).iter().zip(&z[i]).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                let (_, dl) = cross_entropy(&logits, labels[i]);
                for (k, g) in dl.iter().enumerate() {
                    gb[k] += s * g;
                    gw.row_mut(k).iter_mut().zip(&z[i]).for_each(|(w, v)| *w += s * g * v);
                }
            }
            probe.weight.axpy(-cfg.lr, &gw);
            probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= cfg.lr * g);
        }
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub encoder_id: String,
    pub probe: ProbeConfig,
}

/// Exact accuracy accounting; ties in the logits go to the lowest class.
pub fn evaluate(
    probe: &LinearProbe,
    features: &Blob,
    labels: &[usize],
    encoder_id: &str,
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    check_aligned(features, labels)?;
    let t = probe.classes();
    let mut per_class: Vec<ClassAccuracy> = (0..t)
        .map(|class| ClassAccuracy {
            class,
            correct: 0,
            total: 0,
        })
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        let c = per_class
            .get_mut(y)
            .ok_or_else(|| Error::contract(format!("label {y} outside [0, {t})")))?;
        c.total += 1;
        if probe.predict(features.row(i)) == y {
            c.correct += 1;
        }
    }
    let correct = per_class.iter().map(|c| c.correct).sum();
    Ok(EvalReport {
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        correct,
        n_test: labels.len(),
        per_class,
        encoder_id: encoder_id.to_string(),
        probe: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Blob, Vec<usize>) {
        let mut r = rng::rng(seed);
        let mut x = Blob::zeros(n, 3);
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let row = x.row_mut(i);
            row[0] = if c == 0 { -1.0 } else { 1.0 } + r.random_range(-0.5..0.5);
            row[1] = r.random_range(-2.0..2.0);
            row[2] = r.random_range(-2.0..2.0);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let (x, y) = toy(200, 1);
        let cfg = ProbeConfig::default();
        let p = train_linear_probe(&x, &y, 2, &cfg, 3).unwrap();
        let r = evaluate(&p, &x, &y, "toy", &cfg).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        assert_eq!(p, train_linear_probe(&x, &y, 2, &cfg, 3).unwrap());
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let (x, y) = toy(20, 2);
        let zero = ProbeConfig { epochs: 0, ..Default::default() };
        let one = ProbeConfig { epochs: 1, ..Default::default() };
        let a = train_linear_probe(&x, &y, 2, &zero, 5).unwrap();
        let b = train_linear_probe(&x, &y, 2, &one, 5).unwrap();
        assert!(a.bias.iter().all(|&v| v == 0.0));
        assert_ne!(a.weight, b.weight);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = toy(10, 2);
        assert!(train_linear_probe(&x, &[1; 10], 2, &ProbeConfig::default(), 0).is_err());
    }

    #[test]
    fn report_is_exact_and_order_invariant() {
        let (x, y) = toy(50, 4);
        let cfg = ProbeConfig { epochs: 2, ..Default::default() };
        let p = train_linear_probe(&x, &y, 2, &cfg, 1).unwrap();
        let r = evaluate(&p, &x, &y, "e", &cfg).unwrap();
        assert_eq!(r.accuracy, r.correct as f64 / 50.0);
        let perm: Vec<usize> = (0..50).rev().collect();
        let mut xp = Blob::zeros(50, 3);
        for (i, &j) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(j));
        }
        let yp: Vec<usize> = perm.iter().map(|&j| y[j]).collect();
        assert_eq!(evaluate(&p, &xp, &yp, "e", &cfg).unwrap(), r);
    }

    #[test]
    fn random_probe_sits_near_chance() {
        let t = 4;
        let n = 800;
        let mut r = rng::rng(11);
        let x = Blob::from_vec(n, 8, (0..n * 8).map(|_| r.random_range(-1.0..1.0)).collect());
        let y: Vec<usize> = (0..n).map(|i| i % t).collect();
        let cfg = ProbeConfig { epochs: 0, ..Default::default() };
        let p = train_linear_probe(&x, &y, t, &cfg, 2).unwrap();
        let acc = evaluate(&p, &x, &y, "r", &cfg).unwrap().accuracy;
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc}");
    }
}
