//! Self-distillation on the target data.
//!
//! A fresh encoder is trained against fixed pseudo-labels. Its first three
//! blocks (the student) each feed an auxiliary head hⁱ_proj: an adapter to
//! the final width followed by a classifier. The block-4 path through h_cl
//! acts as the teacher. With l = h_cl(f(x)), zⁱ the auxiliary logits and uⁱ
//! the adapter outputs, the objective is
//!
//! ```text
//! L_all = CE(l, y) + α Σ CE(zⁱ, y) + (1 − α) Σ KL(σ(l) ‖ σ(zⁱ)) + β Σ ‖uⁱ − f(x)‖²/d
//! ```
//!
//! where l and f(x) are detached inside the KL and MSE terms.

use serde::{Deserialize, Serialize};

use crate::audio::LabeledDataset;
use crate::cluster::{self, EmbeddingBank, KMeansOptions};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, ParamGroup, AUX_HEADS, BLOCKS};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, kl_divergence, mse};
use crate::nn::Blob;
use crate::optim::Sgd;
use crate::train::{accumulate, epoch_order, eval_views};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl DistillConfig {
    pub fn paper() -> Self {
        DistillConfig {
            alpha: 0.7,
            beta: 0.003,
            lr: 0.007,
            batch: 512,
            epochs: 50,
        }
    }

    pub fn desk() -> Self {
        DistillConfig {
            batch: 32,
            epochs: 10,
            ..Self::paper()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: 1.0,
            aux_ce: self.alpha,
            kl: 1.0 - self.alpha,
            mse: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("distill lr {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("distill batch and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficients of the four loss families. Setting one to zero removes
/// that family from both the total and the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub aux_ce: f64,
    pub kl: f64,
    pub mse: f64,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub aux_ce: [f64; AUX_HEADS],
    pub kl: [f64; AUX_HEADS],
    pub mse: [f64; AUX_HEADS],
    pub all: f64,
}

impl LossBreakdown {
    pub fn compose(&self, w: &LossWeights) -> f64 {
        w.ce * self.ce
            + w.aux_ce * self.aux_ce.iter().sum::<f64>()
            + w.kl * self.kl.iter().sum::<f64>()
            + w.mse * self.mse.iter().sum::<f64>()
    }

    /// The ten named components followed by `L_all`.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = vec![("L_ce".to_string(), self.ce)];
        for (family, values) in [("L_ce", &self.aux_ce), ("L_kl", &self.kl), ("L_mse", &self.mse)] {
            for (i, v) in values.iter().enumerate() {
                out.push((format!("{family}_{}", i + 1), *v));
            }
        }
        out.push(("L_all".to_string(), self.all));
        out
    }

    fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.ce += s * other.ce;
        for i in 0..AUX_HEADS {
            self.aux_ce[i] += s * other.aux_ce[i];
            self.kl[i] += s * other.kl[i];
            self.mse[i] += s * other.mse[i];
        }
        self.all += s * other.all;
    }
}

/// Fixed targets for distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Agreement with true labels, when every item has one.
    pub purity: Option<f64>,
}

/// Cluster the frozen encoder's final features of center-cropped views
/// into `t` groups.
pub fn generate_pseudo_labels(
    pretrained: &EncoderParams,
    data: &LabeledDataset,
    t: usize,
    opts: &KMeansOptions,
    seed: u64,
) -> Result<PseudoLabels> {
    if data.len() < t {
        return Err(Error::contract(format!(
            "{} items cannot be split into t={t} pseudo-classes",
            data.len()
        )));
    }
    let views = eval_views(data, pretrained.config.input_frames);
    let feats = par::map(&views, |x| pretrained.forward_cached(x).0.pooled.pop().expect("four blocks"));
    let dim = pretrained.config.final_dim();
    let mut rows = Blob::zeros(feats.len(), dim);
    for (i, f) in feats.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(f);
    }
    let bank = EmbeddingBank::from_raw(&rows)?;
    let result = cluster::spherical_kmeans(&bank, t, opts, &mut rng::stage_rng(seed, "pseudo-labels"))?;
    let truth: Option<Vec<usize>> = data.items.iter().map(|it| it.label).collect();
    let purity = truth.map(|y| cluster::purity(&result.labels, &y));
    Ok(PseudoLabels {
        labels: result.labels,
        classes: t,
        purity,
    })
}

fn check_batch(params: &EncoderParams, inputs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::contract(format!(
            "{} inputs vs {} labels in a distillation batch",
            inputs.len(),
            labels.len()
        )));
    }
    let t = params.config.classes;
    let width = params.config.input_frames * params.config.input_mels;
    if let Some(bad) = labels.iter().find(|&&l| l >= t) {
        return Err(Error::contract(format!("pseudo-label {bad} outside [0, {t})")));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != width) {
        return Err(Error::contract(format!("input width {} vs encoder {width}", x.len())));
    }
    Ok(())
}

/// Values entering the KL and MSE terms as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedTargets {
    pub teacher_logits: Vec<f64>,
    pub final_features: Vec<f64>,
}

/// The detached targets the current parameters produce for each input.
pub fn detached_targets(params: &EncoderParams, inputs: &[Vec<f64>]) -> Vec<DetachedTargets> {
    par::map(inputs, |x| {
        let (feats, _) = params.forward_cached(x);
        DetachedTargets {
            teacher_logits: params.classify(feats.final_features()),
            final_features: feats.final_features().to_vec(),
        }
    })
}

/// Forward pass plus, when `grads` is given, the backward pass of one item
/// scaled by `scale`. `frozen` replaces the item's own detached targets.
fn item_losses(
    params: &EncoderParams,
    x: &[f64],
    y: usize,
    w: &LossWeights,
    scale: f64,
    frozen: Option<&DetachedTargets>,
    grads: Option<&mut EncoderParams>,
) -> LossBreakdown {
    let (feats, cache) = params.forward_cached(x);
    let f = feats.final_features();
    let l = params.classify(f);
    let (l_target, f_target) = match frozen {
        Some(t) => (t.teacher_logits.as_slice(), t.final_features.as_slice()),
        None => (l.as_slice(), f),
    };
    let mut out = LossBreakdown::default();
    let (ce, d_l) = cross_entropy(&l, y);
    out.ce = ce;
    let mut aux = Vec::with_capacity(AUX_HEADS);
    for i in 0..AUX_HEADS {
        let o = params.aux_head(i, feats.block(i));
        let (c, d_ce) = cross_entropy(&o.out, y);
        let (k, d_kl) = kl_divergence(l_target, &o.out);
        let (m, d_mse) = mse(&o.hidden, f_target);
        out.aux_ce[i] = c;
        out.kl[i] = k;
        out.mse[i] = m;
        aux.push((o, d_ce, d_kl, d_mse));
    }
    out.all = out.compose(w);
    let Some(grads) = grads else {
        return out;
    };
    let d_l: Vec<f64> = d_l.iter().map(|d| d * w.ce * scale).collect();
    let mut d_pooled: [Option<Vec<f64>>; BLOCKS] = Default::default();
    d_pooled[BLOCKS - 1] = Some(params.classify_backward(f, &d_l, grads));
    for (i, (o, d_ce, d_kl, d_mse)) in aux.into_iter().enumerate() {
        let d_z: Vec<f64> = d_ce
            .iter()
            .zip(&d_kl)
            .map(|(a, b)| scale * (w.aux_ce * a + w.kl * b))
            .collect();
        let d_u: Vec<f64> = d_mse.iter().map(|d| scale * w.mse * d).collect();
        d_pooled[i] = Some(params.aux_backward(i, feats.block(i), &o, &d_z, Some(&d_u), grads));
    }
    params.backward_blocks(&cache, &d_pooled, grads);
    out
}

/// Batch-mean loss components, forward only.
pub fn distill_forward_losses(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_batch(params, inputs, labels)?;
    let per_item = par::map_range(inputs.len(), |i| item_losses(params, &inputs[i], labels[i], w, 0.0, None, None));
    let mut total = LossBreakdown::default();
    let s = 1.0 / inputs.len() as f64;
    for b in &per_item {
        total.add_scaled(b, s);
    }
    Ok(total)
}

/// Batch-mean loss components with the KL and MSE targets held at `frozen`.
/// Its derivative is the gradient [`distill_gradients`] computes.
pub fn distill_losses_against(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
    w: &LossWeights,
    frozen: &[DetachedTargets],
) -> Result<LossBreakdown> {
    check_batch(params, inputs, labels)?;
    if frozen.len() != inputs.len() {
        return Err(Error::contract("one set of detached targets per input required"));
    }
    let per_item = par::map_range(inputs.len(), |i| {
        item_losses(params, &inputs[i], labels[i], w, 0.0, Some(&frozen[i]), None)
    });
    let mut total = LossBreakdown::default();
    let s = 1.0 / inputs.len() as f64;
    for b in &per_item {
        total.add_scaled(b, s);
    }
    Ok(total)
}

/// Batch-mean loss components and the gradient of the weighted total.
pub fn distill_gradients(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
    w: &LossWeights,
) -> Result<(LossBreakdown, EncoderParams)> {
    check_batch(params, inputs, labels)?;
    let s = 1.0 / inputs.len() as f64;
    let items: Vec<(&Vec<f64>, usize)> = inputs.iter().zip(labels.iter().copied()).collect();
    let (per_item, grads) = accumulate(params, &items, |(x, y), g| item_losses(params, x, *y, w, s, None, Some(g)));
    let mut total = LossBreakdown::default();
    for b in &per_item {
        total.add_scaled(b, s);
    }
    Ok((total, grads))
}

pub fn distill_optimizer(lr: f64) -> Sgd {
    Sgd::new(lr, &[ParamGroup::Blocks, ParamGroup::Classifier, ParamGroup::Aux])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

pub struct DistillRun {
    pub params: EncoderParams,
    pub epochs: Vec<DistillEpoch>,
}

/// Train a freshly initialized encoder on `data` against `labels`.
///
/// Inputs are the deterministic center crops used for pseudo-labelling.
pub fn run_distillation(
    cfg: &DistillConfig,
    encoder: &EncoderConfig,
    data: &LabeledDataset,
    labels: &PseudoLabels,
    seed: u64,
    mut on_epoch: impl FnMut(&DistillEpoch),
) -> Result<DistillRun> {
    cfg.validate()?;
    if labels.labels.len() != data.len() {
        return Err(Error::contract(format!(
            "{} pseudo-labels for {} items",
            labels.labels.len(),
            data.len()
        )));
    }
    if encoder.classes != labels.classes {
        return Err(Error::Config(format!(
            "encoder has {} classes but pseudo-labels use t={}",
            encoder.classes, labels.classes
        )));
    }
    let mut params = init_encoder(encoder, rng::derive_seed(seed, "distill-init"))?;
    let views = eval_views(data, encoder.input_frames);
    let opt = distill_optimizer(cfg.lr);
    let w = cfg.weights();
    let n = data.len();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(n, seed, "distill-order", epoch);
        let mut mean = LossBreakdown::default();
        for batch in order.chunks(cfg.batch) {
            let x: Vec<Vec<f64>> = batch.iter().map(|&i| views[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels.labels[i]).collect();
            let (losses, grads) = distill_gradients(&params, &x, &y, &w)?;
            opt.step(&mut params, &grads);
            mean.add_scaled(&losses, batch.len() as f64 / n as f64);
        }
        let record = DistillEpoch { epoch, mean };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(DistillRun { params, epochs })
}
