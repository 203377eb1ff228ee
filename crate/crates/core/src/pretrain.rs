//! Clustering-driven pre-training.
//!
//! Every epoch alternates an assignment phase and a training phase:
//!
//! - assignment: spherical k-means over the embedding memory bank yields
//!   pseudo-labels, and the centroids overwrite the frozen prototype head;
//! - training: SGD on the softmax cross-entropy between prototype logits
//!   and those fixed labels, updating only the blocks and the projector.
//!   Each iteration writes the batch's fresh normalized projector outputs
//!   back into the bank.
//!
//! Only the first epoch fills the bank with a separate forward pass; later
//! assignment phases cluster whatever the previous epoch's iterations left.

use serde::{Deserialize, Serialize};

use crate::audio::{AugmentationPolicy, LabeledDataset};
use crate::cluster::{self, ClusterResult, EmbeddingBank, KMeansOptions};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, ParamGroup, BLOCKS};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::nn::Blob;
use crate::optim::Sgd;
use crate::train::{accumulate, augmented_view, epoch_order};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Number of clusters K.
    pub clusters: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub augmentation: AugmentationPolicy,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_restarts: usize,
}

impl PretrainConfig {
    pub fn paper() -> Self {
        PretrainConfig {
            clusters: 512,
            lr: 0.005,
            batch: 512,
            epochs: 100,
            augmentation: AugmentationPolicy::default(),
            kmeans_max_iters: 50,
            kmeans_tol: 1e-6,
            kmeans_restarts: 3,
        }
    }

    pub fn desk() -> Self {
        PretrainConfig {
            clusters: 8,
            batch: 32,
            epochs: 5,
            ..Self::paper()
        }
    }

    pub fn kmeans(&self) -> KMeansOptions {
        KMeansOptions {
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
            restarts: self.kmeans_restarts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.batch == 0 || self.epochs == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("pretrain clusters, batch, epochs and restarts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr {} must be positive", self.lr)));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankSlot {
    /// Unit-norm projector output.
    pub g: Vec<f64>,
    /// Epoch that wrote the slot; 0 is the initial fill.
    pub epoch: usize,
    /// Global training iteration that wrote the slot; 0 for the initial fill.
    pub iteration: usize,
}

/// Per-sample cache of normalized projector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMemoryBank {
    dim: usize,
    slots: Vec<Option<BankSlot>>,
}

impl EmbeddingMemoryBank {
    pub fn new(n: usize, dim: usize) -> Self {
        EmbeddingMemoryBank {
            dim,
            slots: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn slot(&self, i: usize) -> Option<&BankSlot> {
        self.slots[i].as_ref()
    }

    pub fn write(&mut self, i: usize, g: Vec<f64>, epoch: usize, iteration: usize) {
        debug_assert_eq!(g.len(), self.dim);
        self.slots[i] = Some(BankSlot { g, epoch, iteration });
    }

    pub fn to_bank(&self) -> Result<EmbeddingBank> {
        let mut rows = Blob::zeros(self.slots.len(), self.dim);
        for (i, s) in self.slots.iter().enumerate() {
            let s = s
                .as_ref()
                .ok_or_else(|| Error::State(format!("memory bank slot {i} was never written")))?;
            rows.row_mut(i).copy_from_slice(&s.g);
        }
        EmbeddingBank::from_normalized(rows)
    }
}

/// Pseudo-labels q, fixed between assignment phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub source_epoch: usize,
}

/// Cluster the bank, emit labels and load the centroids into `prot`.
pub fn assignment_phase(
    bank: &EmbeddingMemoryBank,
    k: usize,
    opts: &KMeansOptions,
    seed: u64,
    epoch: usize,
    params: &mut EncoderParams,
) -> Result<(PseudoLabelSet, ClusterResult)> {
    if !bank.is_complete() {
        return Err(Error::State("assignment phase needs a fully populated memory bank".into()));
    }
    let rows = bank.to_bank()?;
    let mut r = rng::rng(rng::derive_indexed(seed, "pretrain-kmeans", &[epoch as u64]));
    let result = cluster::spherical_kmeans(&rows, k, opts, &mut r)?;
    params.set_prototypes(result.centroids.as_rows())?;
    Ok((
        PseudoLabelSet {
            labels: result.labels.clone(),
            source_epoch: epoch,
        },
        result,
    ))
}

/// Normalized projector output g for one input map.
pub fn embed(params: &EncoderParams, input: &[f64]) -> Vec<f64> {
    let (f, _) = params.forward_cached(input);
    normalize(params.project(f.final_features()).out)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Mean prototype cross-entropy over the batch with its gradient.
/// Also returns each item's normalized projector output.
pub fn pretrain_gradients(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, EncoderParams, Vec<Vec<f64>>)> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::contract("pretrain batch and labels must align and be non-empty"));
    }
    let k = params.prot.rows;
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("pseudo-label {bad} outside [0, {k})")));
    }
    let scale = 1.0 / inputs.len() as f64;
    let items: Vec<(&Vec<f64>, usize)> = inputs.iter().zip(labels.iter().copied()).collect();
    let (outs, grads) = accumulate(params, &items, |(x, y), grads| {
        let (feats, cache) = params.forward_cached(x);
        let proj = params.project(feats.final_features());
        let logits = params.prototype_logits(&proj.out);
        let (loss, mut d_logits) = cross_entropy(&logits, *y);
        d_logits.iter_mut().for_each(|d| *d *= scale);
        let d_g = params.prototype_backward(&d_logits);
        let d_f = params.project_backward(feats.final_features(), &proj, &d_g, grads);
        let mut d_pooled: [Option<Vec<f64>>; BLOCKS] = Default::default();
        d_pooled[BLOCKS - 1] = Some(d_f);
        params.backward_blocks(&cache, &d_pooled, grads);
        (loss, normalize(proj.out))
    });
    let loss = outs.iter().map(|(l, _)| l).sum::<f64>() * scale;
    let embeddings = outs.into_iter().map(|(_, g)| g).collect();
    Ok((loss, grads, embeddings))
}

/// Forward-only batch loss, for finite-difference checks.
pub fn pretrain_loss(params: &EncoderParams, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let losses = par::map_range(inputs.len(), |i| {
        let (feats, _) = params.forward_cached(&inputs[i]);
        let logits = params.prototype_logits(&params.project(feats.final_features()).out);
        cross_entropy(&logits, labels[i]).0
    });
    losses.iter().sum::<f64>() / inputs.len() as f64
}

/// The optimizer used by pre-training: the prototype head is never trainable.
pub fn pretrain_optimizer(lr: f64) -> Sgd {
    Sgd::new(lr, &[ParamGroup::Blocks, ParamGroup::Projector])
}

pub struct StepOutput {
    pub loss: f64,
    /// Normalized g per batch item, from this step's forward pass.
    pub embeddings: Vec<Vec<f64>>,
}

/// One SGD step on a batch of augmented views against fixed pseudo-labels.
pub fn pretrain_step(
    params: &mut EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[usize],
    opt: &Sgd,
) -> Result<StepOutput> {
    if opt.trainable.contains(&ParamGroup::Prototype) {
        return Err(Error::contract("the prototype head must stay frozen during pre-training"));
    }
    let (loss, grads, embeddings) = pretrain_gradients(params, inputs, labels)?;
    opt.step(params, &grads);
    Ok(StepOutput { loss, embeddings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub kmeans_objective: f64,
    pub cluster_sizes: Vec<usize>,
}

pub struct PretrainRun {
    pub params: EncoderParams,
    pub epochs: Vec<PretrainEpoch>,
    pub bank: EmbeddingMemoryBank,
    pub labels: PseudoLabelSet,
}

impl PretrainRun {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Full pre-training loop over every item of `data` (labels ignored).
pub fn run_pretraining(
    cfg: &PretrainConfig,
    encoder: &EncoderConfig,
    data: &LabeledDataset,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainRun> {
    cfg.validate()?;
    if encoder.prototypes != cfg.clusters {
        return Err(Error::Config(format!(
            "encoder has {} prototypes but pre-training asks for K={}",
            encoder.prototypes, cfg.clusters
        )));
    }
    let n = data.len();
    if n < cfg.clusters {
        return Err(Error::Config(format!(
            "{n} items cannot form K={} clusters; lower K",
            cfg.clusters
        )));
    }
    if cfg.augmentation.crop_frames != encoder.input_frames {
        return Err(Error::Config(format!(
            "crop of {} frames does not match encoder input of {}",
            cfg.augmentation.crop_frames, encoder.input_frames
        )));
    }
    let mut params = init_encoder(encoder, rng::derive_seed(seed, "pretrain-init"))?;
    let opt = pretrain_optimizer(cfg.lr);
    let opts = cfg.kmeans();
    let specs = data.specs();

    // First epoch only: a dedicated pass fills the bank before any training.
    let mut bank = EmbeddingMemoryBank::new(n, encoder.proj_out);
    let initial = par::map_range(n, |i| {
        let x = augmented_view(specs[i], &cfg.augmentation, seed, "pretrain-aug", 0, i);
        embed(&params, &x)
    });
    for (i, g) in initial.into_iter().enumerate() {
        bank.write(i, g, 0, 0);
    }

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut labels = None;
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        let (set, clusters) = assignment_phase(&bank, cfg.clusters, &opts, seed, epoch, &mut params)?;
        let order = epoch_order(n, seed, "pretrain-order", epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            iteration += 1;
            let views = par::map(batch, |&i| {
                augmented_view(specs[i], &cfg.augmentation, seed, "pretrain-aug", epoch, i)
            });
            let targets: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let out = pretrain_step(&mut params, &views, &targets, &opt)?;
            loss_sum += out.loss * batch.len() as f64;
            for (&i, g) in batch.iter().zip(out.embeddings) {
                bank.write(i, g, epoch, iteration);
            }
        }
        let record = PretrainEpoch {
            epoch,
            mean_loss: loss_sum / n as f64,
            kmeans_objective: clusters.objective,
            cluster_sizes: clusters.cluster_sizes(),
        };
        on_epoch(&record);
        epochs.push(record);
        labels = Some(set);
    }
    Ok(PretrainRun {
        params,
        epochs,
        bank,
        labels: labels.expect("at least one epoch"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::LogMelSpec;
    use crate::encoder::ScaleProfile;
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            profile: ScaleProfile::Desk,
            input_frames: 16,
            input_mels: 8,
            block_channels: [3, 4, 5, 6],
            proj_hidden: 6,
            proj_out: 4,
            prototypes: 3,
            classes: 2,
        }
    }

    fn inputs(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                (0..cfg.input_frames * cfg.input_mels)
                    .map(|_| r.random_range(-1.0..1.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn step_keeps_prototypes_and_reports_pre_step_embeddings() {
        let cfg = tiny();
        let mut p = init_encoder(&cfg, 1).unwrap();
        let x = inputs(&cfg, 5, 2);
        let before_prot = p.prot.clone();
        let expected: Vec<Vec<f64>> = x.iter().map(|v| embed(&p, v)).collect();
        let out = pretrain_step(&mut p, &x, &[0, 1, 2, 0, 1], &pretrain_optimizer(0.1)).unwrap();
        assert_eq!(p.prot, before_prot);
        assert_eq!(out.embeddings, expected);
        let after: Vec<Vec<f64>> = x.iter().map(|v| embed(&p, v)).collect();
        assert_ne!(after, expected);
    }

    #[test]
    fn optimizer_refuses_trainable_prototypes() {
        let cfg = tiny();
        let mut p = init_encoder(&cfg, 1).unwrap();
        let bad = Sgd::new(0.1, &[ParamGroup::Prototype]);
        assert!(pretrain_step(&mut p, &inputs(&cfg, 1, 0), &[0], &bad).is_err());
    }

    #[test]
    fn loss_below_ln2_when_embeddings_sit_on_their_centroids() {
        // Scale the projector so g = 10·e_k: the own-centroid logit is 10,
        // the others 0.
        let cfg = tiny();
        let mut p = init_encoder(&cfg, 0).unwrap();
        let mut c = Blob::zeros(3, 4);
        for k in 0..3 {
            c.row_mut(k)[k] = 1.0;
        }
        p.set_prototypes(&c).unwrap();
        p.proj.second.weight.fill(0.0);
        let bias = p.proj.second.bias.as_mut().unwrap();
        bias.fill(0.0);
        bias.data[1] = 10.0;
        let loss = pretrain_loss(&p, &inputs(&cfg, 2, 3), &[1, 1]);
        let want = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!(loss < std::f64::consts::LN_2);
    }

    #[test]
    fn assignment_phase_requires_full_bank_and_loads_centroids() {
        let cfg = tiny();
        let mut p = init_encoder(&cfg, 0).unwrap();
        let mut bank = EmbeddingMemoryBank::new(4, 4);
        let opts = KMeansOptions::default();
        assert!(matches!(
            assignment_phase(&bank, 3, &opts, 0, 1, &mut p),
            Err(Error::State(_))
        ));
        // Three distinct axes plus a duplicate.
        for (i, axis) in [0usize, 1, 2, 0].iter().enumerate() {
            let mut g = vec![0.0; 4];
            g[*axis] = 1.0;
            bank.write(i, g, 0, 0);
        }
        let (set, res) = assignment_phase(&bank, 3, &opts, 0, 1, &mut p).unwrap();
        for k in 0..3 {
            assert_eq!(p.prot.row(k), res.centroids.column(k));
        }
        assert_eq!(set.labels[0], set.labels[3]);
        let mut distinct = set.labels[..3].to_vec();
        distinct.sort();
        assert_eq!(distinct, vec![0, 1, 2]);
    }

    #[test]
    fn bank_of_k_distinct_vectors_gives_permutation() {
        let cfg = tiny();
        let mut p = init_encoder(&cfg, 0).unwrap();
        let mut bank = EmbeddingMemoryBank::new(3, 4);
        for i in 0..3 {
            let mut g = vec![0.1; 4];
            g[i] = 1.0;
            bank.write(i, normalize(g), 0, 0);
        }
        let (set, _) = assignment_phase(&bank, 3, &KMeansOptions::default(), 5, 1, &mut p).unwrap();
        let mut l = set.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
    }

    #[test]
    fn tiny_run_is_deterministic_and_fills_bank() {
        let cfg = EncoderConfig {
            input_frames: 16,
            input_mels: 8,
            ..tiny()
        };
        let mut items = Vec::new();
        let mut r = rng::rng(4);
        for i in 0..12 {
            let values = (0..20 * 8).map(|_| r.random_range(-3.0f32..3.0)).collect();
            items.push(crate::audio::DatasetItem {
                id: format!("x{i}"),
                spec: LogMelSpec::new(values, 20, 8, 0.01).unwrap(),
                label: None,
                split: crate::audio::Split::Train,
            });
        }
        let data = LabeledDataset::new(items, 2).unwrap();
        let pc = PretrainConfig {
            clusters: 3,
            batch: 5,
            epochs: 2,
            augmentation: AugmentationPolicy {
                crop_frames: 16,
                noise_std: 0.1,
                allow_time_shift: true,
            },
            ..PretrainConfig::desk()
        };
        let a = run_pretraining(&pc, &cfg, &data, 9, |_| {}).unwrap();
        let b = run_pretraining(&pc, &cfg, &data, 9, |_| {}).unwrap();
        assert_eq!(a.loss_history(), b.loss_history());
        assert_eq!(a.params, b.params);
        assert!(a.bank.is_complete());
        // Every slot was rewritten during the last epoch (3 iterations/epoch).
        for i in 0..12 {
            let s = a.bank.slot(i).unwrap();
            assert_eq!(s.epoch, 2);
            assert!((4..=6).contains(&s.iteration));
        }
        assert_eq!(a.labels.source_epoch, 2);

        let too_many = PretrainConfig { clusters: 13, ..pc.clone() };
        let cfg13 = EncoderConfig { prototypes: 13, ..cfg.clone() };
        assert!(matches!(run_pretraining(&too_many, &cfg13, &data, 9, |_| {}), Err(Error::Config(_))));
    }
}
