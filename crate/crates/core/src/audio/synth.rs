//! Labeled synthetic audio with known class structure.
//!
//! Class `c` of `t` owns three tones taken from a mel-spaced grid of `3t`
//! frequencies (grid slots `c`, `c + t`, `c + 2t`). Each item jitters the
//! tones by up to ±2 %, draws random amplitudes and phases, and adds a little
//! white noise, so classes differ in which mel bands carry energy.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{assign_splits_and_order, DatasetItem, LabeledDataset, Split};
use super::logmel::{hz_to_mel, mel_to_hz, FeatureConfig, LogMelExtractor};
use super::wav::AudioClip;
use crate::error::{Error, Result};
use crate::{par, rng};

pub const SYNTH_SECONDS: f64 = 1.0;
pub const SYNTH_TEST_FRACTION: f64 = 0.25;
const LOW_HZ: f64 = 150.0;
const HIGH_HZ: f64 = 6000.0;

/// Frequencies (Hz) of the three tones owned by `class` out of `classes`.
pub fn class_tones(class: usize, classes: usize) -> [f64; 3] {
    let slots = 3 * classes;
    let (lo, hi) = (hz_to_mel(LOW_HZ), hz_to_mel(HIGH_HZ));
    let at = |slot: usize| mel_to_hz(lo + (hi - lo) * slot as f64 / (slots - 1) as f64);
    [at(class), at(class + classes), at(class + 2 * classes)]
}

pub fn synth_clip(class: usize, classes: usize, index: usize, seed: u64) -> AudioClip {
    let mut rng = rng::rng(rng::derive_indexed(
        seed,
        "synth-item",
        &[class as u64, index as u64],
    ));
    let rate = 16_000u32;
    let len = (SYNTH_SECONDS * rate as f64) as usize;
    let tones: Vec<(f64, f64, f64)> = class_tones(class, classes)
        .iter()
        .map(|&f| {
            let freq = f * rng.random_range(0.98..1.02);
            let amp = rng.random_range(0.15..0.28);
            let phase = rng.random_range(0.0..2.0 * PI);
            (freq, amp, phase)
        })
        .collect();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / rate as f64;
            let tone: f64 = tones
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum();
            (tone + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioClip {
        id: format!("synth-c{class}-{index:04}"),
        samples,
        sample_rate: rate,
        label: Some(class),
    }
}

/// `classes × n_per_class` labeled items; a quarter of each class is test.
pub fn generate_synthetic_dataset(classes: usize, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {classes}")));
    }
    if n_per_class < 8 {
        return Err(Error::contract(format!(
            "need at least 8 items per class, got {n_per_class}"
        )));
    }
    let extractor = LogMelExtractor::new(FeatureConfig::default())?;
    let keys: Vec<(usize, usize)> = (0..classes)
        .flat_map(|c| (0..n_per_class).map(move |i| (c, i)))
        .collect();
    let items = par::map(&keys, |&(c, i)| -> Result<DatasetItem> {
        let clip = synth_clip(c, classes, i, seed);
        Ok(DatasetItem {
            spec: extractor.compute(&clip)?,
            id: clip.id,
            label: Some(c),
            split: Split::Train,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let items = assign_splits_and_order(items, classes, SYNTH_TEST_FRACTION, seed);
    LabeledDataset::new(items, classes)
}
