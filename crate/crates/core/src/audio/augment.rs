use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::logmel::{LogMelSpec, LOG_FLOOR};
use crate::error::{Error, Result};

/// Random temporal crop plus optional Gaussian noise on log-mel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop_frames: usize,
    pub noise_std: f64,
    pub allow_time_shift: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_frames: 96,
            noise_std: 0.1,
            allow_time_shift: true,
        }
    }
}

impl AugmentationPolicy {
    /// Deterministic center view used for feature extraction at eval time.
    pub fn eval(crop_frames: usize) -> Self {
        AugmentationPolicy {
            crop_frames,
            noise_std: 0.0,
            allow_time_shift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_frames == 0 {
            return Err(Error::Config("crop_frames must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std {} invalid", self.noise_std)));
        }
        Ok(())
    }
}

/// Extend `spec` with silent frames up to `frames`.
pub fn pad_frames(spec: &LogMelSpec, frames: usize) -> LogMelSpec {
    if spec.frames >= frames {
        return spec.clone();
    }
    let mut values = spec.values.clone();
    values.resize(frames * spec.mel_bins, LOG_FLOOR.ln() as f32);
    LogMelSpec {
        values,
        frames,
        mel_bins: spec.mel_bins,
        frame_hop: spec.frame_hop,
    }
}

/// Produce one `crop_frames`-long view of `spec`.
///
/// With time shift disabled the crop is centered. The rng is consumed in a
/// fixed pattern (offset, then noise) so equal seeds give equal views.
pub fn sample_and_augment<R: Rng + ?Sized>(
    spec: &LogMelSpec,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> LogMelSpec {
    let padded = pad_frames(spec, policy.crop_frames);
    let slack = padded.frames - policy.crop_frames;
    let offset = if policy.allow_time_shift && slack > 0 {
        rng.random_range(0..=slack)
    } else {
        slack / 2
    };
    let m = padded.mel_bins;
    let mut values = padded.values[offset * m..(offset + policy.crop_frames) * m].to_vec();
    if policy.noise_std > 0.0 {
        let normal = Normal::new(0.0, policy.noise_std).expect("validated noise_std");
        for v in &mut values {
            *v += normal.sample(rng) as f32;
        }
    }
    LogMelSpec {
        values,
        frames: policy.crop_frames,
        mel_bins: m,
        frame_hop: padded.frame_hop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(frames: usize, bins: usize) -> LogMelSpec {
        let values = (0..frames * bins).map(|i| (i as f32) * 0.01 - 3.0).collect();
        LogMelSpec::new(values, frames, bins, 0.01).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let spec = ramp(96, 64);
        let policy = AugmentationPolicy {
            crop_frames: 96,
            noise_std: 0.0,
            allow_time_shift: false,
        };
        let out = sample_and_augment(&spec, &policy, &mut rng::rng(1));
        assert_eq!(out, spec);
    }

    #[test]
    fn same_seed_same_view() {
        let spec = ramp(140, 16);
        let policy = AugmentationPolicy {
            crop_frames: 96,
            noise_std: 0.3,
            allow_time_shift: true,
        };
        let a = sample_and_augment(&spec, &policy, &mut rng::rng(9));
        let b = sample_and_augment(&spec, &policy, &mut rng::rng(9));
        assert_eq!(a, b);
        assert_eq!(a.frames, 96);
    }

    #[test]
    fn noise_std_matches_policy() {
        let spec = ramp(200, 64);
        let clean_policy = AugmentationPolicy::eval(200);
        let noisy_policy = AugmentationPolicy {
            crop_frames: 200,
            noise_std: 0.1,
            allow_time_shift: false,
        };
        let clean = sample_and_augment(&spec, &clean_policy, &mut rng::rng(3));
        let noisy = sample_and_augment(&spec, &noisy_policy, &mut rng::rng(3));
        let diffs: Vec<f64> = clean
            .values
            .iter()
            .zip(&noisy.values)
            .map(|(a, b)| (*b - *a) as f64)
            .collect();
        assert!(diffs.len() >= 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((0.08..=0.12).contains(&sd), "sd {sd}");
    }

    #[test]
    fn short_specs_are_padded_with_silence() {
        let spec = ramp(10, 4);
        let out = sample_and_augment(&spec, &AugmentationPolicy::eval(96), &mut rng::rng(0));
        assert_eq!(out.frames, 96);
        assert!(out.values.iter().all(|v| v.is_finite()));
        let padded = pad_frames(&spec, 96);
        assert_eq!(padded.at(95, 3), LOG_FLOOR.ln() as f32);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            noise_std: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
