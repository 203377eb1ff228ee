use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};

/// Floor added to mel energies before the log, so silence stays finite.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples.
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            mel_bins: 64,
            f_min: 60.0,
            f_max: 7800.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.mel_bins == 0 {
            return Err(Error::Config("window, hop and mel_bins must be positive".into()));
        }
        if self.n_fft < self.window {
            return Err(Error::Config(format!(
                "n_fft {} shorter than window {}",
                self.n_fft, self.window
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] must lie inside [0, {nyquist}]",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    /// `floor((len - window) / hop) + 1`, after padding short clips to one window.
    pub fn frame_count(&self, len: usize) -> usize {
        let len = len.max(self.window);
        (len - self.window) / self.hop + 1
    }
}

/// Row-major `[frames × mel_bins]` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpec {
    pub values: Vec<f32>,
    pub frames: usize,
    pub mel_bins: usize,
    /// Seconds between frames.
    pub frame_hop: f64,
}

impl LogMelSpec {
    pub fn new(values: Vec<f32>, frames: usize, mel_bins: usize, frame_hop: f64) -> Result<Self> {
        if values.len() != frames * mel_bins {
            return Err(Error::contract(format!(
                "log-mel buffer has {} values, expected {frames}×{mel_bins}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("log-mel values must be finite"));
        }
        Ok(LogMelSpec {
            values,
            frames,
            mel_bins,
            frame_hop,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.mel_bins..(t + 1) * self.mel_bins]
    }

    pub fn at(&self, t: usize, m: usize) -> f32 {
        self.values[t * self.mel_bins + m]
    }

    /// Mean over frames, one value per mel bin.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.mel_bins];
        for t in 0..self.frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        acc.iter().map(|a| a / self.frames as f64).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters, `[mel_bins × (n_fft/2 + 1)]`, peak height 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let n_freqs = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.mel_bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freqs)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Reusable log-mel front end; cheap to share across threads.
#[derive(Clone)]
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // Sparse filter rows: (first nonzero bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filters = mel_filterbank(&cfg)
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last.max(first)].to_vec())
            })
            .collect();
        Ok(LogMelExtractor {
            window: hann(cfg.window),
            cfg,
            fft,
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<LogMelSpec> {
        clip.validate()?;
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::contract(format!(
                "clip `{}` at {} Hz, front end expects {} Hz",
                clip.id, clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let cfg = &self.cfg;
        let mut samples: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
        if samples.len() < cfg.window {
            samples.resize(cfg.window, 0.0);
        }
        let frames = cfg.frame_count(samples.len());
        let n_freqs = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_freqs];
        let mut values = Vec::with_capacity(frames * cfg.mel_bins);
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < cfg.window {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(w, p)| w * p)
                    .sum();
                values.push((e + LOG_FLOOR).ln() as f32);
            }
        }
        LogMelSpec::new(
            values,
            frames,
            cfg.mel_bins,
            cfg.hop as f64 / cfg.sample_rate as f64,
        )
    }
}

/// One-shot convenience wrapper around [`LogMelExtractor`].
pub fn compute_logmel(clip: &AudioClip, cfg: &FeatureConfig) -> Result<LogMelSpec> {
    LogMelExtractor::new(cfg.clone())?.compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        AudioClip::new("sine", samples, 16_000).unwrap()
    }

    fn argmax(v: &[f32]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn silence_is_log_floor() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new("s", vec![0.0; 16_000], 16_000).unwrap();
        let spec = compute_logmel(&clip, &cfg).unwrap();
        assert_eq!(spec.frames, (16_000 - 400) / 160 + 1);
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(spec.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_clip_pads_to_one_frame() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new("s", vec![0.1; 100], 16_000).unwrap();
        let spec = compute_logmel(&clip, &cfg).unwrap();
        assert_eq!(spec.frames, 1);
        assert!(spec.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sine_peak_matches_direct_dft_oracle() {
        let cfg = FeatureConfig::default();
        let clip = sine(440.0, 0.5, 8000);
        let spec = compute_logmel(&clip, &cfg).unwrap();
        let fb = mel_filterbank(&cfg);
        let win = hann(cfg.window);
        let peaks: Vec<usize> = (0..spec.frames).map(|t| argmax(spec.frame(t))).collect();
        assert!(peaks.iter().all(|&p| p == peaks[0]), "{peaks:?}");

        // Oracle: O(n²) DFT of frame 3, then the filterbank by hand.
        let start = 3 * cfg.hop;
        let mut power = vec![0.0; cfg.n_fft / 2 + 1];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, w) in win.iter().enumerate() {
                let x = clip.samples[start + i] as f64 * w;
                let ang = 2.0 * PI * (k * i) as f64 / cfg.n_fft as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            *p = re * re + im * im;
        }
        let mel: Vec<f32> = fb
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                (e + LOG_FLOOR).ln() as f32
            })
            .collect();
        assert_eq!(argmax(&mel), peaks[0]);
        for (a, b) in mel.iter().zip(spec.frame(3)) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_at_most_log4() {
        let cfg = FeatureConfig::default();
        let quiet = compute_logmel(&sine(1000.0, 0.2, 6000), &cfg).unwrap();
        let loud = compute_logmel(&sine(1000.0, 0.4, 6000), &cfg).unwrap();
        let bound = 4f32.ln() + 1e-4;
        for (q, l) in quiet.values.iter().zip(&loud.values) {
            assert!(l - q <= bound, "{q} -> {l}");
            assert!(l >= q);
        }
        for t in 0..quiet.frames {
            assert_eq!(argmax(quiet.frame(t)), argmax(loud.frame(t)));
        }
    }

    #[test]
    fn filterbank_covers_band() {
        let cfg = FeatureConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.len(), 64);
        assert!(fb.iter().all(|row| row.iter().any(|&w| w > 0.0)));
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_rate_mismatch_and_bad_config() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new("x", vec![0.0; 800], 8000).unwrap();
        assert!(compute_logmel(&clip, &cfg).is_err());
        let bad = FeatureConfig {
            n_fft: 256,
            ..FeatureConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
