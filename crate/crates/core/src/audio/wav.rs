use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// One mono clip with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: Option<usize>,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let clip = AudioClip {
            id: id.into(),
            samples,
            sample_rate,
            label: None,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::contract(format!("clip `{}` has no samples", self.id)));
        }
        if self.sample_rate == 0 {
            return Err(Error::contract(format!("clip `{}` has zero sample rate", self.id)));
        }
        if let Some(bad) = self
            .samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::contract(format!(
                "clip `{}` sample {bad} = {} outside [-1, 1]",
                self.id, self.samples[bad]
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a 16-bit PCM WAV, down-mix to mono and resample to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {:?} at {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if raw.is_empty() {
        return Err(Error::Format(format!("{}: no samples", path.display())));
    }
    let mono: Vec<f32> = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| pcm_to_float(s)).sum();
            sum / frame.len() as f32
        })
        .collect();
    let samples = if spec.sample_rate == target_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, target_rate)
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioClip::new(id, samples, target_rate)
}

/// Write a clip as mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

fn pcm_to_float(s: i16) -> f32 {
    // -32768 maps to exactly -1; positive full scale lands at 1 - 1/32768.
    s as f32 / 32768.0
}

const SINC_HALF_WIDTH: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(len * to / from)`; the cutoff tracks the lower of
/// the two Nyquist rates.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (input.len() as f64 * ratio).round().max(1.0) as usize;
    let cutoff = ratio.min(1.0);
    let reach = SINC_HALF_WIDTH / cutoff;
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - reach).ceil().max(0.0) as usize;
            let hi = ((t + reach).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let tau = t - k as f64;
                acc += x as f64 * kernel(tau, cutoff, reach);
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

fn kernel(tau: f64, cutoff: f64, reach: f64) -> f64 {
    if tau.abs() >= reach {
        return 0.0;
    }
    let x = cutoff * tau;
    let sinc = if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    };
    let window = 0.5 * (1.0 + (PI * tau / reach).cos());
    cutoff * sinc * window
}
