//! Experiment configuration: profile defaults overlaid with a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::checkpoint::sha256_hex;
use crate::distill::DistillConfig;
use crate::encoder::{EncoderConfig, ScaleProfile};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::probe::ProbeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated tone classes.
    Synthetic { classes: usize, items_per_class: usize },
    /// A feature cache directory, or `<class>/*.wav` subdirectories.
    Directory { path: PathBuf, test_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: ScaleProfile,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub features: FeatureConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn defaults(profile: ScaleProfile) -> Self {
        let (pretrain, distill) = match profile {
            ScaleProfile::Paper => (PretrainConfig::paper(), DistillConfig::paper()),
            ScaleProfile::Desk => (PretrainConfig::desk(), DistillConfig::desk()),
        };
        ExperimentConfig {
            profile,
            seed: 0,
            dataset: DatasetSource::Synthetic {
                classes: 4,
                items_per_class: 64,
            },
            features: FeatureConfig::default(),
            pretrain,
            distill,
            probe: ProbeConfig::default(),
        }
    }

    /// Encoder shape for `classes` target classes.
    pub fn encoder(&self, classes: usize) -> EncoderConfig {
        EncoderConfig {
            prototypes: self.pretrain.clusters,
            input_mels: self.features.mel_bins,
            ..EncoderConfig::for_profile(self.profile, classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.pretrain.validate()?;
        self.distill.validate()?;
        self.probe.validate()?;
        let frames = EncoderConfig::for_profile(self.profile, 2).input_frames;
        if self.pretrain.augmentation.crop_frames != frames {
            return Err(Error::Config(format!(
                "pretrain crop_frames {} must equal the encoder input of {frames} frames",
                self.pretrain.augmentation.crop_frames
            )));
        }
        match &self.dataset {
            DatasetSource::Synthetic { classes, items_per_class } if *classes < 2 || *items_per_class < 8 => Err(
                Error::Config("synthetic data needs at least 2 classes and 8 items per class".into()),
            ),
            DatasetSource::Directory { test_fraction, .. } if !(0.0..1.0).contains(test_fraction) => {
                Err(Error::Config(format!("test_fraction {test_fraction} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            // The dataset table switches variants, so it is replaced whole.
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "dataset" => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Resolve a config from TOML text. `profile` and `seed` override the file.
pub fn resolve_config(text: &str, profile: Option<ScaleProfile>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let profile = match (profile, user.get("profile")) {
        (Some(p), _) => p,
        (None, Some(toml::Value::String(s))) => s.parse()?,
        (None, Some(other)) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        (None, None) => ScaleProfile::Desk,
    };
    let mut merged = match toml::Value::try_from(ExperimentConfig::defaults(profile)) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("defaults serialize to a table"),
    };
    merge(&mut merged, user);
    merged.insert("profile".into(), profile.as_str().into());
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} too large")))?;
        merged.insert("seed".into(), seed.into());
    }
    let cfg: ExperimentConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>, profile: Option<ScaleProfile>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    resolve_config(&text, profile, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_profile_defaults() {
        let c = resolve_config("", Some(ScaleProfile::Paper), None).unwrap();
        assert_eq!(c.pretrain.clusters, 512);
        assert_eq!((c.distill.alpha, c.distill.beta), (0.7, 0.003));
        assert_eq!((c.pretrain.lr, c.distill.lr, c.probe.lr), (0.005, 0.007, 0.001));
        let d = resolve_config("", None, None).unwrap();
        assert_eq!(d.profile, ScaleProfile::Desk);
        assert_eq!((d.pretrain.clusters, d.pretrain.epochs, d.distill.epochs), (8, 5, 10));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = resolve_config("[distill]\nalpha = 1.0\n", None, Some(3)).unwrap();
        assert_eq!(c.distill.alpha, 1.0);
        assert_eq!(c.distill.beta, 0.003);
        assert_eq!(c.seed, 3);
        assert!(matches!(resolve_config("[distill]\nalpha = 1.5\n", None, None), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        assert!(matches!(resolve_config("[distill]\ngamma = 1.0\n", None, None), Err(Error::Config(_))));
        assert!(matches!(resolve_config("bogus = 1\n", None, None), Err(Error::Config(_))));
        assert!(matches!(resolve_config("[probe]\nepochs = \"ten\"\n", None, None), Err(Error::Config(_))));
        assert!(matches!(
            resolve_config("[dataset]\nkind = \"synthetic\"\nclasses = 3\nitems_per_class = 16\nextra = 1\n", None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_table_switches_variant() {
        let c = resolve_config("[dataset]\nkind = \"directory\"\npath = \"/data\"\ntest_fraction = 0.2\n", None, None)
            .unwrap();
        assert_eq!(
            c.dataset,
            DatasetSource::Directory {
                path: "/data".into(),
                test_fraction: 0.2
            }
        );
    }

    #[test]
    fn echo_resolves_to_itself() {
        let c = resolve_config("seed = 11\n[pretrain]\nepochs = 2\n", None, None).unwrap();
        assert_eq!(resolve_config(&c.to_toml(), None, None).unwrap(), c);
    }
}
