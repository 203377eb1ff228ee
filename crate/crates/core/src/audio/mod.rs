//! Audio front end: WAV input, log-mel features, augmented views and
//! labeled datasets.

pub mod augment;
pub mod container;
pub mod dataset;
pub mod logmel;
pub mod synth;
pub mod wav;

pub use augment::{sample_and_augment, AugmentationPolicy};
pub use dataset::{DatasetItem, LabeledDataset, Split};
pub use logmel::{compute_logmel, FeatureConfig, LogMelExtractor, LogMelSpec};
pub use synth::generate_synthetic_dataset;
pub use wav::{load_audio, AudioClip};
