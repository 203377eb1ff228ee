//! Clustering-guided self-supervised audio representation learning.
//!
//! Three stages share one convolutional encoder family:
//!
//! 1. [`pretrain`]: an encoder learns to predict its own spherical k-means
//!    pseudo-labels, with the prototype head overwritten by the centroids
//!    once per epoch.
//! 2. [`distill`]: a fresh encoder is trained on the target data against
//!    pseudo-labels from the pre-trained one, with its first three blocks
//!    distilled from the fourth.
//! 3. [`probe`]: a linear classifier on the frozen student features.
//!
//! [`experiment`] wires the stages into a reproducible command-line pipeline.

pub mod audio;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pretrain;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
