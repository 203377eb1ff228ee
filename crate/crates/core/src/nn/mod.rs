//! Minimal dense layers with hand-written backward passes, in f64.

pub mod blob;
pub mod ops;

pub use blob::Blob;
