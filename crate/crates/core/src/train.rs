//! Shared batch machinery for the training stages.

use rand::seq::SliceRandom;

use crate::audio::{sample_and_augment, AugmentationPolicy, LabeledDataset, LogMelSpec};
use crate::encoder::{input_map, EncoderParams};
use crate::{par, rng};

/// Items per gradient chunk. Chunks may run concurrently; their gradients
/// are summed in chunk order, so this constant fixes the summation order.
pub const GRAD_CHUNK: usize = 4;

/// Run `per_item` over `items` with a gradient buffer per chunk and fold
/// the buffers in order. Returns per-item outputs and the summed gradient.
pub fn accumulate<T, S, F>(params: &EncoderParams, items: &[T], per_item: F) -> (Vec<S>, EncoderParams)
where
    T: Sync,
    S: Send,
    F: Fn(&T, &mut EncoderParams) -> S + Sync + Send,
{
    let chunks = par::map_chunks(items, GRAD_CHUNK, |chunk| {
        let mut grads = params.zeros_like();
        let outs: Vec<S> = chunk.iter().map(|it| per_item(it, &mut grads)).collect();
        (outs, grads)
    });
    let mut total = params.zeros_like();
    let mut outputs = Vec::with_capacity(items.len());
    for (outs, grads) in chunks {
        total.axpy(1.0, &grads);
        outputs.extend(outs);
    }
    (outputs, total)
}

/// Item order for one epoch.
pub fn epoch_order(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive_indexed(seed, stage, &[epoch as u64])));
    order
}

/// Augmented view of item `index`, seeded by (stream, epoch, index) so views
/// can be produced in any order.
pub fn augmented_view(
    spec: &LogMelSpec,
    policy: &AugmentationPolicy,
    seed: u64,
    stream: &str,
    epoch: usize,
    index: usize,
) -> Vec<f64> {
    let mut r = rng::rng(rng::derive_indexed(seed, stream, &[epoch as u64, index as u64]));
    input_map(&sample_and_augment(spec, policy, &mut r))
}

/// Deterministic center crops of every item, as encoder input maps.
pub fn eval_views(data: &LabeledDataset, crop_frames: usize) -> Vec<Vec<f64>> {
    let policy = AugmentationPolicy::eval(crop_frames);
    par::map(&data.items, |it| {
        // The eval policy draws nothing from the rng.
        input_map(&sample_and_augment(&it.spec, &policy, &mut rng::rng(0)))
    })
}
