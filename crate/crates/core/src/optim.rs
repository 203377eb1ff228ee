use crate::encoder::{EncoderParams, ParamGroup};

/// Plain SGD with a fixed learning rate over a whitelist of groups.
///
/// Blobs outside `trainable` are never written, so frozen heads stay
/// bit-identical across steps.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub trainable: Vec<ParamGroup>,
}

impl Sgd {
    pub fn new(lr: f64, trainable: &[ParamGroup]) -> Self {
        Sgd {
            lr,
            trainable: trainable.to_vec(),
        }
    }

    pub fn step(&self, params: &mut EncoderParams, grads: &EncoderParams) {
        let mut grad_blobs = Vec::new();
        grads.visit(|name, b| grad_blobs.push((name.to_string(), b)));
        let mut grad_blobs = grad_blobs.into_iter();
        params.visit_mut(|name, blob| {
            let (gname, g) = grad_blobs.next().expect("gradient layout matches params");
            debug_assert_eq!(name, gname);
            if self.trainable.contains(&ParamGroup::of(name)) {
                blob.axpy(-self.lr, g);
            }
        });
    }
}
