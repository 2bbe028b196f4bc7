//! Neural building blocks on top of [`crate::autodiff`].
//!
//! All sequence tensors are channels-last: `(batch, length, channels)`.

mod checkpoint;
mod coder;
mod gradcheck;
mod layers;
mod optim;
mod resnet;
mod transformer;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use coder::{Decoder, Encoder};
pub use gradcheck::{gradient_suite, GradCheckReport};
pub use layers::{Conv1d, Embedding, LayerNorm, Linear};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use resnet::{ResNetBlock, ResNetStack, RESNET_DEPTH, RESNET_DILATION_GROWTH};
pub use transformer::{transformer_forward, CausalSelfAttention, TransformerBlock};

use rand::Rng;

use crate::autodiff::{Param, Tensor};

/// Anything that owns named parameters.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Param)>;

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

/// Uniform in `±sqrt(1/fan_in)`.
pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Param {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Param::new(Tensor::uniform(shape, -bound, bound, rng))
}

#[cfg(test)]
mod tests;
