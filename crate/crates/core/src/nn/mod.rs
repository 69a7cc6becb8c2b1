//! Style-based networks: mapping MLP, modulated convolution, the two static
//! feature generators, the StyleUNets and the discriminator.
//!
//! Everything is generic over the float type so gradient checks can run the
//! training code in `f64`.

mod config;
mod disc;
mod embed;
mod generator;
mod layers;
mod noise;
mod unet;
pub mod uv;

pub use config::NetworkConfig;
pub use disc::Discriminator;
pub use embed::positional_embed;
pub use generator::{CanvasKind, FeatureGenerator};
pub(crate) use layers::join as join_name;
pub use layers::{activate, Conv, Linear, Mapping, ModConv, ModConvSpec, Module};
pub(crate) use layers::normal as normal_tensor;
pub use noise::map_noise_via_uv;
pub use unet::{noise_pyramid, StyleUNet};

use crate::tensor::{Real, Tensor};

/// Row batch `[N, dims]` of embedded scalars.
pub fn embed_batch<T: Real>(values: &[f64], dims: usize) -> crate::Result<Tensor<T>> {
    let mut data = Vec::with_capacity(values.len() * dims);
    for &v in values {
        data.extend(positional_embed(v, dims)?.into_iter().map(T::of));
    }
    Ok(Tensor::from_vec(&[values.len(), dims], data))
}
