use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes and switches shared by every network of one avatar.
///
/// All spatial sizes are in output pixels. Networks run on wavelet packs, so
/// they see half of each size with four times the channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Full-frame resolution; also the padded input size of the foreground StyleUNet.
    pub frame_size: usize,
    /// Side of a random training sample box.
    pub sample_size: usize,
    /// Side of the UV-space face canvas and noise canvas.
    pub uv_canvas_size: usize,
    /// Channels of every feature map entering the compositor.
    pub feature_channels: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_depth: usize,
    pub generator_channels: usize,
    pub unet_channels: usize,
    /// Number of stride-2 encoder stages in each StyleUNet.
    pub unet_levels: usize,
    pub disc_channels: Vec<usize>,
    pub mask_hidden: usize,
    pub use_neural_texture: bool,
    pub use_noise: bool,
    pub use_temporal_code: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frame_size: 128,
            sample_size: 64,
            uv_canvas_size: 64,
            feature_channels: 16,
            latent_dim: 64,
            style_dim: 64,
            mapping_depth: 4,
            generator_channels: 24,
            unet_channels: 16,
            unet_levels: 3,
            disc_channels: vec![16, 32, 32, 32],
            mask_hidden: 8,
            use_neural_texture: true,
            use_noise: true,
            use_temporal_code: true,
        }
    }
}

impl NetworkConfig {
    /// A tiny configuration for gradient checks and fast unit tests.
    pub fn micro() -> Self {
        NetworkConfig {
            frame_size: 16,
            sample_size: 8,
            uv_canvas_size: 8,
            feature_channels: 2,
            latent_dim: 4,
            style_dim: 4,
            mapping_depth: 2,
            generator_channels: 3,
            unet_channels: 3,
            unet_levels: 1,
            disc_channels: vec![3, 4],
            mask_hidden: 2,
            use_neural_texture: true,
            use_noise: true,
            use_temporal_code: true,
        }
    }

    /// The smallest configuration the perceptual loss accepts (32² frames),
    /// for end-to-end tests and demos that should finish in seconds.
    pub fn small() -> Self {
        NetworkConfig {
            frame_size: 32,
            sample_size: 16,
            uv_canvas_size: 16,
            feature_channels: 4,
            latent_dim: 8,
            style_dim: 8,
            mapping_depth: 2,
            generator_channels: 6,
            unet_channels: 6,
            unet_levels: 2,
            disc_channels: vec![6, 8],
            mask_hidden: 4,
            ..NetworkConfig::default()
        }
    }

    /// Side of the background canvas: 1.25× the frame so every window fits.
    pub fn bg_canvas_size(&self) -> usize {
        self.frame_size * 5 / 4
    }

    /// Offset of the frame inside the background canvas.
    pub fn bg_margin(&self) -> usize {
        (self.bg_canvas_size() - self.frame_size) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("frame_size", self.frame_size),
            ("sample_size", self.sample_size),
            ("uv_canvas_size", self.uv_canvas_size),
        ] {
            if !v.is_power_of_two() || v < 4 {
                return bad(format!("{name} must be a power of two ≥ 4, got {v}"));
            }
        }
        if self.sample_size > self.frame_size {
            return bad(format!(
                "sample_size {} exceeds frame_size {}",
                self.sample_size, self.frame_size
            ));
        }
        let stride = 2usize << self.unet_levels;
        if !self.sample_size.is_multiple_of(stride) {
            return bad(format!(
                "sample_size {} must be divisible by {stride} for {} StyleUNet levels",
                self.sample_size, self.unet_levels
            ));
        }
        if !self.bg_canvas_size().is_multiple_of(4) {
            return bad(format!("background canvas {} must be divisible by 4", self.bg_canvas_size()));
        }
        for (name, v) in [
            ("feature_channels", self.feature_channels),
            ("latent_dim", self.latent_dim),
            ("style_dim", self.style_dim),
            ("mapping_depth", self.mapping_depth),
            ("generator_channels", self.generator_channels),
            ("unet_channels", self.unet_channels),
            ("mask_hidden", self.mask_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.latent_dim.is_multiple_of(2) {
            return bad(format!("latent_dim must be even, got {}", self.latent_dim));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return bad("disc_channels must be a non-empty list of positive counts".into());
        }
        Ok(())
    }
}
