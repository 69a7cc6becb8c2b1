use rand::Rng;

use super::config::NetworkConfig;
use super::layers::{activate, join, Conv, Mapping, ModConv, ModConvSpec, Module};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};

/// Encoder–decoder translation network on wavelet packs.
///
/// The encoder is a 1×1 projection followed by stride-2 convolutions; the
/// decoder upsamples, concatenates the matching skip and applies a
/// modulated convolution with per-level noise. A final 1×1 modulated
/// convolution projects back to a pack with `4·out_channels` channels.
#[derive(Clone, Debug)]
pub struct StyleUNet<T: Real> {
    pub mapping: Mapping<T>,
    pub from_pack: Conv<T>,
    pub down: Vec<Conv<T>>,
    pub bottleneck: ModConv<T>,
    pub up: Vec<ModConv<T>>,
    pub to_pack: ModConv<T>,
}

impl<T: Real> StyleUNet<T> {
    pub fn new(cfg: &NetworkConfig, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.unet_channels;
        let noisy = ModConvSpec::style_block().with_noise(cfg.use_noise);
        StyleUNet {
            mapping: Mapping::new(cfg.latent_dim, cfg.style_dim, cfg.mapping_depth, rng),
            from_pack: Conv::new(4 * in_channels, c, 1, 1, rng),
            down: (0..cfg.unet_levels).map(|_| Conv::new(c, c, 3, 2, rng)).collect(),
            bottleneck: ModConv::new(c, c, cfg.style_dim, noisy, rng),
            up: (0..cfg.unet_levels).map(|_| ModConv::new(2 * c, c, cfg.style_dim, noisy, rng)).collect(),
            to_pack: ModConv::new(c, 4 * out_channels, cfg.style_dim, ModConvSpec::output(), rng),
        }
    }

    pub fn levels(&self) -> usize {
        self.down.len()
    }

    pub fn in_channels(&self) -> usize {
        self.from_pack.weight.value.shape()[1] / 4
    }

    pub fn out_channels(&self) -> usize {
        self.to_pack.out_channels() / 4
    }

    /// Style vector for a temporal code `z [N, latent_dim]`.
    pub fn style(&self, g: &mut Graph<T>, z: Var) -> Var {
        self.mapping.forward(g, z)
    }

    /// `pack [N, 4·Cin, h, w]` → `[N, 4·Cout, h, w]`.
    ///
    /// `noise` holds one `[N, 1, ·, ·]` map per decoder level, coarsest
    /// first (see [`noise_pyramid`]); pass an empty slice for no noise.
    pub fn forward(&self, g: &mut Graph<T>, pack: Var, style: Var, noise: &[Var]) -> Result<Var> {
        let shape = g.shape(pack).to_vec();
        let div = 1usize << self.levels();
        if shape.len() != 4 || shape[1] != 4 * self.in_channels() || !shape[2].is_multiple_of(div) || !shape[3].is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "StyleUNet expects [N, {}, h, w] with h, w divisible by {div}, got {shape:?}",
                4 * self.in_channels()
            )));
        }
        if !noise.is_empty() && noise.len() != self.levels() + 1 {
            return Err(Error::Shape(format!(
                "StyleUNet needs {} noise maps, got {}",
                self.levels() + 1,
                noise.len()
            )));
        }
        let noise_at = |i: usize| noise.get(i).copied();
        let x = self.from_pack.forward(g, pack);
        let mut skips = vec![activate(g, x)];
        for conv in &self.down {
            let prev = *skips.last().unwrap();
            let y = conv.forward(g, prev);
            skips.push(activate(g, y));
        }
        let mut h = self.bottleneck.forward(g, skips.pop().unwrap(), style, noise_at(0));
        for (i, block) in self.up.iter().enumerate() {
            h = g.upsample2(h);
            let skip = skips.pop().unwrap();
            h = g.concat_channels(&[h, skip]);
            h = block.forward(g, h, style, noise_at(i + 1));
        }
        Ok(self.to_pack.forward(g, h, style, None))
    }
}

/// Pools a pixel-resolution noise map `[N, 1, H, W]` down to the decoder
/// resolutions of a StyleUNet with `levels` stages, coarsest first. Every
/// 2×2 average is rescaled by 2 so each level keeps unit variance.
pub fn noise_pyramid<T: Real>(noise: &Tensor<T>, levels: usize) -> Vec<Tensor<T>> {
    let two = T::of(2.0);
    let mut cur = crate::tensor::avgpool2_tensor(noise).map(|v| v * two);
    let mut out = vec![cur.clone()];
    for _ in 0..levels {
        cur = crate::tensor::avgpool2_tensor(&cur).map(|v| v * two);
        out.push(cur.clone());
    }
    out.reverse();
    out
}

impl<T: Real> Module<T> for StyleUNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.mapping.visit(&join(prefix, "mapping"), f);
        self.from_pack.visit(&join(prefix, "from_pack"), f);
        for (i, c) in self.down.iter().enumerate() {
            c.visit(&join(prefix, &format!("down{i}")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (i, c) in self.up.iter().enumerate() {
            c.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.to_pack.visit(&join(prefix, "to_pack"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.mapping.visit_mut(&join(prefix, "mapping"), f);
        self.from_pack.visit_mut(&join(prefix, "from_pack"), f);
        for (i, c) in self.down.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (i, c) in self.up.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        self.to_pack.visit_mut(&join(prefix, "to_pack"), f);
    }
}
