use rand::Rng;

use super::config::NetworkConfig;
use super::layers::{activate, join, Conv, Linear, Module};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Real, Var};

/// Convolutional critic over an image pack concatenated with the matching
/// texture-rendering pack. Global average pooling makes it accept both
/// sample-box crops and full frames.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    pub from_pack: Conv<T>,
    pub blocks: Vec<Conv<T>>,
    pub head: Linear<T>,
}

impl<T: Real> Discriminator<T> {
    /// `image_channels` per pack before wavelet packing (3 for RGB).
    pub fn new(cfg: &NetworkConfig, image_channels: usize, rng: &mut impl Rng) -> Self {
        let ch = &cfg.disc_channels;
        Discriminator {
            from_pack: Conv::new(8 * image_channels, ch[0], 1, 1, rng),
            blocks: ch.windows(2).map(|w| Conv::new(w[0], w[1], 3, 2, rng)).collect(),
            head: Linear::new(*ch.last().unwrap(), 1, 0.0, rng),
        }
    }

    /// Scores `[N, 1]` for packs `[N, 4C, h, w]` each.
    pub fn forward(&self, g: &mut Graph<T>, image_pack: Var, texture_pack: Var) -> Result<Var> {
        let (a, b) = (g.shape(image_pack).to_vec(), g.shape(texture_pack).to_vec());
        if a != b || a.len() != 4 {
            return Err(Error::Shape(format!(
                "discriminator packs must share a 4-d shape, got {a:?} and {b:?}"
            )));
        }
        if 2 * a[1] != self.from_pack.weight.value.shape()[1] {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels per pack, got {}",
                self.from_pack.weight.value.shape()[1] / 2,
                a[1]
            )));
        }
        let x = g.concat_channels(&[image_pack, texture_pack]);
        let x = self.from_pack.forward(g, x);
        let mut x = activate(g, x);
        for conv in &self.blocks {
            x = conv.forward(g, x);
            x = activate(g, x);
        }
        let (n, c, h, w) = g.value(x).dims4();
        let pooled = g.sum_trailing(x, 2);
        let pooled = g.scale(pooled, T::of(1.0 / (h * w) as f64));
        let pooled = g.reshape(pooled, &[n, c]);
        Ok(self.head.forward(g, pooled))
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.from_pack.visit(&join(prefix, "from_pack"), f);
        for (i, c) in self.blocks.iter().enumerate() {
            c.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.from_pack.visit_mut(&join(prefix, "from_pack"), f);
        for (i, c) in self.blocks.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
