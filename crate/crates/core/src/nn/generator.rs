use rand::Rng;

use super::config::NetworkConfig;
use super::layers::{join, normal, Mapping, ModConv, ModConvSpec, Module};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};
use crate::wavelet::idwt_var;

/// Which static canvas a generator produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanvasKind {
    /// Square UV-space face canvas.
    Uv,
    /// Screen-space background canvas, larger than the frame.
    Screen,
}

/// Style generator: learned constant → upsampling modulated-conv blocks →
/// 1×1 projection to a wavelet pack → inverse wavelet transform.
#[derive(Clone, Debug)]
pub struct FeatureGenerator<T: Real> {
    pub kind: CanvasKind,
    pub mapping: Mapping<T>,
    pub constant: Param<T>,
    pub blocks: Vec<ModConv<T>>,
    pub to_features: ModConv<T>,
    canvas_size: usize,
}

/// Start resolution and block count for a wavelet-domain side `half`: halve
/// while even and the result stays ≥ 4.
fn schedule(half: usize) -> (usize, usize) {
    let (mut start, mut blocks) = (half, 0);
    while start % 2 == 0 && start / 2 >= 4 {
        start /= 2;
        blocks += 1;
    }
    (start, blocks)
}

impl<T: Real> FeatureGenerator<T> {
    pub fn new(cfg: &NetworkConfig, kind: CanvasKind, rng: &mut impl Rng) -> Self {
        let canvas_size = match kind {
            CanvasKind::Uv => cfg.uv_canvas_size,
            CanvasKind::Screen => cfg.bg_canvas_size(),
        };
        let (start, n_blocks) = schedule(canvas_size / 2);
        let c = cfg.generator_channels;
        let mapping = Mapping::new(cfg.latent_dim, cfg.style_dim, cfg.mapping_depth, rng);
        let constant = Param::new(normal(&[1, c, start, start], rng));
        let blocks = (0..n_blocks)
            .map(|_| ModConv::new(c, c, cfg.style_dim, ModConvSpec::style_block(), rng))
            .collect();
        let to_features = ModConv::new(c, 4 * cfg.feature_channels, cfg.style_dim, ModConvSpec::output(), rng);
        FeatureGenerator {
            kind,
            mapping,
            constant,
            blocks,
            to_features,
            canvas_size,
        }
    }

    pub fn canvas_size(&self) -> usize {
        self.canvas_size
    }

    pub fn feature_channels(&self) -> usize {
        self.to_features.out_channels() / 4
    }

    /// `z [N, latent_dim] → canvas [N, C_f, S, S]`.
    pub fn forward(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.mapping.latent_dim() {
            return Err(Error::ShapeMismatch {
                name: "generator latent".into(),
                expected: vec![zs.first().copied().unwrap_or(1), self.mapping.latent_dim()],
                found: zs.to_vec(),
            });
        }
        let w = self.mapping.forward(g, z);
        let mut x = g.param(&self.constant);
        if zs[0] > 1 {
            let mut shape = self.constant.value.shape().to_vec();
            shape[0] = zs[0];
            let batch = g.constant(Tensor::zeros(&shape));
            x = g.add(x, batch);
        }
        for block in &self.blocks {
            x = g.upsample2(x);
            x = block.forward(g, x, w, None);
        }
        let pack = self.to_features.forward(g, x, w, None);
        Ok(idwt_var(g, pack))
    }

    /// Evaluates the canvas for one latent without recording gradients.
    pub fn canvas(&self, z: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_vec(&[1, z.len()], z.iter().map(|&v| T::of(v)).collect()));
        let out = g.frozen(|g| self.forward(g, zv))?;
        Ok(g.value(out).clone())
    }
}

impl<T: Real> Module<T> for FeatureGenerator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.mapping.visit(&join(prefix, "mapping"), f);
        f(join(prefix, "constant"), &self.constant);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.to_features.visit(&join(prefix, "to_features"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.mapping.visit_mut(&join(prefix, "mapping"), f);
        f(join(prefix, "constant"), &mut self.constant);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.to_features.visit_mut(&join(prefix, "to_features"), f);
    }
}
