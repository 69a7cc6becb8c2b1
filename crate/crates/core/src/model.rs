//! The full set of avatar networks plus fixed noise buffers, and their
//! serialization into a container.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::composer::{compose_frame, refine, CanvasSpace, FeatureCanvas, FrameInputs, MaskHead, StaticCanvases};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{positional_embed, CanvasKind, Discriminator, FeatureGenerator, Module, NetworkConfig, StyleUNet};
use crate::tensor::{Graph, Param, Real, Tensor};
use crate::windowing::SampleWindow;

/// Every trainable network of one avatar model.
#[derive(Clone, Debug)]
pub struct AvatarNetworks<T: Real> {
    pub config: NetworkConfig,
    pub face_gen: FeatureGenerator<T>,
    pub bg_gen: FeatureGenerator<T>,
    pub fg_unet: StyleUNet<T>,
    pub refine_unet: StyleUNet<T>,
    pub mask_head: MaskHead<T>,
    pub disc: Discriminator<T>,
    /// `[1, 1, T, T]` UV-space noise, fixed at construction.
    pub uv_noise: Tensor<T>,
    /// `[1, 1, B, B]` background-canvas noise, fixed at construction.
    pub bg_noise: Tensor<T>,
}

/// Prefixes of the generator-side networks, in optimizer order.
pub const GENERATOR_SIDE: [&str; 5] = ["face_gen", "bg_gen", "fg_unet", "refine_unet", "mask_head"];
pub const DISCRIMINATOR: &str = "disc";

impl<T: Real> AvatarNetworks<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_channels;
        let face_gen = FeatureGenerator::new(config, CanvasKind::Uv, &mut rng);
        let bg_gen = FeatureGenerator::new(config, CanvasKind::Screen, &mut rng);
        let fg_unet = StyleUNet::new(config, 6, c, &mut rng);
        let refine_unet = StyleUNet::new(config, c, 3, &mut rng);
        let mask_head = MaskHead::new(c, config.mask_hidden, &mut rng);
        let disc = Discriminator::new(config, 3, &mut rng);
        let (t, b) = (config.uv_canvas_size, config.bg_canvas_size());
        let uv_noise = crate::nn::normal_tensor(&[1, 1, t, t], &mut rng);
        let bg_noise = crate::nn::normal_tensor(&[1, 1, b, b], &mut rng);
        Ok(AvatarNetworks {
            config: config.clone(),
            face_gen,
            bg_gen,
            fg_unet,
            refine_unet,
            mask_head,
            disc,
            uv_noise,
            bg_noise,
        })
    }

    /// Identity code for video `index`.
    pub fn identity_code(&self, index: usize) -> Vec<f64> {
        positional_embed(index as f64, self.config.latent_dim).expect("latent_dim validated even")
    }

    /// Temporal code for a timestamp in `[0, 1]`; zeros when the temporal
    /// code is disabled.
    pub fn temporal_code(&self, t: f64) -> Vec<f64> {
        if self.config.use_temporal_code {
            positional_embed(t, self.config.latent_dim).expect("latent_dim validated even")
        } else {
            vec![0.0; self.config.latent_dim]
        }
    }

    /// Evaluates both generators once for `z_id`.
    pub fn static_canvases(&self, z_id: &[f64]) -> Result<StaticCanvases<T>> {
        Ok(StaticCanvases {
            face: FeatureCanvas {
                data: self.face_gen.canvas(z_id)?,
                space: CanvasSpace::Uv,
                margin: 0,
            },
            background: FeatureCanvas {
                data: self.bg_gen.canvas(z_id)?,
                space: CanvasSpace::Screen,
                margin: self.config.bg_margin(),
            },
        })
    }

    /// Renders one full frame from its conditioning images `[3, F, F]`.
    /// With `canvases` the generators are skipped; without, both run for
    /// `z_id`. Returns the image `[3, F, F]` and the predicted mask `[1, F, F]`.
    pub fn infer(
        &self,
        z_id: &[f64],
        canvases: Option<&StaticCanvases<T>>,
        uv: &Tensor<T>,
        texture: &Tensor<T>,
        z_tmp: &[f64],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let f = self.config.frame_size;
        if uv.len() != 3 * f * f || texture.len() != 3 * f * f {
            return Err(Error::ShapeMismatch {
                name: "conditioning image".into(),
                expected: vec![3, f, f],
                found: uv.shape().to_vec(),
            });
        }
        let inputs = FrameInputs {
            uv: uv.clone().reshape(&[1, 3, f, f]),
            texture: texture.clone().reshape(&[1, 3, f, f]),
            window: SampleWindow::full((f, f)),
            z_id: Tensor::from_vec(&[1, z_id.len()], z_id.iter().map(|&v| T::of(v)).collect()),
            z_tmp: Tensor::from_vec(&[1, z_tmp.len()], z_tmp.iter().map(|&v| T::of(v)).collect()),
        };
        let mut g = Graph::new();
        let (image, mask) = g.frozen(|g| -> Result<_> {
            let composed = compose_frame(g, self, &inputs, canvases)?;
            Ok((refine(g, self, &inputs, &composed)?, composed.mask))
        })?;
        Ok((g.value(image).clone().reshape(&[3, f, f]), g.value(mask).clone().reshape(&[1, f, f])))
    }

    /// All parameters with fully qualified names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, p| out.push((n, p)));
        out
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.face_gen.visit("face_gen", f);
        self.bg_gen.visit("bg_gen", f);
        self.fg_unet.visit("fg_unet", f);
        self.refine_unet.visit("refine_unet", f);
        self.mask_head.visit("mask_head", f);
        self.disc.visit(DISCRIMINATOR, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.face_gen.visit_mut("face_gen", f);
        self.bg_gen.visit_mut("bg_gen", f);
        self.fg_unet.visit_mut("fg_unet", f);
        self.refine_unet.visit_mut("refine_unet", f);
        self.mask_head.visit_mut("mask_head", f);
        self.disc.visit_mut(DISCRIMINATOR, f);
    }

    /// Stores every parameter as `param.<name>` plus the noise buffers.
    pub fn write_to(&self, c: &mut Container) {
        for (name, p) in self.named_params() {
            c.insert_tensor(&format!("param.{name}"), &p.value.cast::<f32>());
        }
        c.insert_tensor("buffer.uv_noise", &self.uv_noise.cast::<f32>());
        c.insert_tensor("buffer.bg_noise", &self.bg_noise.cast::<f32>());
    }

    /// Rebuilds networks for `config` and fills them from a container
    /// written by [`AvatarNetworks::write_to`].
    pub fn read_from(config: &NetworkConfig, c: &Container) -> Result<Self> {
        let mut nets = AvatarNetworks::new(config, 0)?;
        let mut failure = None;
        nets.visit_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match c.tensor_shaped::<T>(&format!("param.{name}"), p.value.shape()) {
                Ok(t) => p.value = t,
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        nets.uv_noise = c.tensor_shaped("buffer.uv_noise", nets.uv_noise.shape())?;
        nets.bg_noise = c.tensor_shaped("buffer.bg_noise", nets.bg_noise.shape())?;
        Ok(nets)
    }

    /// Copies parameter values from `other`, which must share the layout.
    pub fn copy_values_from(&mut self, other: &AvatarNetworks<T>) -> Result<()> {
        let src: Vec<(String, Tensor<T>)> = other.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        let mut it = src.into_iter();
        let mut failure = None;
        self.visit_mut(&mut |name, p| match it.next() {
            Some((n, v)) if n == name && v.shape() == p.value.shape() => p.value = v,
            _ => failure = Some(name),
        });
        if let Some(name) = failure {
            return Err(Error::Config(format!("parameter layout differs at {name}")));
        }
        self.uv_noise = other.uv_noise.clone();
        self.bg_noise = other.bg_noise.clone();
        Ok(())
    }
}
