//! Feature combination: neural-texture sampling for the face, the
//! pixel-aligned foreground map, the background window and the predicted
//! foreground mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::AvatarNetworks;
use crate::nn::uv::sample_uv_var;
use crate::nn::{activate, join_name, map_noise_via_uv, noise_pyramid, Conv, Module};
use crate::tensor::{Graph, Param, Real, Tensor, Var};
use crate::wavelet::{dwt_var, idwt_var};
use crate::windowing::{align_windows, crop_window, crop_window_var, pad_to_training_size, CanvasSpec, SampleWindow};

/// Coordinate space of a feature canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanvasSpace {
    Uv,
    Screen,
}

/// A generated feature map `[1, C, H, W]` with its placement.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCanvas<T: Real> {
    pub data: Tensor<T>,
    pub space: CanvasSpace,
    /// Pixels of canvas beyond the frame on each side (screen canvases).
    pub margin: usize,
}

/// Samples a UV feature canvas through a UV rendering; zero off the face.
/// Differentiable with respect to the canvas.
pub fn sample_neural_texture<T: Real>(g: &mut Graph<T>, uv_canvas: Var, uv_rendering: &Tensor<T>) -> Var {
    sample_uv_var(g, uv_canvas, uv_rendering)
}

/// Two 3×3 convolutions with a leaky rectifier between, then a sigmoid.
#[derive(Clone, Debug)]
pub struct MaskHead<T: Real> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

impl<T: Real> MaskHead<T> {
    pub fn new(feature_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MaskHead {
            conv1: Conv::new(2 * feature_channels, hidden, 3, 1, rng),
            conv2: Conv::new(hidden, 1, 3, 1, rng),
        }
    }

    /// Mask `[N, 1, H, W]` in `(0, 1)` from the foreground and background maps.
    pub fn forward(&self, g: &mut Graph<T>, fg: Var, bg: Var) -> Result<Var> {
        let (a, b) = (g.shape(fg), g.shape(bg));
        if a != b || a.len() != 4 || 2 * a[1] != self.conv1.weight.value.shape()[1] {
            return Err(Error::Shape(format!("mask head inputs {:?} and {:?}", a, b)));
        }
        let x = g.concat_channels(&[fg, bg]);
        let h = self.conv1.forward(g, x);
        let h = activate(g, h);
        let logits = self.conv2.forward(g, h);
        Ok(g.sigmoid(logits))
    }
}

impl<T: Real> Module<T> for MaskHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv1.visit_mut(&join_name(prefix, "conv1"), f);
        self.conv2.visit_mut(&join_name(prefix, "conv2"), f);
    }
}

/// `mask ⊙ (face + fg) + (1 − mask) ⊙ bg`, the mask broadcast over channels.
pub fn combine<T: Real>(g: &mut Graph<T>, face: Var, fg: Var, bg: Var, mask: Var) -> Result<Var> {
    let (sf, sg, sb, sm) = (g.shape(face), g.shape(fg), g.shape(bg), g.shape(mask));
    if sf != sg || sf != sb || sm.len() != 4 || sm[1] != 1 || sm[0] != sf[0] || sm[2..] != sf[2..] {
        return Err(Error::Shape(format!("combine inputs {sf:?}, {sg:?}, {sb:?}, mask {sm:?}")));
    }
    let front = g.add(face, fg);
    let front = g.mul(mask, front);
    let inv = g.rsub_scalar(T::one(), mask);
    let back = g.mul(inv, bg);
    Ok(g.add(front, back))
}

/// [`combine`] on plain tensors.
pub fn combine_tensors<T: Real>(face: &Tensor<T>, fg: &Tensor<T>, bg: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = [face, fg, bg, mask].map(|t| g.constant(t.clone()));
    let out = combine(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    Ok(g.value(out).clone())
}

/// Conditioning for one batch: the UV and texture renderings inside the
/// sample box, the box itself (in frame space) and the latent codes.
#[derive(Clone, Debug)]
pub struct FrameInputs<T: Real> {
    /// `[N, 3, h, w]` UV rendering crop.
    pub uv: Tensor<T>,
    /// `[N, 3, h, w]` texture rendering crop.
    pub texture: Tensor<T>,
    pub window: SampleWindow,
    /// `[N, latent_dim]` identity codes.
    pub z_id: Tensor<T>,
    /// `[N, latent_dim]` temporal codes.
    pub z_tmp: Tensor<T>,
}

/// Precomputed static canvases, valid for one identity code.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticCanvases<T: Real> {
    pub face: FeatureCanvas<T>,
    pub background: FeatureCanvas<T>,
}

/// Tape handles produced by [`compose_frame`].
#[derive(Clone, Copy, Debug)]
pub struct Composed {
    pub combined: Var,
    pub mask: Var,
    pub fg: Var,
    pub face: Var,
    pub bg: Var,
    pub style: Var,
}

/// The foreground and background windows for a frame-space sample box.
pub fn frame_windows(frame_size: usize, bg_size: usize, margin: usize, window: &SampleWindow) -> Result<[SampleWindow; 2]> {
    let frame = (frame_size, frame_size);
    let bg = CanvasSpec {
        size: (bg_size, bg_size),
        margin: (margin, margin),
        num: 1,
        den: 1,
    };
    let ws = align_windows(window, &[CanvasSpec::identity(frame), bg])?;
    Ok([ws[0], ws[1]])
}

/// Pixel-resolution noise for a crop: UV noise on the face, the fixed
/// background field (windowed) elsewhere.
pub fn screen_noise<T: Real>(nets: &AvatarNetworks<T>, uv: &Tensor<T>, bg_window: &SampleWindow) -> Result<Tensor<T>> {
    let bg = crop_window(&nets.bg_noise, bg_window)?;
    Ok(map_noise_via_uv(&nets.uv_noise, uv, &bg))
}

/// Builds the combined feature map and predicted mask on the tape.
///
/// With `canvases` the generators are not evaluated and their outputs enter
/// as constants; otherwise both generators run on the tape from `z_id`.
pub fn compose_frame<T: Real>(
    g: &mut Graph<T>,
    nets: &AvatarNetworks<T>,
    inputs: &FrameInputs<T>,
    canvases: Option<&StaticCanvases<T>>,
) -> Result<Composed> {
    let cfg = &nets.config;
    let (n, c, h, w) = inputs.uv.dims4();
    if c != 3 || inputs.texture.shape() != inputs.uv.shape() || (h, w) != inputs.window.size {
        return Err(Error::Shape(format!(
            "renderings {:?}/{:?} do not match window {:?}",
            inputs.uv.shape(),
            inputs.texture.shape(),
            inputs.window.size
        )));
    }
    if inputs.window.canvas_size != (cfg.frame_size, cfg.frame_size) {
        return Err(Error::Shape(format!(
            "sample box canvas {:?} does not match frame size {}",
            inputs.window.canvas_size, cfg.frame_size
        )));
    }
    let [fg_window, bg_window] = frame_windows(cfg.frame_size, cfg.bg_canvas_size(), cfg.bg_margin(), &inputs.window)?;

    let (face_canvas, bg_canvas) = match canvases {
        Some(s) => (g.constant(s.face.data.clone()), g.constant(s.background.data.clone())),
        None => {
            let z = g.constant(inputs.z_id.clone());
            (nets.face_gen.forward(g, z)?, nets.bg_gen.forward(g, z)?)
        }
    };

    let zt = g.constant(inputs.z_tmp.clone());
    let fg_style = nets.fg_unet.style(g, zt);

    // Foreground StyleUNet sees the crop padded back into the full frame.
    let cond = {
        let mut data = Vec::with_capacity(2 * inputs.uv.len());
        for b in 0..n {
            data.extend_from_slice(inputs.uv.batch_item(b).data());
            data.extend_from_slice(inputs.texture.batch_item(b).data());
        }
        Tensor::from_vec(&[n, 6, h, w], data)
    };
    let (padded, _) = pad_to_training_size(&cond, &fg_window)?;
    let noise = if cfg.use_noise {
        let (uv_full, _) = pad_to_training_size(&inputs.uv, &fg_window)?;
        let frame_bg = SampleWindow::new(
            (cfg.bg_margin() as i64, cfg.bg_margin() as i64),
            (cfg.frame_size, cfg.frame_size),
            (cfg.bg_canvas_size(), cfg.bg_canvas_size()),
        )?;
        let field = screen_noise(nets, &uv_full, &frame_bg)?;
        noise_pyramid(&field, nets.fg_unet.levels()).into_iter().map(|t| g.constant(t)).collect()
    } else {
        Vec::new()
    };
    let x = g.constant(padded);
    let pack = dwt_var(g, x);
    let out = nets.fg_unet.forward(g, pack, fg_style, &noise)?;
    let fg_full = idwt_var(g, out);
    let fg = crop_window_var(g, fg_full, &fg_window)?;

    let face = if cfg.use_neural_texture {
        sample_neural_texture(g, face_canvas, &inputs.uv)
    } else {
        g.constant(Tensor::zeros(&[n, cfg.feature_channels, h, w]))
    };
    let bg = crop_window_var(g, bg_canvas, &bg_window)?;
    let bg = if g.shape(bg)[0] != n {
        let ones = g.constant(Tensor::full(&[n, 1, 1, 1], T::one()));
        g.mul(bg, ones)
    } else {
        bg
    };
    let mask = nets.mask_head.forward(g, fg, bg)?;
    let combined = combine(g, face, fg, bg, mask)?;
    Ok(Composed {
        combined,
        mask,
        fg,
        face,
        bg,
        style: fg_style,
    })
}

/// Runs the refinement StyleUNet on a composed map. Returns the RGB image
/// `[N, 3, h, w]`.
pub fn refine<T: Real>(g: &mut Graph<T>, nets: &AvatarNetworks<T>, inputs: &FrameInputs<T>, composed: &Composed) -> Result<Var> {
    let cfg = &nets.config;
    let zt = g.constant(inputs.z_tmp.clone());
    let style = nets.refine_unet.style(g, zt);
    let noise = if cfg.use_noise {
        let [_, bg_window] = frame_windows(cfg.frame_size, cfg.bg_canvas_size(), cfg.bg_margin(), &inputs.window)?;
        let field = screen_noise(nets, &inputs.uv, &bg_window)?;
        noise_pyramid(&field, nets.refine_unet.levels()).into_iter().map(|t| g.constant(t)).collect()
    } else {
        Vec::new()
    };
    let pack = dwt_var(g, composed.combined);
    let out = nets.refine_unet.forward(g, pack, style, &noise)?;
    Ok(idwt_var(g, out))
}
