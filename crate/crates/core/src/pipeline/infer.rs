use std::fs;
use std::path::{Path, PathBuf};

use super::{frame_name, ParamStream};
use crate::composer::StaticCanvases;
use crate::error::{Error, Result};
use crate::imaging::save_png;
use crate::model::AvatarNetworks;
use crate::morphable::{load_model, FaceParams, FaceParamsRecord, MorphableModel};
use crate::raster::{rasterize, Lighting, RenderMode};
use crate::tensor::Tensor;
use crate::training::{AvatarIdentity, Trainer};

/// Directory inside a checkpoint holding the morphable model.
pub const CHECKPOINT_MODEL: &str = "model";

/// A trained avatar ready to render frames from face parameters. The two
/// generators run once, on first use; afterwards each frame only runs the
/// two StyleUNets and the mask head.
pub struct InferenceSession {
    pub nets: AvatarNetworks<f32>,
    pub model: MorphableModel,
    pub avatar: AvatarIdentity,
    z_id: Vec<f64>,
    z_tmp: Vec<f64>,
    canvases: Option<StaticCanvases<f32>>,
    generator_evals: usize,
    lighting: Lighting,
}

impl InferenceSession {
    pub fn new(nets: AvatarNetworks<f32>, model: MorphableModel, avatar: AvatarIdentity) -> Self {
        let z_id = nets.identity_code(avatar.identity);
        let z_tmp = nets.temporal_code(avatar.timestamp);
        InferenceSession {
            nets,
            model,
            avatar,
            z_id,
            z_tmp,
            canvases: None,
            generator_evals: 0,
            lighting: Lighting::default(),
        }
    }

    /// Loads a checkpoint written by the training command.
    pub fn open(checkpoint: &Path) -> Result<Self> {
        let trainer = Trainer::load(checkpoint)?;
        let avatar = trainer
            .avatar
            .clone()
            .ok_or_else(|| Error::InvalidModel(format!("{} was not trained on a tracked video", checkpoint.display())))?;
        let model = load_model(&checkpoint.join(CHECKPOINT_MODEL))?;
        Ok(Self::new(trainer.nets, model, avatar))
    }

    pub fn frame_size(&self) -> usize {
        self.nets.config.frame_size
    }

    /// Overrides the temporal code timestamp.
    pub fn set_timestamp(&mut self, t: f64) {
        self.z_tmp = self.nets.temporal_code(t);
    }

    /// Number of generator-network evaluations so far.
    pub fn generator_evals(&self) -> usize {
        self.generator_evals
    }

    /// UV and texture renderings `[3, F, F]` for `params` in the avatar's crop.
    pub fn conditioning(&self, params: &FaceParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let out = rasterize(&self.model, params, RenderMode::Both, &self.avatar.crop_box, self.frame_size(), &self.lighting)?;
        Ok((out.uv_image, out.tex_image))
    }

    /// Image `[3, F, F]` in `[0, 1]` and mask `[1, F, F]` for `params`.
    pub fn render(&mut self, params: &FaceParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.canvases.is_none() {
            self.canvases = Some(self.nets.static_canvases(&self.z_id)?);
            self.generator_evals += 2;
        }
        let (uv, tex) = self.conditioning(params)?;
        let (image, mask) = self.nets.infer(&self.z_id, self.canvases.as_ref(), &uv, &tex, &self.z_tmp)?;
        Ok((image.map(|v| v.clamp(0.0, 1.0)), mask))
    }

    /// [`InferenceSession::render`] with both generators re-evaluated.
    pub fn render_uncached(&mut self, params: &FaceParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (uv, tex) = self.conditioning(params)?;
        self.generator_evals += 2;
        let (image, mask) = self.nets.infer(&self.z_id, None, &uv, &tex, &self.z_tmp)?;
        Ok((image.map(|v| v.clamp(0.0, 1.0)), mask))
    }
}

/// Renders every record of `stream` to `out/<frame>.png`, named like the
/// input frames. All parameters are validated before anything is written.
pub fn render_stream(session: &mut InferenceSession, stream: &ParamStream, out: &Path) -> Result<Vec<PathBuf>> {
    stream.validate()?;
    let params = stream.params();
    for (p, r) in params.iter().zip(&stream.records) {
        p.validate(&session.model)
            .map_err(|e| Error::Dataset(format!("{} frame {}: {e}", stream.video_id, r.frame_index)))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(params.len());
    for (p, r) in params.iter().zip(&stream.records) {
        let (image, _) = session.render(p)?;
        let path = out.join(format!("{}.png", frame_name(r.frame_index)));
        save_png(&path, &image)?;
        written.push(path);
    }
    Ok(written)
}

/// The driver's expression and pose on the avatar's identity and texture.
pub fn substitute_driver(avatar: &AvatarIdentity, driver: &FaceParams) -> FaceParams {
    let mut p = driver.clone();
    p.theta_shape.clone_from(&avatar.theta_shape);
    p.theta_tex.clone_from(&avatar.theta_tex);
    p
}

/// Renders the avatar driven by a tracked driver stream.
pub fn reenact(session: &mut InferenceSession, driver: &ParamStream, out: &Path) -> Result<Vec<PathBuf>> {
    driver.validate()?;
    let records = driver
        .records
        .iter()
        .map(|r| FaceParamsRecord::from_params(r.frame_index, &substitute_driver(&session.avatar, &r.to_params())))
        .collect();
    let stream = ParamStream {
        video_id: driver.video_id.clone(),
        fps: driver.fps,
        records,
    };
    render_stream(session, &stream, out)
}
