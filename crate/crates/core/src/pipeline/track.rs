use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{frame_name, DatasetLayout, ParamStream};
use crate::container::{write_atomic, Container};
use crate::error::{Error, Result};
use crate::imaging::{load_png, resample_crop, save_png};
use crate::morphable::{load_model, FaceParamsRecord};
use crate::raster::{compute_crop_box, rasterize, rasterize_frame, CropBox, Lighting, RenderMode};
use crate::tensor::Tensor;
use crate::tracker::{solve_texture, track_sequence, LandmarkFrame, TrackConfig};
use crate::training::{TrainingFrame, TrainingVideo};

/// Crop enlargement around the landmark bounding box.
pub const CROP_ENLARGE: f64 = 1.5;
const RENDERINGS: &str = "renderings";
const PARAMS: &str = "params.json";
/// Written last; its presence marks a complete cache.
const SUMMARY: &str = "track.json";

/// Summary of a finished tracking run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackCache {
    /// Side of the cached conditioning images and crops.
    pub resolution: usize,
    pub frames: Vec<usize>,
    /// One box for the whole video, so the background stays put.
    pub crop_box: CropBox,
    /// Per-frame boxes, for inspection.
    pub frame_crop_boxes: Vec<CropBox>,
    pub residual_rms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutcome {
    pub cache: TrackCache,
    /// The existing cache was valid and nothing was recomputed.
    pub reused: bool,
}

impl TrackCache {
    pub fn read(cache_dir: &Path) -> Result<Self> {
        let path = cache_dir.join(SUMMARY);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("track summary", &path, e))
    }
}

fn first_channel(t: Tensor<f32>) -> Tensor<f32> {
    let s = t.shape().to_vec();
    if s[0] == 1 {
        t
    } else {
        Tensor::from_vec(&[1, s[1], s[2]], t.data()[..s[1] * s[2]].to_vec())
    }
}

/// Tracks every frame, solves the texture coefficients on the first frame,
/// and caches the conditioning renderings plus image and mask crops at
/// `resolution`. A complete cache for the same frames and resolution is
/// reused unless `force`.
pub fn track_dataset(layout: &DatasetLayout, resolution: usize, force: bool) -> Result<TrackOutcome> {
    let frames = layout.validate()?;
    if resolution == 0 || !resolution.is_multiple_of(2) {
        return Err(Error::InvalidDimensions(format!("render resolution must be a positive even number, got {resolution}")));
    }
    if !force {
        if let Ok(cache) = TrackCache::read(&layout.cache) {
            if cache.resolution == resolution && cache.frames == frames {
                return Ok(TrackOutcome { cache, reused: true });
            }
        }
    }
    let model = load_model(&layout.model_dir())?;
    let mut landmarks = Vec::with_capacity(frames.len());
    let mut images = Vec::with_capacity(frames.len());
    let mut masks = Vec::with_capacity(frames.len());
    for &i in &frames {
        landmarks.push(LandmarkFrame::read(&layout.landmark_path(i), i)?);
        let image = load_png(&layout.frame_path(i))?;
        let mask = first_channel(load_png(&layout.mask_path(i))?);
        if image.shape()[0] != 3 || image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::Dataset(format!("frame {i}: image {:?} and mask {:?} disagree", image.shape(), mask.shape())));
        }
        if let Some(first) = images.first() {
            let first: &Tensor<f32> = first;
            if first.shape() != image.shape() {
                return Err(Error::Dataset(format!("frame {i}: resolution {:?} differs from {:?}", image.shape(), first.shape())));
            }
        }
        images.push(image);
        masks.push(mask);
    }
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);

    let lighting = Lighting::default();
    let mut tracked = track_sequence(&model, &landmarks, &TrackConfig::default())?;
    let visibility = rasterize_frame(&model, &tracked[0].params, RenderMode::Uv, [h, w], &lighting)?.visibility;
    let theta_tex = solve_texture(&model, &images[0], &tracked[0].params, &visibility, &lighting, None)?;
    for r in &mut tracked {
        r.params.theta_tex.clone_from(&theta_tex);
    }

    let all: Vec<[f64; 2]> = landmarks.iter().flat_map(LandmarkFrame::xy).collect();
    let crop_box = compute_crop_box(&all, CROP_ENLARGE, [w, h])?;
    let frame_crop_boxes = landmarks
        .iter()
        .map(|l| compute_crop_box(&l.xy(), CROP_ENLARGE, [w, h]))
        .collect::<Result<Vec<_>>>()?;

    let n = frames.len();
    let r = resolution;
    let mut uv = Vec::with_capacity(n * 3 * r * r);
    let mut texture = Vec::with_capacity(n * 3 * r * r);
    let mut image = Vec::with_capacity(n * 3 * r * r);
    let mut mask = Vec::with_capacity(n * r * r);
    let preview = layout.cache.join("preview");
    fs::create_dir_all(&preview).map_err(|e| Error::io(&preview, e))?;
    for (k, &i) in frames.iter().enumerate() {
        let out = rasterize(&model, &tracked[k].params, RenderMode::Both, &crop_box, r, &lighting)?;
        save_png(&preview.join(format!("uv_{}.png", frame_name(i))), &out.uv_image)?;
        save_png(&preview.join(format!("texture_{}.png", frame_name(i))), &out.tex_image)?;
        uv.extend_from_slice(out.uv_image.data());
        texture.extend_from_slice(out.tex_image.data());
        image.extend_from_slice(resample_crop(&images[k], &crop_box, r).data());
        mask.extend_from_slice(resample_crop(&masks[k], &crop_box, r).data());
    }
    let mut c = Container::new();
    c.insert_f32("uv", &[n, 3, r, r], uv);
    c.insert_f32("texture", &[n, 3, r, r], texture);
    c.insert_f32("image", &[n, 3, r, r], image);
    c.insert_f32("mask", &[n, 1, r, r], mask);
    c.write(&layout.cache.join(RENDERINGS))?;

    let stream = ParamStream {
        video_id: layout.name(),
        fps: 25.0,
        records: frames
            .iter()
            .zip(&tracked)
            .map(|(&i, t)| FaceParamsRecord::from_params(i, &t.params))
            .collect(),
    };
    stream.write(&layout.cache.join(PARAMS))?;
    let cache = TrackCache {
        resolution,
        frames,
        crop_box,
        frame_crop_boxes,
        residual_rms: tracked.iter().map(|t| t.residual_rms).collect(),
    };
    let text = serde_json::to_string_pretty(&cache).expect("summary serializes");
    write_atomic(&layout.cache.join(SUMMARY), text.as_bytes())?;
    Ok(TrackOutcome { cache, reused: false })
}

/// Path of the tracked parameter stream inside a cache.
pub(crate) fn params_path(layout: &DatasetLayout) -> PathBuf {
    layout.cache.join(PARAMS)
}

/// Loads a tracked dataset as training data at `resolution`, together with
/// its cache summary and parameter stream.
pub fn load_training_video(layout: &DatasetLayout, resolution: usize) -> Result<(TrainingVideo, TrackCache, ParamStream)> {
    let cache = TrackCache::read(&layout.cache)?;
    if cache.resolution != resolution {
        return Err(Error::Config(format!(
            "{} was tracked at {}px but the network expects {resolution}px; re-run tracking",
            layout.name(),
            cache.resolution
        )));
    }
    let stream = ParamStream::read(&params_path(layout))?;
    let c = Container::read(&layout.cache.join(RENDERINGS))?;
    let n = cache.frames.len();
    let r = resolution;
    let grab = |name: &str, ch: usize| -> Result<Tensor<f32>> { c.tensor_shaped(name, &[n, ch, r, r]) };
    let (uv, texture, image, mask) = (grab("uv", 3)?, grab("texture", 3)?, grab("image", 3)?, grab("mask", 1)?);
    let item = |t: &Tensor<f32>, k: usize| {
        let s = t.shape();
        t.batch_item(k).reshape(&[s[1], s[2], s[3]])
    };
    let frames = (0..n)
        .map(|k| TrainingFrame {
            image: item(&image, k),
            mask: item(&mask, k),
            uv: item(&uv, k),
            texture: item(&texture, k),
        })
        .collect();
    let video = TrainingVideo {
        name: layout.name(),
        identity: 0,
        frames,
    };
    Ok((video, cache, stream))
}
