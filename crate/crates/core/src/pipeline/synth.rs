use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetLayout, ParamStream};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::save_png;
use crate::morphable::{rot_x, rot_y, rot_z, synth_toy_model, FaceParams, FaceParamsRecord, MorphableModel};
use crate::raster::{rasterize_frame, Lighting, RenderMode};
use crate::tensor::Tensor;
use crate::tracker::synthesize_landmarks;

/// Parameters of a synthetic talking-head video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    /// Square source resolution in pixels.
    pub resolution: usize,
    /// Picks identity, colors, background and motion phases.
    pub subject_seed: u64,
    /// Picks the morphable model; datasets sharing it can drive each other.
    pub model_seed: u64,
    pub fps: f64,
    /// Head scale, pixels per model unit.
    pub head_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 50,
            resolution: 192,
            subject_seed: 0,
            model_seed: 1,
            fps: 25.0,
            head_scale: 44.0,
        }
    }
}

/// Toy model dimensions: vertices, shape, expression and texture
/// coefficients, landmarks.
const TOY_MODEL_DIMS: (usize, usize, usize, usize, usize) = (502, 20, 10, 10, 68);

/// Everything needed to render any frame of a synthetic subject: a textured
/// head from the morphable model, a neck and torso that follow the head's
/// translation, and a static background.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub model: MorphableModel,
    theta_shape: Vec<f64>,
    theta_tex: Vec<f64>,
    background: Tensor<f32>,
    torso_color: [f64; 3],
    /// Cycles across the UV square and phases of the skin detail pattern.
    detail: [f64; 4],
    /// Per-coefficient expression amplitude, frequency and phase.
    expression: Vec<[f64; 3]>,
    /// Yaw, pitch, roll, x, y: amplitude, frequency, phase.
    motion: [[f64; 3]; 5],
}

pub(crate) fn toy_model(seed: u64) -> Result<MorphableModel> {
    let (v, ns, ne, nt, l) = TOY_MODEL_DIMS;
    synth_toy_model(seed, v, ns, ne, nt, l)
}

impl SyntheticScene {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        if config.frames == 0 || config.resolution < 32 || config.head_scale.is_nan() || config.head_scale <= 0.0 {
            return Err(Error::Config("synthetic video needs frames, a resolution of at least 32 and a positive head scale".into()));
        }
        let model = toy_model(config.model_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.subject_seed ^ 0x5CE7E);
        let mut uniform = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let theta_shape = (0..model.n_shape()).map(|_| uniform(-1.0, 1.0)).collect();
        let theta_tex = (0..model.n_tex()).map(|_| uniform(-1.0, 1.0)).collect();
        let torso_color = [uniform(0.15, 0.85), uniform(0.15, 0.85), uniform(0.15, 0.85)];
        let detail = [uniform(3.0, 5.0), uniform(2.0, 4.0), uniform(0.0, 1.0), uniform(0.0, 1.0)];
        let expression = (0..model.n_exp())
            .map(|k| {
                let amp = if k == 0 { 1.5 } else { 0.6 / k as f64 };
                [amp, uniform(0.8, 2.5), uniform(0.0, TAU)]
            })
            .collect();
        let motion = [
            [0.3, uniform(0.7, 1.3), uniform(0.0, TAU)],
            [0.12, uniform(0.7, 1.6), uniform(0.0, TAU)],
            [0.06, uniform(0.5, 1.0), uniform(0.0, TAU)],
            [4.0, uniform(0.4, 0.9), uniform(0.0, TAU)],
            [3.0, uniform(0.4, 0.9), uniform(0.0, TAU)],
        ];
        let base = [uniform(0.2, 0.8), uniform(0.2, 0.8), uniform(0.2, 0.8)];
        let grad = [uniform(-0.2, 0.2), uniform(-0.2, 0.2)];
        let wave = [uniform(1.0, 2.5), uniform(1.0, 2.5), uniform(0.0, TAU), uniform(0.0, TAU)];
        let r = config.resolution;
        let background = Tensor::from_fn(&[3, r, r], |i| {
            let (c, y, x) = (i / (r * r), (i / r) % r, i % r);
            let (u, v) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
            let tint = [1.0, 0.6, -0.8][c];
            let s = base[c]
                + grad[0] * (u - 0.5)
                + grad[1] * (v - 0.5)
                + 0.12 * tint * (TAU * wave[0] * u + wave[2]).sin() * (TAU * wave[1] * v + wave[3]).cos();
            s.clamp(0.0, 1.0) as f32
        });
        Ok(SyntheticScene {
            config: config.clone(),
            model,
            theta_shape,
            theta_tex,
            background,
            torso_color,
            detail,
            expression,
            motion,
        })
    }

    fn head_center(&self) -> [f64; 2] {
        let r = self.config.resolution as f64;
        [r / 2.0, r * 0.44]
    }

    /// Ground-truth parameters of frame `i`.
    pub fn params(&self, i: usize) -> FaceParams {
        let n = self.config.frames;
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let wave = |m: [f64; 3]| m[0] * (TAU * m[1] * t + m[2]).sin();
        let s = self.config.head_scale;
        let [cx, cy] = self.head_center();
        let mut p = FaceParams::neutral(&self.model);
        p.theta_shape.clone_from(&self.theta_shape);
        p.theta_tex.clone_from(&self.theta_tex);
        p.theta_exp = self.expression.iter().map(|&e| wave(e)).collect();
        p.scale = s;
        p.head_rotation = rot_y(wave(self.motion[0])) * rot_x(wave(self.motion[1])) * rot_z(wave(self.motion[2]));
        p.translation = Vector3::new((cx + wave(self.motion[3])) / s, (cy + wave(self.motion[4])) / s, 0.0);
        p
    }

    /// Renders a source frame `[3, R, R]` and its matting mask `[1, R, R]`.
    pub fn render(&self, params: &FaceParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let r = self.config.resolution;
        let buffers = rasterize_frame(&self.model, params, RenderMode::Both, [r, r], &Lighting::default())?;
        let s = params.scale;
        let (hx, hy) = (s * params.translation.x, s * params.translation.y);
        let (tx, ty) = (hx, hy + 1.75 * s);
        let (ax, ay) = (1.45 * s, 0.85 * s);
        let plane = r * r;
        let mut image = self.background.clone();
        let mut mask = Tensor::zeros(&[1, r, r]);
        let [fu, fv, pu, pv] = self.detail;
        for y in 0..r {
            for x in 0..r {
                let o = y * r + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let color = if buffers.coverage[o] {
                    let u = buffers.uv_image.data()[o] as f64;
                    let v = buffers.uv_image.data()[plane + o] as f64;
                    let k = 1.0 + 0.2 * (TAU * (fu * u + pu)).sin() * (TAU * (fv * v + pv)).sin();
                    Some([0, 1, 2].map(|c| buffers.tex_image.data()[c * plane + o] as f64 * k))
                } else {
                    let e = ((px - tx) / ax).powi(2) + ((py - ty) / ay).powi(2);
                    let neck = (px - hx).abs() < 0.32 * s && py > hy && py < ty;
                    (e <= 1.0 || neck).then(|| {
                        let shade = 0.8 + 0.2 * (-(py - ty) / ay).clamp(-1.0, 1.0);
                        let c = if neck { [0.9, 0.75, 0.65] } else { self.torso_color };
                        c.map(|c| c * shade)
                    })
                };
                if let Some(c) = color {
                    for (ch, v) in c.iter().enumerate() {
                        image.data_mut()[ch * plane + o] = v.clamp(0.0, 1.0) as f32;
                    }
                    mask.data_mut()[o] = 1.0;
                }
            }
        }
        Ok((image, mask))
    }

    pub fn ground_truth(&self, video_id: &str) -> ParamStream {
        ParamStream {
            video_id: video_id.to_string(),
            fps: self.config.fps,
            records: (0..self.config.frames)
                .map(|i| FaceParamsRecord::from_params(i, &self.params(i)))
                .collect(),
        }
    }
}

/// Writes a complete synthetic dataset to `root`: frames, landmarks, masks,
/// the morphable model, ground-truth parameters and the scene description.
/// Refuses a non-empty `root` unless `force`.
pub fn write_synthetic_dataset(root: &Path, config: &SynthConfig, force: bool) -> Result<DatasetLayout> {
    let scene = SyntheticScene::new(config)?;
    let non_empty = root.is_dir() && fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
    if non_empty && !force {
        return Err(Error::Dataset(format!("{} is not empty (pass force to overwrite)", root.display())));
    }
    let layout = DatasetLayout::with_cache(root, &root.join("cache"));
    if non_empty {
        for dir in [layout.frames_dir(), layout.landmarks_dir(), layout.masks_dir(), layout.model_dir(), layout.cache.clone()] {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
    }
    for dir in [layout.frames_dir(), layout.landmarks_dir(), layout.masks_dir()] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    scene.model.save(&layout.model_dir())?;
    for i in 0..config.frames {
        let p = scene.params(i);
        let (image, mask) = scene.render(&p)?;
        save_png(&layout.frame_path(i), &image)?;
        save_png(&layout.mask_path(i), &mask)?;
        synthesize_landmarks(&scene.model, &p, i).write(&layout.landmark_path(i))?;
    }
    scene.ground_truth(&layout.name()).write(&root.join("gt_params.json"))?;
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    write_atomic(&root.join("scene.json"), text.as_bytes())?;
    Ok(layout)
}

impl SynthConfig {
    /// Reads the scene description a synthetic dataset was written with.
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("scene.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("scene", &path, e))
    }
}
