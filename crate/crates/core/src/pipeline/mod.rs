//! Batch front end over the library: synthetic datasets, tracking with a
//! rendering cache, training on datasets, inference, reenactment and
//! evaluation.

mod eval;
mod infer;
mod synth;
mod track;
mod train;

pub use eval::{evaluate_dirs, evaluate_frames, FrameScore, QualityReport};
pub use infer::{reenact, render_stream, substitute_driver, InferenceSession};
pub use synth::{write_synthetic_dataset, SyntheticScene, SynthConfig};
pub use track::{load_training_video, track_dataset, TrackCache, TrackOutcome};
pub use train::{train_on_datasets, TrainMode, TrainSummary};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::morphable::{FaceParams, FaceParamsRecord};

/// Overrides where tracking caches live: `<root>/<dataset dir name>`.
pub const CACHE_ROOT_ENV: &str = "AVATAR_CACHE_ROOT";

/// On-disk dataset: numbered frames, per-frame landmarks and matting masks,
/// the morphable model, and a cache of tracking results.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub cache: PathBuf,
}

pub(crate) fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

fn numbered(dir: &Path, ext: &str) -> Result<Vec<usize>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let index = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok());
        match index {
            Some(i) => out.push(i),
            None => return Err(Error::Dataset(format!("unexpected file name {}", path.display()))),
        }
    }
    out.sort_unstable();
    Ok(out)
}

impl DatasetLayout {
    /// Layout rooted at `root`, with the cache under `root/cache` unless
    /// [`CACHE_ROOT_ENV`] is set.
    pub fn new(root: &Path) -> Self {
        match std::env::var_os(CACHE_ROOT_ENV) {
            Some(base) => {
                let name = root.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "dataset".into());
                Self::with_cache(root, &PathBuf::from(base).join(name))
            }
            None => Self::with_cache(root, &root.join("cache")),
        }
    }

    pub fn with_cache(root: &Path, cache: &Path) -> Self {
        DatasetLayout {
            root: root.to_path_buf(),
            cache: cache.to_path_buf(),
        }
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn landmarks_dir(&self) -> PathBuf {
        self.root.join("landmarks")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn frame_path(&self, i: usize) -> PathBuf {
        self.frames_dir().join(format!("{}.png", frame_name(i)))
    }

    pub fn landmark_path(&self, i: usize) -> PathBuf {
        self.landmarks_dir().join(format!("{}.json", frame_name(i)))
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.masks_dir().join(format!("{}.png", frame_name(i)))
    }

    /// Display name, the root directory's name.
    pub fn name(&self) -> String {
        self.root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// Checks that every input directory exists and that frames, landmarks
    /// and masks carry the same frame numbers. Returns those numbers.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if !self.root.is_dir() {
            return Err(Error::MissingInput(self.root.clone()));
        }
        let model = self.model_dir();
        if !model.is_dir() {
            return Err(Error::MissingInput(model));
        }
        let frames = numbered(&self.frames_dir(), "png")?;
        let landmarks = numbered(&self.landmarks_dir(), "json")?;
        let masks = numbered(&self.masks_dir(), "png")?;
        if frames.is_empty() {
            return Err(Error::Dataset(format!("no frames in {}", self.frames_dir().display())));
        }
        if frames != landmarks || frames != masks {
            return Err(Error::Dataset(format!(
                "frame/landmark/mask counts differ: {} / {} / {}",
                frames.len(),
                landmarks.len(),
                masks.len()
            )));
        }
        Ok(frames)
    }
}

/// Tracked parameters of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStream {
    pub video_id: String,
    pub fps: f64,
    pub records: Vec<FaceParamsRecord>,
}

impl ParamStream {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.records.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::Dataset(format!("{}: frame indices are not increasing", self.video_id)));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<FaceParams> {
        self.records.iter().map(FaceParamsRecord::to_params).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: ParamStream = serde_json::from_str(&text).map_err(|e| Error::format("param stream", path, e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self).expect("params serialize").as_bytes())
    }
}

#[cfg(test)]
mod tests;
