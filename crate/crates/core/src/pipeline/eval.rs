use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::load_png;
use crate::metrics::{psnr, ssim, train_test_split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Whether the frame falls in the first 80% (the training split).
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub train_psnr: Option<f64>,
    pub train_ssim: Option<f64>,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores `(name, output, ground truth)` triples in frame order.
pub fn evaluate_frames(frames: &[(String, Tensor<f32>, Tensor<f32>)]) -> Result<QualityReport> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (train, _) = train_test_split(frames.len());
    let scores = frames
        .iter()
        .enumerate()
        .map(|(k, (name, out, gt))| {
            if out.shape() != gt.shape() {
                return Err(Error::Dataset(format!("frame {name}: output {:?} vs ground truth {:?}", out.shape(), gt.shape())));
            }
            Ok(FrameScore {
                frame: name.clone(),
                psnr: psnr(out, gt)?,
                ssim: ssim(out, gt)?,
                train: train.contains(&k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |train: bool, f: fn(&FrameScore) -> f64| mean(scores.iter().filter(|s| s.train == train).map(f));
    Ok(QualityReport {
        mean_psnr: mean(scores.iter().map(|s| s.psnr)).unwrap_or_default(),
        mean_ssim: mean(scores.iter().map(|s| s.ssim)).unwrap_or_default(),
        train_psnr: pick(true, |s| s.psnr),
        train_ssim: pick(true, |s| s.ssim),
        test_psnr: pick(false, |s| s.psnr),
        test_ssim: pick(false, |s| s.ssim),
        frames: scores,
    })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            names.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Compares same-named PNGs of two directories.
pub fn evaluate_dirs(outputs: &Path, ground_truth: &Path) -> Result<QualityReport> {
    let (a, b) = (png_names(outputs)?, png_names(ground_truth)?);
    if a != b {
        return Err(Error::Dataset(format!(
            "{} has {} frames but {} has {} (or names differ)",
            outputs.display(),
            a.len(),
            ground_truth.display(),
            b.len()
        )));
    }
    let frames = a
        .into_iter()
        .map(|name| {
            let out = load_png(&outputs.join(&name))?;
            let gt = load_png(&ground_truth.join(&name))?;
            Ok((name.trim_end_matches(".png").to_string(), out, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_frames(&frames)
}
