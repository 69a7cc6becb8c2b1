use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::infer::CHECKPOINT_MODEL;
use super::{frame_name, load_training_video, track_dataset, DatasetLayout};
use crate::error::{Error, Result};
use crate::imaging::save_png;
use crate::morphable::load_model;
use crate::tensor::Tensor;
use crate::training::{
    start_finetuning, start_pretraining, AvatarIdentity, EvalReport, StepRecord, TrainConfig, Trainer, TrainingVideo,
};

/// Metrics log inside the output checkpoint directory.
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const SNAPSHOTS: &str = "snapshots";

#[derive(Clone, Debug, PartialEq)]
pub enum TrainMode {
    /// One video, fresh networks.
    Scratch,
    /// Several videos, fresh networks, one identity code each.
    Pretrain,
    /// One video, continuing from a checkpoint.
    Finetune(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub reached_at: Option<u64>,
    pub evals: Vec<EvalReport>,
    /// Evaluation of the avatar video after the last step.
    pub final_eval: EvalReport,
    pub identities: usize,
}

struct Snapshot {
    z_id: Vec<f64>,
    z_tmp: Vec<f64>,
    uv: Tensor<f32>,
    texture: Tensor<f32>,
    target: Tensor<f32>,
}

impl Snapshot {
    fn save(&self, trainer: &Trainer, path: &Path) -> Result<()> {
        let (image, _) = trainer.nets.infer(&self.z_id, None, &self.uv, &self.texture, &self.z_tmp)?;
        let image = image.map(|v| v.clamp(0.0, 1.0));
        // prediction on the left, ground truth on the right
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let side = Tensor::from_fn(&[3, h, 2 * w], |i| {
            let (c, y, x) = (i / (2 * h * w), (i / (2 * w)) % h, i % (2 * w));
            let src = if x < w { &image } else { &self.target };
            src.data()[c * h * w + y * w + x % w]
        });
        save_png(path, &side)
    }
}

/// Trains on tracked datasets and writes a checkpoint to `out`, together
/// with the morphable model, a JSON-lines metrics log (one record per step)
/// and periodic snapshots. Datasets are tracked first when their cache is
/// missing. The avatar stored for inference is the fine-tuning video, or the
/// first dataset otherwise.
pub fn train_on_datasets(config: &TrainConfig, datasets: &[DatasetLayout], mode: &TrainMode, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    match (mode, datasets.len()) {
        (_, 0) => return Err(Error::Dataset("no dataset given".into())),
        (TrainMode::Scratch | TrainMode::Finetune(_), n) if n != 1 => {
            return Err(Error::Dataset(format!("expected exactly one dataset, got {n}")));
        }
        _ => {}
    }
    for d in datasets {
        d.validate()?;
    }
    let base = match mode {
        TrainMode::Finetune(ck) => {
            let t = Trainer::load(ck)?;
            if t.config.network != config.network {
                return Err(Error::Config(format!(
                    "network configuration of {} differs from the training configuration",
                    ck.display()
                )));
            }
            Some(t)
        }
        _ => None,
    };

    let f = config.network.frame_size;
    let mut videos: Vec<TrainingVideo> = Vec::with_capacity(datasets.len());
    let mut target = None;
    for (k, d) in datasets.iter().enumerate() {
        track_dataset(d, f, false)?;
        let (video, cache, stream) = load_training_video(d, f)?;
        if k == 0 {
            target = Some((cache, stream));
        }
        videos.push(video);
    }
    let (cache, stream) = target.expect("at least one dataset");

    let mut trainer = match base {
        Some(t) => start_finetuning(t, &mut videos[0], config)?,
        None => start_pretraining(&mut videos, config)?,
    };
    let first = &stream.records[0];
    trainer.avatar = Some(AvatarIdentity {
        identity: videos[0].identity,
        timestamp: videos[0].middle_timestamp(),
        theta_shape: first.theta_shape.clone(),
        theta_tex: first.theta_tex.clone(),
        crop_box: cache.crop_box,
    });

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    load_model(&datasets[0].model_dir())?.save(&out.join(CHECKPOINT_MODEL))?;
    let log_path = out.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let snapshot = Snapshot {
        z_id: trainer.nets.identity_code(videos[0].identity),
        z_tmp: trainer.nets.temporal_code(videos[0].timestamp(0)),
        uv: videos[0].frames[0].uv.clone(),
        texture: videos[0].frames[0].texture.clone(),
        target: videos[0].frames[0].image.clone(),
    };
    if config.snapshot_every > 0 {
        let dir = out.join(SNAPSHOTS);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let outcome = {
        let mut on_step = |t: &Trainer, record: &StepRecord| -> Result<()> {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            let k = record.iteration;
            if config.checkpoint_every > 0 && k.is_multiple_of(config.checkpoint_every) {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                t.save(out)?;
            }
            if config.snapshot_every > 0 && k.is_multiple_of(config.snapshot_every) {
                snapshot.save(t, &out.join(SNAPSHOTS).join(format!("{}.png", frame_name(k as usize))))?;
            }
            Ok(())
        };
        let iterations = config.iterations;
        if matches!(mode, TrainMode::Finetune(_)) {
            trainer.fit(&videos[..1], iterations, &mut on_step)?
        } else {
            trainer.fit(&videos, iterations, &mut on_step)?
        }
    };
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save(out)?;
    Ok(TrainSummary {
        iterations_run: outcome.iterations_run,
        reached_at: outcome.reached_at,
        evals: outcome.evals,
        final_eval: trainer.evaluate(&videos[0])?,
        identities: trainer.identities.len(),
    })
}
