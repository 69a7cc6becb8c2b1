//! Loss assembly, the adversarial optimization loop, multi-video
//! pre-training and single-video fine-tuning.

mod adam;
mod checkpoint;
mod losses;

pub use adam::Adam;
pub use checkpoint::{AvatarIdentity, CheckpointState, IdentityEntry, CHECKPOINT_ARRAYS, CHECKPOINT_CONFIG, CHECKPOINT_STATE};
pub use losses::{d_logistic_loss, g_nonsaturating_loss, l1_loss, mask_loss, r1_penalty, PerceptualNet};

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{compose_frame, refine, FrameInputs};
use crate::error::{Error, Result};
use crate::metrics::{mae, psnr};
use crate::model::{AvatarNetworks, DISCRIMINATOR};
use crate::nn::NetworkConfig;
use crate::tensor::{Graph, Tensor, Var};
use crate::wavelet::dwt;
use crate::windowing::{crop_window, draw_sample_box, SampleWindow};

/// Per-term multipliers of the generator objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            perceptual: 1.0,
            mask: 1.0,
            gan: 1.0,
        }
    }
}

/// Everything that controls a training run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub r1_gamma: f64,
    /// Discriminator steps between lazy R1 evaluations; 0 disables R1.
    pub r1_interval: u64,
    /// Random sample boxes of `network.sample_size`; off trains on full frames.
    pub augment: bool,
    /// Iterations between evaluations on the first video; 0 disables.
    pub eval_every: u64,
    /// Evaluate on every `eval_stride`-th frame.
    pub eval_stride: usize,
    /// Stop once the evaluation PSNR reaches this value.
    pub stop_psnr: Option<f64>,
    /// Also require this mask error before stopping.
    pub stop_mask_mae: Option<f64>,
    pub checkpoint_every: u64,
    pub snapshot_every: u64,
    pub datasets: Vec<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            iterations: 2000,
            batch_size: 1,
            seed: 0,
            lr_generator: 2e-3,
            lr_discriminator: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            weights: LossWeights::default(),
            r1_gamma: 10.0,
            r1_interval: 16,
            augment: true,
            eval_every: 0,
            eval_stride: 5,
            stop_psnr: None,
            stop_mask_mae: None,
            checkpoint_every: 0,
            snapshot_every: 0,
            datasets: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_stride == 0 {
            return bad("eval_stride must be positive");
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        let w = &self.weights;
        if [w.l1, w.perceptual, w.mask, w.gan, self.r1_gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        let side = if self.augment { self.network.sample_size } else { self.network.frame_size };
        if w.perceptual > 0.0 && side < PerceptualNet::<f32>::MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "perceptual loss needs training crops of at least {} pixels, got {side}; disable augment or the term",
                PerceptualNet::<f32>::MIN_RESOLUTION
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// One frame of training data at full-frame resolution.
#[derive(Clone, Debug)]
pub struct TrainingFrame {
    /// `[3, F, F]` ground truth.
    pub image: Tensor<f32>,
    /// `[1, F, F]` matting mask.
    pub mask: Tensor<f32>,
    /// `[3, F, F]` UV rendering.
    pub uv: Tensor<f32>,
    /// `[3, F, F]` texture rendering.
    pub texture: Tensor<f32>,
}

/// A video with its identity slot in the z_id table.
#[derive(Clone, Debug)]
pub struct TrainingVideo {
    pub name: String,
    pub identity: usize,
    pub frames: Vec<TrainingFrame>,
}

impl TrainingVideo {
    /// Timestamps are normalized to `[0, 1]` per video.
    pub fn timestamp(&self, frame: usize) -> f64 {
        if self.frames.len() <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames.len() - 1) as f64
        }
    }

    /// Timestamp of the middle frame, used as the fixed inference code.
    pub fn middle_timestamp(&self) -> f64 {
        self.timestamp(self.frames.len().saturating_sub(1) / 2)
    }
}

/// Per-step loss values. `total` is the weighted generator objective; the
/// perceptual and adversarial terms read 0 when their weight is 0, since they
/// are not evaluated then.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    /// Lazy R1 penalty on steps where it ran, else 0.
    pub r1: f64,
    pub total: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub wall_time: f64,
}

/// Self-driven reconstruction quality on a set of frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: u64,
    pub psnr: f64,
    pub mask_mae: f64,
}

/// What [`Trainer::fit`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub iterations_run: u64,
    /// Iterations (counted from the start of this fit) at which the stop
    /// criterion was first met.
    pub reached_at: Option<u64>,
    pub evals: Vec<EvalReport>,
}

struct Batch {
    inputs: FrameInputs<f32>,
    image: Tensor<f32>,
    mask: Tensor<f32>,
}

/// Training state: networks, optimizers and counters.
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: AvatarNetworks<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub iteration: u64,
    pub d_steps: u64,
    pub identities: Vec<IdentityEntry>,
    pub avatar: Option<AvatarIdentity>,
    perceptual: PerceptualNet<f32>,
}

fn step_seed(seed: u64, iteration: u64) -> u64 {
    let mut x = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stack_crops(items: &[&Tensor<f32>], window: &SampleWindow) -> Result<Tensor<f32>> {
    let crops = items
        .iter()
        .map(|t| {
            let s = t.shape();
            crop_window(&(*t).clone().reshape(&[1, s[0], s[1], s[2]]), window)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<f32>> = crops.iter().collect();
    Ok(Tensor::stack(&refs))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = AvatarNetworks::new(&config.network, config.seed)?;
        Ok(Trainer {
            opt_g: Adam::new(config.lr_generator, config.beta1, config.beta2),
            opt_d: Adam::new(config.lr_discriminator, config.beta1, config.beta2),
            nets,
            iteration: 0,
            d_steps: 0,
            identities: Vec::new(),
            avatar: None,
            perceptual: PerceptualNet::new(),
            config,
        })
    }

    /// Adds a z_id slot for a video and returns its index.
    pub fn register_identity(&mut self, name: &str) -> usize {
        let index = self.identities.len();
        self.identities.push(IdentityEntry {
            name: name.to_string(),
            index,
        });
        index
    }

    fn check_videos(&self, videos: &[TrainingVideo]) -> Result<()> {
        if videos.is_empty() {
            return Err(Error::EmptySequence);
        }
        let f = self.config.network.frame_size;
        for v in videos {
            if v.frames.is_empty() {
                return Err(Error::Dataset(format!("video {} has no frames", v.name)));
            }
            if v.identity >= self.identities.len() {
                return Err(Error::Dataset(format!("video {} uses unregistered identity {}", v.name, v.identity)));
            }
            for fr in &v.frames {
                let ok = fr.image.shape() == [3, f, f]
                    && fr.uv.shape() == [3, f, f]
                    && fr.texture.shape() == [3, f, f]
                    && fr.mask.shape() == [1, f, f];
                if !ok {
                    return Err(Error::Dataset(format!(
                        "video {} frames must be {f}×{f} to match the network configuration",
                        v.name
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw_batch(&self, videos: &[TrainingVideo], rng: &mut impl Rng) -> Result<Batch> {
        let cfg = &self.config;
        let f = cfg.network.frame_size;
        let picks: Vec<(&TrainingVideo, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let v = &videos[rng.random_range(0..videos.len())];
                (v, rng.random_range(0..v.frames.len()))
            })
            .collect();
        let window = if cfg.augment {
            let s = cfg.network.sample_size;
            draw_sample_box(rng, (f, f), (s, s))?
        } else {
            SampleWindow::full((f, f))
        };
        let frames: Vec<&TrainingFrame> = picks.iter().map(|(v, i)| &v.frames[*i]).collect();
        let grab = |sel: fn(&TrainingFrame) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<&Tensor<f32>> = frames.iter().map(|fr| sel(fr)).collect();
            stack_crops(&items, &window)
        };
        let dim = cfg.network.latent_dim;
        let mut z_id = Vec::with_capacity(picks.len() * dim);
        let mut z_tmp = Vec::with_capacity(picks.len() * dim);
        for (v, i) in &picks {
            z_id.extend(self.nets.identity_code(v.identity).into_iter().map(|x| x as f32));
            z_tmp.extend(self.nets.temporal_code(v.timestamp(*i)).into_iter().map(|x| x as f32));
        }
        let n = picks.len();
        Ok(Batch {
            inputs: FrameInputs {
                uv: grab(|fr| &fr.uv)?,
                texture: grab(|fr| &fr.texture)?,
                window,
                z_id: Tensor::from_vec(&[n, dim], z_id),
                z_tmp: Tensor::from_vec(&[n, dim], z_tmp),
            },
            image: grab(|fr| &fr.image)?,
            mask: grab(|fr| &fr.mask)?,
        })
    }

    /// One discriminator update followed by one update of every
    /// generator-side network on a batch drawn from `videos` with the
    /// iteration's RNG.
    pub fn train_step(&mut self, videos: &[TrainingVideo]) -> Result<LossReport> {
        self.check_videos(videos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, self.iteration));
        let batch = self.draw_batch(videos, &mut rng)?;
        let w = self.config.weights.clone();
        let mut report = LossReport::default();

        let mut g = Graph::new();
        let composed = compose_frame(&mut g, &self.nets, &batch.inputs, None)?;
        let image = refine(&mut g, &self.nets, &batch.inputs, &composed)?;

        // Terms with weight 0 are not built: they cost time and would put
        // parameters on the tape that the objective does not depend on.
        let mut gan_g = None;
        if w.gan > 0.0 {
            let tex_pack = dwt(&batch.inputs.texture)?.into_tensor();
            let real_pack = dwt(&batch.image)?.into_tensor();
            let fake_pack = dwt(g.value(image))?.into_tensor();
            let (gan_d, r1) = self.discriminator_step(&real_pack, &fake_pack, &tex_pack)?;
            report.gan_d = gan_d;
            report.r1 = r1;
            let image_pack = crate::wavelet::dwt_var(&mut g, image);
            let tex = g.constant(tex_pack);
            let disc = &self.nets.disc;
            let fake_scores = g.frozen(|g| disc.forward(g, image_pack, tex))?;
            gan_g = Some(g_nonsaturating_loss(&mut g, fake_scores));
        }

        let real = g.constant(batch.image.clone());
        let gt_mask = g.constant(batch.mask.clone());
        let l1 = l1_loss(&mut g, image, real);
        let mask = mask_loss(&mut g, composed.mask, gt_mask);
        let perceptual = if w.perceptual > 0.0 {
            Some(self.perceptual.loss(&mut g, image, real)?)
        } else {
            None
        };

        let mut total: Option<Var> = None;
        for (weight, term) in [(w.l1, Some(l1)), (w.perceptual, perceptual), (w.mask, Some(mask)), (w.gan, gan_g)] {
            let Some(term) = term.filter(|_| weight != 0.0) else {
                continue;
            };
            let t = g.scale(term, weight as f32);
            total = Some(match total {
                Some(acc) => g.add(acc, t),
                None => t,
            });
        }
        let value = |v: Var| g.value(v).item() as f64;
        report.l1 = value(l1);
        report.perceptual = perceptual.map_or(0.0, value);
        report.mask = value(mask);
        report.gan_g = gan_g.map_or(0.0, value);
        report.total = total.map_or(0.0, value);
        let finite = [report.l1, report.perceptual, report.mask, report.gan_g, report.gan_d, report.r1, report.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("{report:?}"),
            });
        }

        if let Some(total) = total {
            let grads = g.backward(total);
            let opt = &mut self.opt_g;
            self.nets.visit_mut(&mut |name, p| {
                if name.starts_with(DISCRIMINATOR) {
                    return;
                }
                if let Some(grad) = grads.param(p) {
                    let grad = grad.clone();
                    opt.step(&name, p, &grad);
                }
            });
        }
        self.iteration += 1;
        Ok(report)
    }

    /// Updates only the discriminator against the current generator output;
    /// generator-side parameters are not touched. Returns the discriminator
    /// loss before the update.
    pub fn train_discriminator(&mut self, videos: &[TrainingVideo]) -> Result<f64> {
        self.check_videos(videos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, self.iteration));
        let batch = self.draw_batch(videos, &mut rng)?;
        let mut g = Graph::new();
        let nets = &self.nets;
        let image = g.frozen(|g| -> Result<Var> {
            let composed = compose_frame(g, nets, &batch.inputs, None)?;
            refine(g, nets, &batch.inputs, &composed)
        })?;
        let tex_pack = dwt(&batch.inputs.texture)?.into_tensor();
        let real_pack = dwt(&batch.image)?.into_tensor();
        let fake_pack = dwt(g.value(image))?.into_tensor();
        let (loss, _) = self.discriminator_step(&real_pack, &fake_pack, &tex_pack)?;
        self.iteration += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration - 1,
                detail: format!("discriminator loss {loss}"),
            });
        }
        Ok(loss)
    }

    /// Updates the discriminator; returns the logistic loss and the R1
    /// penalty (0 on steps where the lazy penalty is skipped).
    fn discriminator_step(&mut self, real_pack: &Tensor<f32>, fake_pack: &Tensor<f32>, tex_pack: &Tensor<f32>) -> Result<(f64, f64)> {
        let disc = &self.nets.disc;
        let mut g = Graph::new();
        let (r, f, t) = (
            g.constant(real_pack.clone()),
            g.constant(fake_pack.clone()),
            g.constant(tex_pack.clone()),
        );
        let sr = disc.forward(&mut g, r, t)?;
        let sf = disc.forward(&mut g, f, t)?;
        let loss = d_logistic_loss(&mut g, sr, sf);
        let grads = g.backward(loss);
        let mut all: Vec<Tensor<f32>> = crate::nn::Module::named_params(disc)
            .iter()
            .map(|(_, p)| grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        self.d_steps += 1;
        let interval = self.config.r1_interval;
        let mut r1 = 0.0;
        if interval > 0 && self.config.r1_gamma > 0.0 && self.d_steps.is_multiple_of(interval) {
            let (value, rg) = r1_penalty(disc, real_pack, tex_pack, self.config.r1_gamma)?;
            let k = interval as f32;
            for (a, b) in all.iter_mut().zip(&rg) {
                *a = a.zip_map(b, |x, y| x + k * y);
            }
            r1 = value;
        }
        let d_loss = g.value(loss).item() as f64;
        let mut it = all.into_iter();
        let opt = &mut self.opt_d;
        crate::nn::Module::visit_mut(&mut self.nets.disc, DISCRIMINATOR, &mut |name, p| {
            let grad = it.next().expect("one gradient per parameter");
            opt.step(&name, p, &grad);
        });
        Ok((d_loss, r1))
    }

    /// Self-driven reconstruction of every `eval_stride`-th frame of
    /// `video` with its cached canvases and the fixed middle-frame temporal
    /// code.
    pub fn evaluate(&self, video: &TrainingVideo) -> Result<EvalReport> {
        let z_id = self.nets.identity_code(video.identity);
        let canvases = self.nets.static_canvases(&z_id)?;
        let z_tmp = self.nets.temporal_code(video.middle_timestamp());
        let (mut p, mut m, mut n) = (0.0, 0.0, 0);
        for fr in video.frames.iter().step_by(self.config.eval_stride) {
            let (image, mask) = self.nets.infer(&z_id, Some(&canvases), &fr.uv, &fr.texture, &z_tmp)?;
            p += psnr(&image.map(|v| v.clamp(0.0, 1.0)), &fr.image)?;
            m += mae(&mask, &fr.mask)?;
            n += 1;
        }
        Ok(EvalReport {
            iteration: self.iteration,
            psnr: p / n as f64,
            mask_mae: m / n as f64,
        })
    }

    fn stop_reached(&self, e: &EvalReport) -> bool {
        match self.config.stop_psnr {
            Some(target) => e.psnr >= target && self.config.stop_mask_mae.is_none_or(|m| e.mask_mae <= m),
            None => false,
        }
    }

    /// Runs up to `iterations` steps, evaluating on the first video every
    /// `eval_every` steps and stopping early once the stop criterion holds.
    pub fn fit(
        &mut self,
        videos: &[TrainingVideo],
        iterations: u64,
        on_step: &mut dyn FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<FitOutcome> {
        self.check_videos(videos)?;
        let start = Instant::now();
        let mut outcome = FitOutcome::default();
        for k in 1..=iterations {
            let losses = self.train_step(videos)?;
            let record = StepRecord {
                iteration: self.iteration,
                losses,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_step(self, &record)?;
            outcome.iterations_run = k;
            let every = self.config.eval_every;
            if every > 0 && (k % every == 0 || k == iterations) {
                let e = self.evaluate(&videos[0])?;
                let stop = self.stop_reached(&e);
                outcome.evals.push(e);
                if stop {
                    outcome.reached_at = Some(k);
                    break;
                }
            }
        }
        Ok(outcome)
    }
}

/// A fresh trainer with one identity code per video; sets each video's
/// identity index.
pub fn start_pretraining(videos: &mut [TrainingVideo], config: &TrainConfig) -> Result<Trainer> {
    if videos.is_empty() {
        return Err(Error::Dataset("pre-training needs at least one video".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    for v in videos.iter_mut() {
        v.identity = trainer.register_identity(&v.name);
    }
    Ok(trainer)
}

/// Prepares a trained model for one new video: checks that the network
/// configuration matches, takes run settings (iterations, stop criteria,
/// learning rates, seed) from `config`, and appends a fresh identity code.
/// Optimizer state and counters carry over.
pub fn start_finetuning(mut trainer: Trainer, video: &mut TrainingVideo, config: &TrainConfig) -> Result<Trainer> {
    if config.network != trainer.config.network {
        return Err(Error::Config(
            "network configuration differs from the checkpoint (resolution, channels or switches)".into(),
        ));
    }
    config.validate()?;
    trainer.config = config.clone();
    trainer.opt_g.lr = config.lr_generator;
    trainer.opt_d.lr = config.lr_discriminator;
    video.identity = trainer.register_identity(&video.name);
    Ok(trainer)
}

/// Trains one model on several videos, each with its own identity code.
pub fn pretrain(
    videos: &mut [TrainingVideo],
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&Trainer, &StepRecord) -> Result<()>,
) -> Result<(Trainer, FitOutcome)> {
    let mut trainer = start_pretraining(videos, config)?;
    let outcome = trainer.fit(videos, config.iterations, on_step)?;
    Ok((trainer, outcome))
}

/// Continues from a trained model on one new video with a fresh identity
/// code.
pub fn finetune(
    trainer: Trainer,
    video: &mut TrainingVideo,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&Trainer, &StepRecord) -> Result<()>,
) -> Result<(Trainer, FitOutcome)> {
    let mut trainer = start_finetuning(trainer, video, config)?;
    let outcome = trainer.fit(std::slice::from_ref(video), config.iterations, on_step)?;
    Ok((trainer, outcome))
}
