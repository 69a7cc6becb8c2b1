use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, Trainer};
use crate::container::{write_atomic, Container};
use crate::error::{Error, Result};
use crate::model::AvatarNetworks;
use crate::raster::CropBox;

/// Sub-directory holding parameters, buffers and optimizer moments.
pub const CHECKPOINT_ARRAYS: &str = "arrays";
pub const CHECKPOINT_STATE: &str = "state.json";
pub const CHECKPOINT_CONFIG: &str = "config.toml";

/// A named slot of the identity-code table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub name: String,
    pub index: usize,
}

/// What inference needs to know about the subject the model was last
/// fitted to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvatarIdentity {
    pub identity: usize,
    /// Temporal code timestamp used at inference.
    pub timestamp: f64,
    pub theta_shape: Vec<f64>,
    pub theta_tex: Vec<f64>,
    /// Crop of the source video the conditioning images are rendered in.
    pub crop_box: CropBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub iteration: u64,
    pub d_steps: u64,
    pub identities: Vec<IdentityEntry>,
    pub avatar: Option<AvatarIdentity>,
}

impl Trainer {
    /// Writes networks, optimizer state, counters and the config into `dir`.
    /// The state file is written last, so a directory with a readable state
    /// file is complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut c = Container::new();
        self.nets.write_to(&mut c);
        self.opt_g.write_to("adam_g", &mut c);
        self.opt_d.write_to("adam_d", &mut c);
        c.write(&dir.join(CHECKPOINT_ARRAYS))?;
        write_atomic(&dir.join(CHECKPOINT_CONFIG), self.config.to_toml().as_bytes())?;
        let state = CheckpointState {
            iteration: self.iteration,
            d_steps: self.d_steps,
            identities: self.identities.clone(),
            avatar: self.avatar.clone(),
        };
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        write_atomic(&dir.join(CHECKPOINT_STATE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CHECKPOINT_CONFIG);
        if !config_path.exists() {
            return Err(Error::MissingInput(config_path));
        }
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config = TrainConfig::from_toml(&text)?;
        let state_path = dir.join(CHECKPOINT_STATE);
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: CheckpointState =
            serde_json::from_str(&text).map_err(|e| Error::format("checkpoint state", &state_path, e))?;
        let c = Container::read(&dir.join(CHECKPOINT_ARRAYS))?;
        let mut trainer = Trainer::new(config)?;
        trainer.nets = AvatarNetworks::read_from(&trainer.config.network, &c)?;
        let mut opt_g = Adam::new(trainer.config.lr_generator, trainer.config.beta1, trainer.config.beta2);
        opt_g.read_from("adam_g", &c)?;
        let mut opt_d = Adam::new(trainer.config.lr_discriminator, trainer.config.beta1, trainer.config.beta2);
        opt_d.read_from("adam_d", &c)?;
        trainer.opt_g = opt_g;
        trainer.opt_d = opt_d;
        trainer.iteration = state.iteration;
        trainer.d_steps = state.d_steps;
        trainer.identities = state.identities;
        trainer.avatar = state.avatar;
        Ok(trainer)
    }
}
