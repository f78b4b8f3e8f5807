//! Learnable components: encoder, viewpoint heads, decoder and critics.

mod discriminator;
mod generator;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

pub use discriminator::{
    downsample_to, Critic, DiscriminatorState, MlpDiscriminator, ProgressiveDiscriminator,
};
pub use generator::{
    Decoder, Encoder, EncoderOutput, Generator, GeneratorOutput, ViewEmbedder, ViewPrediction, ViewPredictor,
};
pub use layers::{l2_normalize, Conv, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_resolution: usize,
    pub max_resolution: usize,
    /// Channels of each stage's input layer, lowest resolution first.
    pub channels: Vec<usize>,
    /// Hidden width of the MLP variant.
    pub mlp_hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_resolution: 16, max_resolution: 64, channels: vec![32, 16, 8], mlp_hidden: 128 }
    }
}

impl DiscriminatorConfig {
    pub fn stages(&self) -> Result<usize> {
        let (b, m) = (self.base_resolution, self.max_resolution);
        if b < 4 || b % 4 != 0 || m < b || m % b != 0 || !(m / b).is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator resolutions {b}..{m} must be multiples of 4 a power of two apart"
            )));
        }
        Ok((m / b).trailing_zeros() as usize + 1)
    }
}

/// Architecture hyperparameters. Everything that determines parameter
/// shapes lives here, so the digest identifies compatible checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub encoder_channels: Vec<usize>,
    pub code_dim: usize,
    pub view_dim: usize,
    pub head_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub template_subdivisions: u32,
    pub max_offset: f64,
    pub camera_distance: f64,
    pub discriminator: DiscriminatorConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            resolution: 64,
            encoder_channels: vec![16, 32, 64, 128],
            code_dim: 512,
            view_dim: 512,
            head_hidden: 512,
            decoder_hidden: vec![512, 512],
            template_subdivisions: 3,
            max_offset: 1.0,
            camera_distance: CameraPose::DEFAULT_DISTANCE,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl NetworkConfig {
    /// Smaller widths that train in minutes on one CPU core.
    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            encoder_channels: vec![8, 16, 32, 32],
            code_dim: 128,
            view_dim: 128,
            head_hidden: 128,
            decoder_hidden: vec![256],
            discriminator: DiscriminatorConfig { channels: vec![16, 8, 4], mlp_hidden: 64, ..Default::default() },
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        let n = self.encoder_channels.len();
        if r == 0 || !r.is_power_of_two() {
            return Err(Error::Config(format!("resolution {r} must be a power of two")));
        }
        if n == 0 || r >> n == 0 {
            return Err(Error::Config(format!("{n} encoder blocks cannot halve {r} that many times")));
        }
        let widths = [self.code_dim, self.view_dim, self.head_hidden];
        if self.encoder_channels.iter().chain(&self.decoder_hidden).chain(&widths).any(|&c| c == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.template_subdivisions > 5 {
            return Err(Error::Config("template subdivisions must be at most 5".into()));
        }
        if !(self.max_offset > 0.0) || !(self.camera_distance > 0.0) {
            return Err(Error::Config("max_offset and camera_distance must be positive".into()));
        }
        self.discriminator.stages()?;
        if self.discriminator.max_resolution > r {
            return Err(Error::Config(format!(
                "discriminator max resolution {} exceeds image resolution {r}",
                self.discriminator.max_resolution
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Which critic a run trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Progressive,
    Mlp,
}

/// The complete set of trainable networks.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetworkConfig,
    pub generator: Generator,
    pub critic: Critic,
}

impl Networks {
    pub fn new(config: &NetworkConfig, critic: CriticKind, seed: u64) -> Result<Networks> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(&mut rng, config)?;
        let critic = match critic {
            CriticKind::Progressive => {
                Critic::Progressive(ProgressiveDiscriminator::new(&mut rng, &config.discriminator)?)
            }
            CriticKind::Mlp => Critic::Mlp(MlpDiscriminator::new(
                &mut rng,
                config.resolution,
                config.discriminator.mlp_hidden,
            )),
        };
        Ok(Networks { config: config.clone(), generator, critic })
    }

    pub fn critic_kind(&self) -> CriticKind {
        match self.critic {
            Critic::Progressive(_) => CriticKind::Progressive,
            Critic::Mlp(_) => CriticKind::Mlp,
        }
    }

    /// Generator parameters followed by critic parameters, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, crate::Tensor)> {
        let mut out = self.generator.named_parameters();
        out.extend(self.critic.named_parameters());
        out
    }
}
