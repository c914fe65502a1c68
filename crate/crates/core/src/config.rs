//! Declarative run configuration with named profiles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::SynthSpec;
use crate::error::{Error, Result};
use crate::locnet::{InputConvConfig, LocNetConfig, ModelConfig, Stage};
use crate::pipeline::PipelineConfig;
use crate::tensor::Float;
use crate::training::{AdaDeltaConfig, SamplerConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    PaperShaped,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-shaped" => Ok(Profile::PaperShaped),
            other => Err(Error::config(format!(
                "unknown profile {other:?} (expected desk or paper-shaped)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub mdgru_channels: Vec<usize>,
    pub pointwise_channels: Vec<usize>,
    pub stride: usize,
    pub kernel: usize,
    pub dropconnect_rate: Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub optimizer: AdaDeltaConfig,
    pub coarse_offset: usize,
    pub checkpoint_every: usize,
}

/// Everything a run depends on. The top-level seed feeds data synthesis and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::PaperShaped => Self::paper_shaped(),
        }
    }

    /// 64³ volumes, coarse factor 2, 32³ windows, reduced channel widths.
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 1,
            synth: SynthConfig {
                count: 70,
                spec: SynthSpec {
                    extents: [64, 64, 64],
                    spacing: [1.0, 1.0, 1.0],
                    background_scale: 24.0,
                    background_amplitude: 0.3,
                    notch_depth: 1.0,
                    notch_width: [2.0, 3.0, 4.5],
                    noise: 0.05,
                    margin: 16,
                    seed: 1,
                    split_weights: [5.0, 1.0, 1.0],
                },
            },
            pipeline: PipelineConfig {
                window: [32, 32, 32],
                coarse_factor: 2,
                padded: [64, 64, 64],
                input_conv_channels: 16,
                highpass_sigma: 5.0,
                superres: 4,
                parabola: true,
                coarse_parabola: false,
            },
            network: NetworkConfig {
                mdgru_channels: vec![8, 16, 32],
                pointwise_channels: vec![12, 24, 48],
                stride: 2,
                kernel: 3,
                dropconnect_rate: 0.5,
            },
            train: TrainSection {
                epochs: 40,
                optimizer: AdaDeltaConfig {
                    rho: 0.95,
                    eps: 1e-6,
                    learning_rate: 1.0,
                },
                coarse_offset: 25,
                checkpoint_every: 10,
            },
        }
    }

    /// The reference geometry: 256³ padding, factor 4, 64³ windows, full widths.
    pub fn paper_shaped() -> Self {
        RunConfig {
            profile: Profile::PaperShaped,
            seed: 1,
            synth: SynthConfig {
                count: 1218,
                spec: SynthSpec {
                    extents: [160, 240, 256],
                    spacing: [1.0, 1.0, 1.0],
                    background_scale: 96.0,
                    background_amplitude: 0.3,
                    notch_depth: 1.0,
                    notch_width: [2.0, 3.0, 4.5],
                    noise: 0.05,
                    margin: 32,
                    seed: 1,
                    split_weights: [0.8, 0.1, 0.1],
                },
            },
            pipeline: PipelineConfig {
                window: [64, 64, 64],
                coarse_factor: 4,
                padded: [256, 256, 256],
                input_conv_channels: 16,
                highpass_sigma: 5.0,
                superres: 4,
                parabola: true,
                coarse_parabola: false,
            },
            network: NetworkConfig {
                mdgru_channels: vec![32, 64, 128],
                pointwise_channels: vec![48, 96, 192],
                stride: 2,
                kernel: 3,
                dropconnect_rate: 0.5,
            },
            train: TrainSection {
                epochs: 50,
                optimizer: AdaDeltaConfig::default(),
                coarse_offset: 100,
                checkpoint_every: 5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.spec.validate()?;
        self.pipeline.validate()?;
        if self.synth.count == 0 {
            return Err(Error::config("synth.count must be positive"));
        }
        self.model_config(Stage::Coarse, 1)?.validate()?;
        self.model_config(Stage::Fine, self.pipeline.superres)?.validate()?;
        Ok(())
    }

    /// Applies the top-level seed to the sections that consume one.
    fn sync_seed(&mut self) {
        self.synth.spec.seed = self.seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.sync_seed();
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::file(path))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seed();
    }

    /// Model configuration for one stage; the coarse stage always uses one class per cell.
    pub fn model_config(&self, stage: Stage, superres: usize) -> Result<ModelConfig> {
        let net = &self.network;
        let (input_conv, input_channels, superres) = match stage {
            Stage::Coarse => {
                let ic: InputConvConfig = self.pipeline.input_conv();
                let c = ic.out_channels;
                (Some(ic), c, 1)
            }
            Stage::Fine => (None, 2, superres),
        };
        let extents = self.pipeline.window;
        let cfg = ModelConfig {
            stage,
            input_conv,
            net: LocNetConfig {
                input_extents: extents,
                input_channels,
                mdgru_channels: net.mdgru_channels.clone(),
                pointwise_channels: net.pointwise_channels.clone(),
                stride: net.stride,
                kernel: net.kernel,
                classes: extents.map(|n| n * superres),
                superres,
                dropconnect_rate: net.dropconnect_rate,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            seed: self.seed,
            optimizer: self.train.optimizer,
            coarse_offset: self.train.coarse_offset,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn sampler(&self, stage: Stage, superres: usize) -> SamplerConfig {
        let mut pipe = self.pipeline.clone();
        pipe.superres = superres;
        SamplerConfig::new(stage, &pipe, self.train.coarse_offset)
    }
}
