//! Flat run configuration: one JSON object covering the networks, schedule,
//! training, sampling, and paths, with defaults for every field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetworkConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // network — `input_size` doubles as the sampler's patch size, since the
    // patch denoiser consumes exactly one patch
    pub input_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_resolution: usize,
    pub self_attention_resolution: usize,
    pub time_embed_dim: usize,
    pub rca_scale: Option<f64>,
    // diffusion schedule
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // training
    pub learning_rate: f64,
    pub epochs: usize,
    pub images_per_iteration: usize,
    pub patches_per_image: usize,
    pub lambda_global: f64,
    pub ema_decay: f64,
    // sampling
    pub r_step: usize,
    pub s_steps: usize,
    pub t_sf: f64,
    pub eps_bri: f64,
    // paths
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        let samp = SamplerConfig::default();
        Self {
            input_size: net.input_size,
            base_channels: net.base_channels,
            channel_multipliers: net.channel_multipliers,
            res_blocks_per_resolution: net.res_blocks_per_resolution,
            self_attention_resolution: net.self_attention_resolution,
            time_embed_dim: net.time_embed_dim,
            rca_scale: net.rca_scale,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            images_per_iteration: train.images_per_iteration,
            patches_per_image: train.patches_per_image,
            lambda_global: train.lambda_global,
            ema_decay: train.ema_decay,
            r_step: samp.r_step,
            s_steps: samp.s_steps,
            t_sf: samp.t_sf,
            eps_bri: samp.eps_bri,
            train_dir: None,
            val_dir: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 32-pixel patches, three resolutions, small widths.
    pub fn tiny() -> Self {
        let net = NetworkConfig::tiny();
        Self {
            input_size: net.input_size,
            base_channels: net.base_channels,
            channel_multipliers: net.channel_multipliers,
            res_blocks_per_resolution: net.res_blocks_per_resolution,
            self_attention_resolution: net.self_attention_resolution,
            time_embed_dim: net.time_embed_dim,
            rca_scale: net.rca_scale,
            ..Default::default()
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            input_size: self.input_size,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            res_blocks_per_resolution: self.res_blocks_per_resolution,
            self_attention_resolution: self.self_attention_resolution,
            time_embed_dim: self.time_embed_dim,
            rca_scale: self.rca_scale,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            images_per_iteration: self.images_per_iteration,
            patches_per_image: self.patches_per_image,
            lambda_global: self.lambda_global,
            ema_decay: self.ema_decay,
            seed: self.seed,
        }
    }

    pub fn sampling(&self) -> SamplerConfig {
        SamplerConfig {
            r_patch: self.input_size,
            r_step: self.r_step,
            s_steps: self.s_steps,
            t_sf: self.t_sf,
            eps_bri: self.eps_bri,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.training().validate()?;
        self.sampling().validate()?;
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.t_max % self.s_steps != 0 {
            return Err(Error::Config(format!(
                "s_steps {} must divide t_max {}",
                self.s_steps, self.t_max
            )));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
    }
}
