//! Model and training hyperparameters.
//!
//! A config file is a flat JSON object; every key is optional and missing keys
//! take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution at which the render net receives its low-resolution copy of the
/// fused feature map.
pub const LOW_RES_INJECT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_resolution: usize,
    /// Side of the local generators' output grid (`H^c = W^c`).
    pub coarse_resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,

    pub local_hidden_dim: usize,
    pub local_feature_dim: usize,
    pub local_layers: usize,
    pub base_layers: usize,
    pub shape_layers: usize,
    pub texture_layers: usize,
    pub fourier_channels: usize,
    pub fourier_sigma: f64,

    pub render_channel_base: usize,
    pub render_channel_max: usize,
    pub disc_channel_base: usize,
    pub disc_channel_max: usize,
    pub mbstd_group: usize,

    pub lambda_r1_img: f64,
    pub lambda_r1_seg: f64,
    pub lambda_mask: f64,
    pub path_reg_weight: f64,
    pub mixing_prob: f64,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub r1_interval: usize,
    pub path_interval: usize,
    pub path_batch_shrink: usize,
    pub path_decay: f64,
    pub ema_half_life_images: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_resolution: 64,
            coarse_resolution: 64,
            latent_dim: 512,
            mapping_layers: 8,
            mapping_lr_mul: 0.01,

            local_hidden_dim: 64,
            local_feature_dim: 512,
            local_layers: 10,
            base_layers: 2,
            shape_layers: 4,
            texture_layers: 4,
            fourier_channels: 128,
            fourier_sigma: 1.0,

            render_channel_base: 32768,
            render_channel_max: 512,
            disc_channel_base: 32768,
            disc_channel_max: 512,
            mbstd_group: 4,

            lambda_r1_img: 10.0,
            lambda_r1_seg: 1000.0,
            lambda_mask: 100.0,
            path_reg_weight: 0.5,
            mixing_prob: 0.3,

            batch_size: 16,
            learning_rate: 0.002,
            r1_interval: 16,
            path_interval: 8,
            path_batch_shrink: 2,
            path_decay: 0.01,
            ema_half_life_images: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let config: Self = serde_json::from_str(text).map_err(|e| Error::json("config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.image_resolution.is_power_of_two() || self.image_resolution < 8 {
            return bad(format!(
                "image_resolution must be a power of two >= 8, got {}",
                self.image_resolution
            ));
        }
        if !self.coarse_resolution.is_power_of_two()
            || self.coarse_resolution < LOW_RES_INJECT
            || self.image_resolution % self.coarse_resolution != 0
        {
            return bad(format!(
                "coarse_resolution {} must be a power of two, divisible by {} and divide image_resolution {}",
                self.coarse_resolution, LOW_RES_INJECT, self.image_resolution
            ));
        }
        if self.base_layers + self.shape_layers + self.texture_layers != self.local_layers {
            return bad(format!(
                "base/shape/texture layers {}/{}/{} must sum to local_layers {}",
                self.base_layers, self.shape_layers, self.texture_layers, self.local_layers
            ));
        }
        if self.shape_layers == 0 || self.texture_layers == 0 {
            return bad("shape_layers and texture_layers must be at least 1".into());
        }
        if self.fourier_channels == 0 || self.fourier_channels % 2 != 0 {
            return bad(format!(
                "fourier_channels must be even and positive, got {}",
                self.fourier_channels
            ));
        }
        for (name, dim) in [
            ("latent_dim", self.latent_dim),
            ("mapping_layers", self.mapping_layers),
            ("local_hidden_dim", self.local_hidden_dim),
            ("local_feature_dim", self.local_feature_dim),
            ("render_channel_max", self.render_channel_max),
            ("disc_channel_max", self.disc_channel_max),
            ("mbstd_group", self.mbstd_group),
            ("batch_size", self.batch_size),
            ("r1_interval", self.r1_interval),
            ("path_interval", self.path_interval),
            ("path_batch_shrink", self.path_batch_shrink),
        ] {
            if dim == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, value) in [
            ("lambda_r1_img", self.lambda_r1_img),
            ("lambda_r1_seg", self.lambda_r1_seg),
            ("lambda_mask", self.lambda_mask),
            ("path_reg_weight", self.path_reg_weight),
            ("learning_rate", self.learning_rate),
            ("fourier_sigma", self.fourier_sigma),
            ("mapping_lr_mul", self.mapping_lr_mul),
            ("ema_half_life_images", self.ema_half_life_images),
        ] {
            if !value.is_finite() || value < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {value}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mixing_prob) {
            return bad(format!("mixing_prob must lie in [0, 1], got {}", self.mixing_prob));
        }
        if !(0.0..=1.0).contains(&self.path_decay) {
            return bad(format!("path_decay must lie in [0, 1], got {}", self.path_decay));
        }
        Ok(())
    }

    /// Render-net width at a given resolution, StyleGAN2 schedule.
    pub fn render_channels(&self, resolution: usize) -> usize {
        (self.render_channel_base / resolution).clamp(1, self.render_channel_max)
    }

    pub fn disc_channels(&self, resolution: usize) -> usize {
        (self.disc_channel_base / resolution).clamp(1, self.disc_channel_max)
    }

    /// Number of latent slots for `num_classes` classes: one base slot plus a
    /// shape and a texture slot per class.
    pub fn num_slots(num_classes: usize) -> usize {
        1 + 2 * num_classes
    }

    /// Index of the last layer of the shape block (1-based layer numbering),
    /// where the depth head attaches.
    pub fn depth_tap_layer(&self) -> usize {
        self.base_layers + self.shape_layers
    }
}
