use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{AttentionMode, BackboneConfig, ModelConfig};
use crate::datagen::{DataConfig, SignalKind};
use crate::evalkit::EvalOptions;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ConfigKey {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> ConfigKey {
    ConfigKey { key, default, doc }
}

/// Every accepted key with its default.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("data.width", "64", "image width in pixels"),
    key("data.height", "64", "image height in pixels"),
    key("data.frames", "16", "frames per synthetic clip"),
    key("data.min_interval", "5", "pairs must be more than this many frames apart"),
    key("data.tau_lo", "2", "lower bound on mean moving-pixel flow (px)"),
    key("data.tau_hi", "auto", "upper bound on mean moving-pixel flow (px); auto = width / 4"),
    key("data.min_objects", "1", "fewest objects per scene"),
    key("data.max_objects", "3", "most objects per scene"),
    key("data.sketch_threshold", "0.5", "sketch keeps Sobel magnitudes above this fraction of the max"),
    key("data.max_drag_points", "4", "drag pairs per sample are uniform in [1, this]"),
    key("model.patch", "4", "patchify factor of the latent"),
    key("model.base_channels", "32", "channels at the finest level"),
    key("model.multipliers", "1,2,4", "channel multiplier per level"),
    key("model.attention_levels", "1,2", "levels carrying attention sites"),
    key("model.heads", "4", "attention heads"),
    key("model.embed_dim", "64", "image-embedding and timestep width"),
    key("model.norm_groups", "8", "group-norm groups"),
    key("model.attention_mode", "matching", "frame interaction: temporal, crossframe or matching"),
    key("model.control_width", "16", "control encoder channels"),
    key("train.steps", "3000", "optimizer steps (overridden by --steps)"),
    key("train.batch_size", "1", "samples per optimizer step"),
    key("train.lr", "0.001", "peak AdamW learning rate"),
    key("train.min_lr_ratio", "0.1", "final learning rate as a fraction of the peak"),
    key("train.warmup_steps", "100", "linear warmup steps"),
    key("train.weight_decay", "0.01", "decoupled weight decay"),
    key("train.grad_clip", "1.0", "global gradient-norm clip"),
    key("train.lambda_match", "1.0", "weight of the matching loss"),
    key("train.reconstruct_source", "true", "include the source frame in the diffusion loss"),
    key("train.diffusion_steps", "1000", "training discretisation of the noise schedule"),
    key("sample.steps", "25", "Euler sampling steps"),
    key("sample.match_timesteps", "100,300,500", "diffusion steps at which matching accuracy is scored"),
];

/// Flat `key = value` settings over the documented defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// `key = value` lines; `#` starts a comment. Unknown or repeated keys
    /// are errors.
    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(context, format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.values.contains_key(k) {
                return Err(Error::format(context, format!("line {}: {k} is set twice", no + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::format(context, format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        if !CONFIG_KEYS.iter().any(|c| c.key == k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        self.values.insert(k.to_owned(), v.to_owned());
        Ok(())
    }

    fn raw(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_else(|| CONFIG_KEYS.iter().find(|c| c.key == k).expect("known key").default)
    }

    fn get<T: FromStr>(&self, k: &str) -> Result<T> {
        let v = self.raw(k);
        v.parse().map_err(|_| Error::Config(format!("{k} = {v:?} is not a valid value")))
    }

    fn list(&self, k: &str) -> Result<Vec<usize>> {
        let v = self.raw(k);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{k} = {v:?} is not a comma-separated list of integers")))).collect()
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let mut d = DataConfig::default().with_size(self.get("data.height")?, self.get("data.width")?);
        d.scene.frame_count = self.get("data.frames")?;
        d.scene.min_objects = self.get("data.min_objects")?;
        d.scene.max_objects = self.get("data.max_objects")?;
        d.min_interval = self.get("data.min_interval")?;
        d.tau_lo = self.get("data.tau_lo")?;
        if self.raw("data.tau_hi") != "auto" {
            d.tau_hi = self.get("data.tau_hi")?;
        }
        d.sketch_threshold = self.get("data.sketch_threshold")?;
        d.max_drag_points = self.get("data.max_drag_points")?;
        let model = self.model_config(SignalKind::Sketch)?;
        d.token_strides = model.backbone.attention_strides();
        if d.scene.min_objects == 0 || d.scene.min_objects > d.scene.max_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        d.validate()?;
        Ok(d)
    }

    pub fn model_config(&self, signal: SignalKind) -> Result<ModelConfig> {
        let backbone = BackboneConfig {
            image_height: self.get("data.height")?,
            image_width: self.get("data.width")?,
            patch: self.get("model.patch")?,
            base_channels: self.get("model.base_channels")?,
            multipliers: self.list("model.multipliers")?,
            attention_levels: self.list("model.attention_levels")?,
            heads: self.get("model.heads")?,
            embed_dim: self.get("model.embed_dim")?,
            attention_mode: self.get::<String>("model.attention_mode")?.parse::<AttentionMode>()?,
            norm_groups: self.get("model.norm_groups")?,
        };
        backbone.validate()?;
        Ok(ModelConfig { backbone, signal, control_width: self.get("model.control_width")? })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            steps: self.get("train.steps")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            min_lr_ratio: self.get("train.min_lr_ratio")?,
            warmup_steps: self.get("train.warmup_steps")?,
            weight_decay: self.get("train.weight_decay")?,
            grad_clip: self.get("train.grad_clip")?,
            lambda_match: self.get("train.lambda_match")?,
            reconstruct_source: self.get("train.reconstruct_source")?,
            diffusion_steps: self.get("train.diffusion_steps")?,
            ..TrainConfig::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            sample_steps: self.get("sample.steps")?,
            match_timesteps: self.list("sample.match_timesteps")?,
            diffusion_steps: self.get("train.diffusion_steps")?,
            ..EvalOptions::default()
        })
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn render(&self) -> String {
        CONFIG_KEYS.iter().map(|c| format!("{} = {}\n", c.key, self.raw(c.key))).collect()
    }
}
