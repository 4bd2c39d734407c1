//! Run configuration: model shape, map settings and training knobs.
//!
//! Loaded from TOML; every field has a default so partial files work.

use bevnav_core::env::WorldParams;
use bevnav_core::MapSpec;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub pano_layers: usize,
    pub long_layers: usize,
    pub short_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    /// Width of the raw view and grid features.
    pub view_dim: usize,
    pub num_classes: usize,
    /// Step embedding table size minus one; later steps share the last row.
    pub max_step: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            text_layers: 2,
            pano_layers: 2,
            long_layers: 2,
            short_layers: 2,
            vocab_size: 37,
            max_len: 48,
            ffn_mult: 4,
            view_dim: 32,
            num_classes: 8,
            max_step: 50,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads");
        }
        if self.vocab_size < 5 || self.max_len == 0 || self.ffn_mult == 0 || self.view_dim == 0 {
            return bad("vocab_size, max_len, ffn_mult and view_dim must be positive");
        }
        if self.num_classes == 0 || self.num_classes > 64 {
            return bad("num_classes must lie in 1..=64");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Lower bound on the parameter values a model of this shape holds,
    /// counting embeddings and the large weight matrices only. Saturates
    /// instead of overflowing.
    pub fn min_param_count(&self) -> usize {
        let d = self.dim;
        let d2 = d.saturating_mul(d);
        // four attention projections plus the two feed-forward matrices
        let block = d2.saturating_mul(self.ffn_mult.saturating_mul(2).saturating_add(4));
        let blocks = self
            .text_layers
            .saturating_add(self.pano_layers)
            .saturating_add(self.long_layers.saturating_mul(2))
            .saturating_add(self.short_layers.saturating_mul(2));
        // two cross-attention modules per cross layer
        let cross = d2.saturating_mul(8).saturating_mul(self.long_layers.saturating_add(self.short_layers));
        let tables = self
            .vocab_size
            .saturating_mul(2)
            .saturating_add(self.max_len)
            .saturating_add(self.max_step.saturating_add(1))
            .saturating_add(self.view_dim.saturating_mul(2))
            .saturating_mul(d);
        block.saturating_mul(blocks).saturating_add(cross).saturating_add(tables)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub size: usize,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Hop radius of the map update.
    pub kappa: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        let s = MapSpec::default();
        Self { size: s.u, cell_size: s.cell_size, z_min: s.z_min, z_max: s.z_max, kappa: 1 }
    }
}

impl MapConfig {
    pub fn spec(&self) -> Result<MapSpec> {
        Ok(MapSpec::new(self.size, self.size, self.cell_size, self.z_min, self.z_max)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Relative sampling weights of masked-word, action-prediction and
    /// masked-cell tasks.
    pub task_ratio: [u32; 3],
    pub mask_prob: f64,
    pub episodes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            task_ratio: [5, 5, 1],
            mask_prob: 0.15,
            episodes: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabel {
    Goal,
    Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Weight of the teacher-forcing term.
    pub lambda: f64,
    /// Decision budget per episode.
    pub max_steps: usize,
    pub label: PseudoLabel,
    /// Disable to train with teacher forcing only.
    pub student_forcing: bool,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            lambda: 0.2,
            max_steps: 15,
            label: PseudoLabel::Goal,
            student_forcing: true,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: EncoderConfig,
    pub map: MapConfig,
    pub world: WorldParams,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.map.spec()?;
        self.world.validate()?;
        if self.model.view_dim != self.world.feature_dim {
            return Err(ModelError::Config("model.view_dim must equal world.feature_dim".into()));
        }
        if self.model.num_classes != self.world.num_classes {
            return Err(ModelError::Config("model.num_classes must equal world.num_classes".into()));
        }
        let words = bevnav_core::env::build_vocab(self.world.num_classes).len();
        if self.model.vocab_size < words {
            return Err(ModelError::Config(format!("model.vocab_size must be at least {words}")));
        }
        let p = &self.pretrain;
        if !(0.0..=1.0).contains(&p.mask_prob) || p.task_ratio.iter().all(|r| *r == 0) || p.batch == 0 {
            return Err(ModelError::Config("pretrain needs a valid mask_prob, task_ratio and batch".into()));
        }
        let f = &self.finetune;
        if !(0.0..=1.0).contains(&f.lambda) || f.max_steps == 0 || f.batch == 0 {
            return Err(ModelError::Config("finetune needs lambda in [0, 1] and positive max_steps and batch".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = Config::from_toml("[model]\ndim = 32\n[finetune]\nlambda = 0.8\n").unwrap();
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.finetune.lambda, 0.8);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[model]\ndim = 30\nheads = 4\n").is_err());
        assert!(Config::from_toml("[finetune]\nlambda = 2.0\n").is_err());
        assert!(Config::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("not toml").is_err());
    }
}
