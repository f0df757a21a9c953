use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::{Toggles, DEFAULT_LAMBDA, DEFAULT_TOP_K_PERCENT};
use crate::scene::DEFAULT_NOVEL;

/// Everything a training run depends on besides the scenes. Read from TOML;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per step.
    pub batch_size: usize,
    /// Lower bound on the sampled share of superpoints during training.
    pub min_query_fraction: f64,
    pub max_queries: usize,
    /// Clicks per scene per step.
    pub k_v: usize,
    /// Expressions per scene per step.
    pub k_t: usize,
    /// Cap on click/expression pairs per step.
    pub max_pairs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub top_k_percent: f64,
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Class weight of unmatched queries pushed toward no-object.
    pub no_object_weight: f64,
    pub eval_period: usize,
    pub seed: u64,
    pub distill: bool,
    pub contrastive: bool,
    pub rank: bool,
    pub finetune_trick: bool,
    pub finetune_epochs: usize,
    /// Multiplier on `lr0` and `weight_decay` during fine-tuning.
    pub finetune_factor: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub points_per_scene: usize,
    pub novel_classes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 128,
            batch_size: 2,
            min_query_fraction: 0.5,
            max_queries: crate::decoder::MAX_QUERIES,
            k_v: 4,
            k_t: 4,
            max_pairs: 8,
            lr0: 1e-4,
            weight_decay: 0.05,
            lambda: DEFAULT_LAMBDA,
            top_k_percent: DEFAULT_TOP_K_PERCENT,
            layers: 6,
            heads: 4,
            d_in: 32,
            d_out: 256,
            no_object_weight: 0.1,
            eval_period: 16,
            seed: 0,
            distill: true,
            contrastive: true,
            rank: true,
            finetune_trick: true,
            finetune_epochs: 40,
            finetune_factor: 1e-3,
            train_scenes: 32,
            val_scenes: 8,
            points_per_scene: 2048,
            novel_classes: DEFAULT_NOVEL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_in: self.d_in,
            d_out: self.d_out,
            layers: self.layers,
            heads: self.heads,
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            distill: self.distill,
            contrastive: self.contrastive,
            rank: self.rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder().validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.min_query_fraction > 0.0 && self.min_query_fraction <= 1.0) {
            return bad("min_query_fraction must lie in (0, 1]");
        }
        if self.max_queries == 0 {
            return bad("max_queries must be positive");
        }
        if !(self.lr0 >= 0.0 && self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return bad("lr0, weight_decay and lambda must be nonnegative");
        }
        if !(self.top_k_percent > 0.0 && self.top_k_percent <= 100.0) {
            return bad("top_k_percent must lie in (0, 100]");
        }
        if !(self.no_object_weight >= 0.0 && self.finetune_factor >= 0.0) {
            return bad("weights must be nonnegative");
        }
        if self.eval_period == 0 {
            return bad("eval_period must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lr0, c.weight_decay, c.lambda, c.top_k_percent),
            (1e-4, 0.05, 0.1, 10.0)
        );
        assert_eq!((c.layers, c.d_in, c.d_out, c.eval_period), (6, 32, 256, 16));
        assert!(c.distill && c.contrastive && c.rank && c.finetune_trick);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 7\nlr0 = 0.001\n").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.d_out, 256);
        assert!(TrainConfig::from_toml("epoch = 7\n").is_err());
        assert!(TrainConfig::from_toml("heads = 5\n").is_err());
    }
}
