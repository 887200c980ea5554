//! Run configuration: a TOML file with desk-scale defaults.

use std::path::Path;

use mdr_core::conditioning::ConditioningConfig;
use mdr_core::optim::AdamWConfig;
use mdr_core::perception::{KlOrder, PerceptionConfig};
use mdr_core::restoration::RestorationConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read_string, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Cosine decay to zero over the run instead of a constant rate.
    pub cosine: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 0.02, clip_norm: None, cosine: false }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..AdamWConfig::default() }
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionTrainConfig {
    pub d: usize,
    pub widths: [usize; 4],
    pub input_size: usize,
    /// Side of the aligned training window.
    pub crop: usize,
    pub epochs: usize,
    /// Scenes whose aligned view sets are accumulated per update.
    pub scenes_per_step: usize,
    pub text_seed: u64,
    /// `prediction_first` (as printed) or `target_first`.
    pub kl_order: String,
    pub optim: OptimConfig,
}

impl Default for PerceptionTrainConfig {
    fn default() -> Self {
        let p = PerceptionConfig::default();
        Self {
            d: p.d,
            widths: p.widths,
            input_size: p.input_size,
            crop: 56,
            epochs: 12,
            scenes_per_step: 1,
            text_seed: 0x7e47,
            kl_order: "prediction_first".into(),
            optim: OptimConfig { lr: 1e-3, clip_norm: Some(5.0), ..OptimConfig::default() },
        }
    }
}

impl PerceptionTrainConfig {
    pub fn model(&self) -> PerceptionConfig {
        PerceptionConfig { d: self.d, widths: self.widths, input_size: self.input_size }
    }

    pub fn kl(&self) -> Result<KlOrder> {
        match self.kl_order.as_str() {
            "prediction_first" => Ok(KlOrder::PredictionFirst),
            "target_first" => Ok(KlOrder::TargetFirst),
            other => Err(crate::Error::Invalid(format!("unknown kl_order {other:?}"))),
        }
    }
}

/// Serializable mirror of the backbone configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 5],
    pub blocks_per_stage: usize,
    pub window: usize,
    pub head_dim: usize,
    pub freq_experts: usize,
    pub rank: usize,
    pub freq_knots: usize,
    pub dc_hidden: usize,
    pub expert_expansion: usize,
    pub base_hidden: usize,
    pub input_skips: bool,
    pub token_dim: usize,
    pub token_heads: usize,
    pub stages: usize,
}

impl From<&RestorationConfig> for ModelConfig {
    fn from(c: &RestorationConfig) -> Self {
        Self {
            widths: c.widths,
            blocks_per_stage: c.blocks_per_stage,
            window: c.window,
            head_dim: c.head_dim,
            freq_experts: c.freq_experts,
            rank: c.rank,
            freq_knots: c.freq_knots,
            dc_hidden: c.dc_hidden,
            expert_expansion: c.expert_expansion,
            base_hidden: c.base_hidden,
            input_skips: c.input_skips,
            token_dim: c.cond.e,
            token_heads: c.cond.heads,
            stages: c.cond.stages,
        }
    }
}

impl ModelConfig {
    /// Backbone configuration for embeddings of width `d`.
    pub fn resolve(&self, d: usize) -> RestorationConfig {
        RestorationConfig {
            widths: self.widths,
            blocks_per_stage: self.blocks_per_stage,
            window: self.window,
            head_dim: self.head_dim,
            freq_experts: self.freq_experts,
            rank: self.rank,
            freq_knots: self.freq_knots,
            dc_hidden: self.dc_hidden,
            expert_expansion: self.expert_expansion,
            base_hidden: self.base_hidden,
            input_skips: self.input_skips,
            cond: ConditioningConfig { e: self.token_dim, heads: self.token_heads, stages: self.stages, d },
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        (&RestorationConfig::desk()).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    PerScene,
    AllPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationTrainConfig {
    pub model: ModelConfig,
    pub crop: usize,
    pub epochs: usize,
    pub batch: usize,
    /// `per_scene`: each training scene once with a randomly drawn seen
    /// config; `all_pairs`: every (scene, seen config) pair.
    pub epoch: EpochMode,
    pub freq_weight: f64,
    pub base_weight: f64,
    pub freq_ratio: f64,
    pub guided_radius: usize,
    pub guided_eps: f64,
    pub overload_probability: f64,
    pub optim: OptimConfig,
}

impl Default for RestorationTrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            crop: 48,
            epochs: 12,
            batch: 2,
            epoch: EpochMode::PerScene,
            freq_weight: 0.1,
            base_weight: 0.1,
            freq_ratio: 0.2,
            guided_radius: 15,
            guided_eps: 1e-3,
            overload_probability: 0.05,
            optim: OptimConfig { lr: 1e-3, clip_norm: Some(1.0), ..OptimConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate only the first `n` test scenes.
    pub max_scenes: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub perception: PerceptionTrainConfig,
    pub restoration: RestorationTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&read_string(path)?)?)
    }

    /// Published settings: full widths, 256 crops, batch 8, 100 epochs, lr 2e-4.
    pub fn published() -> Self {
        let mut c = Self::default();
        c.perception.optim = OptimConfig::default();
        c.perception.epochs = 100;
        c.restoration = RestorationTrainConfig {
            model: (&RestorationConfig::published()).into(),
            crop: 256,
            epochs: 100,
            batch: 8,
            epoch: EpochMode::AllPairs,
            optim: OptimConfig::default(),
            ..RestorationTrainConfig::default()
        };
        c
    }

    /// Settings that differ from the published protocol, as `key: value (published: ...)`.
    pub fn overrides(&self) -> Vec<String> {
        let published = Self::published();
        let (r, p) = (&self.restoration, &published.restoration);
        let mut out = Vec::new();
        let mut diff = |key: &str, ours: String, theirs: String| {
            if ours != theirs {
                out.push(format!("{key}: {ours} (published: {theirs})"));
            }
        };
        diff("restoration.model.widths", format!("{:?}", r.model.widths), format!("{:?}", p.model.widths));
        diff("restoration.model.blocks_per_stage", r.model.blocks_per_stage.to_string(), p.model.blocks_per_stage.to_string());
        diff("restoration.crop", r.crop.to_string(), p.crop.to_string());
        diff("restoration.epochs", r.epochs.to_string(), p.epochs.to_string());
        diff("restoration.batch", r.batch.to_string(), p.batch.to_string());
        diff("restoration.epoch", format!("{:?}", r.epoch), format!("{:?}", p.epoch));
        diff("restoration.optim.lr", r.optim.lr.to_string(), p.optim.lr.to_string());
        diff("restoration.optim.clip_norm", format!("{:?}", r.optim.clip_norm), format!("{:?}", p.optim.clip_norm));
        diff("perception.optim.lr", self.perception.optim.lr.to_string(), published.perception.optim.lr.to_string());
        diff("perception.optim.clip_norm", format!("{:?}", self.perception.optim.clip_norm), format!("{:?}", published.perception.optim.clip_norm));
        diff("perception.epochs", self.perception.epochs.to_string(), published.perception.epochs.to_string());
        out
    }
}
