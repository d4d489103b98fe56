//! Run configuration: one named key per hyperparameter, validated before any
//! stage runs, echoed into every output directory.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::evaluation::ablation::{config_by_id, AblationConfig};
use crate::grpo::{BaselineMode, RewardWeights, Stage2Config};
use crate::model::ModelConfig;
use crate::pretrain::LossWeights;
use crate::rollout::{LangToggles, STRIDE_MAX, STRIDE_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Training scenario seeds: [train_seed_base, train_seed_base + train_seeds).
    pub train_seed_base: u64,
    pub train_seeds: u64,
    /// Closed-loop evaluation seeds per category.
    pub eval_seed_base: u64,
    pub eval_episodes: u64,
    /// Held-out open-loop seeds per category.
    pub holdout_seed_base: u64,
    pub holdout_seeds: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            train_seed_base: 0,
            train_seeds: 20,
            eval_seed_base: 100,
            eval_episodes: 20,
            holdout_seed_base: 1000,
            holdout_seeds: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBudget {
    /// Optimizer steps. When absent, derived from `epochs` over the anchor set.
    pub steps: Option<usize>,
    /// Passes over the anchor set (the reference schedule is 24).
    pub epochs: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            steps: Some(2000),
            epochs: 24.0,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 0.01,
        }
    }
}

impl TrainBudget {
    pub fn resolve_steps(&self, anchors: usize) -> usize {
        self.steps.unwrap_or_else(|| {
            ((self.epochs * anchors as f64 / self.batch_size.max(1) as f64).ceil() as usize).max(1)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Table-row configuration (1..=9); 9 is the full system.
    pub ablation_id: u8,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub reward_weights: RewardWeights,
    /// GRPO group size G.
    pub group_size: usize,
    pub baseline: BaselineMode,
    /// Refresh the description each rollout step instead of holding it fixed.
    pub refresh_description: bool,
    /// Rollout stride bounds (uniform sampling, inclusive).
    pub stride_min: usize,
    pub stride_max: usize,
    /// Rollout horizon T.
    pub rollout_horizon: usize,
    pub pretrain: TrainBudget,
    pub stage2: TrainBudget,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            ablation_id: 9,
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            reward_weights: RewardWeights::default(),
            group_size: 4,
            baseline: BaselineMode::GroupMean,
            refresh_description: false,
            stride_min: STRIDE_MIN,
            stride_max: STRIDE_MAX,
            rollout_horizon: crate::rollout::ROLLOUT_T,
            pretrain: TrainBudget::default(),
            stage2: TrainBudget { batch_size: 1, ..Default::default() },
            out_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown ablation id {0} (expected 1..=9)")]
    UnknownAblation(u8),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ab = self.ablation()?;
        ab.validate().map_err(ConfigError::Invalid)?;
        if self.group_size < 2 && self.baseline == BaselineMode::GroupMean && ab.reward_toggles().any()
        {
            return Err(ConfigError::Invalid(
                "group-mean baseline needs a group size of at least 2".into(),
            ));
        }
        if self.stride_min < 1 || self.stride_max < self.stride_min {
            return Err(ConfigError::Invalid("bad stride bounds".into()));
        }
        if self.rollout_horizon != crate::rollout::ROLLOUT_T {
            return Err(ConfigError::Invalid(format!(
                "rollout horizon is fixed at {}",
                crate::rollout::ROLLOUT_T
            )));
        }
        if self.model.width % self.model.heads != 0 {
            return Err(ConfigError::Invalid("width must divide into heads".into()));
        }
        if self.pretrain.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(ConfigError::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<AblationConfig, ConfigError> {
        config_by_id(self.ablation_id).ok_or(ConfigError::UnknownAblation(self.ablation_id))
    }

    pub fn lang_toggles(&self) -> LangToggles {
        let ab = self.ablation().expect("validated config");
        LangToggles { sc_desc: ab.sc_desc, questions: ab.questions }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        let ab = self.ablation().expect("validated config");
        let mut rollout = ab.rollout_toggles();
        rollout.refresh_desc = self.refresh_description;
        Stage2Config {
            lang: self.lang_toggles(),
            rollout,
            rewards: ab.reward_toggles(),
            reward_weights: self.reward_weights,
            group: self.group_size,
            baseline: self.baseline,
        }
    }

    pub fn train_suite(&self) -> Vec<(crate::world::scenario::Category, u64)> {
        crate::dataset::Dataset::toy_suite(self.suite.train_seed_base, self.suite.train_seeds)
    }

    pub fn eval_suite(&self) -> Vec<(crate::world::scenario::Category, u64)> {
        crate::dataset::Dataset::toy_suite(self.suite.eval_seed_base, self.suite.eval_episodes)
    }

    pub fn holdout_suite(&self) -> Vec<(crate::world::scenario::Category, u64)> {
        crate::dataset::Dataset::toy_suite(self.suite.holdout_seed_base, self.suite.holdout_seeds)
    }
}
