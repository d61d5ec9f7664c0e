//! Run configuration, stored as versioned TOML.

use std::path::{Path, PathBuf};

use cotnav_core::cotforge::LabelStyle;
use cotnav_core::policy::PolicyConfig;
use cotnav_core::trainer::TrainConfig;
use cotnav_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub episodes: EpisodeConfig,
    pub captions: CaptionConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_nodes: usize,
    pub avg_degree: f64,
    pub vocab_size: usize,
    /// Worlds hosting the train and val splits.
    pub train_worlds: usize,
    /// Unseen worlds hosting the test split.
    pub test_worlds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_hops: usize,
    pub max_hops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionConfig {
    pub p_drop: f64,
    pub p_add: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub cot_sft: bool,
    pub self_enrich: bool,
    pub self_reflect: bool,
    pub label_style: LabelStyle,
}

impl AblationFlags {
    pub const FULL: AblationFlags =
        AblationFlags { cot_sft: true, self_enrich: true, self_reflect: true, label_style: LabelStyle::Formalized };

    /// Whether the flags call for a Stage-2 run at all.
    pub fn has_stage2(&self) -> bool {
        self.self_enrich || self.self_reflect
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig { n_nodes: 20, avg_degree: 3.0, vocab_size: 48, train_worlds: 8, test_worlds: 4 },
            episodes: EpisodeConfig { train: 200, val: 20, test: 50, min_hops: 2, max_hops: 4 },
            captions: CaptionConfig { p_drop: 0.1, p_add: 0.1 },
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::FULL,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.world.train_worlds == 0 || self.world.test_worlds == 0 {
            return bad("train_worlds and test_worlds must be positive".into());
        }
        if self.episodes.train == 0 {
            return bad("the train split must not be empty".into());
        }
        self.policy.validate()?;
        self.train.validate()
    }

    /// Training hyperparameters with the ablation flags applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train;
        if !self.ablation.cot_sft {
            t.lambda = 0.0;
            t.lambda1 = 0.0;
        }
        if !self.ablation.self_reflect {
            t.lambda2 = 0.0;
        }
        t.self_enrich = self.ablation.self_enrich;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let text = RunConfig::default().to_toml().unwrap();
        let extra = text.replacen("seed = 0", "seed = 0\nsede = 1", 1);
        assert!(matches!(RunConfig::from_toml(&extra), Err(Error::InvalidConfig(_))));
        let old = text.replacen("version = 1", "version = 0", 1);
        assert!(matches!(RunConfig::from_toml(&old), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn flags_map_onto_weights() {
        let mut cfg = RunConfig::default();
        cfg.ablation.self_reflect = false;
        assert_eq!(cfg.effective_train().lambda2, 0.0);
        cfg.ablation.cot_sft = false;
        let t = cfg.effective_train();
        assert_eq!((t.lambda, t.lambda1), (0.0, 0.0));
    }
}
