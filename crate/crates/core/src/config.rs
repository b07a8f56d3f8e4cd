//! Run configuration: one TOML document with every stage's settings.
//!
//! Environment variables of the form `HITL__SECTION__KEY=value` override
//! individual entries after the file is read; values parse as TOML literals
//! and fall back to plain strings.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::pipeline::{AblationConfig, EvalConfig, FeedbackConfig};
use crate::policy::{PolicyConfig, PretrainConfig};
use crate::ppo::{GaeConfig, PpoConfig, RewardWeights};
use crate::reward_global::{RewardModelConfig, RewardTrainConfig};
use crate::reward_local::LocalRewardConfig;
use crate::synthfeed::SyntheticWorldConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "HITL__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab_min_freq: usize,
    pub world: SyntheticWorldConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub reward_model: RewardModelConfig,
    pub reward_training: RewardTrainConfig,
    pub local_reward: LocalRewardConfig,
    pub weights: RewardWeights,
    pub gae: GaeConfig,
    pub ppo: PpoConfig,
    pub value_head_hidden: usize,
    pub feedback: FeedbackConfig,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            vocab_min_freq: 1,
            world: SyntheticWorldConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            reward_model: RewardModelConfig::default(),
            reward_training: RewardTrainConfig::default(),
            local_reward: LocalRewardConfig::default(),
            weights: RewardWeights::default(),
            gae: GaeConfig::default(),
            ppo: PpoConfig::default(),
            value_head_hidden: 256,
            feedback: FeedbackConfig::default(),
            evaluation: EvalConfig::default(),
            ablation: AblationConfig::default(),
        };
        cfg.reseed(0);
        cfg
    }
}

impl RunConfig {
    /// Sets the top-level seed and derives every stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        let s = seed.wrapping_mul(1_000);
        self.world.seed = s;
        self.policy.seed = s + 1;
        self.pretrain.seed = s + 2;
        self.reward_model.seed = s + 3;
        self.reward_training.seed = s + 4;
        self.ppo.seed = s + 5;
        self.feedback.seed = s + 6;
        self.evaluation.seed = s + 7;
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies `HITL__SECTION__KEY` overrides from `vars`.
    pub fn with_overrides<I, K, V>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        apply_overrides(self, ENV_PREFIX, vars)
    }

    pub fn with_env_overrides(self) -> Result<Self> {
        self.with_overrides(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.weights.validate()?;
        self.gae.validate()?;
        self.ppo.validate()?;
        if self.vocab_min_freq == 0 {
            return Err(Error::Config("vocab_min_freq must be at least 1".into()));
        }
        Ok(())
    }
}

/// Overrides fields of any serializable config from `PREFIX` + `A__B` keys,
/// where `A__B` is the lower-cased path of the field. Unknown paths are an
/// error; variables without the prefix are ignored.
pub fn apply_overrides<T, I, K, V>(value: T, prefix: &str, vars: I) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut doc = toml::Value::try_from(&value).map_err(|e| Error::Config(e.to_string()))?;
    let mut touched = false;
    for (k, v) in vars {
        let Some(rest) = k.as_ref().strip_prefix(prefix) else { continue };
        let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
        set_path(&mut doc, &path, parse_literal(v.as_ref()))?;
        touched = true;
    }
    if !touched {
        return Ok(value);
    }
    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = doc;
    for p in parents {
        cur = cur
            .get_mut(p.as_str())
            .ok_or_else(|| Error::Config(format!("unknown config section `{p}`")))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{}` is not a section", parents.join("."))))?;
    if !table.contains_key(last.as_str()) {
        return Err(Error::Config(format!("unknown config key `{}`", path.join("."))));
    }
    table.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.weights.w_l, c.weights.w_g, c.weights.beta), (1.0, 1.5, 0.05));
        assert_eq!((c.gae.gamma, c.gae.lambda), (1.0, 0.95));
        assert_eq!(c.ppo.epochs_per_batch, 4);
        assert_eq!(c.ppo.batch_size, 8);
        assert_eq!(c.ppo.total_episodes, 5000);
        assert_eq!(c.reward_training.epochs, 2);
        assert_eq!(c.reward_model.head_hidden, 256);
        assert_eq!(c.policy.max_length, 32);
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("seed = 3\n[ppo]\nbatch_size = 4\n").unwrap();
        assert_eq!(partial.ppo.batch_size, 4);
        assert_eq!(partial.ppo.epochs_per_batch, 4);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn env_overrides() {
        let c = RunConfig::default()
            .with_overrides([
                ("HITL__PPO__TOTAL_EPISODES", "64"),
                ("HITL__WEIGHTS__BETA", "10.0"),
                ("HITL__LOCAL_REWARD__GRANULARITY", "utterance"),
                ("UNRELATED", "x"),
            ])
            .unwrap();
        assert_eq!(c.ppo.total_episodes, 64);
        assert_eq!(c.weights.beta, 10.0);
        assert_eq!(c.local_reward.granularity, crate::corpus::Granularity::Utterance);
        assert!(RunConfig::default().with_overrides([("HITL__PPO__NOPE", "1")]).is_err());
        assert!(RunConfig::default().with_overrides([("HITL__PPO__BATCH_SIZE", "\"x\"")]).is_err());
    }

    #[test]
    fn reseed_is_deterministic() {
        let mut a = RunConfig::default();
        a.reseed(7);
        let mut b = RunConfig::default();
        b.reseed(7);
        assert_eq!(a, b);
        assert_ne!(a.world.seed, RunConfig::default().world.seed);
    }
}
