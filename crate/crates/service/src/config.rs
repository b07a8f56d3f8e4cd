use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const ENV_PREFIX: &str = "HITL_SERVICE__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Directory holding the submission log.
    pub data_dir: PathBuf,
    /// `dialogues.jsonl` to annotate.
    pub corpus_path: PathBuf,
    /// `summaries.jsonl` with the candidate summaries to compare.
    pub summaries_path: PathBuf,
    /// Registered annotator ids; every annotator is assigned every dialogue.
    pub annotators: Vec<String>,
    pub pairs_per_dialogue: usize,
    pub min_spans: usize,
    pub max_spans: usize,
    /// Seeds the per-dialogue choice of summary pairs.
    pub seed: u64,
    /// Flush each accepted record to disk before acknowledging it.
    pub fsync: bool,
    /// Built UI bundle to serve at `/`; a built-in page is used otherwise.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            corpus_path: PathBuf::from("dialogues.jsonl"),
            summaries_path: PathBuf::from("summaries.jsonl"),
            annotators: vec!["annotator-1".into(), "annotator-2".into()],
            pairs_per_dialogue: 3,
            min_spans: 3,
            max_spans: 8,
            seed: 0,
            fsync: true,
            ui_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> ServiceResult<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> ServiceResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies `HITL_SERVICE__KEY=value` overrides from `vars`.
    pub fn with_overrides<I, K, V>(self, vars: I) -> ServiceResult<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        hitl_core::config::apply_overrides(self, ENV_PREFIX, vars).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn with_env_overrides(self) -> ServiceResult<Self> {
        self.with_overrides(std::env::vars())
    }

    pub fn validate(&self) -> ServiceResult<()> {
        if self.annotators.is_empty() {
            return Err(ServiceError::Config("at least one annotator must be registered".into()));
        }
        if self.annotators.iter().any(|a| a.trim().is_empty() || a.contains('/')) {
            return Err(ServiceError::Config("annotator ids must be non-empty and contain no `/`".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.annotators.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(ServiceError::Config(format!("annotator `{dup}` is listed twice")));
        }
        if self.min_spans == 0 || self.min_spans > self.max_spans {
            return Err(ServiceError::Config(format!(
                "span bounds {}..={} are not a valid range",
                self.min_spans, self.max_spans
            )));
        }
        Ok(())
    }
}
