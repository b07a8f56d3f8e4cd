//! Highlight-coverage reward: similarity of the summary to every highlighted
//! span minus its similarity to every non-highlighted sentence.

use serde::{Deserialize, Serialize};

use crate::corpus::{complement_spans, Dialogue, Granularity, HighlightSet};
use crate::textproc::{cosine, Embedder};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRewardBreakdown {
    pub coverage_sum: f64,
    pub redundancy_sum: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalRewardConfig {
    pub granularity: Granularity,
    /// Use per-term means instead of sums.
    pub average_terms: bool,
}

pub fn local_reward(
    dialogue: &Dialogue,
    summary: &str,
    highlights: &HighlightSet,
    embedder: &impl Embedder,
    cfg: &LocalRewardConfig,
) -> Result<LocalRewardBreakdown> {
    let positives = highlights.texts(dialogue)?;
    let negatives: Vec<String> = complement_spans(dialogue, highlights, cfg.granularity)?
        .into_iter()
        .map(|s| s.text)
        .collect();
    let s = embedder.embed(summary);
    let total = |segments: &[String]| -> Result<f64> {
        let mut sum = 0.0;
        for seg in segments {
            sum += cosine(&s, &embedder.embed(seg))?;
        }
        Ok(if cfg.average_terms && !segments.is_empty() {
            sum / segments.len() as f64
        } else {
            sum
        })
    };
    let coverage_sum = total(&positives)?;
    let redundancy_sum = total(&negatives)?;
    Ok(LocalRewardBreakdown {
        coverage_sum,
        redundancy_sum,
        value: coverage_sum - redundancy_sum,
    })
}
