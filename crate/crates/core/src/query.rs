//! Sample-scoring strategies and deterministic top-k selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{critic_forward, CriticParams, ModelError};
use crate::rng::{RngExt, SeededRng};
use crate::volume::ProbVolume;

pub type SampleId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("empty probability volume")]
    EmptyVolume,
    #[error("empty sample pool")]
    EmptyPool,
    #[error("cannot select {k} samples from a pool of {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid score config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Random,
    LeastConfidence,
    Entropy,
    Wd,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::LeastConfidence,
        Strategy::Entropy,
        Strategy::Wd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Entropy => "entropy",
            Strategy::Wd => "wd",
        }
    }

    /// Whether scoring needs the model's predictions on the pool.
    pub fn needs_predictions(self) -> bool {
        self != Strategy::Random
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub sample_id: SampleId,
    pub uncertainty: f64,
    pub discriminative: f64,
    pub total: f64,
}

impl QueryScore {
    /// Score of a strategy without a discriminative term.
    pub fn plain(sample_id: SampleId, uncertainty: f64) -> Self {
        Self {
            sample_id,
            uncertainty,
            discriminative: 0.0,
            total: uncertainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdScoreConfig {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
}

impl Default for WdScoreConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 0.5,
            lambda: 1.0,
        }
    }
}

impl WdScoreConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.a >= 0.0 && self.b >= 0.0 && self.a + self.b > 0.0 && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(QueryError::InvalidConfig(format!("{self:?}")))
        }
    }
}

fn nonempty(probs: &ProbVolume) -> Result<&[f64], QueryError> {
    match probs.data() {
        [] => Err(QueryError::EmptyVolume),
        d => Ok(d),
    }
}

/// Mean of `min(p, 1 - p)`.
pub fn score_least_confidence(probs: &ProbVolume) -> Result<f64, QueryError> {
    let d = nonempty(probs)?;
    Ok(d.iter().map(|&p| p.min(1.0 - p)).sum::<f64>() / d.len() as f64)
}

/// Mean of `-p log2 p`, with `0 log 0 = 0`.
pub fn score_entropy(probs: &ProbVolume) -> Result<f64, QueryError> {
    let d = nonempty(probs)?;
    let sum: f64 = d.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    Ok(sum / d.len() as f64)
}

/// One uniform draw per id, in the order given.
pub fn score_random(ids: &[SampleId], rng: &mut SeededRng) -> Result<Vec<QueryScore>, QueryError> {
    if ids.is_empty() {
        return Err(QueryError::EmptyPool);
    }
    Ok(ids
        .iter()
        .map(|&id| QueryScore::plain(id, rng.random::<f64>()))
        .collect())
}

/// Norm-bounded uncertainty minus `lambda` times the critic score: samples the
/// critic finds unlike the labeled pool (low score) rank higher.
pub fn score_wd(
    sample_id: SampleId,
    probs: &ProbVolume,
    feat: &[f64],
    critic: &CriticParams,
    cfg: &WdScoreConfig,
) -> Result<QueryScore, QueryError> {
    cfg.validate()?;
    let d = nonempty(probs)?;
    let n = d.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for &p in d {
        let r = p.min(1.0 - p);
        l1 += r;
        l2 += r * r;
    }
    let uncertainty = cfg.a * (l2.sqrt() / (0.5 * n.sqrt())) + cfg.b * (l1 / (0.5 * n));
    let discriminative = critic_forward(critic, feat)?;
    Ok(QueryScore {
        sample_id,
        uncertainty,
        discriminative,
        total: uncertainty - cfg.lambda * discriminative,
    })
}

/// The `k` ids with the largest totals, descending, ties by ascending id.
pub fn select_top_k(scores: &[QueryScore], k: usize) -> Result<Vec<SampleId>, QueryError> {
    if k > scores.len() {
        return Err(QueryError::KTooLarge { k, pool: scores.len() });
    }
    let mut sorted: Vec<&QueryScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.total.total_cmp(&a.total).then(a.sample_id.cmp(&b.sample_id)));
    Ok(sorted.into_iter().take(k).map(|s| s.sample_id).collect())
}
