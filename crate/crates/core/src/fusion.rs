//! Late fusion of base-model scores with pooled frame scores.
//!
//! For every query the top `k` entries of the base run are rescored as
//! `alpha * m + (1 - alpha) * s`, where `m` is the base score and `s` the
//! pooled frame similarity, optionally after per-query normalization of each
//! column.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::embedstore::{EmbeddingStore, QueryEmbeddings};
use crate::runio::{RankedRun, RunEntry};
use crate::scoring::{score_candidates, CandidateScores, PoolingMode, ScoringError};

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_K: usize = 1000;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("config: {0}")]
    Config(String),
    #[error("query {query}: no embeddings for {}", .ids.join(", "))]
    MissingEmbeddings { query: String, ids: Vec<String> },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    MinMax,
    ZScore,
}

impl FromStr for Normalization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "minmax" => Ok(Self::MinMax),
            "zscore" => Ok(Self::ZScore),
            _ => Err(format!("unknown normalization {s:?} (expected none|minmax|zscore)")),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::MinMax => "minmax",
            Self::ZScore => "zscore",
        })
    }
}

/// What to do with candidates that have no frame embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Substitute the lowest (normalized) frame score of the query.
    Floor,
}

impl FromStr for MissingPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(Self::Error),
            "floor" => Ok(Self::Floor),
            _ => Err(format!("unknown missing policy {s:?} (expected error|floor)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub alpha: f64,
    pub k: usize,
    pub normalization: Normalization,
    pub pooling: PoolingMode,
    pub missing_policy: MissingPolicy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            normalization: Normalization::None,
            pooling: PoolingMode::Max,
            missing_policy: MissingPolicy::Error,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        check_alpha(self.alpha)?;
        if self.k == 0 {
            return Err(FusionError::Config("k must be positive".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), FusionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FusionError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Normalizes a column of scores in place.
pub fn normalize_values(values: &mut [f64], mode: Normalization) {
    if values.is_empty() {
        return;
    }
    match mode {
        Normalization::None => {}
        Normalization::MinMax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for v in values.iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
            }
        }
        Normalization::ZScore => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            for v in values.iter_mut() {
                *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
}

pub fn normalize_scores(scores: &HashMap<String, f64>, mode: Normalization) -> HashMap<String, f64> {
    let (ids, mut vals): (Vec<&String>, Vec<f64>) = scores.iter().map(|(k, v)| (k, *v)).unzip();
    normalize_values(&mut vals, mode);
    ids.into_iter().cloned().zip(vals).collect()
}

pub fn fuse(m_score: f64, s_score: f64, alpha: f64) -> Result<f64, FusionError> {
    check_alpha(alpha)?;
    Ok(alpha * m_score + (1.0 - alpha) * s_score)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryDiagnostics {
    pub candidates: usize,
    /// Candidates without frame embeddings that received the floor score.
    pub floored: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RerankDiagnostics {
    pub per_query: BTreeMap<String, QueryDiagnostics>,
}

impl RerankDiagnostics {
    pub fn total_missing(&self) -> usize {
        self.per_query.values().map(|d| d.floored.len()).sum()
    }
}

/// Sorts `(index, score)` pairs descending by score, ties by ascending index
/// (the original rank) and then id.
pub(crate) fn order_by_score(slice: &[RunEntry], scores: &[f64]) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..slice.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(slice[a].rank.cmp(&slice[b].rank))
            .then_with(|| slice[a].video_id.cmp(&slice[b].video_id))
    });
    idx.into_iter()
        .map(|i| (slice[i].video_id.clone(), scores[i]))
        .collect()
}

/// Fuses one query's top-k slice given its pooled frame scores. Returns the
/// reranked `(video_id, fused_score)` list.
pub fn fuse_query(
    query_id: &str,
    entries: &[RunEntry],
    frame_scores: &CandidateScores,
    cfg: &FusionConfig,
) -> Result<(Vec<(String, f64)>, QueryDiagnostics), FusionError> {
    cfg.validate()?;
    let slice = &entries[..entries.len().min(cfg.k)];
    let mut missing = Vec::new();
    let mut m_col: Vec<f64> = slice.iter().map(|e| e.score).collect();
    normalize_values(&mut m_col, cfg.normalization);

    // Normalize S over the scored candidates only, then place the floor.
    let mut scored_pos = Vec::with_capacity(slice.len());
    let mut scored_vals = Vec::with_capacity(slice.len());
    for (i, e) in slice.iter().enumerate() {
        match frame_scores.scores.get(&e.video_id) {
            Some(&s) => {
                scored_pos.push(i);
                scored_vals.push(s);
            }
            None => missing.push(e.video_id.clone()),
        }
    }
    if !missing.is_empty() && cfg.missing_policy == MissingPolicy::Error {
        return Err(FusionError::MissingEmbeddings {
            query: query_id.to_string(),
            ids: missing,
        });
    }
    normalize_values(&mut scored_vals, cfg.normalization);
    let floor = scored_vals.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 0.0 };
    let mut s_col = vec![floor; slice.len()];
    for (&i, &s) in scored_pos.iter().zip(&scored_vals) {
        s_col[i] = s;
    }

    let fused: Vec<f64> = m_col
        .iter()
        .zip(&s_col)
        .map(|(&m, &s)| cfg.alpha * m + (1.0 - cfg.alpha) * s)
        .collect();
    let diag = QueryDiagnostics {
        candidates: slice.len(),
        floored: missing,
    };
    Ok((order_by_score(slice, &fused), diag))
}

/// Rescores and reorders every query of `run`. Queries are processed in
/// parallel on the ambient rayon pool; the result does not depend on it.
pub fn rerank_run(
    run: &RankedRun,
    store: &EmbeddingStore,
    query_embs: &QueryEmbeddings,
    cfg: &FusionConfig,
) -> Result<(RankedRun, RerankDiagnostics), FusionError> {
    cfg.validate()?;
    let queries: Vec<(&str, &[RunEntry])> = run.queries().collect();
    let results: Vec<_> = queries
        .par_iter()
        .map(|&(qid, entries)| {
            let depth = entries.len().min(cfg.k);
            let ids: Vec<&str> = entries[..depth].iter().map(|e| e.video_id.as_str()).collect();
            let s = score_candidates(qid, &ids, store, query_embs, cfg.pooling)?;
            fuse_query(qid, entries, &s, cfg)
        })
        .collect();

    let mut out = RankedRun::new(run.run_tag.clone());
    let mut diags = RerankDiagnostics::default();
    for ((qid, _), res) in queries.into_iter().zip(results) {
        let (list, diag) = res?;
        if !diag.floored.is_empty() {
            log::warn!(
                "query {qid}: {} candidates without embeddings floored",
                diag.floored.len()
            );
        }
        out.insert_ordered(qid.to_string(), list);
        diags.per_query.insert(qid.to_string(), diag);
    }
    Ok((out, diags))
}
