//! Frame-level query similarity and pooling into a per-video score.
//!
//! Stored values are f32; every dot product and norm accumulates in f64.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::embedstore::{EmbeddingStore, FrameMatrix, QueryEmbeddings};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("domain: {0}")]
    Domain(String),
    #[error("no embedding for query {0}")]
    UnknownQuery(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Max,
    Mean,
}

impl FromStr for PoolingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            _ => Err(format!("unknown pooling mode {s:?} (expected max|mean)")),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Mean => "mean",
        })
    }
}

const LANES: usize = 8;

/// Dot product and squared norm of `b`, both accumulated in f64.
/// Split into independent lanes so the compiler can vectorize.
#[inline]
fn dot_and_sq(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut dot = [0f64; LANES];
    let mut sq = [0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..LANES {
            let (p, q) = (f64::from(xa[i]), f64::from(xb[i]));
            dot[i] += p * q;
            sq[i] += q * q;
        }
    }
    let mut d: f64 = dot.iter().sum();
    let mut s: f64 = sq.iter().sum();
    for (&p, &q) in ra.iter().zip(rb) {
        let (p, q) = (f64::from(p), f64::from(q));
        d += p * q;
        s += q * q;
    }
    (d, s)
}

fn norm(v: &[f32]) -> f64 {
    dot_and_sq(v, v).1.sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::Domain(format!(
            "length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (dot, b_sq) = dot_and_sq(a, b);
    let (na, nb) = (norm(a), b_sq.sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::Domain("zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn pool_frames(frame_scores: &[f64], mode: PoolingMode) -> Result<f64, ScoringError> {
    if frame_scores.is_empty() {
        return Err(ScoringError::Domain("no frame scores to pool".into()));
    }
    Ok(match mode {
        PoolingMode::Max => frame_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PoolingMode::Mean => frame_scores.iter().sum::<f64>() / frame_scores.len() as f64,
    })
}

/// A query vector with its norm computed once, for scoring many videos.
#[derive(Debug, Clone, Copy)]
pub struct PreparedQuery<'a> {
    vec: &'a [f32],
    norm: f64,
}

impl<'a> PreparedQuery<'a> {
    pub fn new(vec: &'a [f32]) -> Result<Self, ScoringError> {
        let norm = norm(vec);
        if norm == 0.0 {
            return Err(ScoringError::Domain("zero-norm query".into()));
        }
        Ok(Self { vec, norm })
    }

    /// Pooled similarity between this query and every frame. When
    /// `unit_frames` is set the frame norms are taken to be 1.
    pub fn score(&self, frames: &FrameMatrix, mode: PoolingMode, unit_frames: bool) -> Result<f64, ScoringError> {
        if frames.dim() != self.vec.len() {
            return Err(ScoringError::Domain(format!(
                "query length {} vs frame width {}",
                self.vec.len(),
                frames.dim()
            )));
        }
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for row in frames.rows() {
            let (dot, sq) = dot_and_sq(self.vec, row);
            let row_norm = if unit_frames { 1.0 } else { sq.sqrt() };
            if row_norm == 0.0 {
                return Err(ScoringError::Domain("zero-norm frame".into()));
            }
            let c = (dot / (self.norm * row_norm)).clamp(-1.0, 1.0);
            best = best.max(c);
            sum += c;
        }
        Ok(match mode {
            PoolingMode::Max => best,
            PoolingMode::Mean => sum / frames.n_frames() as f64,
        })
    }
}

/// Pooled fine-grained score of one video for one query.
pub fn score_video(query: &[f32], frames: &FrameMatrix, mode: PoolingMode) -> Result<f64, ScoringError> {
    PreparedQuery::new(query)?.score(frames, mode, false)
}

/// Scores for the candidates found in the store, and the ids that were not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateScores {
    pub scores: HashMap<String, f64>,
    pub missing: Vec<String>,
}

pub fn score_candidates<S: AsRef<str>>(
    query_id: &str,
    candidates: &[S],
    store: &EmbeddingStore,
    query_embs: &QueryEmbeddings,
    mode: PoolingMode,
) -> Result<CandidateScores, ScoringError> {
    let qvec = query_embs
        .get(query_id)
        .ok_or_else(|| ScoringError::UnknownQuery(query_id.to_string()))?;
    let prepared = PreparedQuery::new(qvec)?;
    let unit = store.is_normalized();
    let mut out = CandidateScores {
        scores: HashMap::with_capacity(candidates.len()),
        missing: Vec::new(),
    };
    for id in candidates {
        let id = id.as_ref();
        match store.get_frames(id) {
            Some(frames) => {
                out.scores.insert(id.to_string(), prepared.score(frames, mode, unit)?);
            }
            None => out.missing.push(id.to_string()),
        }
    }
    Ok(out)
}

/// Pooled scores keyed by query then video.
pub type ScoreTable = HashMap<String, HashMap<String, f64>>;
