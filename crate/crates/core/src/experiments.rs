//! Grid sweeps over fusion parameters and per-query before/after reports.

use std::collections::HashMap;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::embedstore::{EmbeddingStore, QueryEmbeddings};
use crate::fusion::{fuse_query, FusionConfig, FusionError, MissingPolicy, Normalization};
use crate::metrics::{compare_runs, evaluate_run, Metric, MetricError, QueryDelta};
use crate::runio::{Qrels, RankedRun};
use crate::scoring::{score_candidates, CandidateScores, PoolingMode, ScoringError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("sweep spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

fn default_norms() -> Vec<Normalization> {
    vec![Normalization::None]
}

/// Parameter grid. Parsed from TOML, e.g.
///
/// ```toml
/// alphas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
/// ks = [1000]
/// normalizations = ["none", "minmax"]
/// metric = "infap"
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    #[serde(default = "default_norms")]
    pub normalizations: Vec<Normalization>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub pooling: PoolingMode,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.alphas.is_empty() || self.ks.is_empty() || self.normalizations.is_empty() {
            return Err(ExperimentError::Spec(
                "alphas, ks and normalizations must be nonempty".into(),
            ));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(ExperimentError::Spec(format!("alpha {a} outside [0, 1]")));
        }
        if self.ks.contains(&0) {
            return Err(ExperimentError::Spec("k must be positive".into()));
        }
        Ok(())
    }

    /// Cells in output order: alpha, then k, then normalization.
    pub fn configs(&self) -> Vec<FusionConfig> {
        let mut out = Vec::with_capacity(self.alphas.len() * self.ks.len() * self.normalizations.len());
        for &alpha in &self.alphas {
            for &k in &self.ks {
                for &normalization in &self.normalizations {
                    out.push(FusionConfig {
                        alpha,
                        k,
                        normalization,
                        pooling: self.pooling,
                        missing_policy: self.missing_policy,
                    });
                }
            }
        }
        out
    }
}

/// Pooled frame scores for the top `depth` entries of every query. Frame
/// scores do not depend on alpha, k (below `depth`) or normalization.
pub fn score_cache(
    run: &RankedRun,
    store: &EmbeddingStore,
    query_embs: &QueryEmbeddings,
    depth: usize,
    pooling: PoolingMode,
) -> Result<HashMap<String, CandidateScores>, ScoringError> {
    let queries: Vec<_> = run.queries().collect();
    queries
        .par_iter()
        .map(|&(q, entries)| {
            let ids: Vec<&str> = entries[..entries.len().min(depth)]
                .iter()
                .map(|e| e.video_id.as_str())
                .collect();
            score_candidates(q, &ids, store, query_embs, pooling).map(|s| (q.to_string(), s))
        })
        .collect()
}

/// Fuses every query of `run` from precomputed frame scores.
pub fn rerank_cached(
    run: &RankedRun,
    cache: &HashMap<String, CandidateScores>,
    cfg: &FusionConfig,
) -> Result<RankedRun, ExperimentError> {
    let mut out = RankedRun::new(run.run_tag.clone());
    for (q, entries) in run.queries() {
        let scores = cache
            .get(q)
            .ok_or_else(|| ExperimentError::Spec(format!("no cached scores for query {q}")))?;
        let (list, _) = fuse_query(q, entries, scores, cfg)?;
        out.insert_ordered(q.to_string(), list);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub k: usize,
    pub normalization: Normalization,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub metric: Metric,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    /// First cell with the highest mean, in grid order.
    pub fn argmax(&self) -> Option<&SweepCell> {
        self.cells.iter().fold(None, |best: Option<&SweepCell>, c| match best {
            Some(b) if b.mean >= c.mean => Some(b),
            _ => Some(c),
        })
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "alpha\tk\tnorm\tmean_{}", self.metric)?;
        for c in &self.cells {
            writeln!(out, "{}\t{}\t{}\t{:.6}", c.alpha, c.k, c.normalization, c.mean)?;
        }
        if let Some(c) = self.argmax() {
            writeln!(out, "#argmax\t{}\t{}\t{}\t{:.6}", c.alpha, c.k, c.normalization, c.mean)?;
        }
        out.flush()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = Vec::new();
        self.write_tsv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("UTF-8")
    }
}

pub fn sweep(
    run: &RankedRun,
    store: &EmbeddingStore,
    query_embs: &QueryEmbeddings,
    qrels: &Qrels,
    spec: &SweepSpec,
) -> Result<SweepGrid, ExperimentError> {
    spec.validate()?;
    let depth = spec.ks.iter().copied().max().expect("validated nonempty");
    let cache = score_cache(run, store, query_embs, depth, spec.pooling)?;
    let cells = spec
        .configs()
        .par_iter()
        .map(|cfg| {
            let reranked = rerank_cached(run, &cache, cfg)?;
            let report = evaluate_run(&reranked, qrels, spec.metric)?;
            Ok(SweepCell {
                alpha: cfg.alpha,
                k: cfg.k,
                normalization: cfg.normalization,
                mean: report.mean,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(SweepGrid {
        metric: spec.metric,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerQueryReport {
    pub metric: Metric,
    /// Sorted by delta ascending, so regressions come first.
    pub rows: Vec<QueryDelta>,
    pub improved: usize,
    pub unchanged: usize,
    pub regressed: usize,
}

impl PerQueryReport {
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "query_id\tbefore\tafter\tdelta\trelative\tnear_zero_base")?;
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:+.6}\t{}\t{}",
                r.query_id,
                r.before,
                r.after,
                r.delta,
                r.relative_pct(),
                u8::from(r.near_zero_base)
            )?;
        }
        writeln!(
            out,
            "#summary\timproved={}\tunchanged={}\tregressed={}",
            self.improved, self.unchanged, self.regressed
        )?;
        out.flush()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = Vec::new();
        self.write_tsv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("UTF-8")
    }
}

pub fn per_query_report(
    before: &RankedRun,
    after: &RankedRun,
    qrels: &Qrels,
    metric: Metric,
) -> Result<PerQueryReport, MetricError> {
    let mut rows = compare_runs(before, after, qrels, metric)?;
    rows.sort_by(|a, b| a.delta.total_cmp(&b.delta).then_with(|| a.query_id.cmp(&b.query_id)));
    let improved = rows.iter().filter(|r| r.delta > 0.0).count();
    let regressed = rows.iter().filter(|r| r.delta < 0.0).count();
    Ok(PerQueryReport {
        metric,
        improved,
        regressed,
        unchanged: rows.len() - improved - regressed,
        rows,
    })
}
