//! Average Precision and inferred Average Precision.
//!
//! `inf_ap` is the stratified estimator: each judged document stands for
//! `pool_size / judged_size` documents of its stratum, the relevant-set size
//! is estimated from those weights, and the expected precision above each
//! judged relevant document is inferred from the judged documents ranked
//! above it. With one fully judged stratum it coincides with AP up to the
//! `epsilon` smoothing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::runio::{Qrels, RankedRun};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Base scores below this are flagged when reporting relative change.
pub const NEAR_ZERO_BASE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined for query {0}: no relevant documents")]
    Undefined(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ap,
    #[default]
    InfAp,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ap" => Ok(Self::Ap),
            "infap" => Ok(Self::InfAp),
            _ => Err(format!("unknown metric {s:?} (expected ap|infap)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ap => "ap",
            Self::InfAp => "infap",
        })
    }
}

/// Exact AP. Unjudged and unpooled documents count as nonrelevant.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], qrels: &Qrels, query_id: &str) -> Result<f64, MetricError> {
    let total_rel = qrels.num_relevant(query_id);
    if total_rel == 0 {
        return Err(MetricError::Undefined(query_id.to_string()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, doc) in ranked.iter().enumerate() {
        if qrels.judgment(query_id, doc.as_ref()).is_some_and(|j| j.relevant) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_rel as f64)
}

pub fn inf_ap<S: AsRef<str>>(ranked: &[S], qrels: &Qrels, query_id: &str, epsilon: f64) -> Result<f64, MetricError> {
    let strata = qrels.strata(query_id);
    if let Some((s, _)) = strata.iter().find(|(_, info)| info.judged_size == 0) {
        return Err(MetricError::Validation(format!(
            "query {query_id}: stratum {s} has no judged documents"
        )));
    }
    let index: HashMap<u32, usize> = strata.iter().enumerate().map(|(i, (s, _))| (*s, i)).collect();
    let weights: Vec<f64> = strata.iter().map(|(_, info)| info.weight()).collect();

    let mut rel_total = vec![0usize; strata.len()];
    if let Some(judged) = qrels.judgments(query_id) {
        for j in judged.values().filter(|j| j.relevant) {
            rel_total[index[&j.stratum]] += 1;
        }
    }
    let est_relevant: f64 = rel_total.iter().zip(&weights).map(|(&r, w)| r as f64 * w).sum();
    if est_relevant == 0.0 {
        return Err(MetricError::Undefined(query_id.to_string()));
    }

    let mut rel_above = vec![0usize; strata.len()];
    let mut nonrel_above = vec![0usize; strata.len()];
    let mut sum = 0.0;
    for (i, doc) in ranked.iter().enumerate() {
        let Some(j) = qrels.judgment(query_id, doc.as_ref()) else {
            continue;
        };
        let s = index[&j.stratum];
        if j.relevant {
            let k = (i + 1) as f64;
            let expected_prec = if i == 0 {
                1.0
            } else {
                // Pool members above rank k, estimated from the judged ones.
                // The doc at k is a judged relevant one; given the judged
                // relevant count m of its stratum, the other relevant docs
                // there were kept at rate (m - 1) / (R - 1), with R estimated
                // by w * m.
                let above_weight = |t: usize| {
                    let m = rel_total[t] as f64;
                    if t == s && rel_total[t] > 1 {
                        (weights[t] * m - 1.0) / (m - 1.0)
                    } else {
                        weights[t]
                    }
                };
                let per_stratum: Vec<f64> = (0..strata.len())
                    .map(|t| above_weight(t) * (rel_above[t] + nonrel_above[t]) as f64)
                    .collect();
                let pooled_above: f64 = per_stratum.iter().sum();
                let mut mix = 0.0;
                if pooled_above > 0.0 {
                    for t in (0..strata.len()).filter(|&t| per_stratum[t] > 0.0) {
                        let pooled_t = per_stratum[t];
                        let w = above_weight(t);
                        let prec_t = (rel_above[t] as f64 * w + epsilon)
                            / ((rel_above[t] + nonrel_above[t]) as f64 * w + 2.0 * epsilon);
                        mix += pooled_t / pooled_above * prec_t;
                    }
                }
                1.0 / k + ((k - 1.0) / k) * (pooled_above / (k - 1.0)) * mix
            };
            sum += weights[s] * expected_prec;
            rel_above[s] += 1;
        } else {
            nonrel_above[s] += 1;
        }
    }
    Ok(sum / est_relevant)
}

pub fn evaluate_query<S: AsRef<str>>(
    metric: Metric,
    ranked: &[S],
    qrels: &Qrels,
    query_id: &str,
) -> Result<f64, MetricError> {
    match metric {
        Metric::Ap => average_precision(ranked, qrels, query_id),
        Metric::InfAp => inf_ap(ranked, qrels, query_id, DEFAULT_EPSILON),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Fraction of each evaluated query's retrieved documents that are judged.
    pub judged_coverage: BTreeMap<String, f64>,
    /// Queries left out of the mean, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    /// `query_id<TAB>metric<TAB>value` rows followed by a `MEAN` row.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (q, v) in &self.per_query {
            writeln!(out, "{q}\t{}\t{v:.6}", self.metric)?;
        }
        writeln!(out, "MEAN\t{}\t{:.6}", self.metric, self.mean)?;
        out.flush()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = Vec::new();
        self.write_tsv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("UTF-8")
    }
}

pub fn evaluate_run(run: &RankedRun, qrels: &Qrels, metric: Metric) -> Result<EvalReport, MetricError> {
    let mut per_query = BTreeMap::new();
    let mut judged_coverage = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, entries) in run.queries() {
        if !qrels.has_query(qid) {
            log::warn!("query {qid} has no judgments; excluded");
            skipped.push((qid.to_string(), "absent from qrels".to_string()));
            continue;
        }
        let ids: Vec<&str> = entries.iter().map(|e| e.video_id.as_str()).collect();
        match evaluate_query(metric, &ids, qrels, qid) {
            Ok(v) => {
                per_query.insert(qid.to_string(), v);
                let judged = ids.iter().filter(|d| qrels.judgment(qid, d).is_some()).count();
                let cov = if ids.is_empty() {
                    0.0
                } else {
                    judged as f64 / ids.len() as f64
                };
                judged_coverage.insert(qid.to_string(), cov);
            }
            Err(MetricError::Undefined(_)) => {
                log::warn!("query {qid} has no relevant judgments; excluded");
                skipped.push((qid.to_string(), "no relevant judgments".to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    for q in qrels.query_ids() {
        if run.get(q).is_none() {
            log::warn!("judged query {q} is missing from the run");
        }
    }
    if per_query.is_empty() {
        return Err(MetricError::Evaluation(
            "no query of the run can be evaluated against the qrels".into(),
        ));
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        metric,
        per_query,
        mean,
        judged_coverage,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryDelta {
    pub query_id: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    /// `(after - before) / before`; `None` when `before` is zero.
    pub relative: Option<f64>,
    pub near_zero_base: bool,
}

impl QueryDelta {
    pub fn new(query_id: impl Into<String>, before: f64, after: f64) -> Self {
        Self {
            query_id: query_id.into(),
            before,
            after,
            delta: after - before,
            relative: (before != 0.0).then(|| (after - before) / before),
            near_zero_base: before < NEAR_ZERO_BASE,
        }
    }

    /// Relative change as a percentage string, e.g. `+61.1%`.
    pub fn relative_pct(&self) -> String {
        match self.relative {
            Some(r) => format!("{:+.1}%", r * 100.0),
            None => "undefined".to_string(),
        }
    }
}

/// Per-query metric change between two runs over the same queries, in query
/// id order. Queries without usable judgments are left out.
pub fn compare_runs(
    before: &RankedRun,
    after: &RankedRun,
    qrels: &Qrels,
    metric: Metric,
) -> Result<Vec<QueryDelta>, MetricError> {
    let a: BTreeSet<&str> = before.query_ids().collect();
    let b: BTreeSet<&str> = after.query_ids().collect();
    if a != b {
        let diff: Vec<&str> = a.symmetric_difference(&b).copied().collect();
        return Err(MetricError::Evaluation(format!(
            "runs cover different queries: {}",
            diff.join(", ")
        )));
    }
    let rb = evaluate_run(before, qrels, metric)?;
    let ra = evaluate_run(after, qrels, metric)?;
    Ok(rb
        .per_query
        .iter()
        .filter_map(|(q, &x)| ra.per_query.get(q).map(|&y| QueryDelta::new(q.clone(), x, y)))
        .collect())
}
