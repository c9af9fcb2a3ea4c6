//! Label spreading over the top-k candidates of a query.
//!
//! Nodes are candidates, represented by their L2-normalized mean frame
//! embedding. Edges carry a Gaussian kernel on Euclidean distance and are
//! symmetrically normalized. The top `seeds` candidates of the base ranking
//! are labeled positive and labels are propagated until the fixed point
//! `F = (1 - a) (I - a S)^-1 Y`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::embedstore::{EmbeddingStore, FrameMatrix};
use crate::fusion::order_by_score;
use crate::runio::{RankedRun, RunEntry};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("config: {0}")]
    Config(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("query {query}: no embeddings for {}", .ids.join(", "))]
    MissingEmbeddings { query: String, ids: Vec<String> },
    #[error("label spreading did not converge after {iters} iterations (last change {residual:e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// Median pairwise distance, or 1 when that median is 0.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    ClosedForm,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub propagation_alpha: f64,
    pub seeds: usize,
    pub sigma_mode: SigmaMode,
    pub solver: Solver,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            propagation_alpha: 0.99,
            seeds: 10,
            sigma_mode: SigmaMode::MedianHeuristic,
            solver: Solver::ClosedForm,
            max_iters: 1000,
            tolerance: 1e-6,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let a = self.propagation_alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(GraphError::Config(format!(
                "propagation alpha {a} must lie strictly inside (0, 1)"
            )));
        }
        if self.seeds == 0 {
            return Err(GraphError::Config("need at least one seed".into()));
        }
        if let SigmaMode::Fixed(s) = self.sigma_mode {
            if !(s > 0.0 && s.is_finite()) {
                return Err(GraphError::Config(format!("sigma {s} must be positive")));
            }
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(GraphError::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of the frame rows, L2-normalized.
pub fn video_repr(frames: &FrameMatrix) -> Result<Vec<f64>, GraphError> {
    let mut mean = vec![0.0f64; frames.dim()];
    for row in frames.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    let n = frames.n_frames() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(GraphError::Domain("mean frame embedding has zero norm".into()));
    }
    mean.iter_mut().for_each(|m| *m /= norm);
    Ok(mean)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn kernel_width(reprs: &[Vec<f64>], mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Fixed(s) => s,
        SigmaMode::MedianHeuristic => {
            let mut d = Vec::with_capacity(reprs.len() * reprs.len().saturating_sub(1) / 2);
            for i in 0..reprs.len() {
                for j in i + 1..reprs.len() {
                    d.push(sq_dist(&reprs[i], &reprs[j]).sqrt());
                }
            }
            let m = if d.is_empty() { 0.0 } else { median(d) };
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    }
}

/// Symmetrically normalized affinity `D^-1/2 W D^-1/2` with zero diagonal.
pub fn build_affinity(reprs: &[Vec<f64>], sigma_mode: SigmaMode) -> DMatrix<f64> {
    let n = reprs.len();
    let sigma = kernel_width(reprs, sigma_mode);
    let denom = 2.0 * sigma * sigma;
    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = (-sq_dist(&reprs[i], &reprs[j]) / denom).exp();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = w.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    w
}

/// Propagated scores for nodes whose first `seeds` entries are labeled.
pub fn spread(affinity: &DMatrix<f64>, seeds: usize, cfg: &GraphConfig) -> Result<Vec<f64>, GraphError> {
    cfg.validate()?;
    let n = affinity.nrows();
    let y = DVector::<f64>::from_fn(n, |i, _| if i < seeds { 1.0 } else { 0.0 });
    // Every node labeled: the labels carry no preference to propagate.
    if seeds >= n {
        return Ok(y.iter().copied().collect());
    }
    let a = cfg.propagation_alpha;
    let f = match cfg.solver {
        Solver::ClosedForm => {
            let system = DMatrix::<f64>::identity(n, n) - affinity * a;
            let x = system
                .lu()
                .solve(&y)
                .ok_or_else(|| GraphError::Internal("singular propagation system".into()))?;
            x * (1.0 - a)
        }
        Solver::Iterative => {
            let base = &y * (1.0 - a);
            let mut f = y.clone();
            let mut change = f64::INFINITY;
            let mut converged = false;
            for _ in 0..cfg.max_iters {
                let next = affinity * &f * a + &base;
                change = (&next - &f).amax();
                f = next;
                if change < cfg.tolerance {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(GraphError::NotConverged {
                    iters: cfg.max_iters,
                    residual: change,
                });
            }
            f
        }
    };
    Ok(f.iter().copied().collect())
}

/// Label-spreading scores for one query's top-k slice, reordered by score
/// with ties kept in base order.
pub fn label_spread(
    query_id: &str,
    slice: &[RunEntry],
    store: &EmbeddingStore,
    cfg: &GraphConfig,
) -> Result<Vec<(String, f64)>, GraphError> {
    cfg.validate()?;
    if slice.len() < 2 {
        return Err(GraphError::Domain(format!(
            "query {query_id}: need at least 2 candidates, got {}",
            slice.len()
        )));
    }
    let missing: Vec<String> = slice
        .iter()
        .filter(|e| store.get_frames(&e.video_id).is_none())
        .map(|e| e.video_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(GraphError::MissingEmbeddings {
            query: query_id.to_string(),
            ids: missing,
        });
    }
    let reprs = slice
        .iter()
        .map(|e| video_repr(store.get_frames(&e.video_id).expect("checked above")))
        .collect::<Result<Vec<_>, _>>()?;
    let s = build_affinity(&reprs, cfg.sigma_mode);
    let f = spread(&s, cfg.seeds, cfg)?;
    Ok(order_by_score(slice, &f))
}

/// Applies [`label_spread`] to the top `k` entries of every query.
pub fn labelspread_run(
    run: &RankedRun,
    store: &EmbeddingStore,
    cfg: &GraphConfig,
    k: usize,
) -> Result<RankedRun, GraphError> {
    cfg.validate()?;
    if k == 0 {
        return Err(GraphError::Config("k must be positive".into()));
    }
    let queries: Vec<(&str, &[RunEntry])> = run.queries().collect();
    let lists: Vec<_> = queries
        .par_iter()
        .map(|&(q, entries)| label_spread(q, &entries[..entries.len().min(k)], store, cfg))
        .collect();
    let mut out = RankedRun::new(run.run_tag.clone());
    for ((q, _), list) in queries.into_iter().zip(lists) {
        out.insert_ordered(q.to_string(), list?);
    }
    Ok(out)
}
