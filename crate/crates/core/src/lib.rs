//! Reranking of ad-hoc video search runs by late fusion of base-model scores
//! with max-pooled frame/query similarities, plus exact and inferred AP
//! evaluation.
//!
//! Pipeline: [`runio`] parses runs and qrels, [`embedstore`] holds frame and
//! query embeddings, [`scoring`] computes pooled frame similarities,
//! [`fusion`] combines them with the base scores, and [`metrics`] evaluates
//! the result. [`graphrerank`] provides a label-spreading baseline and
//! [`experiments`] sweeps fusion parameters.

pub mod embedstore;
pub mod experiments;
pub mod fusion;
pub mod graphrerank;
pub mod metrics;
pub mod runio;
pub mod scoring;

pub use embedstore::{EmbeddingStore, FrameMatrix, QueryEmbeddings, StoreError};
pub use fusion::{FusionConfig, FusionError, MissingPolicy, Normalization};
pub use metrics::{EvalReport, Metric, MetricError};
pub use runio::{Qrels, RankedRun, RunEntry, RunIoError};
pub use scoring::{PoolingMode, ScoringError};
