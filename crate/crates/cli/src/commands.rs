use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use avsrerank::embedstore::{self, EmbeddingStore, QueryEmbeddings, StoreError, MAGIC};
use avsrerank::experiments::{per_query_report, sweep, SweepSpec};
use avsrerank::fusion::{rerank_run, FusionConfig};
use avsrerank::graphrerank::{labelspread_run, GraphConfig, SigmaMode, Solver};
use avsrerank::metrics::evaluate_run;
use avsrerank::runio::{self, Qrels, RankedRun};
use log::{info, warn};

use crate::{Cli, Command, CompareArgs, ConvertArgs, EvalArgs, InspectArgs, Method, RerankArgs, SolverArg, SweepArgs};

#[derive(Debug)]
pub enum CliError {
    /// Flags that parse but describe an invalid configuration.
    Usage(String),
    /// Unreadable, malformed or inconsistent input data.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data<E: fmt::Display>(context: impl fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    pool.install(|| match cli.command {
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Convert(a) => convert(a),
        Command::Inspect(a) => inspect(a),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(data(path.display()))
}

fn load_run(path: &Path) -> Result<RankedRun> {
    let file = File::open(path).map_err(data(path.display()))?;
    runio::parse_run(BufReader::new(file)).map_err(data(path.display()))
}

fn load_qrels(path: &Path) -> Result<Qrels> {
    let file = File::open(path).map_err(data(path.display()))?;
    runio::parse_qrels(BufReader::new(file)).map_err(data(path.display()))
}

/// Opens an EMBS file, or parses the text interchange format otherwise.
fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(MAGIC) {
        embedstore::open_store(&bytes).map_err(data(path.display()))
    } else {
        embedstore::parse_text_store(bytes.as_slice()).map_err(data(path.display()))
    }
}

fn load_queries(path: &Path) -> Result<QueryEmbeddings> {
    QueryEmbeddings::from_store(load_store(path)?).map_err(data(path.display()))
}

/// Writes the whole output at once so a failed command leaves no partial file.
fn emit(out: Option<&PathBuf>, body: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, body).map_err(data(path.display())),
        None => {
            let stdout = io::stdout();
            let mut lock = BufWriter::new(stdout.lock());
            lock.write_all(body).and_then(|_| lock.flush()).map_err(data("stdout"))
        }
    }
}

fn rerank(a: RerankArgs) -> Result<()> {
    let fusion_cfg = FusionConfig {
        alpha: a.alpha,
        k: a.k,
        normalization: a.norm,
        pooling: a.pool,
        missing_policy: a.missing,
    };
    let graph_cfg = GraphConfig {
        propagation_alpha: a.ls_alpha,
        seeds: a.ls_seeds,
        sigma_mode: a.ls_sigma.map_or(SigmaMode::MedianHeuristic, SigmaMode::Fixed),
        solver: match a.ls_solver {
            SolverArg::Closed => Solver::ClosedForm,
            SolverArg::Iterative => Solver::Iterative,
        },
        max_iters: a.ls_max_iters,
        tolerance: a.ls_tol,
    };
    match a.method {
        Method::Fuse => fusion_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?,
        Method::Labelspread => {
            graph_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            if a.k == 0 {
                return Err(CliError::Usage("--k must be positive".into()));
            }
        }
    }

    let run = load_run(&a.run)?;
    let store = load_store(&a.store)?;
    let mut out = match a.method {
        Method::Fuse => {
            let qpath = a
                .queries
                .as_ref()
                .ok_or_else(|| CliError::Usage("--queries is required for --method fuse".into()))?;
            let queries = load_queries(qpath)?;
            let (out, diag) = rerank_run(&run, &store, &queries, &fusion_cfg).map_err(data("rerank"))?;
            for (q, d) in &diag.per_query {
                if !d.floored.is_empty() {
                    warn!("query {q}: {} candidates without embeddings floored", d.floored.len());
                }
            }
            info!(
                "reranked {} queries, {} floored candidates",
                out.num_queries(),
                diag.total_missing()
            );
            out
        }
        Method::Labelspread => labelspread_run(&run, &store, &graph_cfg, a.k).map_err(data("labelspread"))?,
    };
    if let Some(tag) = a.tag {
        out.run_tag = tag;
    }
    emit(a.out.as_ref(), runio::write_run_string(&out).as_bytes())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let qrels = load_qrels(&a.qrels)?;
    let report = evaluate_run(&run, &qrels, a.metric).map_err(data("eval"))?;
    emit(a.out.as_ref(), report.to_tsv().as_bytes())
}

fn compare(a: CompareArgs) -> Result<()> {
    let before = load_run(&a.before)?;
    let after = load_run(&a.after)?;
    let qrels = load_qrels(&a.qrels)?;
    let report = per_query_report(&before, &after, &qrels, a.metric).map_err(data("compare"))?;
    emit(a.out.as_ref(), report.to_tsv().as_bytes())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).map_err(data(a.spec.display()))?;
    let spec = SweepSpec::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.spec.display())))?;
    spec.validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", a.spec.display())))?;
    let run = load_run(&a.run)?;
    let store = load_store(&a.store)?;
    let queries = load_queries(&a.queries)?;
    let qrels = load_qrels(&a.qrels)?;
    let grid = sweep(&run, &store, &queries, &qrels, &spec).map_err(data("sweep"))?;
    emit(a.out.as_ref(), grid.to_tsv().as_bytes())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let bytes = read_bytes(&a.input)?;
    let body = if bytes.starts_with(MAGIC) {
        let store = embedstore::open_store(&bytes).map_err(data(a.input.display()))?;
        let mut buf = Vec::new();
        embedstore::write_text_store(&store, &mut buf).map_err(data("convert"))?;
        buf
    } else {
        let mut store = embedstore::parse_text_store(bytes.as_slice()).map_err(data(a.input.display()))?;
        if !a.raw {
            store = match mark_normalized(&store) {
                Ok(unit) => unit,
                Err(_) => store.normalized_copy().map_err(data(a.input.display()))?,
            };
        }
        embedstore::store_to_bytes(&store)
    };
    fs::write(&a.out, body).map_err(data(a.out.display()))
}

/// Flags a store whose rows are already unit length as normalized, keeping
/// the values bit for bit.
fn mark_normalized(store: &EmbeddingStore) -> std::result::Result<EmbeddingStore, StoreError> {
    let mut b = EmbeddingStore::builder(store.dim()).normalized(true);
    for (id, m) in store.iter() {
        b.insert(id, m.clone())?;
    }
    b.build()
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = read_bytes(&a.store)?;
    let header = embedstore::read_header(&bytes).map_err(data(a.store.display()))?;
    let store = embedstore::open_store(&bytes).map_err(data(a.store.display()))?;
    let body = format!(
        "magic\tEMBS\nversion\t{}\nnormalized\t{}\ndim\t{}\nvideos\t{}\nframes\t{}\n",
        header.version,
        header.normalized,
        header.dim,
        store.len(),
        store.total_frames()
    );
    emit(None, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use avsrerank::FrameMatrix;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data("x".into()).exit_code(), 2);
    }

    #[test]
    fn mark_normalized_keeps_unit_rows_bitwise() {
        let row = vec![0.6f32, 0.8];
        let store = EmbeddingStore::builder(2)
            .with("v", FrameMatrix::new(2, row.clone()).unwrap())
            .unwrap()
            .build()
            .unwrap();
        let marked = mark_normalized(&store).unwrap();
        assert!(marked.is_normalized());
        assert_eq!(marked.get_frames("v").unwrap().as_slice(), row.as_slice());
    }

    #[test]
    fn mark_normalized_rejects_other_rows() {
        let store = EmbeddingStore::builder(2)
            .with("v", FrameMatrix::new(2, vec![3.0, 4.0]).unwrap())
            .unwrap()
            .build()
            .unwrap();
        assert!(mark_normalized(&store).is_err());
    }
}
