//! TREC-style run files and stratified qrels.
//!
//! Run lines follow the six-column convention `qid Q0 videoid rank score runtag`.
//! Scores are authoritative: parsing re-sorts every query by score (descending,
//! ties by file order) and rewrites ranks to `1..=n`.
//!
//! Qrels use `qid stratum videoid rel` judgment lines, preceded by one
//! `#stratum qid stratum pool_size judged_size` header per stratum. Complete
//! judgments are a single stratum whose pool and judged sizes agree.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunIoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> RunIoError {
    RunIoError::Parse { line, msg: msg.into() }
}

/// One retrieved video for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub video_id: String,
    pub score: f64,
    pub rank: u32,
}

/// Per-query ranked candidate lists. Queries iterate in sorted id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedRun {
    pub run_tag: String,
    entries: BTreeMap<String, Vec<RunEntry>>,
}

impl RankedRun {
    pub fn new(run_tag: impl Into<String>) -> Self {
        Self {
            run_tag: run_tag.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Builds a run from per-query `(video_id, score)` lists given in
    /// preference order. Lists are canonicalized (score descending, ties by
    /// the given order) and validated.
    pub fn from_scored<I, Q>(run_tag: impl Into<String>, queries: I) -> Result<Self, RunIoError>
    where
        I: IntoIterator<Item = (Q, Vec<(String, f64)>)>,
        Q: Into<String>,
    {
        let mut run = Self::new(run_tag);
        for (qid, list) in queries {
            let qid = qid.into();
            run.insert_query(qid, list)?;
        }
        Ok(run)
    }

    /// Adds or replaces a query, canonicalizing its list. An empty list
    /// removes the query, since a run file cannot express one.
    pub fn insert_query(&mut self, query_id: impl Into<String>, list: Vec<(String, f64)>) -> Result<(), RunIoError> {
        let qid = query_id.into();
        let mut seen = HashSet::with_capacity(list.len());
        for (vid, score) in &list {
            if !score.is_finite() {
                return Err(RunIoError::Validation(format!(
                    "query {qid}: non-finite score for {vid}"
                )));
            }
            if !seen.insert(vid.as_str()) {
                return Err(RunIoError::Validation(format!("query {qid}: duplicate video {vid}")));
            }
        }
        if list.is_empty() {
            self.entries.remove(&qid);
        } else {
            self.entries.insert(qid, canonical_entries(list));
        }
        Ok(())
    }

    /// Inserts an already ranked list without re-sorting. Ranks are rewritten
    /// from list position; the caller guarantees the ordering it wants kept.
    pub(crate) fn insert_ordered(&mut self, query_id: String, list: Vec<(String, f64)>) {
        let entries = list
            .into_iter()
            .enumerate()
            .map(|(i, (video_id, score))| RunEntry {
                video_id,
                score,
                rank: i as u32 + 1,
            })
            .collect();
        self.entries.insert(query_id, entries);
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.entries.iter().map(|(q, e)| (q.as_str(), e.as_slice()))
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, query_id: &str) -> Option<&[RunEntry]> {
        self.entries.get(query_id).map(Vec::as_slice)
    }

    /// Video ids of one query in rank order.
    pub fn ranked_ids(&self, query_id: &str) -> Option<Vec<&str>> {
        self.get(query_id)
            .map(|e| e.iter().map(|x| x.video_id.as_str()).collect())
    }

    pub fn num_queries(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-applies canonical ordering to every query. Idempotent.
    pub fn canonicalize(&mut self) {
        for list in self.entries.values_mut() {
            let pairs = list.drain(..).map(|e| (e.video_id, e.score)).collect::<Vec<_>>();
            *list = canonical_entries(pairs);
        }
    }

    /// Checks every structural invariant of a canonical run.
    pub fn validate(&self) -> Result<(), RunIoError> {
        for (qid, list) in &self.entries {
            let mut seen = HashSet::with_capacity(list.len());
            for (i, e) in list.iter().enumerate() {
                if e.rank as usize != i + 1 {
                    return Err(RunIoError::Validation(format!(
                        "query {qid}: rank {} at position {}",
                        e.rank,
                        i + 1
                    )));
                }
                if !e.score.is_finite() {
                    return Err(RunIoError::Validation(format!(
                        "query {qid}: non-finite score for {}",
                        e.video_id
                    )));
                }
                if !seen.insert(e.video_id.as_str()) {
                    return Err(RunIoError::Validation(format!(
                        "query {qid}: duplicate video {}",
                        e.video_id
                    )));
                }
                if i > 0 && list[i - 1].score < e.score {
                    return Err(RunIoError::Validation(format!(
                        "query {qid}: scores increase at rank {}",
                        e.rank
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stable descending sort on score; equal scores keep input order, and the
/// id comparison only matters for callers that feed unordered input.
fn canonical_entries(list: Vec<(String, f64)>) -> Vec<RunEntry> {
    let mut indexed: Vec<(usize, String, f64)> = list.into_iter().enumerate().map(|(i, (v, s))| (i, v, s)).collect();
    indexed.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then_with(|| a.1.cmp(&b.1)));
    indexed
        .into_iter()
        .enumerate()
        .map(|(i, (_, video_id, score))| RunEntry {
            video_id,
            score,
            rank: i as u32 + 1,
        })
        .collect()
}

/// Yields `(line_number, trimmed_line)` for non-blank lines, stripping any
/// trailing `\r`.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), io::Error>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(e)),
        Ok(l) => {
            let t = l.trim_end_matches('\r').trim();
            if t.is_empty() {
                None
            } else {
                Some(Ok((i + 1, t.to_string())))
            }
        }
    })
}

pub fn parse_run<R: BufRead>(reader: R) -> Result<RankedRun, RunIoError> {
    let mut run_tag: Option<String> = None;
    let mut per_query: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for item in content_lines(reader) {
        let (lineno, line) = item?;
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(lineno, format!("expected 6 fields, found {}", fields.len())));
        }
        let (qid, vid) = (fields[0], fields[2]);
        fields[3]
            .parse::<u64>()
            .map_err(|_| parse_err(lineno, format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(RunIoError::Validation(format!("line {lineno}: non-finite score")));
        }
        match &run_tag {
            None => run_tag = Some(fields[5].to_string()),
            Some(t) if t != fields[5] => {
                log::warn!("line {lineno}: run tag {:?} differs from {t:?}", fields[5]);
            }
            _ => {}
        }
        if !seen.insert((qid.to_string(), vid.to_string())) {
            return Err(RunIoError::Validation(format!(
                "line {lineno}: duplicate video {vid} for query {qid}"
            )));
        }
        per_query
            .entry(qid.to_string())
            .or_default()
            .push((vid.to_string(), score));
    }

    let mut run = RankedRun::new(run_tag.unwrap_or_default());
    for (qid, list) in per_query {
        run.entries.insert(qid, canonical_entries(list));
    }
    Ok(run)
}

pub fn parse_run_str(text: &str) -> Result<RankedRun, RunIoError> {
    parse_run(text.as_bytes())
}

/// Renders `x` like C's `%#.6g`: six significant digits, trailing zeros kept.
pub fn format_score(x: f64) -> String {
    const PREC: i32 = 6;
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let sci = format!("{:.*e}", (PREC - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..PREC).contains(&exp) {
        format!("{:.*}", (PREC - 1 - exp) as usize, x)
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

pub fn write_run<W: Write>(run: &RankedRun, mut out: W) -> io::Result<()> {
    let mut buf = String::new();
    for (qid, list) in &run.entries {
        for e in list {
            buf.clear();
            let _ = writeln!(
                buf,
                "{qid} Q0 {} {} {} {}",
                e.video_id,
                e.rank,
                format_score(e.score),
                run.run_tag
            );
            out.write_all(buf.as_bytes())?;
        }
    }
    out.flush()
}

pub fn write_run_string(run: &RankedRun) -> String {
    let mut out = Vec::new();
    write_run(run, &mut out).expect("writing to memory");
    String::from_utf8(out).expect("run text is UTF-8")
}

/// A single relevance judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgment {
    pub stratum: u32,
    pub relevant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumInfo {
    pub pool_size: u64,
    pub judged_size: u64,
}

impl StratumInfo {
    /// Fraction of the stratum's pool that was judged.
    pub fn sampling_rate(&self) -> f64 {
        self.judged_size as f64 / self.pool_size as f64
    }

    /// Inverse sampling rate: how many pool documents one judgment stands for.
    pub fn weight(&self) -> f64 {
        self.pool_size as f64 / self.judged_size as f64
    }
}

/// Binary, possibly sampled, relevance judgments. Unjudged videos are simply
/// absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, HashMap<String, Judgment>>,
    strata: BTreeMap<(String, u32), StratumInfo>,
}

impl Qrels {
    pub fn builder() -> QrelsBuilder {
        QrelsBuilder::default()
    }

    pub fn judgment(&self, query_id: &str, video_id: &str) -> Option<Judgment> {
        self.judgments.get(query_id)?.get(video_id).copied()
    }

    pub fn judgments(&self, query_id: &str) -> Option<&HashMap<String, Judgment>> {
        self.judgments.get(query_id)
    }

    pub fn stratum(&self, query_id: &str, stratum: u32) -> Option<StratumInfo> {
        self.strata.get(&(query_id.to_string(), stratum)).copied()
    }

    /// Strata of one query in ascending id order.
    pub fn strata(&self, query_id: &str) -> Vec<(u32, StratumInfo)> {
        self.strata
            .iter()
            .filter(|((q, _), _)| q == query_id)
            .map(|((_, s), info)| (*s, *info))
            .collect()
    }

    pub fn has_query(&self, query_id: &str) -> bool {
        self.strata.keys().any(|(q, _)| q == query_id)
    }

    pub fn query_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.strata.keys().map(|(q, _)| q.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Whether every stratum of the query is fully judged.
    pub fn is_complete(&self, query_id: &str) -> bool {
        self.strata(query_id).iter().all(|(_, s)| s.pool_size == s.judged_size)
    }

    pub fn num_relevant(&self, query_id: &str) -> usize {
        self.judgments
            .get(query_id)
            .map(|m| m.values().filter(|j| j.relevant).count())
            .unwrap_or(0)
    }
}

#[derive(Debug, Default)]
pub struct QrelsBuilder {
    judgments: BTreeMap<String, HashMap<String, Judgment>>,
    strata: BTreeMap<(String, u32), StratumInfo>,
}

impl QrelsBuilder {
    pub fn stratum(
        &mut self,
        query_id: &str,
        stratum: u32,
        pool_size: u64,
        judged_size: u64,
    ) -> Result<&mut Self, RunIoError> {
        if pool_size == 0 || judged_size == 0 {
            return Err(RunIoError::Validation(format!(
                "stratum {query_id}/{stratum}: sizes must be positive"
            )));
        }
        if judged_size > pool_size {
            return Err(RunIoError::Validation(format!(
                "stratum {query_id}/{stratum}: judged_size {judged_size} exceeds pool_size {pool_size}"
            )));
        }
        let key = (query_id.to_string(), stratum);
        if self.strata.contains_key(&key) {
            return Err(RunIoError::Validation(format!(
                "stratum {query_id}/{stratum} declared twice"
            )));
        }
        self.strata.insert(key, StratumInfo { pool_size, judged_size });
        Ok(self)
    }

    pub fn judge(
        &mut self,
        query_id: &str,
        stratum: u32,
        video_id: &str,
        relevant: bool,
    ) -> Result<&mut Self, RunIoError> {
        if !self.strata.contains_key(&(query_id.to_string(), stratum)) {
            return Err(RunIoError::Validation(format!(
                "judgment for {query_id}/{video_id} references undeclared stratum {stratum}"
            )));
        }
        let prev = self
            .judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(video_id.to_string(), Judgment { stratum, relevant });
        if prev.is_some() {
            return Err(RunIoError::Validation(format!(
                "duplicate judgment for {query_id}/{video_id}"
            )));
        }
        Ok(self)
    }

    pub fn build(self) -> Result<Qrels, RunIoError> {
        let mut counts: HashMap<(&str, u32), u64> = HashMap::new();
        for (q, m) in &self.judgments {
            for j in m.values() {
                *counts.entry((q.as_str(), j.stratum)).or_default() += 1;
            }
        }
        for ((q, s), info) in &self.strata {
            let n = counts.get(&(q.as_str(), *s)).copied().unwrap_or(0);
            if n != info.judged_size {
                return Err(RunIoError::Validation(format!(
                    "stratum {q}/{s}: declared judged_size {} but {n} judgments present",
                    info.judged_size
                )));
            }
        }
        Ok(Qrels {
            judgments: self.judgments,
            strata: self.strata,
        })
    }
}

pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels, RunIoError> {
    let mut b = Qrels::builder();
    for item in content_lines(reader) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let at_line = |e: RunIoError| match e {
            RunIoError::Validation(m) => RunIoError::Validation(format!("line {lineno}: {m}")),
            other => other,
        };
        if fields[0] == "#stratum" {
            if fields.len() != 5 {
                return Err(parse_err(lineno, "stratum header needs 4 fields"));
            }
            let stratum = parse_num::<u32>(lineno, "stratum", fields[2])?;
            let pool = parse_num::<u64>(lineno, "pool_size", fields[3])?;
            let judged = parse_num::<u64>(lineno, "judged_size", fields[4])?;
            b.stratum(fields[1], stratum, pool, judged).map_err(at_line)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let stratum = parse_num::<u32>(lineno, "stratum", fields[1])?;
        let rel = parse_num::<i64>(lineno, "relevance", fields[3])?;
        let relevant = match rel {
            0 => false,
            1 => true,
            other => {
                return Err(RunIoError::Validation(format!(
                    "line {lineno}: relevance {other} is not binary"
                )))
            }
        };
        b.judge(fields[0], stratum, fields[2], relevant).map_err(at_line)?;
    }
    b.build()
}

pub fn parse_qrels_str(text: &str) -> Result<Qrels, RunIoError> {
    parse_qrels(text.as_bytes())
}

fn parse_num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, RunIoError> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what} {s:?}")))
}

/// Writes qrels in the stratified format accepted by [`parse_qrels`].
/// Judgments within a stratum are emitted in video id order.
pub fn write_qrels<W: Write>(qrels: &Qrels, mut out: W) -> io::Result<()> {
    for ((q, s), info) in &qrels.strata {
        writeln!(out, "#stratum {q} {s} {} {}", info.pool_size, info.judged_size)?;
        let mut rows: Vec<(&String, &Judgment)> = qrels
            .judgments
            .get(q)
            .map(|m| m.iter().filter(|(_, j)| j.stratum == *s).collect())
            .unwrap_or_default();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        for (v, j) in rows {
            writeln!(out, "{q} {s} {v} {}", u8::from(j.relevant))?;
        }
    }
    out.flush()
}
