//! The `EMBS` frame-embedding container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMBS" | version u32 = 1 | flags u32 (bit 0: rows unit-normalized) | dim u32 | video_count u64
//! per video: id_len u16 | id bytes (UTF-8) | n_frames u32 | n_frames * dim f32 (row-major)
//! "SBME"
//! ```
//!
//! Query embeddings use the same container with exactly one row per entry.

use std::io::{self, BufRead, Read, Write};

use indexmap::IndexMap;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMBS";
pub const FOOTER: &[u8; 4] = b"SBME";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("format: {0}")]
    Format(String),
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major `n_frames x dim` matrix of f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Validation("dim must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(StoreError::Validation(format!(
                "{} values do not form whole rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(StoreError::Validation("ragged rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn normalize_rows(&mut self) -> Result<(), StoreError> {
        for row in self.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(StoreError::Validation("cannot normalize a zero row".into()));
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
        Ok(())
    }
}

/// Immutable map from video id to its frame embeddings, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    normalized: bool,
    videos: IndexMap<String, FrameMatrix>,
}

impl EmbeddingStore {
    pub fn builder(dim: usize) -> StoreBuilder {
        StoreBuilder {
            dim,
            normalized: false,
            videos: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.values().map(FrameMatrix::n_frames).sum()
    }

    /// `None` means the video has no embeddings; callers decide the policy.
    pub fn get_frames(&self, video_id: &str) -> Option<&FrameMatrix> {
        self.videos.get(video_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FrameMatrix)> {
        self.videos.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Returns a copy whose rows are scaled to unit L2 norm.
    pub fn normalized_copy(&self) -> Result<Self, StoreError> {
        let mut out = self.clone();
        for m in out.videos.values_mut() {
            m.normalize_rows()?;
        }
        out.normalized = true;
        Ok(out)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return Err(StoreError::Validation(format!("bad dim {}", self.dim)));
        }
        for (id, m) in &self.videos {
            if id.len() > u16::MAX as usize {
                return Err(StoreError::Validation(format!("id too long: {id:.32}...")));
            }
            if m.dim != self.dim {
                return Err(StoreError::Validation(format!(
                    "{id}: width {} != store dim {}",
                    m.dim, self.dim
                )));
            }
            if m.data.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::Validation(format!("{id}: non-finite value")));
            }
            if self.normalized {
                for (i, row) in m.rows().enumerate() {
                    let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > NORM_TOLERANCE {
                        return Err(StoreError::Validation(format!(
                            "{id}: row {i} has norm {norm}, store is flagged normalized"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct StoreBuilder {
    dim: usize,
    normalized: bool,
    videos: IndexMap<String, FrameMatrix>,
}

impl StoreBuilder {
    /// Declares that every row is unit norm; checked in [`StoreBuilder::build`].
    pub fn normalized(mut self, yes: bool) -> Self {
        self.normalized = yes;
        self
    }

    pub fn insert(&mut self, video_id: impl Into<String>, frames: FrameMatrix) -> Result<(), StoreError> {
        let id = video_id.into();
        if self.videos.contains_key(&id) {
            return Err(StoreError::Validation(format!("duplicate video id {id}")));
        }
        self.videos.insert(id, frames);
        Ok(())
    }

    pub fn with(mut self, video_id: impl Into<String>, frames: FrameMatrix) -> Result<Self, StoreError> {
        self.insert(video_id, frames)?;
        Ok(self)
    }

    pub fn build(self) -> Result<EmbeddingStore, StoreError> {
        let store = EmbeddingStore {
            dim: self.dim,
            normalized: self.normalized,
            videos: self.videos,
        };
        store.validate()?;
        Ok(store)
    }
}

pub fn write_store<W: Write>(store: &EmbeddingStore, mut out: W) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let flags = if store.normalized { FLAG_NORMALIZED } else { 0 };
    out.write_all(&flags.to_le_bytes())?;
    out.write_all(&(store.dim as u32).to_le_bytes())?;
    out.write_all(&(store.videos.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for (id, m) in &store.videos {
        buf.clear();
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
        buf.reserve(m.data.len() * 4);
        for x in &m.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.write_all(FOOTER)?;
    out.flush()
}

pub fn store_to_bytes(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::new();
    write_store(store, &mut out).expect("writing to memory");
    out
}

/// Header fields, readable without decoding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub normalized: bool,
    pub dim: u32,
    pub video_count: u64,
}

pub fn read_header(bytes: &[u8]) -> Result<StoreHeader, StoreError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    let flags = cur.u32("flags")?;
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(StoreError::Format(format!("unknown flag bits {flags:#x}")));
    }
    let dim = cur.u32("dim")?;
    if dim == 0 {
        return Err(StoreError::Format("dim is zero".into()));
    }
    let video_count = cur.u64("video_count")?;
    Ok(StoreHeader {
        version,
        normalized: flags & FLAG_NORMALIZED != 0,
        dim,
        video_count,
    })
}

/// Decodes and validates a whole store.
pub fn open_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let header = read_header(bytes)?;
    let dim = header.dim as usize;
    let mut cur = Cursor::new(&bytes[HEADER_LEN..]);
    // Every record needs at least 6 bytes, so a count beyond that is a lie.
    let cap = (header.video_count as usize).min(cur.remaining() / 6);
    let mut videos = IndexMap::with_capacity(cap);
    for i in 0..header.video_count {
        let id_len = cur.u16("id length")? as usize;
        let id_bytes = cur.take(id_len, "video id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| StoreError::Format(format!("video {i}: id is not UTF-8")))?
            .to_string();
        let n_frames = cur.u32("n_frames")? as usize;
        if n_frames == 0 {
            return Err(StoreError::Validation(format!("{id}: zero frames")));
        }
        let n_values = n_frames
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= cur.remaining()))
            .ok_or_else(|| {
                StoreError::Truncated(format!("{id}: {n_frames} frames of width {dim} exceed the payload"))
            })?;
        let raw = cur.take(n_values * 4, "frames")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if videos.insert(id.clone(), FrameMatrix { dim, data }).is_some() {
            return Err(StoreError::Validation(format!("duplicate video id {id}")));
        }
    }
    let footer = cur.take(4, "footer")?;
    if footer != FOOTER {
        return Err(StoreError::Format(format!("bad footer {footer:?}")));
    }
    if cur.remaining() != 0 {
        return Err(StoreError::Format(format!(
            "{} trailing bytes after footer",
            cur.remaining()
        )));
    }
    let store = EmbeddingStore {
        dim,
        normalized: header.normalized,
        videos,
    };
    store.validate()?;
    Ok(store)
}

pub fn read_store<R: Read>(mut reader: R) -> Result<EmbeddingStore, StoreError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    open_store(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        if self.remaining() < n {
            return Err(StoreError::Truncated(format!(
                "{what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, StoreError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Per-query text embeddings: an `EMBS` store whose entries have one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbeddings {
    store: EmbeddingStore,
}

impl QueryEmbeddings {
    pub fn from_store(store: EmbeddingStore) -> Result<Self, StoreError> {
        if let Some((id, m)) = store.iter().find(|(_, m)| m.n_frames() != 1) {
            return Err(StoreError::Validation(format!(
                "query {id} has {} rows, expected 1",
                m.n_frames()
            )));
        }
        Ok(Self { store })
    }

    pub fn from_vectors<I, S>(dim: usize, vectors: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut b = EmbeddingStore::builder(dim);
        for (id, v) in vectors {
            b.insert(id, FrameMatrix::new(dim, v)?)?;
        }
        Self::from_store(b.build()?)
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn get(&self, query_id: &str) -> Option<&[f32]> {
        self.store.get_frames(query_id).map(|m| m.row(0))
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn as_store(&self) -> &EmbeddingStore {
        &self.store
    }
}

/// Parses the plain-text interchange format: a `video_id n_frames dim` line
/// followed by `n_frames` lines of `dim` whitespace-separated reals, repeated.
/// Blank lines and `#` comments are skipped.
pub fn parse_text_store<R: BufRead>(reader: R) -> Result<EmbeddingStore, StoreError> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l.trim_end_matches('\r').trim().to_string())))
        .filter(|r| !matches!(r, Ok((_, l)) if l.is_empty() || l.starts_with('#')));
    let mut builder: Option<StoreBuilder> = None;
    while let Some(header) = lines.next() {
        let (lineno, header) = header?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = |m: String| StoreError::Format(format!("line {lineno}: {m}"));
        if fields.len() != 3 {
            return Err(bad(format!("expected `video_id n_frames dim`, got {header:?}")));
        }
        let n_frames: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad n_frames {:?}", fields[1])))?;
        let dim: usize = fields[2].parse().map_err(|_| bad(format!("bad dim {:?}", fields[2])))?;
        let b = builder.get_or_insert_with(|| EmbeddingStore::builder(dim));
        if dim != b.dim {
            return Err(bad(format!("dim {dim} differs from earlier dim {}", b.dim)));
        }
        let mut data = Vec::with_capacity(n_frames * dim);
        for _ in 0..n_frames {
            let (rl, row) = lines
                .next()
                .ok_or_else(|| StoreError::Truncated(format!("{}: missing frame rows", fields[0])))??;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(
                    tok.parse::<f32>()
                        .map_err(|_| StoreError::Format(format!("line {rl}: bad value {tok:?}")))?,
                );
            }
            if data.len() - before != dim {
                return Err(StoreError::Format(format!(
                    "line {rl}: expected {dim} values, found {}",
                    data.len() - before
                )));
            }
        }
        b.insert(fields[0], FrameMatrix::new(dim, data)?)?;
    }
    match builder {
        Some(b) => b.build(),
        None => Err(StoreError::Format("no entries in text store".into())),
    }
}

pub fn write_text_store<W: Write>(store: &EmbeddingStore, mut out: W) -> io::Result<()> {
    for (id, m) in store.iter() {
        writeln!(out, "{id} {} {}", m.n_frames(), m.dim())?;
        for row in m.rows() {
            let mut first = true;
            for x in row {
                if !first {
                    out.write_all(b" ")?;
                }
                first = false;
                write!(out, "{x}")?;
            }
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_frame_store() -> EmbeddingStore {
        EmbeddingStore::builder(4)
            .with(
                "v1",
                FrameMatrix::new(4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0]).unwrap(),
            )
            .unwrap()
            .build()
            .unwrap()
    }

    #[test]
    fn empty_store_is_header_plus_footer() {
        let store = EmbeddingStore::builder(512).build().unwrap();
        let bytes = store_to_bytes(&store);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"EMBS");
        assert_eq!(&bytes[16..24], &0u64.to_le_bytes());
        let back = open_store(&bytes).unwrap();
        assert_eq!(back.dim(), 512);
        assert!(back.is_empty());
    }

    #[test]
    fn record_size_arithmetic() {
        let bytes = store_to_bytes(&two_frame_store());
        // header + id_len + "v1" + n_frames + 2*4*4 + footer
        assert_eq!(bytes.len(), 24 + 2 + 2 + 4 + 32 + 4);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = two_frame_store();
        let bytes = store_to_bytes(&store);
        let back = open_store(&bytes).unwrap();
        assert_eq!(store_to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = store_to_bytes(&two_frame_store());
        bytes[3] = b'X';
        assert!(matches!(open_store(&bytes), Err(StoreError::Format(_))));
    }

    #[test]
    fn truncated_frames() {
        let store = EmbeddingStore::builder(2)
            .with("v", FrameMatrix::new(2, vec![1.0; 6]).unwrap())
            .unwrap()
            .build()
            .unwrap();
        let mut bytes = store_to_bytes(&store);
        // Drop the third frame and keep the footer.
        let cut = bytes.len() - 4 - 8;
        bytes.drain(cut..cut + 8);
        assert!(matches!(open_store(&bytes), Err(StoreError::Truncated(_))));
    }

    #[test]
    fn duplicate_id_in_file() {
        let one = store_to_bytes(&two_frame_store());
        let record = &one[24..one.len() - 4];
        let mut bytes = one[..16].to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(record);
        bytes.extend_from_slice(record);
        bytes.extend_from_slice(FOOTER);
        assert!(matches!(open_store(&bytes), Err(StoreError::Validation(_))));
    }

    #[test]
    fn normalized_flag_is_checked() {
        let m = FrameMatrix::new(2, vec![3.0, 4.0]).unwrap();
        assert!(EmbeddingStore::builder(2)
            .normalized(true)
            .with("v", m.clone())
            .unwrap()
            .build()
            .is_err());
        let raw = EmbeddingStore::builder(2).with("v", m).unwrap().build().unwrap();
        let unit = raw.normalized_copy().unwrap();
        assert!(unit.is_normalized());
        assert_eq!(unit.get_frames("v").unwrap().row(0), &[0.6, 0.8]);
    }

    #[test]
    fn get_frames_absent_and_single() {
        let store = EmbeddingStore::builder(3)
            .with("one", FrameMatrix::new(3, vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap()
            .build()
            .unwrap();
        assert!(store.get_frames("nope").is_none());
        let m = store.get_frames("one").unwrap();
        assert_eq!((m.n_frames(), m.dim()), (1, 3));
    }

    #[test]
    fn rejects_non_finite_and_ragged() {
        assert!(EmbeddingStore::builder(1)
            .with("v", FrameMatrix::new(1, vec![f32::NAN]).unwrap())
            .unwrap()
            .build()
            .is_err());
        assert!(FrameMatrix::new(3, vec![1.0; 4]).is_err());
        assert!(FrameMatrix::new(3, vec![]).is_err());
    }

    #[test]
    fn text_interchange_roundtrip() {
        let text = "v1 2 3\n0.1 0.2 0.3\n-1 2.5 1e-3\n# c\nv2 1 3\n1 1 1\n";
        let store = parse_text_store(text.as_bytes()).unwrap();
        assert_eq!(store.len(), 2);
        let mut out = Vec::new();
        write_text_store(&store, &mut out).unwrap();
        let again = parse_text_store(out.as_slice()).unwrap();
        assert_eq!(store_to_bytes(&again), store_to_bytes(&store));
    }

    #[test]
    fn text_interchange_errors() {
        assert!(parse_text_store("v1 2 3\n0 0 0\n".as_bytes()).is_err());
        assert!(parse_text_store("v1 1 3\n0 0\n".as_bytes()).is_err());
        assert!(parse_text_store("v1 1 2\n0 1\nv2 1 3\n0 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn query_embeddings_need_single_rows() {
        let store = two_frame_store();
        assert!(QueryEmbeddings::from_store(store).is_err());
        let q = QueryEmbeddings::from_vectors(2, [("q1", vec![1.0, 0.0])]).unwrap();
        assert_eq!(q.get("q1"), Some(&[1.0f32, 0.0][..]));
        assert!(q.get("q2").is_none());
    }

    proptest! {
        #[test]
        fn single_byte_header_corruption_rejected(pos in 0usize..HEADER_LEN, val in any::<u8>()) {
            // Unnormalized store with non-unit rows: every header byte matters.
            let bytes = store_to_bytes(&two_frame_store());
            prop_assume!(bytes[pos] != val);
            let mut bad = bytes.clone();
            bad[pos] = val;
            prop_assert!(open_store(&bad).is_err());
        }
    }
}
