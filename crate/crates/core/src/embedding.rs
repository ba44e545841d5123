//! Embedding tables and exact nearest-neighbor search.
//!
//! Two on-disk encodings are supported:
//!
//! * binary: `EMB1`, then little-endian `u32` version (1), `u32` dim,
//!   `u32` count, and per entry a `u16` id length, the UTF-8 id bytes and
//!   `dim` little-endian `f32` components;
//! * JSON lines: one `{"id": "...", "vec": [...]}` object per line.
//!
//! Components are stored at `f32` precision in memory as well, so both
//! encodings round-trip without loss.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Word,
    Usage,
    Gloss,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Word => "word",
            EmbeddingKind::Usage => "usage",
            EmbeddingKind::Gloss => "gloss",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    vector: Vec<f64>,
    norm: f64,
}

/// Id to vector store with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    kind: EmbeddingKind,
    entries: BTreeMap<String, Entry>,
}

impl EmbeddingTable {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            kind,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert a vector, rounding its components to `f32` precision.
    /// Replacing an existing id is an error.
    pub fn insert(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let vector: Vec<f64> = vector.iter().map(|&x| x as f32 as f64).collect();
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(id));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::Invalid(format!("duplicate {} id `{id}`", self.kind)));
        }
        let norm = dot(&vector, &vector).sqrt();
        self.entries.insert(id, Entry { vector, norm });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(|e| e.vector.as_slice())
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding {
            kind: match self.kind {
                EmbeddingKind::Word => "word",
                EmbeddingKind::Usage => "usage",
                EmbeddingKind::Gloss => "gloss",
            },
            id: id.to_string(),
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    /// Entries in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries
            .iter()
            .map(|(id, e)| (id.as_str(), e.vector.as_slice()))
    }

    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.dim).map_err(too_large)?.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.entries.len())
                .map_err(too_large)?
                .to_le_bytes(),
        );
        for (id, entry) in &self.entries {
            let id_len = u16::try_from(id.len())
                .map_err(|_| Error::Invalid(format!("id longer than 65535 bytes: `{id}`")))?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in &entry.vector {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            vec: Vec<f32>,
        }
        let mut out = String::new();
        for (id, entry) in &self.entries {
            let line = Line {
                id,
                vec: entry.vector.iter().map(|&x| x as f32).collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, &self.to_binary()?)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn from_binary(bytes: &[u8], kind: EmbeddingKind, path: &Path) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::format(path, format!("truncated file while reading {what}")));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);

        if take(4, "magic")? != MAGIC {
            return Err(Error::format(path, "bad magic, expected EMB1"));
        }
        let version = u32_at(take(4, "version")?);
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let dim = u32_at(take(4, "dim")?) as usize;
        let count = u32_at(take(4, "count")?) as usize;
        let mut table = Self::new(kind, dim).map_err(|e| Error::format(path, e.to_string()))?;
        for i in 0..count {
            let len_bytes = take(2, "id length")?;
            let id_len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            let id = std::str::from_utf8(take(id_len, "id")?)
                .map_err(|_| Error::format(path, format!("entry {i}: id is not UTF-8")))?
                .to_string();
            let raw = take(4 * dim, "vector")?;
            let vector: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            table
                .insert(id, &vector)
                .map_err(|e| Error::format(path, format!("entry {i}: {e}")))?;
        }
        if !cursor.is_empty() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after {count} entries", cursor.len()),
            ));
        }
        Ok(table)
    }

    pub fn from_jsonl<R: BufRead>(reader: R, kind: EmbeddingKind, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            vec: Vec<f64>,
        }
        let mut table: Option<Self> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
            let t = match &mut table {
                Some(t) => t,
                None => table.insert(
                    Self::new(kind, parsed.vec.len())
                        .map_err(|e| Error::parse(path, line_no, e.to_string()))?,
                ),
            };
            t.insert(parsed.id, &parsed.vec)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        }
        table.ok_or_else(|| Error::format(path, "no entries, dimension unknown"))
    }
}

fn too_large(_: std::num::TryFromIntError) -> Error {
    Error::Invalid("table too large for the binary format".into())
}

/// Load a table, detecting the encoding from the first bytes of the file.
pub fn load_table(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingTable> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        return EmbeddingTable::from_binary(&bytes, kind, path);
    }
    match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'{') => EmbeddingTable::from_jsonl(BufReader::new(bytes.as_slice()), kind, path),
        _ => Err(Error::format(
            path,
            "neither an EMB1 binary table nor a JSON-lines table",
        )),
    }
}

/// Per-token vectors of whole texts, keyed by the exact text. Stored as JSON
/// lines `{"text": "...", "tokens": [[...], ...]}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenVectors {
    dim: Option<usize>,
    texts: BTreeMap<String, Vec<Vec<f64>>>,
}

impl TokenVectors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Add the token vectors of `text`. Adding the same text twice is
    /// allowed only with identical vectors.
    pub fn insert(&mut self, text: impl Into<String>, tokens: Vec<Vec<f64>>) -> Result<()> {
        let text = text.into();
        for t in &tokens {
            match self.dim {
                None => self.dim = Some(t.len()),
                Some(d) if d != t.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: t.len(),
                    })
                }
                _ => {}
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(text));
            }
        }
        if let Some(prev) = self.texts.get(&text) {
            if *prev != tokens {
                return Err(Error::Invalid(format!(
                    "conflicting token vectors for text `{text}`"
                )));
            }
            return Ok(());
        }
        self.texts.insert(text, tokens);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<&[Vec<f64>]> {
        self.texts.get(text).map(Vec::as_slice)
    }

    pub fn require(&self, text: &str) -> Result<&[Vec<f64>]> {
        self.get(text).ok_or_else(|| Error::MissingEmbedding {
            kind: "token",
            id: text.to_string(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (text, tokens) in &self.texts {
            let line = serde_json::json!({ "text": text, "tokens": tokens });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            text: String,
            tokens: Vec<Vec<f64>>,
        }
        let mut out = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
            out.insert(parsed.text, parsed.tokens)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(BufReader::new(file), path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncodingChoice {
    #[default]
    Binary,
    Jsonl,
}

impl FromStr for EncodingChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "binary" | "emb1" => Ok(Self::Binary),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown embedding encoding `{other}`")),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1]. A zero vector on either side gives
/// 0 and logs a warning.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(cosine_with_norms(a, norm(a), b, norm(b)))
}

fn cosine_with_norms(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        log::warn!("cosine similarity with a zero vector, using 0");
        return 0.0;
    }
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub word: String,
    pub similarity: f64,
}

/// The `k` nearest words to a query, most similar first. Equal similarities
/// are ordered by word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn with_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = id.into();
        self
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.word.as_str())
    }
}

fn rank(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-`k` search by cosine similarity over every vocabulary entry
/// not listed in `exclude`.
pub fn knn(
    query: &[f64],
    vocab: &EmbeddingTable,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<NeighborList> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if query.len() != vocab.dim {
        return Err(Error::DimensionMismatch {
            expected: vocab.dim,
            found: query.len(),
        });
    }
    let query_norm = norm(query);
    if query_norm == 0.0 {
        log::warn!("k-NN query is a zero vector; all similarities are 0");
    }
    let mut scored: Vec<(f64, &str)> = vocab
        .entries
        .iter()
        .filter(|(id, _)| !exclude.contains(id.as_str()))
        .map(|(id, e)| {
            let sim = if query_norm == 0.0 || e.norm == 0.0 {
                0.0
            } else {
                (dot(query, &e.vector) / (query_norm * e.norm)).clamp(-1.0, 1.0)
            };
            (sim, id.as_str())
        })
        .collect();
    if scored.len() < k {
        return Err(Error::NotEnoughNeighbors {
            requested: k,
            available: scored.len(),
        });
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_by(rank);
    Ok(NeighborList {
        query_id: String::new(),
        neighbors: scored
            .into_iter()
            .map(|(similarity, word)| Neighbor {
                word: word.to_string(),
                similarity,
            })
            .collect(),
    })
}

/// Component-wise mean.
pub fn average<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or(Error::EmptyInput("average of no vectors"))?
        .as_ref();
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                found: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}
