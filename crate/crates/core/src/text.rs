//! Description-text embeddings for relation tokens and datasets.
//!
//! The built-in encoder is a signed feature-hashing bag of word unigrams and
//! bigrams. Vectors computed offline by a sentence encoder can be supplied
//! through a TSV file and take precedence over hashing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_TEXT_DIM: usize = 128;
const MIN_HASH_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("hash embedding dimension must be at least {MIN_HASH_DIM}, got {0}")]
    DimensionTooSmall(usize),
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate key `{key}`")]
    DuplicateKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: vector length {found} differs from {expected}")]
    InconsistentLength { path: String, line: usize, expected: usize, found: usize },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Hash,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Signed hashing of word unigrams and bigrams into `dim` buckets, then
/// ℓ2-normalised. Text without any alphanumeric token maps to the zero vector.
pub fn hash_encode(text: &str, dim: usize) -> Result<TextEmbedding, TextError> {
    if dim < MIN_HASH_DIM {
        return Err(TextError::DimensionTooSmall(dim));
    }
    let words = tokens(text);
    let mut v = vec![0.0; dim];
    let mut add = |feature: &str| {
        let h = fnv1a64(feature.as_bytes());
        let bucket = (h % dim as u64) as usize;
        v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    };
    for w in &words {
        add(w);
    }
    for pair in words.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(TextEmbedding { vector: v, source: EmbeddingSource::Hash })
}

/// Reads `text<TAB>f1<TAB>...<TAB>f_d` rows into an exact-match lookup table.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, TextEmbedding>, TextError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| TextError::Io(p.clone(), e))?;
    let mut table = BTreeMap::new();
    let mut dim = None;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let key = fields.next().unwrap_or_default().to_string();
        let vector = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| TextError::Malformed { path: p.clone(), line: line_no, message: "malformed float".into() })?;
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(TextError::Malformed {
                path: p.clone(),
                line: line_no,
                message: "expected at least one finite value".into(),
            });
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(TextError::InconsistentLength { path: p, line: line_no, expected: d, found: vector.len() })
            }
            _ => {}
        }
        if table.contains_key(&key) {
            return Err(TextError::DuplicateKey { path: p, line: line_no, key });
        }
        table.insert(key, TextEmbedding { vector, source: EmbeddingSource::File });
    }
    Ok(table)
}

pub fn write_embeddings<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<(), TextError> {
    let mut out = String::new();
    for (key, v) in rows {
        out.push_str(key);
        for x in v {
            let _ = write!(out, "\t{x:?}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| TextError::Io(path.display().to_string(), e))
}

/// Text → vector, preferring a loaded table and falling back to hashing.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    dim: usize,
    table: BTreeMap<String, TextEmbedding>,
}

impl TextEncoder {
    pub fn hashing(dim: usize) -> Result<Self, TextError> {
        if dim < MIN_HASH_DIM {
            return Err(TextError::DimensionTooSmall(dim));
        }
        Ok(Self { dim, table: BTreeMap::new() })
    }

    /// Uses the table's vector length as the embedding dimension.
    pub fn with_table(table: BTreeMap<String, TextEmbedding>, fallback_dim: usize) -> Result<Self, TextError> {
        let dim = table.values().next().map_or(fallback_dim, |e| e.vector.len());
        Ok(Self { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding, TextError> {
        if let Some(e) = self.table.get(text) {
            return Ok(e.clone());
        }
        if !self.table.is_empty() {
            log::warn!("no precomputed embedding for `{text}`; using hash encoder");
        }
        hash_encode(text, self.dim)
    }
}
