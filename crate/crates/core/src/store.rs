//! Persistence: a binary embedding store with labels (`TFEB`), plus text
//! score exports. All multi-byte integers are little-endian.

use std::path::Path;

use thiserror::Error;

use crate::eval::{ScoreSet, TtaEmbedding};

const MAGIC: &[u8; 4] = b"TFEB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad store magic (expected TFEB)")]
    BadMagic,
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("store checksum mismatch")]
    ChecksumMismatch,
    #[error("store truncated")]
    Truncated,
    #[error("entry {index} has dimension {got}, store dimension is {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("duplicate source id {0}")]
    DuplicateSourceId(String),
    #[error("string too long for 16-bit length prefix ({0} bytes)")]
    StringTooLong(usize),
    #[error("malformed score line {line}: {reason}")]
    BadScoreLine { line: usize, reason: String },
}

/// One stored vector with its identifiers. Values are f32: matching is
/// rank-based and tolerates the rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub source_id: String,
    pub class_id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: Vec<StoreEntry>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, entries: Vec<StoreEntry>) -> Result<Self, StoreError> {
        let mut seen = std::collections::HashSet::new();
        for (index, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    index,
                    got: e.vector.len(),
                    expected: dim,
                });
            }
            if !seen.insert(e.source_id.clone()) {
                return Err(StoreError::DuplicateSourceId(e.source_id.clone()));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rounds f64 embeddings into a store.
    pub fn from_embeddings(
        dim: usize,
        embeddings: &[TtaEmbedding],
    ) -> Result<Self, StoreError> {
        let entries = embeddings
            .iter()
            .map(|e| StoreEntry {
                source_id: e.source_id.clone(),
                class_id: e.class_id.clone(),
                vector: e.values.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self::new(dim, entries)
    }

    /// Widens back to f64 matching inputs.
    pub fn to_embeddings(&self) -> Vec<TtaEmbedding> {
        self.entries
            .iter()
            .map(|e| TtaEmbedding {
                values: e.vector.iter().map(|&v| v as f64).collect(),
                source_id: e.source_id.clone(),
                class_id: e.class_id.clone(),
            })
            .collect()
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<(), StoreError> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(StoreError::StringTooLong(bytes.len()));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        put_str(&mut buf, &e.source_id)?;
        put_str(&mut buf, &e.class_id)?;
        for &v in &e.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let buf = std::fs::read(path).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if buf.len() < 20 {
        return Err(StoreError::Truncated);
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(StoreError::ChecksumMismatch);
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], StoreError> {
        if *pos + n > body.len() {
            return Err(StoreError::Truncated);
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let sid_len =
            u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let source_id = String::from_utf8_lossy(take(&mut pos, sid_len)?).into_owned();
        let cid_len =
            u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let class_id = String::from_utf8_lossy(take(&mut pos, cid_len)?).into_owned();
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(f32::from_le_bytes(
                take(&mut pos, 4)?.try_into().expect("4 bytes"),
            ));
        }
        entries.push(StoreEntry {
            source_id,
            class_id,
            vector,
        });
    }
    if pos != body.len() {
        return Err(StoreError::Truncated);
    }
    EmbeddingStore::new(dim, entries)
}

/// `label,score` CSV: genuine block then impostor block, each in input
/// order.
pub fn export_scores(scores: &ScoreSet, path: &Path) -> Result<(), StoreError> {
    let mut out = String::from("label,score\n");
    for s in &scores.genuine {
        out.push_str(&format!("genuine,{s}\n"));
    }
    for s in &scores.impostor {
        out.push_str(&format!("impostor,{s}\n"));
    }
    std::fs::write(path, out).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Inverse of [`export_scores`].
pub fn import_scores(path: &Path) -> Result<ScoreSet, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "label,score" {
                return Err(StoreError::BadScoreLine {
                    line: 1,
                    reason: format!("expected header 'label,score', got {line:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (label, value) = line.split_once(',').ok_or(StoreError::BadScoreLine {
            line: i + 1,
            reason: "missing comma".into(),
        })?;
        let score: f64 = value.parse().map_err(|_| StoreError::BadScoreLine {
            line: i + 1,
            reason: format!("bad score {value:?}"),
        })?;
        match label {
            "genuine" => genuine.push(score),
            "impostor" => impostor.push(score),
            other => {
                return Err(StoreError::BadScoreLine {
                    line: i + 1,
                    reason: format!("unknown label {other:?}"),
                })
            }
        }
    }
    Ok(ScoreSet { genuine, impostor })
}
