use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Fixed-dimension utterance representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub utterance_id: String,
    pub vector: Vec<f32>,
}

/// Embeddings of constant dimension, in insertion order, indexed by utterance id.
///
/// Text form: one line per record, the utterance id then the values separated
/// by single spaces. Binary form: header line `n dim`, then `n` utterance-id
/// lines, then `n * dim` little-endian `f32` values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(entries: Vec<Embedding>) -> Result<Self> {
        let mut set = EmbeddingSet::default();
        for e in entries {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, e: Embedding) -> Result<()> {
        if e.vector.is_empty() {
            return Err(Error::Validation(format!("embedding {} is empty", e.utterance_id)));
        }
        if self.entries.is_empty() {
            self.dim = e.vector.len();
        } else if e.vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "embedding {} has dimension {}, expected {}",
                e.utterance_id,
                e.vector.len(),
                self.dim
            )));
        }
        if let Some(i) = e.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "embedding {} has a non-finite value at index {i}",
                e.utterance_id
            )));
        }
        if self.index.contains_key(&e.utterance_id) {
            return Err(Error::Validation(format!("duplicate embedding {}", e.utterance_id)));
        }
        self.index.insert(e.utterance_id.clone(), self.entries.len());
        self.entries.push(e);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn get(&self, utterance_id: &str) -> Option<&Embedding> {
        self.index.get(utterance_id).map(|&i| &self.entries[i])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.utterance_id);
            for v in &e.vector {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut set = EmbeddingSet::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().expect("non-empty line").to_string();
            let vector = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|_| Error::Validation(format!("line {}: bad value {f:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            set.push(Embedding {
                utterance_id: id,
                vector,
            })
            .map_err(|e| Error::Validation(format!("line {}: {e}", n + 1)))?;
        }
        Ok(set)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = format!("{} {}\n", self.entries.len(), self.dim).into_bytes();
        for e in &self.entries {
            out.extend_from_slice(e.utterance_id.as_bytes());
            out.push(b'\n');
        }
        for e in &self.entries {
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn parse_binary(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Integrity("truncated embedding header".into()))?;
            pos += nl + 1;
            String::from_utf8(rest[..nl].to_vec()).map_err(|_| Error::Format("header is not UTF-8".into()))
        };
        let header = line()?;
        let dims: Vec<usize> = header
            .split(' ')
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [n, dim] = dims[..] else {
            return Err(Error::Format(format!("bad header {header:?}")));
        };
        let ids = (0..n).map(|_| line()).collect::<Result<Vec<_>>>()?;
        let body = &bytes[pos..];
        if body.len() != n * dim * 4 {
            return Err(Error::Integrity(format!(
                "expected {} payload bytes, found {}",
                n * dim * 4,
                body.len()
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingSet::new(
            ids.into_iter()
                .zip(values.chunks(dim.max(1)))
                .map(|(utterance_id, v)| Embedding {
                    utterance_id,
                    vector: v.to_vec(),
                })
                .collect(),
        )
    }

    /// Binary when the path ends in `.bin`, text otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "bin") {
            fs::write(path, self.to_binary())?;
        } else {
            fs::write(path, self.to_text())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if path.extension().is_some_and(|e| e == "bin") {
            EmbeddingSet::parse_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("embedding text is not UTF-8".into()))?;
            EmbeddingSet::parse_text(&text)
        }
    }
}
