//! Embedding vectors, the provider-facing [`Embedder`] trait, the builtin
//! feature-hashing embedder, and the embedding cache formats.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter, EMBEDDING_MAGIC, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::text::token_strings;

/// Fixed-dimension real vector. Values are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite embedding component at {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Anything that turns texts into fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature hashing: each lowercased token increments bucket `fnv1a64(token) % dim`,
/// then the vector is L2-normalized. Components are rounded through `f32` so
/// vectors survive the wire protocol and binary cache unchanged.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0f64; self.dim];
        for tok in token_strings(text) {
            v[(fnv1a64(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x = (*x / norm) as f32 as f64;
            }
        }
        EmbeddingVector(v)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// id → vector map with a single dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    vector: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: EmbeddingVector) -> Result<()> {
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = v.dim();
        }
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: v.dim() });
        }
        self.vectors.insert(id.into(), v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&EmbeddingVector> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Embeds `(id, text)` pairs in batches through `embedder`.
    pub fn embed_all<'a>(
        embedder: &dyn Embedder,
        items: impl IntoIterator<Item = (&'a str, &'a str)>,
        batch: usize,
    ) -> Result<Self> {
        let items: Vec<_> = items.into_iter().collect();
        let mut store = EmbeddingStore::new(0);
        for chunk in items.chunks(batch.max(1)) {
            let texts: Vec<&str> = chunk.iter().map(|(_, t)| *t).collect();
            let vecs = embedder.embed(&texts)?;
            if vecs.len() != chunk.len() {
                return Err(Error::protocol(
                    format!("embedder returned {} vectors for {} texts", vecs.len(), chunk.len()),
                    None,
                ));
            }
            for ((id, _), v) in chunk.iter().zip(vecs) {
                store.insert(*id, v)?;
            }
        }
        Ok(store)
    }

    /// Packed binary: count, dim, id table, then little-endian f32 rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.vectors.len() as u64);
        w.u32(self.dim as u32);
        for id in self.vectors.keys() {
            w.str(id);
        }
        for v in self.vectors.values() {
            for &x in v.as_slice() {
                w.f32(x as f32);
            }
        }
        codec::frame(EMBEDDING_MAGIC, FORMAT_VERSION, &w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = codec::unframe(EMBEDDING_MAGIC, FORMAT_VERSION, bytes)?;
        let mut r = ByteReader::new(payload);
        let count = r.len_prefix(4)?;
        let dim = r.u32()? as usize;
        let ids = (0..count).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let mut store = EmbeddingStore::new(dim);
        for id in ids {
            let row = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            store.insert(id, EmbeddingVector::new(row)?)?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, v) in &self.vectors {
            let line = CacheLine { id: id.clone(), vector: v.as_slice().to_vec() };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut store = EmbeddingStore::new(0);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&line)
                .map_err(|e| Error::protocol(format!("embedding cache: {e}"), Some(i + 1)))?;
            store.insert(rec.id, EmbeddingVector::new(rec.vector)?)?;
        }
        Ok(store)
    }
}
