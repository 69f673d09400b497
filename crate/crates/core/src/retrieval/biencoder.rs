//! Bi-encoder projections trained with a Euclidean triplet loss.
//!
//! Base embeddings come from a provider; trainable linear maps `W_q`, `W_d`
//! (identity-initialized) stand in for the query and document encoders:
//!
//! `L = max(‖W_q q − W_d d⁺‖ − ‖W_q q − W_d d⁻‖ + m, 0)`

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{frame, unframe, ByteReader, ByteWriter, BIENCODER_MAGIC, FORMAT_VERSION};
use crate::embedding::{EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};
use crate::judgments::Triple;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub query: Array2<f64>,
    pub doc: Array2<f64>,
    pub margin: f64,
}

impl ProjectionPair {
    pub fn identity(dim: usize, margin: f64) -> Result<Self> {
        check_margin(margin)?;
        Ok(Self { query: Array2::eye(dim), doc: Array2::eye(dim), margin })
    }

    pub fn dim(&self) -> usize {
        self.query.ncols()
    }

    pub fn project_query(&self, q: &[f64]) -> Array1<f64> {
        self.query.dot(&ArrayView1::from(q))
    }

    pub fn project_doc(&self, d: &[f64]) -> Array1<f64> {
        self.doc.dot(&ArrayView1::from(d))
    }

    /// Projected copy of a store. Values are rounded to `f32` so the result
    /// survives the binary embedding cache unchanged.
    pub fn project_store(&self, store: &EmbeddingStore, as_query: bool) -> Result<EmbeddingStore> {
        let mut out = EmbeddingStore::new(self.query.nrows());
        for (id, v) in store.iter() {
            let p = if as_query { self.project_query(v.as_slice()) } else { self.project_doc(v.as_slice()) };
            out.insert(id, EmbeddingVector::new(p.iter().map(|&x| x as f32 as f64).collect())?)?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        frame(BIENCODER_MAGIC, FORMAT_VERSION, &w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(unframe(BIENCODER_MAGIC, FORMAT_VERSION, bytes)?);
        let p = Self::decode(&mut r)?;
        r.finish()?;
        check_margin(p.margin)?;
        Ok(p)
    }

    fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.query.nrows() as u64);
        w.u64(self.query.ncols() as u64);
        w.f64(self.margin);
        self.query.iter().chain(self.doc.iter()).for_each(|&x| w.f64(x));
    }

    fn decode(r: &mut ByteReader) -> Result<Self> {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let margin = r.f64()?;
        if rows.saturating_mul(cols).saturating_mul(16) > r.remaining() {
            return Err(Error::Corrupt("projection shape exceeds payload".into()));
        }
        let mut read = || -> Result<Array2<f64>> {
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Corrupt(e.to_string()))
        };
        let query = read()?;
        let doc = read()?;
        Ok(Self { query, doc, margin })
    }
}

fn check_margin(m: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("triplet margin must be > 0, got {m}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f64,
    pub query: Array2<f64>,
    pub doc: Array2<f64>,
}

fn unit_or_zero(diff: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = diff.dot(diff).sqrt();
    if n > 0.0 {
        (n, diff / n)
    } else {
        (0.0, Array1::zeros(diff.len()))
    }
}

fn outer(a: &Array1<f64>, b: &[f64]) -> Array2<f64> {
    let b = ArrayView1::from(b);
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Loss and its gradient with respect to both projections.
pub fn triplet_loss_grad(q: &[f64], pos: &[f64], neg: &[f64], proj: &ProjectionPair) -> Result<TripletGrad> {
    check_margin(proj.margin)?;
    let dim = proj.dim();
    for v in [q, pos, neg] {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: v.len() });
        }
    }
    let u = proj.project_query(q);
    let (s_pos, g_pos) = unit_or_zero(&(&u - &proj.project_doc(pos)));
    let (s_neg, g_neg) = unit_or_zero(&(&u - &proj.project_doc(neg)));
    let loss = (s_pos - s_neg + proj.margin).max(0.0);
    let shape = proj.query.raw_dim();
    if loss <= 0.0 {
        return Ok(TripletGrad { loss: 0.0, query: Array2::zeros(shape), doc: Array2::zeros(proj.doc.raw_dim()) });
    }
    let d_query = outer(&(&g_pos - &g_neg), q);
    let d_doc = outer(&g_neg, neg) - outer(&g_pos, pos);
    Ok(TripletGrad { loss, query: d_query, doc: d_doc })
}

pub fn triplet_loss(q: &EmbeddingVector, pos: &EmbeddingVector, neg: &EmbeddingVector, proj: &ProjectionPair) -> Result<f64> {
    Ok(triplet_loss_grad(q.as_slice(), pos.as_slice(), neg.as_slice(), proj)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiEncoderConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        Self { lr: 0.05, epochs: 30, batch_size: 16, margin: 0.5, seed: 0 }
    }
}

struct ResolvedTriple<'a> {
    q: &'a [f64],
    pos: &'a [f64],
    neg: &'a [f64],
}

fn mean_loss(triples: &[ResolvedTriple], proj: &ProjectionPair) -> Result<f64> {
    let mut total = 0.0;
    for t in triples {
        total += triplet_loss_grad(t.q, t.pos, t.neg, proj)?.loss;
    }
    Ok(total / triples.len() as f64)
}

/// Mini-batch gradient descent on the mean triplet loss with seeded shuffling.
/// Returns the projections with the lowest full-data mean loss seen, so the
/// result never scores worse than the identity initialization.
pub fn train_biencoder(
    triples: &[Triple],
    queries: &EmbeddingStore,
    docs: &EmbeddingStore,
    cfg: &BiEncoderConfig,
) -> Result<ProjectionPair> {
    if triples.is_empty() {
        return Err(Error::EmptyInput("training triples"));
    }
    let resolved = triples
        .iter()
        .map(|t| {
            Ok(ResolvedTriple {
                q: queries.require(&t.query_id)?.as_slice(),
                pos: docs.require(&t.pos_id)?.as_slice(),
                neg: docs.require(&t.neg_id)?.as_slice(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = resolved[0].q.len();
    let mut proj = ProjectionPair::identity(dim, cfg.margin)?;
    let mut best = proj.clone();
    let mut best_loss = mean_loss(&resolved, &proj)?;
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gq = Array2::<f64>::zeros(proj.query.raw_dim());
            let mut gd = Array2::<f64>::zeros(proj.doc.raw_dim());
            for &i in batch {
                let t = &resolved[i];
                let g = triplet_loss_grad(t.q, t.pos, t.neg, &proj)?;
                gq += &g.query;
                gd += &g.doc;
            }
            let scale = cfg.lr / batch.len() as f64;
            proj.query.scaled_add(-scale, &gq);
            proj.doc.scaled_add(-scale, &gd);
        }
        let loss = mean_loss(&resolved, &proj)?;
        log::debug!("bi-encoder epoch {epoch}: mean triplet loss {loss:.6}");
        if loss < best_loss {
            best_loss = loss;
            best = proj.clone();
        }
    }
    Ok(best)
}
