//! Binary model files.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::codec::{frame, unframe, ByteReader, ByteWriter, FORMAT_VERSION, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::predictor::l2r::{select_evidence, Candidate, L2rState};
use crate::predictor::train::TrainConfig;
use crate::predictor::{predict, AggregationStrategy, ClassWeights, ClassifierHead, Evidence, PredictionRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub strategy: AggregationStrategy,
    pub embedding_dim: usize,
    pub head: ClassifierHead,
    pub class_weights: ClassWeights,
    pub config: TrainConfig,
    pub l2r: Option<L2rState>,
}

impl PredictorModel {
    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    pub fn predict(&self, note_id: &str, note: &[f64], evidence: &[Evidence]) -> Result<PredictionRecord> {
        if note.len() != self.embedding_dim {
            return Err(Error::DimensionMismatch { left: self.embedding_dim, right: note.len() });
        }
        let probs = predict(&self.head, self.strategy, note, evidence)?;
        Ok(PredictionRecord::new(note_id, probs, evidence, self.strategy))
    }

    /// Prediction through the jointly trained retriever.
    pub fn predict_l2r(&self, note_id: &str, note: &[f64], candidates: &[Candidate]) -> Result<PredictionRecord> {
        let state = self.l2r.as_ref().ok_or_else(|| Error::InvalidArgument("model has no retriever projections".into()))?;
        let evidence = select_evidence(state, note, candidates, self.config.k)?;
        self.predict(note_id, note, &evidence)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(self.strategy.tag());
        w.u64(self.embedding_dim as u64);
        w.u64(self.head.class_count() as u64);
        w.u64(self.head.input_dim() as u64);
        self.head.w.iter().chain(self.head.b.iter()).for_each(|&v| w.f64(v));
        w.f64s(&self.class_weights.weights);
        w.u64(self.class_weights.counts.len() as u64);
        self.class_weights.counts.iter().for_each(|&c| w.u64(c));
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.u64(self.config.seed);
        match &self.l2r {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.f64(s.lambda_early);
                w.u64(s.candidate_count as u64);
                s.a_q.iter().chain(s.a_d.iter()).for_each(|&v| w.f64(v));
            }
        }
        frame(MODEL_MAGIC, FORMAT_VERSION, &w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(unframe(MODEL_MAGIC, FORMAT_VERSION, bytes)?);
        let strategy = AggregationStrategy::from_tag(r.u8()?)?;
        let embedding_dim = r.u64()? as usize;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        if cols != strategy.input_dim(embedding_dim) {
            return Err(Error::Corrupt(format!("head width {cols} inconsistent with {strategy} over dim {embedding_dim}")));
        }
        if rows.saturating_mul(cols + 1).saturating_mul(8) > r.remaining() {
            return Err(Error::Corrupt("head shape exceeds payload".into()));
        }
        let wv = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bv = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let head = ClassifierHead {
            w: Array2::from_shape_vec((rows, cols), wv).map_err(|e| Error::Corrupt(e.to_string()))?,
            b: Array1::from(bv),
        };
        let weights = r.f64s()?;
        let n = r.len_prefix(8)?;
        let counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let config: TrainConfig = serde_json::from_str(&r.str()?)?;
        if r.u64()? != config.seed {
            return Err(Error::Corrupt("seed field disagrees with stored config".into()));
        }
        let l2r = match r.u8()? {
            0 => None,
            1 => {
                let lambda_early = r.f64()?;
                let candidate_count = r.u64()? as usize;
                let d = embedding_dim;
                if d.saturating_mul(d).saturating_mul(16) > r.remaining() {
                    return Err(Error::Corrupt("projection shape exceeds payload".into()));
                }
                let mut mat = || -> Result<Array2<f64>> {
                    let v = (0..d * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Array2::from_shape_vec((d, d), v).map_err(|e| Error::Corrupt(e.to_string()))
                };
                let a_q = mat()?;
                let a_d = mat()?;
                Some(L2rState { a_q, a_d, lambda_early, candidate_count })
            }
            t => return Err(Error::Corrupt(format!("bad projection flag {t}"))),
        };
        r.finish()?;
        if weights.len() != rows {
            return Err(Error::Corrupt("class weight count disagrees with head".into()));
        }
        Ok(Self { strategy, embedding_dim, head, class_weights: ClassWeights { weights, counts }, config, l2r })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
