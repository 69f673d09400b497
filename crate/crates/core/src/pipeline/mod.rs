//! End-to-end orchestration.
//!
//! A [`Pipeline`] holds one run's state. Each stage method reads whatever it
//! needs, from memory when an earlier stage of the same session produced it
//! and from the output directory otherwise, then writes its artifacts and
//! appends a record to the run manifest. The `cmd_*` functions run a single
//! stage in a fresh session; [`run`] runs them all in one.

pub mod config;
pub mod manifest;
pub mod stages;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, ErrorKind};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_json_artifact, encode_json_artifact, read_jsonl_artifact, sha256_hex, write_jsonl_artifact, CACHE_KEY_MAGIC,
    GRID_MAGIC, HISTORY_MAGIC, PREDICTION_MAGIC, QUERY_MAGIC, RANKING_MAGIC, REPORT_MAGIC, RERANK_MAGIC, SCORER_MAGIC,
    SPLIT_MAGIC,
};
use crate::corpus::{build_index, export_index_jsonl, load_index, read_corpus, save_index, OutcomeIndex, OutcomeSpec};
use crate::embedding::{Embedder, EmbeddingStore, HashingEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::diversity::{diversity_report, DiversityReport};
use crate::evaluation::report::render_text;
use crate::evaluation::MetricReport;
use crate::judgments::Judgments;
use crate::mesh::MeshDictionary;
use crate::negation::{NegationLexicon, NegationScoper};
use crate::note::{read_notes, CaseNote, Query};
use crate::predictor::l2r::L2rEpoch;
use crate::predictor::model::PredictorModel;
use crate::predictor::{AggregationStrategy, PredictionRecord};
use crate::provider::{HttpTransport, RemoteEmbedder, RemoteScorer, Service, StdioTransport};
use crate::rerank::{LexicalScorer, LogisticPairModel, LogisticScorer, PairScorer};
use crate::retrieval::biencoder::ProjectionPair;
use crate::retrieval::RankedList;

pub use config::{derive_seed, PipelineConfig};
pub use manifest::{RunManifest, StageRecord};
pub use stages::{GridPoint, RerankedPool, RetrievalReport, Split};

use config::{EmbedderEndpoint, ScorerEndpoint};
use stages::PoolMap;

/// Where every artifact of a run lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub out_dir: PathBuf,
    pub index: PathBuf,
    pub index_jsonl: PathBuf,
    pub queries: PathBuf,
    pub split: PathBuf,
    pub embeddings_dir: PathBuf,
    pub doc_embeddings: PathBuf,
    pub note_embeddings: PathBuf,
    pub embedding_key: PathBuf,
    pub biencoder: PathBuf,
    pub sparse: PathBuf,
    pub dense: PathBuf,
    pub rerank: PathBuf,
    pub scorer: PathBuf,
    pub model: PathBuf,
    pub grid: PathBuf,
    pub models_dir: PathBuf,
    pub predictions: PathBuf,
    pub l2r_model: PathBuf,
    pub l2r_predictions: PathBuf,
    pub l2r_history: PathBuf,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
    pub diversity: PathBuf,
    pub manifest: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let out = cfg.paths.out_dir.clone();
        let f = |name: &str| out.join(name);
        let emb = cfg.paths.embeddings.clone().unwrap_or_else(|| out.join("embeddings"));
        Self {
            index: cfg.paths.index.clone().unwrap_or_else(|| f("index.bin")),
            index_jsonl: f("index.jsonl"),
            queries: f("queries.jsonl"),
            split: f("split.json"),
            doc_embeddings: emb.join("docs.bin"),
            note_embeddings: emb.join("notes.bin"),
            embedding_key: emb.join("key.json"),
            embeddings_dir: emb,
            biencoder: f("biencoder.bin"),
            sparse: f("sparse.jsonl"),
            dense: f("dense.jsonl"),
            rerank: f("rerank.jsonl"),
            scorer: f("scorer.json"),
            model: cfg.paths.model.clone().unwrap_or_else(|| f("model.bin")),
            grid: f("grid.json"),
            models_dir: f("models"),
            predictions: f("predictions.jsonl"),
            l2r_model: f("model_l2r.bin"),
            l2r_predictions: f("predictions_l2r.jsonl"),
            l2r_history: f("l2r_history.json"),
            report_json: f("report.json"),
            report_txt: f("report.txt"),
            diversity: f("diversity.csv"),
            manifest: f("manifest.json"),
            out_dir: out,
        }
    }

    pub fn baseline_model(&self, s: AggregationStrategy) -> PathBuf {
        self.out_dir.join(format!("model_{}.bin", s.name()))
    }

    pub fn baseline_predictions(&self, s: AggregationStrategy) -> PathBuf {
        self.out_dir.join(format!("predictions_{}.jsonl", s.name()))
    }

    pub fn grid_model(&self, lr: f64, ga: usize, k: usize) -> PathBuf {
        self.models_dir.join(format!("lr{lr:e}_ga{ga}_k{k}.bin"))
    }

    /// Manifest key: relative to the output directory when inside it.
    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingKey {
    provider: String,
    docs: String,
    notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub strategy: AggregationStrategy,
    pub points: Vec<GridPoint>,
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub outcome_id: String,
    pub reports: Vec<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
    pub diversity: DiversityReport,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_artifact(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingArtifact { path: path.display().to_string(), stage },
        _ => e.into(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, magic: [u8; 4], records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl_artifact(&mut buf, magic, records)?;
    write_file(path, &buf)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, magic: [u8; 4], stage: &'static str) -> Result<Vec<T>> {
    read_jsonl_artifact(&read_artifact(path, stage)?[..], magic)
}

fn write_json<T: Serialize>(path: &Path, magic: [u8; 4], value: &T) -> Result<()> {
    write_file(path, &encode_json_artifact(magic, value)?)
}

fn read_json<T: DeserializeOwned>(path: &Path, magic: [u8; 4], stage: &'static str) -> Result<T> {
    decode_json_artifact(magic, &read_artifact(path, stage)?)
}

fn load_model(path: &Path, stage: &'static str) -> Result<PredictorModel> {
    PredictorModel::from_bytes(&read_artifact(path, stage)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::Config(format!("cannot open `{}`: {e}", path.display())))?))
}

fn texts_digest(items: &[(&str, String)]) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(items)?))
}

pub struct Pipeline {
    cfg: PipelineConfig,
    layout: Layout,
    manifest: RunManifest,
    outcome: OutcomeSpec,
    index: Option<OutcomeIndex>,
    notes: Option<Vec<CaseNote>>,
    queries: Option<Vec<Query>>,
    split: Option<Split>,
    note_emb: Option<EmbeddingStore>,
    doc_emb: Option<EmbeddingStore>,
    sparse: Option<Vec<RankedList>>,
    dense: Option<Vec<RankedList>>,
    pools: Option<PoolMap>,
    /// Primary first, then the baselines, as in [`PipelineConfig::strategies`].
    models: Option<Vec<PredictorModel>>,
    predictions: BTreeMap<PathBuf, Vec<PredictionRecord>>,
}

impl Pipeline {
    /// Opens a session. An existing manifest is continued when its run id
    /// (config, inputs, seed) matches, and replaced otherwise.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let layout = Layout::new(&cfg);
        fs::create_dir_all(&layout.out_dir)?;
        let fresh = RunManifest::new(&cfg, manifest::input_checksums(&cfg)?)?;
        let manifest = match RunManifest::load(&layout.manifest) {
            Ok(m) if m.run_id == fresh.run_id => m,
            Ok(_) => {
                log::info!("config or inputs changed; starting a new manifest for run {}", fresh.run_id);
                fresh
            }
            Err(_) => fresh,
        };
        let outcome = cfg.outcome_spec()?;
        Ok(Self {
            cfg,
            layout,
            manifest,
            outcome,
            index: None,
            notes: None,
            queries: None,
            split: None,
            note_emb: None,
            doc_emb: None,
            sparse: None,
            dense: None,
            pools: None,
            models: None,
            predictions: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn finish(&mut self, stage: &str, started: Instant, outputs: &[PathBuf]) -> Result<()> {
        let mut map = BTreeMap::new();
        for p in outputs {
            map.insert(self.layout.rel(p), sha256_hex(&fs::read(p)?));
        }
        let elapsed_ms = started.elapsed().as_millis() as u64;
        log::info!("stage {stage} finished in {elapsed_ms} ms ({} artifacts)", map.len());
        self.manifest.record(StageRecord {
            stage: stage.to_string(),
            seed: derive_seed(self.cfg.seed, stage),
            elapsed_ms,
            outputs: map,
        });
        self.manifest.save(&self.layout.manifest)
    }

    fn dictionary(&self) -> Result<MeshDictionary> {
        let d = MeshDictionary::from_tsv(open(&self.cfg.paths.dictionary)?)?;
        if d.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        Ok(d)
    }

    fn scoper(&self) -> Result<NegationScoper> {
        let lex = match &self.cfg.paths.lexicon {
            Some(p) => NegationLexicon::from_json(open(p)?)?,
            None => NegationLexicon::default(),
        };
        NegationScoper::new(&lex)
    }

    fn judgments(&self) -> Result<Option<Judgments>> {
        self.cfg.paths.judgments.as_ref().map(|p| Judgments::read_tsv(open(p)?)).transpose()
    }

    fn ensure_notes(&mut self) -> Result<()> {
        if self.notes.is_none() {
            let ingest = read_notes(open(&self.cfg.paths.notes)?)?;
            if !ingest.excluded.is_empty() {
                log::warn!("{} notes excluded for lack of canonical sections", ingest.excluded.len());
            }
            for n in &ingest.notes {
                n.check_label(self.outcome.class_count)?;
            }
            if ingest.notes.is_empty() {
                return Err(Error::EmptyInput("notes"));
            }
            self.notes = Some(ingest.notes);
        }
        Ok(())
    }

    fn ensure_index(&mut self) -> Result<()> {
        if self.index.is_none() {
            if !self.layout.index.exists() {
                return Err(Error::MissingArtifact { path: self.layout.index.display().to_string(), stage: "index" });
            }
            self.index = Some(load_index(&self.layout.index)?);
        }
        Ok(())
    }

    fn ensure_queries(&mut self) -> Result<()> {
        if self.queries.is_none() {
            self.queries = Some(read_jsonl(&self.layout.queries, QUERY_MAGIC, "query")?);
        }
        if self.split.is_none() {
            self.split = Some(read_json(&self.layout.split, SPLIT_MAGIC, "query")?);
        }
        Ok(())
    }

    fn ensure_embeddings(&mut self) -> Result<()> {
        if self.doc_emb.is_none() || self.note_emb.is_none() {
            self.doc_emb = Some(EmbeddingStore::from_bytes(&read_artifact(&self.layout.doc_embeddings, "retrieve")?)?);
            self.note_emb = Some(EmbeddingStore::from_bytes(&read_artifact(&self.layout.note_embeddings, "retrieve")?)?);
        }
        Ok(())
    }

    fn ensure_rankings(&mut self) -> Result<()> {
        if self.sparse.is_none() || self.dense.is_none() {
            self.sparse = Some(read_jsonl(&self.layout.sparse, RANKING_MAGIC, "retrieve")?);
            self.dense = Some(read_jsonl(&self.layout.dense, RANKING_MAGIC, "retrieve")?);
        }
        Ok(())
    }

    fn ensure_pools(&mut self) -> Result<()> {
        if self.pools.is_none() {
            self.pools = Some(stages::pool_map(read_jsonl(&self.layout.rerank, RERANK_MAGIC, "rerank")?));
        }
        Ok(())
    }

    fn ensure_models(&mut self) -> Result<()> {
        if self.models.is_none() {
            let strategies = self.cfg.strategies();
            let mut models = vec![load_model(&self.layout.model, "train")?];
            for s in &strategies[1..] {
                models.push(load_model(&self.layout.baseline_model(*s), "train")?);
            }
            for (m, s) in models.iter().zip(&strategies) {
                if m.strategy != *s {
                    return Err(Error::Config(format!("model file holds {} but the config expects {s}", m.strategy)));
                }
            }
            self.models = Some(models);
        }
        Ok(())
    }

    fn prediction_files(&self) -> Vec<(String, PathBuf)> {
        let strategies = self.cfg.strategies();
        let mut out = vec![(strategies[0].name().to_string(), self.layout.predictions.clone())];
        out.extend(strategies[1..].iter().map(|s| (s.name().to_string(), self.layout.baseline_predictions(*s))));
        out
    }

    fn predictions_at(&mut self, path: &Path, stage: &'static str) -> Result<&[PredictionRecord]> {
        if !self.predictions.contains_key(path) {
            let recs = read_jsonl(path, PREDICTION_MAGIC, stage)?;
            self.predictions.insert(path.to_path_buf(), recs);
        }
        Ok(&self.predictions[path])
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>> {
        let p = &self.cfg.providers;
        Ok(match &p.embedder {
            EmbedderEndpoint::Builtin => Box::new(HashingEmbedder::new(p.dim)?),
            EmbedderEndpoint::Stdio { command, args } => Box::new(RemoteEmbedder::new(
                Box::new(StdioTransport::new(command.clone(), args.clone())),
                p.batch_size,
                p.retry_policy(),
            )),
            EmbedderEndpoint::Http { url } => Box::new(RemoteEmbedder::new(
                Box::new(HttpTransport::new(url, Service::Embed, p.timeout())),
                p.batch_size,
                p.retry_policy(),
            )),
        })
    }

    fn embedder_fingerprint(&self) -> String {
        match &self.cfg.providers.embedder {
            EmbedderEndpoint::Builtin => format!("builtin-hashing/dim={}", self.cfg.providers.dim),
            EmbedderEndpoint::Stdio { command, args } => format!("stdio/{command} {}", args.join(" ")),
            EmbedderEndpoint::Http { url } => format!("http/{url}"),
        }
    }

    /// Builds the outcome index and its JSON-lines export.
    pub fn index(&mut self) -> Result<()> {
        let t = Instant::now();
        let dict = self.dictionary()?;
        let corpus = read_corpus(open(&self.cfg.paths.corpus)?, Some(&dict))?;
        let n = corpus.len();
        let index = build_index(corpus, &self.outcome)?;
        log::info!("index {}: kept {} of {n} documents", index.outcome_id, index.documents.len());
        save_index(&index, &self.layout.index)?;
        let mut buf = Vec::new();
        export_index_jsonl(&index, &mut buf)?;
        write_file(&self.layout.index_jsonl, &buf)?;
        self.index = Some(index);
        let outs = [self.layout.index.clone(), self.layout.index_jsonl.clone()];
        self.finish("index", t, &outs)
    }

    /// Builds a query per note and the train/test split.
    pub fn query(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_notes()?;
        let dict = self.dictionary()?;
        let scoper = self.scoper()?;
        let notes = self.notes.as_ref().expect("ensured");
        let queries = stages::build_queries(notes, &dict, &scoper)?;
        let empty = queries.iter().filter(|q| q.warning.is_some()).count();
        if empty > 0 {
            log::warn!("{empty} of {} queries have no surviving MeSH terms", queries.len());
        }
        let split = stages::split_notes(notes, self.cfg.training.test_fraction, derive_seed(self.cfg.seed, "split"))?;
        log::info!("split: {} train, {} test, {} unlabeled", split.train.len(), split.test.len(), split.unlabeled.len());
        write_jsonl(&self.layout.queries, QUERY_MAGIC, &queries)?;
        write_json(&self.layout.split, SPLIT_MAGIC, &split)?;
        self.queries = Some(queries);
        self.split = Some(split);
        let outs = [self.layout.queries.clone(), self.layout.split.clone()];
        self.finish("query", t, &outs)
    }

    /// Embeds documents and notes (reusing the cache when the provider and
    /// texts are unchanged), optionally fits a bi-encoder projection, and
    /// writes the sparse and dense candidate lists.
    pub fn retrieve(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_index()?;
        self.ensure_notes()?;
        self.ensure_queries()?;
        let mut outs = Vec::new();
        {
            let index = self.index.as_ref().expect("ensured");
            let notes = self.notes.as_ref().expect("ensured");
            let doc_texts: Vec<(&str, String)> = index.documents.values().map(|d| (d.doc_id.as_str(), d.text())).collect();
            let note_texts: Vec<(&str, String)> = notes.iter().map(|n| (n.note_id.as_str(), n.raw_text())).collect();
            let key = EmbeddingKey {
                provider: self.embedder_fingerprint(),
                docs: texts_digest(&doc_texts)?,
                notes: texts_digest(&note_texts)?,
            };
            let cached = read_json::<EmbeddingKey>(&self.layout.embedding_key, CACHE_KEY_MAGIC, "retrieve").ok() == Some(key.clone())
                && self.layout.doc_embeddings.exists()
                && self.layout.note_embeddings.exists();
            if cached {
                log::info!("embedding cache hit in {}", self.layout.embeddings_dir.display());
                self.doc_emb = None;
                self.note_emb = None;
                self.ensure_embeddings()?;
            } else {
                let embedder = self.embedder()?;
                let (docs, notes) = stages::embed_inputs(index, notes, embedder.as_ref(), self.cfg.providers.batch_size)?;
                write_file(&self.layout.doc_embeddings, &docs.to_bytes())?;
                write_file(&self.layout.note_embeddings, &notes.to_bytes())?;
                write_json(&self.layout.embedding_key, CACHE_KEY_MAGIC, &key)?;
                self.doc_emb = Some(docs);
                self.note_emb = Some(notes);
            }
            outs.extend([self.layout.doc_embeddings.clone(), self.layout.note_embeddings.clone(), self.layout.embedding_key.clone()]);
        }
        let projection = match &self.cfg.retrieval.biencoder {
            None => None,
            Some(bcfg) => {
                let j = self.judgments()?.ok_or_else(|| Error::Config("retrieval.biencoder needs paths.judgments".into()))?;
                let split = self.split.as_ref().expect("ensured");
                let p = stages::train_projection(
                    &j,
                    &split.train,
                    self.note_emb.as_ref().expect("ensured"),
                    self.doc_emb.as_ref().expect("ensured"),
                    bcfg,
                    self.cfg.retrieval.triples_per_query,
                    derive_seed(self.cfg.seed, "biencoder"),
                )?;
                write_file(&self.layout.biencoder, &p.to_bytes())?;
                outs.push(self.layout.biencoder.clone());
                Some(p)
            }
        };
        let (notes, docs) = (self.note_emb.as_ref().expect("ensured"), self.doc_emb.as_ref().expect("ensured"));
        let projected: Option<(EmbeddingStore, EmbeddingStore)> = projection
            .as_ref()
            .map(|p: &ProjectionPair| Ok::<_, Error>((p.project_store(notes, true)?, p.project_store(docs, false)?)))
            .transpose()?;
        let (qn, qd) = match &projected {
            Some((n, d)) => (n, d),
            None => (notes, docs),
        };
        let (sparse, dense) = stages::retrieve_all(
            self.queries.as_ref().expect("ensured"),
            self.index.as_ref().expect("ensured"),
            qn,
            qd,
            self.cfg.retrieval.pool_n,
        )?;
        write_jsonl(&self.layout.sparse, RANKING_MAGIC, &sparse)?;
        write_jsonl(&self.layout.dense, RANKING_MAGIC, &dense)?;
        self.sparse = Some(sparse);
        self.dense = Some(dense);
        outs.extend([self.layout.sparse.clone(), self.layout.dense.clone()]);
        self.finish("retrieve", t, &outs)
    }

    fn fit_pair_model(&self, pools: &[(String, std::collections::BTreeSet<String>)], train_ids: &[String], epochs: usize, lr: f64) -> Result<LogisticPairModel> {
        let j = self.judgments()?.ok_or_else(|| Error::Config("the logistic scorer needs paths.judgments".into()))?;
        let ex = stages::pair_examples(
            self.queries.as_ref().expect("ensured"),
            pools,
            self.index.as_ref().expect("ensured"),
            &j,
            train_ids,
            self.note_emb.as_ref().expect("ensured"),
            self.doc_emb.as_ref().expect("ensured"),
        )?;
        stages::train_pair_model(&ex, epochs, lr)
    }

    /// Rescores each note's pooled candidates with the configured scorer.
    pub fn rerank(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_index()?;
        self.ensure_queries()?;
        self.ensure_rankings()?;
        let mut outs = Vec::new();
        let pools = stages::candidate_pools(
            self.sparse.as_ref().expect("ensured"),
            self.dense.as_ref().expect("ensured"),
            self.cfg.retrieval.pool_n,
        )?;
        let p = self.cfg.providers.clone();
        let index = self.index.as_ref().expect("ensured");
        let scorer: Box<dyn PairScorer + '_> = match &p.scorer {
            ScorerEndpoint::Builtin => Box::new(LexicalScorer::new(index)),
            ScorerEndpoint::Logistic { epochs, lr } => {
                self.ensure_embeddings()?;
                let train = self.split.as_ref().expect("ensured").train.clone();
                let model = self.fit_pair_model(&pools, &train, *epochs, *lr)?;
                write_json(&self.layout.scorer, SCORER_MAGIC, &model)?;
                outs.push(self.layout.scorer.clone());
                Box::new(LogisticScorer {
                    model,
                    stats: self.index.as_ref().expect("ensured").stats.clone(),
                    notes: self.note_emb.as_ref().expect("ensured"),
                    docs: self.doc_emb.as_ref().expect("ensured"),
                })
            }
            ScorerEndpoint::Stdio { command, args } => Box::new(RemoteScorer::new(
                Box::new(StdioTransport::new(command.clone(), args.clone())),
                p.batch_size,
                p.retry_policy(),
            )),
            ScorerEndpoint::Http { url } => Box::new(RemoteScorer::new(
                Box::new(HttpTransport::new(url, Service::Score, p.timeout())),
                p.batch_size,
                p.retry_policy(),
            )),
        };
        let reranked = stages::rerank_all(
            self.queries.as_ref().expect("ensured"),
            &pools,
            self.index.as_ref().expect("ensured"),
            scorer.as_ref(),
        )?;
        drop(scorer);
        write_jsonl(&self.layout.rerank, RERANK_MAGIC, &reranked)?;
        self.pools = Some(stages::pool_map(reranked));
        outs.push(self.layout.rerank.clone());
        self.finish("rerank", t, &outs)
    }

    /// Trains the primary model and every baseline; in grid mode the primary
    /// model's hyperparameters are picked on a validation slice of the
    /// training notes.
    pub fn train(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_notes()?;
        self.ensure_queries()?;
        self.ensure_pools()?;
        self.ensure_embeddings()?;
        let labels = stages::labels_of(self.notes.as_ref().expect("ensured"));
        let split = self.split.as_ref().expect("ensured");
        let pools = self.pools.as_ref().expect("ensured");
        let (notes, docs) = (self.note_emb.as_ref().expect("ensured"), self.doc_emb.as_ref().expect("ensured"));
        let c = self.outcome.class_count;
        let strategies = self.cfg.strategies();
        let mut outs = Vec::new();
        let mut models = Vec::new();
        let grid = &self.cfg.training.grid;
        let primary_cfg = if grid.enabled {
            let (fit, val) = stages::stratified_holdout(&split.train, &labels, grid.validation_fraction, derive_seed(self.cfg.seed, "grid"))?;
            let mut configs = Vec::new();
            for &lr in &grid.lr {
                for &ga in &grid.grad_accumulation {
                    for &k in &grid.k {
                        configs.push(self.cfg.train_config(strategies[0], lr, ga, k));
                    }
                }
            }
            let results = stages::grid_search(&configs, &fit, &val, &labels, pools, notes, docs, c)?;
            let mut points = Vec::new();
            for (model, score) in &results {
                let path = self.layout.grid_model(model.config.lr, model.config.grad_accumulation, model.config.k);
                write_file(&path, &model.to_bytes())?;
                outs.push(path.clone());
                points.push(GridPoint {
                    lr: model.config.lr,
                    grad_accumulation: model.config.grad_accumulation,
                    k: model.config.k,
                    validation_micro_f1: *score,
                    model: self.layout.rel(&path),
                });
            }
            let scores: Vec<f64> = results.iter().map(|(_, s)| *s).collect();
            let best = stages::best_index(&scores).expect("grid is non-empty");
            log::info!(
                "grid: best of {} points is lr={} ga={} k={} (validation micro F1 {:.4})",
                points.len(),
                points[best].lr,
                points[best].grad_accumulation,
                points[best].k,
                points[best].validation_micro_f1
            );
            write_json(&self.layout.grid, GRID_MAGIC, &GridReport { strategy: strategies[0], points, best })?;
            outs.push(self.layout.grid.clone());
            configs[best].clone()
        } else {
            self.cfg.primary_train_config(strategies[0])
        };
        models.push(stages::train_model(&primary_cfg, &split.train, &labels, pools, notes, docs, c)?);
        for s in &strategies[1..] {
            models.push(stages::train_model(&self.cfg.primary_train_config(*s), &split.train, &labels, pools, notes, docs, c)?);
        }
        write_file(&self.layout.model, &models[0].to_bytes())?;
        outs.push(self.layout.model.clone());
        for m in &models[1..] {
            let path = self.layout.baseline_model(m.strategy);
            write_file(&path, &m.to_bytes())?;
            outs.push(path);
        }
        self.models = Some(models);
        self.finish("train", t, &outs)
    }

    /// Predicts every test and unlabeled note with every trained model.
    pub fn predict(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_queries()?;
        self.ensure_pools()?;
        self.ensure_embeddings()?;
        self.ensure_models()?;
        let ids = self.split.as_ref().expect("ensured").predict_ids();
        let (pools, notes, docs) =
            (self.pools.as_ref().expect("ensured"), self.note_emb.as_ref().expect("ensured"), self.doc_emb.as_ref().expect("ensured"));
        let mut outs = Vec::new();
        let files = self.prediction_files();
        for (model, (_, path)) in self.models.as_ref().expect("ensured").iter().zip(&files) {
            let recs = stages::predict_all(model, &ids, pools, notes, docs)?;
            write_jsonl(path, PREDICTION_MAGIC, &recs)?;
            self.predictions.insert(path.clone(), recs);
            outs.push(path.clone());
        }
        self.finish("predict", t, &outs)
    }

    /// Joint retriever/head training warm-started from the primary model,
    /// then predictions through the learned retriever.
    pub fn l2r(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_notes()?;
        self.ensure_queries()?;
        self.ensure_pools()?;
        self.ensure_embeddings()?;
        self.ensure_models()?;
        let labels = stages::labels_of(self.notes.as_ref().expect("ensured"));
        let split = self.split.as_ref().expect("ensured");
        let (pools, notes, docs) =
            (self.pools.as_ref().expect("ensured"), self.note_emb.as_ref().expect("ensured"), self.doc_emb.as_ref().expect("ensured"));
        let models = self.models.as_ref().expect("ensured");
        let primary = &models[0];
        if !primary.strategy.uses_evidence() {
            return Err(Error::Config(format!("L2R needs an evidence-using primary strategy, got {}", primary.strategy)));
        }
        let baseline = models.iter().find(|m| m.strategy == AggregationStrategy::NoteOnly).expect("note_only is always trained");
        let settings = stages::L2rSettings {
            epochs: self.cfg.l2r_epochs(),
            candidate_count: self.cfg.training.candidate_count,
            lambda_early: self.cfg.training.lambda_early,
            fixed_labels: self.cfg.training.l2r.fixed_labels,
            lr: self.cfg.training.l2r.lr,
            grad_accumulation: self.cfg.training.l2r.grad_accumulation,
        };
        let ex = stages::l2r_examples(&split.train, &labels, pools, notes, docs, settings.candidate_count)?;
        let (model, history) = stages::train_l2r_model(primary, baseline, &ex, self.outcome.class_count, settings)?;
        let recs = stages::predict_all(&model, &split.predict_ids(), pools, notes, docs)?;
        write_file(&self.layout.l2r_model, &model.to_bytes())?;
        write_json::<Vec<L2rEpoch>>(&self.layout.l2r_history, HISTORY_MAGIC, &history)?;
        write_jsonl(&self.layout.l2r_predictions, PREDICTION_MAGIC, &recs)?;
        self.predictions.insert(self.layout.l2r_predictions.clone(), recs);
        let outs = [self.layout.l2r_model.clone(), self.layout.l2r_history.clone(), self.layout.l2r_predictions.clone()];
        self.finish("l2r", t, &outs)
    }

    /// Outcome metrics for every prediction file present, retrieval
    /// precision when judgments are configured, and the diversity report.
    pub fn eval(&mut self) -> Result<()> {
        let t = Instant::now();
        self.ensure_notes()?;
        self.ensure_queries()?;
        let all_labels = stages::labels_of(self.notes.as_ref().expect("ensured"));
        let test: BTreeMap<String, usize> = self
            .split
            .as_ref()
            .expect("ensured")
            .test
            .iter()
            .map(|id| (id.clone(), all_labels[id]))
            .collect();
        if test.is_empty() {
            return Err(Error::EmptyInput("test notes"));
        }
        let c = self.outcome.class_count;
        let ev = self.cfg.eval.clone();
        let baseline_path = self.layout.baseline_predictions(AggregationStrategy::NoteOnly);
        let baseline = self.predictions_at(&baseline_path, "predict")?.to_vec();
        let mut runs = self.prediction_files();
        let l2r_path = self.layout.l2r_predictions.clone();
        if self.predictions.contains_key(&l2r_path) || l2r_path.exists() {
            runs.push((format!("l2r_{}", self.cfg.training.strategy.name()), l2r_path));
        }
        let mut reports = Vec::new();
        let mut primary_sets = Vec::new();
        for (i, (label, path)) in runs.iter().enumerate() {
            let recs = self.predictions_at(path, "predict")?;
            let strategy = recs.first().map(|r| r.strategy);
            let base = strategy.filter(|s| s.uses_evidence()).map(|_| baseline.as_slice());
            reports.push(stages::evaluate_records(label, recs, &test, c, &ev, base)?);
            if i == 0 {
                primary_sets = stages::evidence_sets(recs);
            }
        }
        let diversity = diversity_report(&primary_sets)?;
        let retrieval = match self.judgments()? {
            None => None,
            Some(j) => Some(self.retrieval_report(&j)?),
        };
        let report = EvalReport { outcome_id: self.outcome.outcome_id.clone(), reports, retrieval, diversity };
        write_json(&self.layout.report_json, REPORT_MAGIC, &report)?;
        write_file(&self.layout.report_txt, render_report(&report).as_bytes())?;
        let mut csv = Vec::new();
        report.diversity.write_csv(&mut csv)?;
        write_file(&self.layout.diversity, &csv)?;
        let outs = [self.layout.report_json.clone(), self.layout.report_txt.clone(), self.layout.diversity.clone()];
        self.finish("eval", t, &outs)
    }

    fn retrieval_report(&mut self, j: &Judgments) -> Result<RetrievalReport> {
        self.ensure_index()?;
        self.ensure_rankings()?;
        self.ensure_pools()?;
        let k = self.cfg.eval.precision_k;
        let reranked: Vec<RankedList> = self.pools.as_ref().expect("ensured").values().map(RerankedPool::ranking).collect();
        let scorer = self.cfg.providers.scorer.clone();
        if let ScorerEndpoint::Logistic { .. } = scorer {
            self.ensure_embeddings()?;
        }
        let candidate_pools = stages::candidate_pools(
            self.sparse.as_ref().expect("ensured"),
            self.dense.as_ref().expect("ensured"),
            self.cfg.retrieval.pool_n,
        )?;
        let this = &*self;
        let fold_eval = |train: &[String], test: &[String]| -> Result<f64> {
            let ids: std::collections::BTreeSet<&str> = test.iter().map(String::as_str).collect();
            match &scorer {
                ScorerEndpoint::Logistic { epochs, lr } => {
                    let model = this.fit_pair_model(&candidate_pools, train, *epochs, *lr)?;
                    let s = LogisticScorer {
                        model,
                        stats: this.index.as_ref().expect("ensured").stats.clone(),
                        notes: this.note_emb.as_ref().expect("ensured"),
                        docs: this.doc_emb.as_ref().expect("ensured"),
                    };
                    let test_pools: Vec<_> = candidate_pools.iter().filter(|(id, _)| ids.contains(id.as_str())).cloned().collect();
                    let lists: Vec<RankedList> = stages::rerank_all(
                        this.queries.as_ref().expect("ensured"),
                        &test_pools,
                        this.index.as_ref().expect("ensured"),
                        &s,
                    )?
                    .iter()
                    .map(RerankedPool::ranking)
                    .collect();
                    stages::mean_precision_at_k(&lists, j, k, &ids)
                }
                _ => stages::mean_precision_at_k(&reranked, j, k, &ids),
            }
        };
        stages::retrieval_report(
            self.sparse.as_ref().expect("ensured"),
            self.dense.as_ref().expect("ensured"),
            &reranked,
            j,
            k,
            self.cfg.eval.folds,
            fold_eval,
        )
    }

    /// Every stage in order; L2R only when enabled.
    pub fn run_all(&mut self) -> Result<()> {
        self.index()?;
        self.query()?;
        self.retrieve()?;
        self.rerank()?;
        self.train()?;
        self.predict()?;
        if self.cfg.training.l2r.enabled {
            self.l2r()?;
        }
        self.eval()
    }
}

/// Metric tables followed by the retrieval summary.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!("outcome {}\n\n", report.outcome_id);
    out.push_str(&render_text(&report.reports));
    if let Some(r) = &report.retrieval {
        out.push_str(&format!("\nretrieval precision@{} over {} judged notes\n", r.k, r.notes));
        for (name, v) in [("sparse", r.sparse), ("dense", r.dense), ("reranked", r.reranked)] {
            out.push_str(&format!("{name:<10}  {:>6.2}\n", 100.0 * v));
        }
        if let Some(cv) = &r.cross_validation {
            out.push_str(&format!("reranked {}-fold mean  {:>6.2}\n", cv.fold_scores.len(), 100.0 * cv.mean));
        }
    }
    out.push_str(&format!(
        "\nevidence diversity: {} distinct documents among the top entries over {} notes\n",
        report.diversity.entries.len(),
        report.diversity.note_count
    ));
    out
}

pub fn cmd_index(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.index()
}

pub fn cmd_query(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.query()
}

pub fn cmd_retrieve(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.retrieve()
}

pub fn cmd_rerank(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.rerank()
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.train()
}

pub fn cmd_predict(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.predict()
}

pub fn cmd_l2r(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.l2r()
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<()> {
    Pipeline::new(cfg.clone())?.eval()
}

/// The whole pipeline in one session.
pub fn run(cfg: &PipelineConfig) -> Result<RunManifest> {
    let mut p = Pipeline::new(cfg.clone())?;
    p.run_all()?;
    Ok(p.manifest)
}

/// Reads back a prediction file.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path, PREDICTION_MAGIC, "predict")
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    read_json(path, REPORT_MAGIC, "eval")
}

pub fn read_l2r_history(path: &Path) -> Result<Vec<L2rEpoch>> {
    read_json(path, HISTORY_MAGIC, "l2r")
}

pub fn read_grid_report(path: &Path) -> Result<GridReport> {
    read_json(path, GRID_MAGIC, "train")
}

pub fn read_split(path: &Path) -> Result<Split> {
    read_json(path, SPLIT_MAGIC, "query")
}
