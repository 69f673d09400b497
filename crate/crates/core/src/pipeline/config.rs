//! Run configuration: a JSON file, dotted-path overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::OutcomeSpec;
use crate::error::{Error, Result};
use crate::evaluation::TopkPool;
use crate::predictor::train::TrainConfig;
use crate::predictor::AggregationStrategy;
use crate::provider::RetryPolicy;
use crate::retrieval::biencoder::BiEncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutcomeRef {
    Inline(OutcomeSpec),
    /// A preset name (`PMV`, `MOR`, `LOS`) or a path to an outcome JSON file.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub notes: PathBuf,
    pub dictionary: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgments: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/index.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// Embedding cache directory; defaults to `<out_dir>/embeddings`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Defaults to `<out_dir>/model.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderEndpoint {
    #[default]
    Builtin,
    Stdio {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Http {
        url: String,
    },
}

fn default_pair_epochs() -> usize {
    500
}

fn default_pair_lr() -> f64 {
    0.5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerEndpoint {
    /// TF-IDF cosine over MeSH terms.
    #[default]
    Builtin,
    /// Logistic pair model trained on the training notes' judgments.
    Logistic {
        #[serde(default = "default_pair_epochs")]
        epochs: usize,
        #[serde(default = "default_pair_lr")]
        lr: f64,
    },
    Stdio {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Http {
        url: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub embedder: EmbedderEndpoint,
    pub scorer: ScorerEndpoint,
    /// Dimension of the builtin hashing embedder.
    pub dim: usize,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderEndpoint::Builtin,
            scorer: ScorerEndpoint::Builtin,
            dim: 256,
            batch_size: 64,
            timeout_ms: 30_000,
            attempts: 3,
            base_delay_ms: 100,
        }
    }
}

impl ProvidersConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { attempts: self.attempts, base_delay: Duration::from_millis(self.base_delay_ms) }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Candidates taken from each first-stage retriever.
    pub pool_n: usize,
    pub k: usize,
    /// When set, a bi-encoder projection is trained on the training notes'
    /// judgments and used for dense retrieval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub biencoder: Option<BiEncoderConfig>,
    pub triples_per_query: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { pool_n: 100, k: 5, biencoder: None, triples_per_query: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub enabled: bool,
    pub lr: Vec<f64>,
    pub grad_accumulation: Vec<usize>,
    pub k: Vec<usize>,
    /// Share of the training notes held out to pick the grid point.
    pub validation_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lr: vec![5e-4, 1e-5, 5e-5, 1e-6, 5e-6],
            grad_accumulation: vec![10, 20],
            k: vec![1, 5, 10],
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2rConfig {
    /// Whether `run` includes the joint-training stage.
    pub enabled: bool,
    /// Defaults to `training.epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Compute `y_j` once from the warm-start head instead of every epoch.
    pub fixed_labels: bool,
    /// Default to the warm-start model's values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_accumulation: Option<usize>,
}

impl Default for L2rConfig {
    fn default() -> Self {
        Self { enabled: true, epochs: None, fixed_labels: false, lr: None, grad_accumulation: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub epochs: usize,
    pub grad_accumulation: usize,
    pub strategy: AggregationStrategy,
    pub lambda_early: f64,
    pub candidate_count: usize,
    pub test_fraction: f64,
    /// Extra models trained alongside the primary strategy. NoteOnly is
    /// always added: the confidence filter and L2R labels need it.
    pub baselines: Vec<AggregationStrategy>,
    pub grid: GridConfig,
    pub l2r: L2rConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            grad_accumulation: t.grad_accumulation,
            strategy: t.strategy,
            lambda_early: t.lambda_early,
            candidate_count: t.candidate_count,
            test_fraction: 0.2,
            baselines: vec![AggregationStrategy::NoteOnly, AggregationStrategy::LiteratureOnly],
            grid: GridConfig::default(),
            l2r: L2rConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub topk_fraction: f64,
    pub topk_pool: TopkPool,
    pub ci_threshold: f64,
    pub precision_k: usize,
    pub folds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { topk_fraction: 0.1, topk_pool: TopkPool::All, ci_threshold: 0.10, precision_k: 10, folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub outcome: OutcomeRef,
    pub paths: PathsConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Root seed; every stage derives its own from it.
    #[serde(default)]
    pub seed: u64,
}

/// Per-stage seed: the first eight bytes of `SHA-256(root_le ‖ stage)`.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Sets `path` (dot-separated) in `root` to `value`, which is parsed as JSON
/// and otherwise taken as a string. Missing objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            other if other.is_null() => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!("override `{key}`: `{}` is not an object", segments[..i].join("."))));
            }
        };
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(what: &str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", p.display())))
    }
}

impl PipelineConfig {
    /// Reads a config file, applies overrides, resolves relative paths
    /// against the file's directory and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config `{}`: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(value, &base)
    }

    pub fn from_value(value: Value, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.corpus, &mut p.notes, &mut p.dictionary, &mut p.out_dir] {
            resolve(base, path);
        }
        for path in [&mut p.lexicon, &mut p.judgments, &mut p.index, &mut p.embeddings, &mut p.model].into_iter().flatten() {
            resolve(base, path);
        }
        if let OutcomeRef::Named(name) = &mut self.outcome {
            if OutcomeSpec::preset(name).is_none() {
                let mut pb = PathBuf::from(&*name);
                resolve(base, &mut pb);
                *name = pb.to_string_lossy().into_owned();
            }
        }
    }

    pub fn outcome_spec(&self) -> Result<OutcomeSpec> {
        let spec = match &self.outcome {
            OutcomeRef::Inline(s) => s.clone(),
            OutcomeRef::Named(name) => match OutcomeSpec::preset(name) {
                Some(s) => s,
                None => {
                    let text = fs::read_to_string(name)
                        .map_err(|e| Error::Config(format!("outcome `{name}` is neither a preset nor a readable file: {e}")))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("outcome file `{name}`: {e}")))?
                }
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The outcome file, when the outcome is given by path.
    pub fn outcome_path(&self) -> Option<PathBuf> {
        match &self.outcome {
            OutcomeRef::Named(n) if OutcomeSpec::preset(n).is_none() => Some(PathBuf::from(n)),
            _ => None,
        }
    }

    /// Primary strategy first, then the baselines (NoteOnly always present),
    /// each once.
    pub fn strategies(&self) -> Vec<AggregationStrategy> {
        let mut out = vec![self.training.strategy];
        for s in self.training.baselines.iter().copied().chain([AggregationStrategy::NoteOnly]) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn l2r_epochs(&self) -> usize {
        self.training.l2r.epochs.unwrap_or(self.training.epochs)
    }

    /// Training parameters for one model. The seed depends only on the root
    /// seed and the strategy, so grid points share initialization.
    pub fn train_config(&self, strategy: AggregationStrategy, lr: f64, grad_accumulation: usize, k: usize) -> TrainConfig {
        TrainConfig {
            lr,
            epochs: self.training.epochs,
            grad_accumulation,
            k,
            strategy,
            seed: derive_seed(self.seed, &format!("train/{}", strategy.name())),
            lambda_early: self.training.lambda_early,
            candidate_count: self.training.candidate_count,
        }
    }

    pub fn primary_train_config(&self, strategy: AggregationStrategy) -> TrainConfig {
        self.train_config(strategy, self.training.lr, self.training.grad_accumulation, self.retrieval.k)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.retrieval;
        if r.pool_n == 0 {
            return Err(Error::Config("retrieval.pool_n must be >= 1".into()));
        }
        if r.k == 0 || r.k > r.pool_n {
            return Err(Error::Config(format!("retrieval.k must satisfy 1 <= k <= pool_n ({}), got {}", r.pool_n, r.k)));
        }
        let t = &self.training;
        let g = &t.grid;
        if g.enabled {
            if g.lr.is_empty() || g.grad_accumulation.is_empty() || g.k.is_empty() {
                return Err(Error::Config("training.grid lists must be non-empty in grid mode".into()));
            }
            if !g.k.contains(&r.k) {
                return Err(Error::Config(format!("retrieval.k = {} is not in training.grid.k {:?}", r.k, g.k)));
            }
            if let Some(&big) = g.k.iter().find(|&&k| k == 0 || k > r.pool_n) {
                return Err(Error::Config(format!("training.grid.k entry {big} outside 1..=pool_n ({})", r.pool_n)));
            }
            if !(g.validation_fraction > 0.0 && g.validation_fraction < 1.0) {
                return Err(Error::Config("training.grid.validation_fraction must be in (0, 1)".into()));
            }
            for (i, &lr) in g.lr.iter().enumerate() {
                for &ga in &g.grad_accumulation {
                    for &k in &g.k {
                        TrainConfig { lr, grad_accumulation: ga, k, ..self.primary_train_config(t.strategy) }
                            .validate()
                            .map_err(|e| Error::Config(format!("training.grid point {i}: {e}")))?;
                    }
                }
            }
        }
        for s in self.strategies() {
            self.primary_train_config(s).validate()?;
        }
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            return Err(Error::Config(format!("training.test_fraction must be in (0, 1), got {}", t.test_fraction)));
        }
        if t.l2r.enabled && t.strategy == AggregationStrategy::NoteOnly {
            return Err(Error::Config("training.l2r needs an evidence-using primary strategy".into()));
        }
        let e = &self.eval;
        if !(e.topk_fraction > 0.0 && e.topk_fraction <= 1.0) {
            return Err(Error::Config(format!("eval.topk_fraction must be in (0, 1], got {}", e.topk_fraction)));
        }
        if !(e.ci_threshold >= 0.0 && e.ci_threshold.is_finite()) {
            return Err(Error::Config(format!("eval.ci_threshold must be >= 0, got {}", e.ci_threshold)));
        }
        if e.precision_k == 0 {
            return Err(Error::Config("eval.precision_k must be >= 1".into()));
        }
        if e.folds < 2 {
            return Err(Error::Config("eval.folds must be >= 2".into()));
        }
        let p = &self.providers;
        if p.dim == 0 || p.batch_size == 0 || p.attempts == 0 {
            return Err(Error::Config("providers.dim, batch_size and attempts must be >= 1".into()));
        }
        must_exist("paths.corpus", &self.paths.corpus)?;
        must_exist("paths.notes", &self.paths.notes)?;
        must_exist("paths.dictionary", &self.paths.dictionary)?;
        if let Some(l) = &self.paths.lexicon {
            must_exist("paths.lexicon", l)?;
        }
        if let Some(j) = &self.paths.judgments {
            must_exist("paths.judgments", j)?;
        }
        if self.paths.judgments.is_none() {
            if matches!(p.scorer, ScorerEndpoint::Logistic { .. }) {
                return Err(Error::Config("the logistic scorer needs paths.judgments".into()));
            }
            if r.biencoder.is_some() {
                return Err(Error::Config("retrieval.biencoder needs paths.judgments".into()));
            }
        }
        if let ScorerEndpoint::Logistic { epochs, lr } = &p.scorer {
            if *epochs == 0 || !(*lr > 0.0) {
                return Err(Error::Config("logistic scorer needs epochs >= 1 and lr > 0".into()));
            }
        }
        self.outcome_spec()?;
        Ok(())
    }
}
