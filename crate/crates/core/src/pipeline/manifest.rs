//! Run bookkeeping: what went in, what each stage wrote, how long it took.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_json_artifact, encode_json_artifact, sha256_hex, FORMAT_VERSION, MANIFEST_MAGIC};
use crate::error::Result;
use crate::pipeline::config::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub elapsed_ms: u64,
    /// Artifact path (relative to the output directory when inside it) to
    /// SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub format_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input name to SHA-256 of the file.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

/// Checksums of every input file the config references.
pub fn input_checksums(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let p = &cfg.paths;
    let mut files = vec![("corpus", Some(p.corpus.clone())), ("notes", Some(p.notes.clone())), ("dictionary", Some(p.dictionary.clone()))];
    files.push(("lexicon", p.lexicon.clone()));
    files.push(("judgments", p.judgments.clone()));
    files.push(("outcome", cfg.outcome_path()));
    let mut out = BTreeMap::new();
    for (name, path) in files {
        if let Some(path) = path {
            out.insert(name.to_string(), sha256_hex(&fs::read(&path)?));
        }
    }
    Ok(out)
}

impl RunManifest {
    /// The run id hashes the config snapshot, the input checksums and the seed.
    pub fn new(cfg: &PipelineConfig, inputs: BTreeMap<String, String>) -> Result<Self> {
        let config = serde_json::to_value(cfg)?;
        let key = serde_json::to_vec(&(&config, &inputs, cfg.seed))?;
        Ok(Self {
            run_id: sha256_hex(&key)[..16].to_string(),
            format_version: FORMAT_VERSION,
            seed: cfg.seed,
            config,
            inputs,
            stages: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_json_artifact(MANIFEST_MAGIC, &fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_json_artifact(MANIFEST_MAGIC, self)?)?;
        Ok(())
    }

    pub fn record(&mut self, stage: StageRecord) {
        self.stages.push(stage);
    }

    /// Latest checksum of every artifact written so far.
    pub fn output_checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for s in &self.stages {
            out.extend(s.outputs.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        out
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.stage == name)
    }
}
