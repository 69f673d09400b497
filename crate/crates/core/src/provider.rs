//! External embedding and pair-scoring providers.
//!
//! Both speak newline-delimited JSON. A batch of request lines goes out and
//! exactly one response line per request comes back, in any order; responses
//! are matched to requests by `id`.
//!
//! ```text
//! embed: {"id": str, "text": str}             -> {"id": str, "vector": [f32, ...]}
//! score: {"id": str, "query": str, "doc": str} -> {"id": str, "score": f64}
//! ```
//!
//! Transports are a persistent stdio subprocess or HTTP `POST` of the batch
//! body to `<url>/embed` or `<url>/score`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::embedding::{cosine, Embedder, EmbeddingVector, HashingEmbedder};
use crate::error::{Error, Result};
use crate::note::Query;
use crate::rerank::PairScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub query: String,
    pub doc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Embed,
    Score,
}

impl Service {
    pub fn path(self) -> &'static str {
        match self {
            Service::Embed => "/embed",
            Service::Score => "/score",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(100) }
    }
}

/// A transport failure worth retrying, as opposed to a protocol violation.
#[derive(Debug)]
pub struct TransportFailure(pub String);

/// Sends one batch of request lines, returns the raw response lines.
pub trait Transport: Send + Sync {
    fn exchange_once(&self, lines: &[String]) -> std::result::Result<Vec<String>, TransportFailure>;

    fn describe(&self) -> String;
}

/// Retries transport failures with exponential backoff.
pub fn exchange(t: &dyn Transport, lines: &[String], policy: RetryPolicy) -> Result<Vec<String>> {
    let mut last = String::new();
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            let delay = policy.base_delay * 2u32.pow(attempt - 1);
            log::warn!("{}: attempt {attempt} failed ({last}); retrying in {delay:?}", t.describe());
            thread::sleep(delay);
        }
        match t.exchange_once(lines) {
            Ok(out) => return Ok(out),
            Err(TransportFailure(msg)) => last = msg,
        }
    }
    Err(Error::ProviderUnavailable { attempts: policy.attempts.max(1), message: format!("{}: {last}", t.describe()) })
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Long-lived subprocess; restarted after it dies.
pub struct StdioTransport {
    program: String,
    args: Vec<String>,
    io: Mutex<Option<ChildIo>>,
}

impl StdioTransport {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self { program: program.into(), args, io: Mutex::new(None) }
    }

    fn spawn(&self) -> std::result::Result<ChildIo, TransportFailure> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TransportFailure(format!("spawn `{}`: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ChildIo { child, stdin, stdout })
    }
}

impl Transport for StdioTransport {
    fn exchange_once(&self, lines: &[String]) -> std::result::Result<Vec<String>, TransportFailure> {
        let mut guard = self.io.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let io = guard.as_mut().unwrap();
        let result = thread::scope(|s| {
            // Write on a separate thread so a child that answers eagerly
            // cannot fill its stdout pipe while we are still writing.
            let stdin = &mut io.stdin;
            let writer = s.spawn(move || -> std::io::Result<()> {
                for l in lines {
                    stdin.write_all(l.as_bytes())?;
                    stdin.write_all(b"\n")?;
                }
                stdin.flush()
            });
            let mut out = Vec::with_capacity(lines.len());
            let mut read_err = None;
            for _ in 0..lines.len() {
                let mut buf = String::new();
                match io.stdout.read_line(&mut buf) {
                    Ok(0) => {
                        read_err = Some("provider closed its output".to_string());
                        break;
                    }
                    Ok(_) => out.push(buf.trim_end_matches(['\n', '\r']).to_string()),
                    Err(e) => {
                        read_err = Some(e.to_string());
                        break;
                    }
                }
            }
            let write = writer.join().expect("writer thread");
            match (read_err, write) {
                (Some(e), _) => Err(TransportFailure(e)),
                (None, Err(e)) => Err(TransportFailure(format!("write: {e}"))),
                (None, Ok(())) => Ok(out),
            }
        });
        if result.is_err() {
            if let Some(mut dead) = guard.take() {
                let _ = dead.child.kill();
                let _ = dead.child.wait();
            }
        }
        result
    }

    fn describe(&self) -> String {
        format!("stdio provider `{}`", self.program)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        if let Some(mut io) = self.io.get_mut().unwrap_or_else(|p| p.into_inner()).take() {
            drop(io.stdin);
            let _ = io.child.wait();
        }
    }
}

pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `base_url` without the service path; `service` picks `/embed` or `/score`.
    pub fn new(base_url: &str, service: Service, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build();
        Self { url: format!("{}{}", base_url.trim_end_matches('/'), service.path()), agent: ureq::Agent::new_with_config(config) }
    }
}

impl Transport for HttpTransport {
    fn exchange_once(&self, lines: &[String]) -> std::result::Result<Vec<String>, TransportFailure> {
        let mut body = lines.join("\n");
        body.push('\n');
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/x-ndjson")
            .send(body)
            .map_err(|e| TransportFailure(e.to_string()))?;
        let text = resp.body_mut().read_to_string().map_err(|e| TransportFailure(e.to_string()))?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
    }

    fn describe(&self) -> String {
        format!("http provider {}", self.url)
    }
}

/// Parses response lines and orders them to match `ids`.
fn match_responses<T, F>(ids: &[String], lines: &[String], id_of: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> &str,
{
    if lines.len() != ids.len() {
        return Err(Error::protocol(format!("expected {} response lines, got {}", ids.len(), lines.len()), None));
    }
    let want: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut slots: Vec<Option<T>> = (0..ids.len()).map(|_| None).collect();
    for (n, line) in lines.iter().enumerate() {
        let resp: T = serde_json::from_str(line).map_err(|e| Error::protocol(format!("malformed response: {e}"), Some(n + 1)))?;
        let id = id_of(&resp);
        let &i = want.get(id).ok_or_else(|| Error::protocol(format!("unknown response id `{id}`"), Some(n + 1)))?;
        if slots[i].is_some() {
            return Err(Error::protocol(format!("duplicate response id `{id}`"), Some(n + 1)));
        }
        slots[i] = Some(resp);
    }
    Ok(slots.into_iter().map(|s| s.expect("every id answered exactly once")).collect())
}

pub struct RemoteEmbedder {
    transport: Box<dyn Transport>,
    batch_size: usize,
    policy: RetryPolicy,
    dim: Mutex<Option<usize>>,
}

impl RemoteEmbedder {
    pub fn new(transport: Box<dyn Transport>, batch_size: usize, policy: RetryPolicy) -> Self {
        Self { transport, batch_size: batch_size.max(1), policy, dim: Mutex::new(None) }
    }

    /// Dimension fixed by the first response, if any.
    pub fn dim(&self) -> Option<usize> {
        *self.dim.lock().unwrap()
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let ids: Vec<String> = (0..chunk.len()).map(|i| format!("e{i}")).collect();
            let lines = ids
                .iter()
                .zip(chunk)
                .map(|(id, t)| serde_json::to_string(&EmbedRequest { id: id.clone(), text: t.to_string() }))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let raw = exchange(self.transport.as_ref(), &lines, self.policy)?;
            let resp: Vec<EmbedResponse> = match_responses(&ids, &raw, |r: &EmbedResponse| r.id.as_str())?;
            let mut dim = self.dim.lock().unwrap();
            for r in resp {
                let d = *dim.get_or_insert(r.vector.len());
                if r.vector.len() != d {
                    return Err(Error::protocol(format!("dimension drift: expected {d}, got {}", r.vector.len()), None));
                }
                out.push(EmbeddingVector::new(r.vector.iter().map(|&x| f64::from(x)).collect())?);
            }
        }
        Ok(out)
    }
}

pub struct RemoteScorer {
    transport: Box<dyn Transport>,
    batch_size: usize,
    policy: RetryPolicy,
}

impl RemoteScorer {
    pub fn new(transport: Box<dyn Transport>, batch_size: usize, policy: RetryPolicy) -> Self {
        Self { transport, batch_size: batch_size.max(1), policy }
    }
}

impl PairScorer for RemoteScorer {
    fn score_pairs(&self, query: &Query, docs: &[&Document]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(self.batch_size) {
            let ids: Vec<String> = chunk.iter().map(|d| d.doc_id.clone()).collect();
            let lines = chunk
                .iter()
                .map(|d| serde_json::to_string(&ScoreRequest { id: d.doc_id.clone(), query: query.raw_text.clone(), doc: d.text() }))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let fail = |e: Error| Error::Scorer { doc_ids: ids.clone(), message: e.to_string() };
            let raw = exchange(self.transport.as_ref(), &lines, self.policy).map_err(fail)?;
            let resp: Vec<ScoreResponse> = match_responses(&ids, &raw, |r: &ScoreResponse| r.id.as_str()).map_err(fail)?;
            out.extend(resp.into_iter().map(|r| r.score));
        }
        Ok(out)
    }
}

/// Answers one request line with the builtin hashing embedder or the
/// builtin score (cosine of hashing embeddings, in `[0, 1]`).
pub fn builtin_response(service: Service, embedder: &HashingEmbedder, line: &str) -> Result<String> {
    Ok(match service {
        Service::Embed => {
            let req: EmbedRequest = serde_json::from_str(line)?;
            let v = embedder.embed_one(&req.text);
            serde_json::to_string(&EmbedResponse { id: req.id, vector: v.as_slice().iter().map(|&x| x as f32).collect() })?
        }
        Service::Score => {
            let req: ScoreRequest = serde_json::from_str(line)?;
            let q = embedder.embed_one(&req.query);
            let d = embedder.embed_one(&req.doc);
            serde_json::to_string(&ScoreResponse { id: req.id, score: cosine(q.as_slice(), d.as_slice()).clamp(0.0, 1.0) })?
        }
    })
}

/// Line-at-a-time stdio server loop.
pub fn serve_lines<R: BufRead, W: Write>(service: Service, embedder: &HashingEmbedder, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = builtin_response(service, embedder, &line)
            .unwrap_or_else(|e| serde_json::json!({"id": null, "error": e.to_string()}).to_string());
        output.write_all(resp.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub service: Service,
    pub requests: usize,
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(ConformanceCheck { name: name.into(), passed, detail: detail.into() });
    }
}

fn probe_texts(n: usize) -> Vec<String> {
    let words = ["fever", "cough", "sepsis", "ventilation", "renal", "failure", "pain", "chest", "acute", "chronic"];
    (0..n)
        .map(|i| {
            if i % 10 == 9 {
                // repeat an earlier text
                return format!("{} {}", words[(i / 10) % words.len()], words[(i / 10 + 3) % words.len()]);
            }
            if i == 0 {
                return String::new();
            }
            (0..1 + i % 7).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Drives `n` embed requests and checks schema, id matching, dimension
/// constancy and repeat determinism.
pub fn embedding_conformance(t: &dyn Transport, n: usize) -> ConformanceReport {
    let mut rep = ConformanceReport { service: Service::Embed, requests: n, checks: vec![] };
    let texts = probe_texts(n);
    let ids: Vec<String> = (0..n).map(|i| format!("c{i:03}")).collect();
    let lines: Vec<String> = ids
        .iter()
        .zip(&texts)
        .map(|(id, t)| serde_json::to_string(&EmbedRequest { id: id.clone(), text: t.clone() }).unwrap())
        .collect();
    let raw = match exchange(t, &lines, RetryPolicy::default()) {
        Ok(r) => r,
        Err(e) => {
            rep.check("transport", false, e.to_string());
            return rep;
        }
    };
    rep.check("line_count", raw.len() == n, format!("{} lines for {n} requests", raw.len()));
    let parsed: Vec<std::result::Result<EmbedResponse, String>> =
        raw.iter().map(|l| serde_json::from_str::<EmbedResponse>(l).map_err(|e| e.to_string())).collect();
    let bad = parsed.iter().filter(|p| p.is_err()).count();
    rep.check("schema", bad == 0, format!("{bad} malformed lines"));
    match match_responses(&ids, &raw, |r: &EmbedResponse| r.id.as_str()) {
        Ok(resp) => {
            rep.check("id_matching", true, "every id answered once");
            let dims: std::collections::BTreeSet<usize> = resp.iter().map(|r| r.vector.len()).collect();
            rep.check("dimension_constant", dims.len() == 1 && !dims.contains(&0), format!("dims {dims:?}"));
            let finite = resp.iter().all(|r| r.vector.iter().all(|x| x.is_finite()));
            rep.check("finite_values", finite, "");
            let mut by_text: BTreeMap<&str, &Vec<f32>> = BTreeMap::new();
            let mut stable = true;
            for (text, r) in texts.iter().zip(&resp) {
                if let Some(prev) = by_text.insert(text, &r.vector) {
                    stable &= prev == &r.vector;
                }
            }
            rep.check("repeat_identical", stable, "repeated texts give identical vectors");
        }
        Err(e) => rep.check("id_matching", false, e.to_string()),
    }
    rep
}

/// Drives `n` score requests and checks schema, id matching and range.
pub fn scorer_conformance(t: &dyn Transport, n: usize) -> ConformanceReport {
    let mut rep = ConformanceReport { service: Service::Score, requests: n, checks: vec![] };
    let texts = probe_texts(n + 1);
    let ids: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
    let lines: Vec<String> = (0..n)
        .map(|i| serde_json::to_string(&ScoreRequest { id: ids[i].clone(), query: texts[i].clone(), doc: texts[n - i].clone() }).unwrap())
        .collect();
    let raw = match exchange(t, &lines, RetryPolicy::default()) {
        Ok(r) => r,
        Err(e) => {
            rep.check("transport", false, e.to_string());
            return rep;
        }
    };
    rep.check("line_count", raw.len() == n, format!("{} lines for {n} requests", raw.len()));
    match match_responses(&ids, &raw, |r: &ScoreResponse| r.id.as_str()) {
        Ok(resp) => {
            rep.check("schema", true, "");
            rep.check("id_matching", true, "every id answered once");
            let out = resp.iter().filter(|r| !(0.0..=1.0).contains(&r.score)).count();
            rep.check("score_range", out == 0, format!("{out} scores outside [0, 1]"));
        }
        Err(e) => {
            rep.check("schema", !matches!(e, Error::Protocol { line: Some(_), .. }), e.to_string());
            rep.check("id_matching", false, e.to_string());
        }
    }
    rep
}
