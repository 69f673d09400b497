//! `evifuse` command-line driver.

use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evifuse_core::embedding::HashingEmbedder;
use evifuse_core::fixtures::{generate, FixtureSpec};
use evifuse_core::pipeline::config::{EmbedderEndpoint, ScorerEndpoint};
use evifuse_core::pipeline::{self, PipelineConfig};
use evifuse_core::provider::{
    builtin_response, embedding_conformance, scorer_conformance, serve_lines, HttpTransport, Service, StdioTransport,
    Transport,
};

#[derive(Parser)]
#[command(name = "evifuse", version, about = "Retrieval-augmented clinical outcome prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// `dotted.path=value`; the value is parsed as JSON, else taken as a string.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ServiceArg {
    Embed,
    Score,
}

impl From<ServiceArg> for Service {
    fn from(s: ServiceArg) -> Self {
        match s {
            ServiceArg::Embed => Service::Embed,
            ServiceArg::Score => Service::Score,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the outcome-specific literature index.
    Index(ConfigArgs),
    /// Extract MeSH queries from the notes and split train/test.
    Query(ConfigArgs),
    /// Embed inputs and write sparse and dense candidate lists.
    Retrieve(ConfigArgs),
    /// Pool candidates and rescore them.
    Rerank(ConfigArgs),
    /// Train the primary predictor and the baselines.
    Train(ConfigArgs),
    /// Predict the held-out and unlabeled notes.
    Predict(ConfigArgs),
    /// Jointly train the retriever projections and the head.
    L2r(ConfigArgs),
    /// Compute metrics and write the report.
    Eval(ConfigArgs),
    /// Every stage in order.
    Run(ConfigArgs),
    /// Write a synthetic corpus, notes, dictionary and judgments.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fixture spec (JSON); unspecified fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Check a provider against the wire protocol.
    Conformance {
        #[arg(long, value_enum)]
        service: ServiceArg,
        /// Use the provider named in this config.
        #[arg(long, conflicts_with_all = ["stdio", "http"])]
        config: Option<PathBuf>,
        /// Provider command line, e.g. `--stdio "python embed.py"`.
        #[arg(long)]
        stdio: Option<String>,
        /// Provider base URL.
        #[arg(long)]
        http: Option<String>,
        #[arg(long, default_value_t = 50)]
        requests: usize,
        #[arg(long, default_value_t = 30000)]
        timeout_ms: u64,
    },
    /// Serve the builtin hashing provider over stdio or HTTP.
    Serve {
        #[arg(long, value_enum)]
        service: ServiceArg,
        /// Listen address, e.g. `127.0.0.1:8089`; stdio when absent.
        #[arg(long)]
        http: Option<String>,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
}

fn load(args: &ConfigArgs) -> evifuse_core::Result<PipelineConfig> {
    PipelineConfig::load(&args.config, &args.overrides)
}

fn split_command(line: &str) -> anyhow::Result<(String, Vec<String>)> {
    let mut parts = line.split_whitespace().map(str::to_string);
    let program = parts.next().context("empty --stdio command")?;
    Ok((program, parts.collect()))
}

fn transport_for(
    service: Service,
    config: Option<PathBuf>,
    stdio: Option<String>,
    http: Option<String>,
    timeout: Duration,
) -> anyhow::Result<Box<dyn Transport>> {
    if let Some(line) = stdio {
        let (program, args) = split_command(&line)?;
        return Ok(Box::new(StdioTransport::new(program, args)));
    }
    if let Some(url) = http {
        return Ok(Box::new(HttpTransport::new(&url, service, timeout)));
    }
    let Some(path) = config else {
        bail!("pass one of --config, --stdio or --http");
    };
    let cfg = PipelineConfig::load(&path, &[])?;
    let timeout = cfg.providers.timeout();
    let (stdio, http) = match service {
        Service::Embed => match &cfg.providers.embedder {
            EmbedderEndpoint::Stdio { command, args } => (Some((command.clone(), args.clone())), None),
            EmbedderEndpoint::Http { url } => (None, Some(url.clone())),
            EmbedderEndpoint::Builtin => (None, None),
        },
        Service::Score => match &cfg.providers.scorer {
            ScorerEndpoint::Stdio { command, args } => (Some((command.clone(), args.clone())), None),
            ScorerEndpoint::Http { url } => (None, Some(url.clone())),
            _ => (None, None),
        },
    };
    match (stdio, http) {
        (Some((program, args)), _) => Ok(Box::new(StdioTransport::new(program, args))),
        (_, Some(url)) => Ok(Box::new(HttpTransport::new(&url, service, timeout))),
        _ => bail!("the configured provider is builtin; nothing external to check"),
    }
}

fn serve_http(service: Service, embedder: &HashingEmbedder, addr: &str) -> anyhow::Result<()> {
    let server = tiny_http::Server::http(addr).map_err(|e| anyhow::anyhow!("cannot listen on {addr}: {e}"))?;
    log::info!("serving {} on http://{}", service.path(), server.server_addr());
    for mut req in server.incoming_requests() {
        if req.url() != service.path() || *req.method() != tiny_http::Method::Post {
            req.respond(tiny_http::Response::from_string("not found").with_status_code(404))?;
            continue;
        }
        let mut body = String::new();
        if let Err(e) = req.as_reader().read_to_string(&mut body) {
            req.respond(tiny_http::Response::from_string(e.to_string()).with_status_code(400))?;
            continue;
        }
        let out: Result<Vec<String>, _> =
            body.lines().filter(|l| !l.trim().is_empty()).map(|l| builtin_response(service, embedder, l)).collect();
        match out {
            Ok(lines) => {
                let mut text = lines.join("\n");
                text.push('\n');
                req.respond(tiny_http::Response::from_string(text))?;
            }
            Err(e) => req.respond(tiny_http::Response::from_string(e.to_string()).with_status_code(400))?,
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Index(a) => pipeline::cmd_index(&load(&a)?)?,
        Command::Query(a) => pipeline::cmd_query(&load(&a)?)?,
        Command::Retrieve(a) => pipeline::cmd_retrieve(&load(&a)?)?,
        Command::Rerank(a) => pipeline::cmd_rerank(&load(&a)?)?,
        Command::Train(a) => pipeline::cmd_train(&load(&a)?)?,
        Command::Predict(a) => pipeline::cmd_predict(&load(&a)?)?,
        Command::L2r(a) => pipeline::cmd_l2r(&load(&a)?)?,
        Command::Eval(a) => {
            let cfg = load(&a)?;
            pipeline::cmd_eval(&cfg)?;
            let report = pipeline::read_eval_report(&pipeline::Layout::new(&cfg).report_json)?;
            print!("{}", pipeline::render_report(&report));
        }
        Command::Run(a) => {
            let cfg = load(&a)?;
            let manifest = pipeline::run(&cfg)?;
            let report = pipeline::read_eval_report(&pipeline::Layout::new(&cfg).report_json)?;
            print!("{}", pipeline::render_report(&report));
            println!("\nrun {} written to {}", manifest.run_id, cfg.paths.out_dir.display());
        }
        Command::Fixture { out, seed, spec } => {
            let mut fs = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<FixtureSpec>(&text)
                        .map_err(|e| evifuse_core::Error::Config(format!("fixture spec `{}`: {e}", p.display())))?
                }
                None => FixtureSpec::default(),
            };
            if let Some(s) = seed {
                fs.seed = s;
            }
            let paths = generate(&fs)?.write_to(&out)?;
            println!("{}", serde_json::json!({
                "corpus": paths.corpus,
                "notes": paths.notes,
                "dictionary": paths.dictionary,
                "judgments": paths.judgments,
                "outcome": paths.outcome,
            }));
        }
        Command::Conformance { service, config, stdio, http, requests, timeout_ms } => {
            let service = Service::from(service);
            let t = transport_for(service, config, stdio, http, Duration::from_millis(timeout_ms))?;
            let report = match service {
                Service::Embed => embedding_conformance(t.as_ref(), requests),
                Service::Score => scorer_conformance(t.as_ref(), requests),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                bail!("provider {} failed conformance", t.describe());
            }
        }
        Command::Serve { service, http, dim } => {
            let embedder = HashingEmbedder::new(dim)?;
            match http {
                Some(addr) => serve_http(service.into(), &embedder, &addr)?,
                None => serve_lines(service.into(), &embedder, BufReader::new(io::stdin().lock()), io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVIFUSE_LOG", "info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<evifuse_core::Error>() {
                Some(err @ evifuse_core::Error::Config(_)) => (err.kind(), 2),
                Some(err) => (err.kind(), 1),
                None => ("error", 1),
            };
            eprintln!("{}", serde_json::json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}
