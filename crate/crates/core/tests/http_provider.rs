mod criteria;
mod oracles;

use evifuse_core::embedding::Embedder;
use std::thread;
use std::time::Duration;

use evifuse_core::embedding::HashingEmbedder;
use evifuse_core::pipeline;
use evifuse_core::provider::{
    builtin_response, embedding_conformance, scorer_conformance, HttpTransport, RemoteEmbedder, RetryPolicy, Service,
};

/// Serves the builtin provider on an ephemeral port until the process exits.
fn spawn(service: Service, dim: usize) -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    thread::spawn(move || {
        let embedder = HashingEmbedder::new(dim).unwrap();
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let lines: Vec<String> = body
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| builtin_response(service, &embedder, l).unwrap())
                .collect();
            let reply = if req.url() == service.path() {
                tiny_http::Response::from_string(lines.join("\n") + "\n")
            } else {
                tiny_http::Response::from_string("not found").with_status_code(404)
            };
            let _ = req.respond(reply);
        }
    });
    url
}

#[test]
fn http_providers_pass_conformance() {
    for service in [Service::Embed, Service::Score] {
        let t = HttpTransport::new(&spawn(service, 32), service, Duration::from_secs(10));
        let report = match service {
            Service::Embed => embedding_conformance(&t, 50),
            Service::Score => scorer_conformance(&t, 50),
        };
        assert!(report.passed(), "{service:?}: {:?}", report.checks);
    }
}

#[test]
fn remote_embeddings_equal_the_builtin() {
    let t = HttpTransport::new(&spawn(Service::Embed, 24), Service::Embed, Duration::from_secs(10));
    let remote = RemoteEmbedder::new(Box::new(t), 4, RetryPolicy::default());
    let texts = ["chest pain", "", "no fever or cough", "renal failure renal", "a b c d e f"];
    let local = HashingEmbedder::new(24).unwrap();
    for (text, v) in texts.iter().zip(remote.embed(&texts).unwrap()) {
        assert_eq!(v, local.embed_one(text));
    }
}

#[test]
fn pipeline_over_http_matches_the_builtin_run() {
    let url = spawn(Service::Embed, 128);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let local = criteria::bundled_config(a.path());
    let mut remote = criteria::bundled_config(b.path());
    remote.providers.embedder = pipeline::config::EmbedderEndpoint::Http { url };
    pipeline::run(&local).unwrap();
    pipeline::run(&remote).unwrap();
    let la = pipeline::Layout::new(&local);
    let lb = pipeline::Layout::new(&remote);
    assert_eq!(std::fs::read(&la.predictions).unwrap(), std::fs::read(&lb.predictions).unwrap());
    assert_eq!(std::fs::read(&la.doc_embeddings).unwrap(), std::fs::read(&lb.doc_embeddings).unwrap());
}
