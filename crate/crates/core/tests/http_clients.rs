mod common;

use std::time::{Duration, Instant};

use common::{dead_port_url, MockServer, Reply};
use prage::corpus::{build_kb, HttpWikiClient, HttpWikiConfig, KbParams, WikiClient};
use prage::embed::{Embedder, EmbedderConfig, EmbedderKind};
use prage::generator::{generate, BackendConfig, FinishReason, GenerationRun, Mode};
use prage::metrics::ExternalScorer;
use serde_json::json;

fn draft(prompt: &str) -> GenerationRun {
    GenerationRun {
        query_id: "q".into(),
        config_id: "c".into(),
        term: "asthme".into(),
        mode: Mode::BaseSlm,
        backend_model: "m".into(),
        encoder_name: None,
        max_tokens: 25,
        prompt_rendered: prompt.into(),
        context_refs: vec![],
        context_truncated: false,
        output_text: String::new(),
        finish_reason: FinishReason::Stop,
        latency_ms: 0,
        attempts: 0,
        raw_response: None,
    }
}

fn completion(content: &str, finish: &str) -> serde_json::Value {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": finish}]})
}

#[test]
fn chat_backend_sends_openai_request() {
    let srv =
        MockServer::start(|_, _| Reply::json(200, completion("maladie des bronches", "stop")));
    let cfg = BackendConfig::http("biomistral", &srv.url("/v1/chat/completions"));
    let backend = cfg.build().unwrap();
    let run = generate(&cfg, backend.as_ref(), draft("Expliquez : asthme")).unwrap();
    assert_eq!(run.output_text, "maladie des bronches");
    assert_eq!(run.finish_reason, FinishReason::Stop);
    assert_eq!(run.attempts, 1);

    let reqs = srv.requests();
    assert_eq!(reqs[0].method, "POST");
    assert_eq!(reqs[0].target, "/v1/chat/completions");
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["model"], "biomistral");
    assert_eq!(body["max_tokens"], 25);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Expliquez : asthme");
}

#[test]
fn length_finish_is_mapped() {
    let srv = MockServer::start(|_, _| Reply::json(200, completion("a b c", "length")));
    let cfg = BackendConfig::http("m", &srv.url("/"));
    let run = generate(&cfg, cfg.build().unwrap().as_ref(), draft("p")).unwrap();
    assert_eq!(run.finish_reason, FinishReason::Length);
}

#[test]
fn transient_failures_are_retried() {
    let srv = MockServer::start(|_, n| {
        if n < 2 {
            Reply::json(503, json!({"error": "busy"}))
        } else {
            Reply::json(200, completion("ok", "stop"))
        }
    });
    let mut cfg = BackendConfig::http("m", &srv.url("/"));
    cfg.retries = 2;
    let run = generate(&cfg, cfg.build().unwrap().as_ref(), draft("p")).unwrap();
    assert_eq!(run.output_text, "ok");
    assert_eq!(run.attempts, 3);
    assert_eq!(srv.count(), 3);
}

#[test]
fn unreachable_endpoint_gives_error_run_after_all_attempts() {
    let mut cfg = BackendConfig::http("m", &dead_port_url("/v1/chat/completions"));
    cfg.retries = 2;
    cfg.timeout_ms = 2_000;
    let run = generate(&cfg, cfg.build().unwrap().as_ref(), draft("p")).unwrap();
    assert_eq!(run.finish_reason, FinishReason::Error);
    assert_eq!(run.attempts, 3);
    assert_eq!(run.output_text, "");
    assert!(run.raw_response.unwrap()["error"].is_string());
}

#[test]
fn malformed_completion_is_an_error() {
    let srv = MockServer::start(|_, _| Reply::json(200, json!({"choices": []})));
    let cfg = BackendConfig::http("m", &srv.url("/"));
    let err = generate(&cfg, cfg.build().unwrap().as_ref(), draft("p")).unwrap_err();
    assert!(matches!(err, prage::Error::MalformedResponse(_)), "{err}");
    assert_eq!(srv.count(), 1, "malformed responses are not retried");
}

fn remote_embedder(url: String, dim: usize) -> Box<dyn Embedder> {
    EmbedderConfig {
        kind: EmbedderKind::Remote,
        endpoint_url: Some(url),
        model_name: "e5".into(),
        dim,
        timeout_ms: 2_000,
        batch_size: 2,
        retries: 1,
        api_key_env: "PRAGE_TEST_UNSET_KEY".into(),
        record_path: None,
    }
    .build()
    .unwrap()
}

#[test]
fn remote_embedder_batches_and_normalizes() {
    let srv = MockServer::start(|req, _| {
        let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
        let data: Vec<_> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| json!({"embedding": [t.as_str().unwrap().len() as f64, 3.0, 4.0]}))
            .collect();
        Reply::json(200, json!({"data": data}))
    });
    let e = remote_embedder(srv.url("/v1/embeddings"), 3);
    let v = e.embed_batch(&["a", "bb", "ccc"]).unwrap();
    assert_eq!(v.len(), 3);
    assert_eq!(
        srv.count(),
        2,
        "batch_size 2 splits three inputs in two requests"
    );
    for x in &v {
        assert!((x.norm() - 1.0).abs() < 1e-6);
    }
    let expect = 1.0 / (1.0f64 + 9.0 + 16.0).sqrt();
    assert!((f64::from(v[0].values[0]) - expect).abs() < 1e-6);
    let first: serde_json::Value = serde_json::from_str(&srv.requests()[0].body).unwrap();
    assert_eq!(first, json!({"model": "e5", "input": ["a", "bb"]}));
}

#[test]
fn remote_embedder_rejects_wrong_dimension() {
    let srv =
        MockServer::start(|_, _| Reply::json(200, json!({"data": [{"embedding": [1.0, 2.0]}]})));
    let e = remote_embedder(srv.url("/"), 3);
    let err = e.embed_batch(&["a"]).unwrap_err();
    assert!(
        matches!(
            err,
            prage::Error::DimensionMismatch {
                expected: 3,
                actual: 2
            }
        ),
        "{err}"
    );
}

#[test]
fn remote_embedder_gives_up_on_dead_endpoint() {
    let e = remote_embedder(dead_port_url("/"), 3);
    assert!(matches!(
        e.embed_batch(&["a"]),
        Err(prage::Error::Embedding { .. })
    ));
}

fn wiki_server() -> MockServer {
    MockServer::start(|req, _| {
        let t = &req.target;
        if t.contains("list=search") {
            Reply::json(
                200,
                json!({"query": {"search": [{"title": "Asthme"}, {"title": "Liste des maladies"}, {"title": "Asthme d'effort"}]}}),
            )
        } else if t.contains("Asthme%20d") || t.contains("Asthme+d") {
            Reply::json(
                200,
                json!({"query": {"pages": [{"title": "Asthme d'effort", "missing": true}]}}),
            )
        } else {
            Reply::json(
                200,
                json!({"query": {"pages": [{
                    "title": "Asthme",
                    "extract": "L'asthme est une maladie des bronches.\n\nElle gêne la respiration.\nTroisième ligne.",
                    "fullurl": "https://fr.wikipedia.org/wiki/Asthme"
                }]}}),
            )
        }
    })
}

fn wiki_cfg(srv: &MockServer) -> HttpWikiConfig {
    HttpWikiConfig {
        base_url: srv.url("/{lang}/w/api.php"),
        min_interval_ms: 0,
        backoff_ms: 10,
        timeout_ms: 2_000,
        ..HttpWikiConfig::default()
    }
}

#[test]
fn wiki_client_builds_kb_with_title_filter_and_line_cap() {
    let srv = wiki_server();
    let client = HttpWikiClient::new(wiki_cfg(&srv));
    let params = KbParams {
        line_limit: 2,
        workers: 1,
        ..KbParams::default()
    };
    let kb = build_kb(&["asthme".to_string()], &client, &params).unwrap();
    assert_eq!(kb.documents.len(), 1);
    let d = &kb.documents[0];
    assert_eq!(d.page_title, "Asthme");
    assert_eq!(
        d.lines,
        vec![
            "L'asthme est une maladie des bronches.",
            "Elle gêne la respiration."
        ]
    );
    assert_eq!(d.source_url, "https://fr.wikipedia.org/wiki/Asthme");

    let reqs = srv.requests();
    assert!(reqs[0].target.starts_with("/fr/w/api.php?"));
    assert!(reqs[0].target.contains("srsearch=asthme"));
    assert!(
        reqs.iter().all(|r| !r.target.contains("Liste")),
        "non-matching titles are not fetched"
    );
}

#[test]
fn wiki_cache_serves_offline() {
    let srv = wiki_server();
    let cache = tempfile::tempdir().unwrap();
    let mut cfg = wiki_cfg(&srv);
    cfg.cache_dir = Some(cache.path().to_path_buf());
    let online = HttpWikiClient::new(cfg.clone());
    let first = online.page("fr", "Asthme").unwrap().unwrap();
    let n = srv.count();

    cfg.offline = true;
    cfg.base_url = dead_port_url("/{lang}");
    let offline = HttpWikiClient::new(cfg);
    let again = offline.page("fr", "Asthme").unwrap().unwrap();
    assert_eq!(first, again, "cached fetched_at is replayed too");
    assert_eq!(srv.count(), n);
    assert!(offline.search("fr", "inconnu", 5).is_err());
}

#[test]
fn wiki_retry_after_is_honored() {
    let srv = MockServer::start(|_, n| {
        if n == 0 {
            Reply::json(429, json!({})).with_header("Retry-After", "1")
        } else {
            Reply::json(200, json!({"query": {"search": []}}))
        }
    });
    let client = HttpWikiClient::new(wiki_cfg(&srv));
    let t = Instant::now();
    assert!(client.search("fr", "x", 3).unwrap().is_empty());
    assert!(t.elapsed() >= Duration::from_millis(900));
    assert_eq!(srv.count(), 2);
}

#[test]
fn wiki_client_error_status_is_not_retried() {
    let srv = MockServer::start(|_, _| Reply::json(404, json!({})));
    let client = HttpWikiClient::new(wiki_cfg(&srv));
    assert!(client.search("fr", "x", 3).is_err());
    assert_eq!(srv.count(), 1);
}

#[test]
fn wiki_failures_are_reported_per_term() {
    let mut cfg = HttpWikiConfig {
        base_url: dead_port_url("/{lang}"),
        min_interval_ms: 0,
        backoff_ms: 1,
        retries: 1,
        ..HttpWikiConfig::default()
    };
    cfg.timeout_ms = 1_000;
    let client = HttpWikiClient::new(cfg);
    let kb = build_kb(&["a".into(), "b".into()], &client, &KbParams::default()).unwrap();
    assert!(kb.documents.is_empty());
    assert_eq!(kb.failures.len(), 2);
}

#[test]
fn external_scorer_protocol() {
    let srv = MockServer::start(|req, n| {
        if n == 0 {
            return Reply::json(500, json!({}));
        }
        let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(body["candidate"], "a b");
        assert_eq!(body["reference"], "a c");
        Reply::json(200, json!({"score": 0.42}))
    });
    let s = ExternalScorer::new(&srv.url("/score"), 2_000, 1);
    assert_eq!(s.score("a b", "a c").unwrap(), 0.42);
    assert_eq!(srv.count(), 2);

    let bad = MockServer::start(|_, _| Reply::json(200, json!({"score": "high"})));
    assert!(ExternalScorer::new(&bad.url("/"), 2_000, 0)
        .score("a", "b")
        .is_err());
}
