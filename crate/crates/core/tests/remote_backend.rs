mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mmrec::backends::{
    BackendError, BackendSuite, Embedder, FirstTokenModel, FirstTokenRequest, GenerateRequest, Generator, Prompt,
    PromptFeatures, RemoteBackend, RemoteConfig, TokenScorer,
};
use serde_json::{json, Value};
use support::stub::StubServer;

const ALL_CAPS: &str = r#"{"capabilities":["generate","token_logprobs","first_token_logprobs","embed"],"embedding_dim":3}"#;

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url.into(),
        timeout_ms: 5_000,
        ..Default::default()
    }
}

fn full_server(generate_failures: usize, calls: Arc<AtomicUsize>) -> StubServer {
    StubServer::start(Arc::new(move |method, path, body| {
        let req: Value = serde_json::from_str(body).unwrap_or(Value::Null);
        match (method, path) {
            ("GET", "/v1/capabilities") => (200, ALL_CAPS.into()),
            ("POST", "/v1/generate") => {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                if n < generate_failures {
                    return (503, "{}".into());
                }
                let prompt = req["messages"][0]["content"].as_str().unwrap_or_default();
                assert!(prompt.contains("Cover: <image>"));
                (200, json!({"text": "Cover: red,round\nContent: toy,car"}).to_string())
            }
            ("POST", "/v1/score") => {
                let n = req["continuation"].as_array().map_or(0, Vec::len);
                (200, json!({"token_logprobs": vec![(0.25f64).ln(); n]}).to_string())
            }
            ("POST", "/v1/first_token") => (
                200,
                json!({"logprobs": {"Yes": (0.6f64).ln(), "No": (0.2f64).ln(), "The": (0.1f64).ln()}}).to_string(),
            ),
            ("POST", "/v1/embed") => (200, json!({"vector": [3.0, 0.0, 4.0]}).to_string()),
            ("POST", "/v1/bad") => (400, "{}".into()),
            _ => (404, "{}".into()),
        }
    }))
}

fn prompt() -> Prompt {
    Prompt {
        text: "Cover: <image>\n\nTitle: toy".into(),
        media: vec!["red car photo".into()],
    }
}

#[test]
fn every_capability_round_trips() {
    let server = full_server(0, Arc::new(AtomicUsize::new(0)));
    let b = RemoteBackend::connect(config(&server.base_url)).unwrap();
    let p = prompt();
    let text = b
        .generate(&GenerateRequest {
            prompt: &p,
            max_tokens: 64,
            item: None,
        })
        .unwrap();
    assert_eq!(text, "Cover: red,round\nContent: toy,car");

    let lps = b.token_logprobs(&["toy".into()], &["a".into(), "b".into()]).unwrap();
    assert_eq!(lps.len(), 2);
    assert!((lps[0] - 0.25f64.ln()).abs() < 1e-12);

    let features = PromptFeatures::default();
    let dist = b
        .first_token(&FirstTokenRequest {
            prompt: &p,
            top_k: 20,
            features: &features,
        })
        .unwrap();
    assert!((dist.0["Yes"] - 0.6).abs() < 1e-12);

    assert_eq!(b.dim(), 3);
    let v = b.embed("anything").unwrap();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[2] - 0.8).abs() < 1e-12);
}

#[test]
fn missing_logprob_capability_fails_at_construction() {
    let server = StubServer::start(Arc::new(|_, path, _| match path {
        "/v1/capabilities" => (200, r#"{"capabilities":["generate","embed"],"embedding_dim":3}"#.into()),
        _ => (500, "{}".into()),
    }));
    let err = RemoteBackend::connect(config(&server.base_url)).unwrap_err();
    assert!(matches!(err, BackendError::Capability(c) if c == "token_logprobs"));
    assert!(BackendSuite::remote(config(&server.base_url)).is_err());
}

#[test]
fn transient_failure_is_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let server = full_server(1, calls.clone());
    let b = RemoteBackend::connect(RemoteConfig {
        retries: 2,
        ..config(&server.base_url)
    })
    .unwrap();
    let p = prompt();
    let req = GenerateRequest {
        prompt: &p,
        max_tokens: 8,
        item: None,
    };
    assert!(b.generate(&req).is_ok());
    assert_eq!(calls.load(Ordering::SeqCst), 2);

    let calls = Arc::new(AtomicUsize::new(0));
    let server = full_server(5, calls.clone());
    let b = RemoteBackend::connect(RemoteConfig {
        retries: 2,
        ..config(&server.base_url)
    })
    .unwrap();
    match b.generate(&req).unwrap_err() {
        BackendError::Unavailable { attempts, .. } => assert_eq!(attempts, 3),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_server_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = RemoteBackend::connect(RemoteConfig {
        retries: 1,
        ..config(&url)
    })
    .unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 2, .. }));
}

#[test]
fn separate_embedding_server() {
    let main = StubServer::start(Arc::new(|_, path, _| match path {
        "/v1/capabilities" => (
            200,
            r#"{"capabilities":["generate","token_logprobs","first_token_logprobs"]}"#.into(),
        ),
        _ => (404, "{}".into()),
    }));
    let emb = StubServer::start(Arc::new(|_, path, _| match path {
        "/v1/capabilities" => (200, r#"{"capabilities":["embed"],"embedding_dim":2}"#.into()),
        "/v1/embed" => (200, r#"{"vector":[0.0,2.0]}"#.into()),
        _ => (404, "{}".into()),
    }));
    assert!(RemoteBackend::connect(config(&main.base_url)).is_err());
    let b = RemoteBackend::connect(RemoteConfig {
        embedding_url: Some(emb.base_url.clone()),
        ..config(&main.base_url)
    })
    .unwrap();
    assert_eq!(b.embed("x").unwrap(), vec![0.0, 1.0]);
}

#[test]
fn client_errors_are_not_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(Arc::new(move |_, path, _| match path {
        "/v1/capabilities" => (200, ALL_CAPS.into()),
        _ => {
            c.fetch_add(1, Ordering::SeqCst);
            (422, "{}".into())
        }
    }));
    let b = RemoteBackend::connect(config(&server.base_url)).unwrap();
    assert!(matches!(b.embed("x").unwrap_err(), BackendError::Protocol(_)));
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}
