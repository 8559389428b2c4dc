//! Talks to an HTTP model server through the remote backend. A tiny
//! in-process server stands in for the real one.

#[path = "../tests/support/stub.rs"]
mod stub;

use std::sync::Arc;

use mmrec::backends::{Embedder, FirstTokenModel, FirstTokenRequest, GenerateRequest, Generator, PromptFeatures, RemoteBackend, RemoteConfig, TokenScorer};
use mmrec::corpus::Item;
use mmrec::summarizer::{parse_summary, render_summary_prompt};
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = stub::StubServer::start(Arc::new(|_method, path, body| {
        let req: Value = serde_json::from_str(body).unwrap_or(Value::Null);
        let reply = match path {
            "/v1/capabilities" => json!({
                "capabilities": ["generate", "token_logprobs", "first_token_logprobs", "embed"],
                "embedding_dim": 4
            }),
            "/v1/generate" => json!({"text": "Cover: wooden, rainbow\nContent: stacking, rings, toddler"}),
            "/v1/score" => {
                let n = req["continuation"].as_array().map_or(0, Vec::len);
                json!({"token_logprobs": vec![-1.5; n]})
            }
            "/v1/first_token" => json!({"logprobs": {"Yes": -0.4, "No": -1.2}}),
            "/v1/embed" => json!({"vector": [1.0, 2.0, 2.0, 0.0]}),
            _ => return (404, "{}".into()),
        };
        (200, reply.to_string())
    }));

    let backend = RemoteBackend::connect(RemoteConfig {
        base_url: server.base_url.clone(),
        ..Default::default()
    })?;
    let item = Item {
        item_id: "B01".into(),
        title: "Rainbow stacker".into(),
        description: "Seven wooden rings for toddlers.".into(),
        image_ref: "covers/B01.jpg".into(),
    };
    let prompt = render_summary_prompt(&item);
    let text = backend.generate(&GenerateRequest {
        prompt: &prompt,
        max_tokens: 64,
        item: Some(&item),
    })?;
    println!("summary: {:?}", parse_summary(&text, &item.item_id)?);
    println!("log-probs: {:?}", backend.token_logprobs(&["wooden".into()], &["seven".into(), "rings".into()])?);
    let dist = backend.first_token(&FirstTokenRequest {
        prompt: &prompt,
        top_k: 20,
        features: &PromptFeatures::default(),
    })?;
    println!("first token: {:?}", dist.0);
    println!("embedding (dim {}): {:?}", backend.dim(), backend.embed("rings")?);
    Ok(())
}
