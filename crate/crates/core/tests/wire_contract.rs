//! JSON shapes shared with the trainer and the review UI.

mod common;

use cweguard_core::backend::{mock, CompletionRequest};
use cweguard_core::backend::mock::{MockResponse, MockScript};
use cweguard_core::dataset::parse_jsonl;
use cweguard_core::{LabeledInstance, Verdict};
use serde_json::{json, Value};

fn keys(v: &Value) -> Vec<&str> {
    let mut k: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    k.sort();
    k
}

#[test]
fn instance_record_shape() {
    let inst = LabeledInstance::new("Classify.", "print(1)\n", Verdict::Vulnerable(common::cwe(79)));
    let v = serde_json::to_value(&inst).unwrap();
    assert_eq!(keys(&v), ["input", "instruction", "output"]);
    assert_eq!(v["output"], "Vulnerable - CWE-79");

    let extra = r#"{"instruction":"i","input":"x","output":"Secure","note":"n"}"#;
    assert_eq!(parse_jsonl::<LabeledInstance>(extra).unwrap_err().0, 1);
}

#[test]
fn pair_record_shape() {
    let v = serde_json::to_value(common::pair(89, 0)).unwrap();
    for field in ["cwe", "vulnerable", "fixed", "provenance", "review_state"] {
        assert!(v.get(field).is_some(), "{field} missing from {v}");
    }
}

#[test]
fn completion_request_shape() {
    let mut request = CompletionRequest::new("p", 32);
    request.sampling.extra.insert("top_k".into(), json!(1));
    let v = serde_json::to_value(&request).unwrap();
    assert_eq!(keys(&v), ["max_new_tokens", "prompt", "sampling", "stream"]);
    assert_eq!(v["sampling"], json!({"temperature": 0.0, "top_k": 1}));
    assert_eq!(v["stream"], true);
}

#[tokio::test]
async fn native_stream_lines() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let script = MockScript {
        default: MockResponse::text("Secure now"),
        ..MockScript::default()
    };
    tokio::spawn(mock::serve(script, listener, std::future::pending()));
    let body = reqwest::Client::new()
        .post(format!("{base}/v1/complete"))
        .json(&CompletionRequest::new("p", 8))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let lines: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, [json!({"token": "Secure"}), json!({"token": " now"}), json!({"done": true})]);
}
