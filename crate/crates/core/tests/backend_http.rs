use std::time::Duration;

use cweguard_core::backend::mock::{self, MockResponse, MockRule, MockScript};
use cweguard_core::backend::{BackendError, CompletionBackend, CompletionRequest, Dialect, HttpCompletionBackend};
use tokio::sync::oneshot;

async fn start(script: MockScript) -> (String, oneshot::Sender<()>) {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    tokio::spawn(mock::serve(script, listener, async {
        let _ = rx.await;
    }));
    (base, tx)
}

fn client(base: &str, dialect: Dialect) -> HttpCompletionBackend {
    HttpCompletionBackend::new(base, dialect, None, Duration::from_secs(10))
}

#[tokio::test]
async fn streamed_tokens_are_stamped_on_arrival() {
    let (base, _stop) = start(MockScript {
        first_token_delay_ms: 253.0,
        inter_token_delay_ms: 166.5,
        default: MockResponse::text("0 1 2 3 4 5 6 7 8 9"),
        ..MockScript::default()
    })
    .await;
    for dialect in [Dialect::Native, Dialect::OpenAi] {
        let result = client(&base, dialect)
            .complete(&CompletionRequest::new("p", 64))
            .await
            .unwrap();
        let t = &result.trace;
        assert_eq!(result.text, "0 1 2 3 4 5 6 7 8 9");
        assert_eq!(t.token_count, 10);
        let first = t.token_arrivals[0] - t.request_sent_at;
        assert!((0.253..0.253 + 0.05).contains(&first), "{dialect:?}: ttft {first}");
        let span = t.token_arrivals[9] - t.token_arrivals[0];
        assert!((span - 9.0 * 0.1665).abs() < 0.05, "{dialect:?}: span {span}");
        assert!(t.token_arrivals.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[tokio::test]
async fn unstreamed_reply_has_one_arrival() {
    let (base, _stop) = start(MockScript {
        default: MockResponse::text("Vulnerable - CWE-79"),
        ..MockScript::default()
    })
    .await;
    for dialect in [Dialect::Native, Dialect::OpenAi] {
        let mut request = CompletionRequest::new("p", 64);
        request.stream = false;
        let result = client(&base, dialect).complete(&request).await.unwrap();
        assert_eq!(result.text, "Vulnerable - CWE-79");
        assert_eq!(result.trace.token_count, 1);
    }
}

#[tokio::test]
async fn prompt_rules_and_token_cap_apply_over_the_wire() {
    let (base, _stop) = start(MockScript {
        rules: vec![MockRule {
            prompt_contains: None,
            prompt_equals: Some("exact".into()),
            response: MockResponse::text("Secure"),
        }],
        default: MockResponse::text("a b c d e f"),
        ..MockScript::default()
    })
    .await;
    let backend = client(&base, Dialect::Native);
    assert_eq!(backend.complete(&CompletionRequest::new("exact", 8)).await.unwrap().text, "Secure");
    let capped = backend.complete(&CompletionRequest::new("other", 3)).await.unwrap();
    assert_eq!(capped.text, "a b c");
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = client(&base, Dialect::Native)
        .complete(&CompletionRequest::new("p", 4))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Transport { elapsed, .. } if elapsed >= 0.0), "{err}");
}

#[tokio::test]
async fn server_failure_is_a_transport_error() {
    let (base, _stop) = start(MockScript {
        default: MockResponse::text("Secure"),
        fail_requests: vec![0],
        ..MockScript::default()
    })
    .await;
    let backend = client(&base, Dialect::OpenAi);
    let err = backend.complete(&CompletionRequest::new("p", 4)).await.unwrap_err();
    assert!(matches!(&err, BackendError::Transport { message, .. } if message.contains("500")), "{err}");
    assert!(backend.complete(&CompletionRequest::new("p", 4)).await.is_ok());
}

#[tokio::test]
async fn stream_without_marker_is_a_protocol_error_with_partial_bytes() {
    let (base, _stop) = start(MockScript {
        default: MockResponse {
            text: Some("half an answer".into()),
            omit_done: true,
            ..MockResponse::default()
        },
        ..MockScript::default()
    })
    .await;
    for dialect in [Dialect::Native, Dialect::OpenAi] {
        let err = client(&base, dialect)
            .complete(&CompletionRequest::new("p", 16))
            .await
            .unwrap_err();
        match err {
            BackendError::Protocol { received, .. } => assert!(received.contains("answer"), "{received}"),
            other => panic!("{dialect:?}: {other}"),
        }
    }
}

#[tokio::test]
async fn malformed_stream_line_is_a_protocol_error() {
    use axum::routing::post;
    let app = axum::Router::new().route("/v1/complete", post(|| async { "{\"token\":\"a\"}\nnot json\n" }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await });
    let err = client(&base, Dialect::Native)
        .complete(&CompletionRequest::new("p", 4))
        .await
        .unwrap_err();
    match err {
        BackendError::Protocol { received, .. } => assert!(received.contains("not json")),
        other => panic!("{other}"),
    }
}

#[tokio::test]
async fn invalid_request_never_reaches_the_network() {
    let backend = client("http://127.0.0.1:9", Dialect::Native);
    let err = backend.complete(&CompletionRequest::new("p", 0)).await.unwrap_err();
    assert!(matches!(err, BackendError::InvalidRequest(_)));
}
