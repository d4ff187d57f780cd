mod common;

use std::sync::{Arc, Mutex};

use cweguard_core::review::api::{serve, ApiErrorBody, ApiState, ItemDetail};
use cweguard_core::review::{CweProgress, PendingPage, ReviewItem, ReviewStore};
use cweguard_core::Catalog;
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Server {
    base: String,
    store: Arc<Mutex<ReviewStore>>,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
    _dir: tempfile::TempDir,
}

impl Server {
    async fn start(pairs: usize, assets: Option<std::path::PathBuf>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReviewStore::open(dir.path().join("store")).unwrap();
        let items: Vec<_> = (0..pairs)
            .map(|i| common::pair(if i % 2 == 0 { 78 } else { 89 }, i))
            .collect();
        store.enqueue(&items).unwrap();
        let store = Arc::new(Mutex::new(store));
        let state = ApiState {
            store: store.clone(),
            catalog: Arc::new(Catalog::embedded()),
            default_reviewer: "tester".into(),
            assets,
        };
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(serve(listener, state, async {
            let _ = rx.await;
        }));
        Self {
            base,
            store,
            stop: Some(tx),
            handle,
            _dir: dir,
        }
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.await.unwrap().unwrap();
    }
}

fn all_checks() -> Value {
    json!({
        "classification_correct": {"passed": true},
        "fix_valid": {"passed": true},
        "realistic": {"passed": true}
    })
}

async fn post(client: &reqwest::Client, url: String, body: Value) -> reqwest::Response {
    client.post(url).json(&body).send().await.unwrap()
}

#[tokio::test]
async fn review_flow_over_http() {
    let server = Server::start(5, None).await;
    let client = reqwest::Client::new();
    let base = &server.base;

    let page: PendingPage = client
        .get(format!("{base}/api/pending?page_size=10"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(page.total, 5);
    let ids: Vec<String> = page.items.iter().map(|i| i.id.0.clone()).collect();

    let detail: ItemDetail = client
        .get(format!("{base}/api/items/{}", ids[0]))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(detail.cwe_entry.as_ref().map(|e| e.id), Some(detail.item.pair.cwe));
    assert!(!detail.diff.is_empty());

    // missing checks are refused server-side
    let resp = post(&client, format!("{base}/api/items/{}/decision", ids[0]), json!({"decision": {"kind": "accept"}})).await;
    assert_eq!(resp.status(), 422);
    let err: ApiErrorBody = resp.json().await.unwrap();
    assert_eq!(err.code, "validation");

    for id in &ids[..3] {
        let resp = post(
            &client,
            format!("{base}/api/items/{id}/decision"),
            json!({"checks": all_checks(), "decision": {"kind": "accept"}, "reviewer": "alice"}),
        )
        .await;
        assert_eq!(resp.status(), 200);
        let item: ReviewItem = resp.json().await.unwrap();
        assert!(item.pair.review_state.is_accepted());
        assert_eq!(item.decision.unwrap().reviewer, "alice");
    }

    let resp = post(
        &client,
        format!("{base}/api/items/{}/decision", ids[3]),
        json!({"decision": {"kind": "reject", "reason": "fix is incomplete"}}),
    )
    .await;
    assert_eq!(resp.status(), 200);
    let item: ReviewItem = resp.json().await.unwrap();
    assert_eq!(item.decision.unwrap().reviewer, "tester");

    // an edit whose fixed side does not parse reports the offending line
    let resp = post(
        &client,
        format!("{base}/api/items/{}/decision", ids[4]),
        json!({"checks": all_checks(), "decision": {
            "kind": "edit",
            "vulnerable": "import os\nos.system(input())\n",
            "fixed": "import subprocess\n\ndef f(:\n    pass\n"
        }}),
    )
    .await;
    assert_eq!(resp.status(), 422);
    let err: ApiErrorBody = resp.json().await.unwrap();
    assert_eq!(err.line, Some(3), "{}", err.message);

    let resp = post(
        &client,
        format!("{base}/api/items/{}/decision", ids[4]),
        json!({"checks": all_checks(), "decision": {
            "kind": "edit",
            "vulnerable": "import os\nos.system(input())\n",
            "fixed": "import subprocess\nsubprocess.run(['ls', input()])\n"
        }}),
    )
    .await;
    assert_eq!(resp.status(), 200);

    // decided items cannot be decided again
    let resp = post(
        &client,
        format!("{base}/api/items/{}/decision", ids[0]),
        json!({"decision": {"kind": "reject", "reason": "again"}}),
    )
    .await;
    assert_eq!(resp.status(), 409);

    let resp = client.get(format!("{base}/api/items/0000000000000000")).send().await.unwrap();
    assert_eq!(resp.status(), 404);

    let progress: Vec<CweProgress> = client
        .get(format!("{base}/api/progress"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let overall = progress.last().unwrap();
    assert_eq!((overall.cwe, overall.pending, overall.accepted, overall.rejected), (None, 0, 4, 1));

    assert_eq!(server.store.lock().unwrap().audit_len(), 5);
    server.stop().await;
}

#[tokio::test]
async fn pending_query_validation_and_filter() {
    let server = Server::start(6, None).await;
    let client = reqwest::Client::new();
    let base = &server.base;

    let page: PendingPage = client
        .get(format!("{base}/api/pending?cwe=cwe-89&page=2&page_size=2"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!((page.total, page.total_pages, page.items.len()), (3, 2, 1));
    assert!(page.items.iter().all(|i| i.cwe.number() == 89));

    for query in ["cwe=bogus", "page=0", "page_size=0", "page_size=501"] {
        let resp = client.get(format!("{base}/api/pending?{query}")).send().await.unwrap();
        assert_eq!(resp.status(), 400, "{query}");
        let err: ApiErrorBody = resp.json().await.unwrap();
        assert_eq!(err.code, "bad_request");
    }
    server.stop().await;
}

#[tokio::test]
async fn static_assets_and_placeholder() {
    let server = Server::start(1, None).await;
    let body = reqwest::get(format!("{}/", server.base)).await.unwrap().text().await.unwrap();
    assert!(body.contains("/api/"));
    server.stop().await;

    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<h1>review</h1>").unwrap();
    std::fs::write(assets.path().join("app.js"), "console.log(1)").unwrap();
    let server = Server::start(1, Some(assets.path().to_owned())).await;
    let resp = reqwest::get(format!("{}/", server.base)).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/html; charset=utf-8");
    assert_eq!(resp.text().await.unwrap(), "<h1>review</h1>");
    let resp = reqwest::get(format!("{}/app.js", server.base)).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/javascript");
    let resp = reqwest::get(format!("{}/missing.css", server.base)).await.unwrap();
    assert_eq!(resp.status(), 404);
    server.stop().await;
}
