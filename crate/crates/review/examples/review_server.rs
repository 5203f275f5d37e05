//! Runs correction on a synthetic corpus, serves the review queue on a local
//! port, answers a few items over plain HTTP, then folds the decisions back
//! into a cleaned label set.
//!
//! cargo run --release -p boxclean-review --example review_server

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};

use boxclean::correction::{truth_oracle_decisions, ReviewStatus};
use boxclean::ledger::CostModel;
use boxclean::noise::{CorpusSpec, NoiseSpec};
use boxclean::pipeline::{finish_review, prepare_review, run_step1_and_correct, synthesize, CleaningConfig};
use boxclean_review::{serve, AppState, ServiceConfig};
use serde_json::Value;

fn call(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> Value {
    let body = body.map(Value::to_string).unwrap_or_default();
    let mut s = TcpStream::connect(addr).expect("connect");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut reply = String::new();
    s.read_to_string(&mut reply).unwrap();
    let (head, body) = reply.split_once("\r\n\r\n").expect("http reply");
    println!("{method} {path} -> {}", head.lines().next().unwrap_or(""));
    serde_json::from_str(body).unwrap_or(Value::Null)
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 6;
    let data = synthesize(&CorpusSpec::default(), 80, 0, &NoiseSpec::paper_like(seed), seed)?;
    let mut cfg = CleaningConfig::default();
    cfg.loop_cfg.x0 = 8;
    cfg.loop_cfg.k = 8;
    cfg.loop_cfg.g = 2;
    let step2 = run_step1_and_correct(&data.crowd, &data.truth, &data.difficulty, &cfg, seed, None)?;

    let dir = tempfile::tempdir()?;
    let store = prepare_review(&step2, dir.path())?;
    let app = AppState::new(store, ServiceConfig::default());
    let shared = app.store();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, app, async {
        let _ = stopped.await;
    }));

    let client = tokio::task::spawn_blocking(move || {
        let page = call(addr, "GET", "/api/queue?status=pending&limit=4", None);
        println!("  {} pending items", page["total"]);
        for item in page["items"].as_array().into_iter().flatten() {
            let id = &item["item_id"];
            let decision = if item["suggestions"].as_array().is_some_and(|s| !s.is_empty()) {
                serde_json::json!({"action": "accept", "suggestion": 0, "reviewer": "demo"})
            } else {
                serde_json::json!({"action": "reject", "reviewer": "demo"})
            };
            let done = call(addr, "POST", &format!("/api/items/{id}/decision"), Some(&decision));
            println!("  item {id} now {}", done["status"]);
        }
        let image = page["items"][0]["image_id"].clone();
        let overlay = call(addr, "GET", &format!("/api/images/{image}/overlay"), None);
        println!("  overlay of image {image} has {} boxes", overlay["labels"].as_array().map_or(0, Vec::len));
        let bad = call(addr, "POST", "/api/items/999999/decision", Some(&serde_json::json!({"action": "reject"})));
        println!("  {bad}");
        println!("  progress {}", call(addr, "GET", "/api/progress", None));
    });
    client.await?;
    let _ = stop.send(());
    server.await??;

    // a truth-backed reviewer takes the rest of the queue
    let mut store = shared.write().await;
    let answers = truth_oracle_decisions(&step2.outcome.corrected, &step2.outcome.queue, &data.truth);
    for (id, decision) in answers {
        if store.item(id).is_some_and(|i| i.status == ReviewStatus::Pending) {
            store.record(id, decision, "truth-oracle", None)?;
        }
    }
    drop(store);

    let (cleaned, ledger, report) = finish_review(dir.path(), &CostModel::default())?;
    println!(
        "cleaned set: {} labels; queue of {} by status {:?}; {:.0} cost units spent",
        cleaned.len(),
        report.queue_size,
        report.resolved,
        ledger.total()
    );
    Ok(())
}
