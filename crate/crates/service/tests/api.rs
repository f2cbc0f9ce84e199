mod support;

use std::net::SocketAddr;
use std::sync::Arc;

use proguide_core::Session;
use proguide_service::api::{router, TurnResponse, SUMMARY_HEADER};
use serde_json::{json, Value};
use support::{config, open, QUERIES};

struct Server {
    base: String,
    _rt: tokio::runtime::Runtime,
    _dir: tempfile::TempDir,
}

fn start() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let engine = Arc::new(open(&config(dir.path())));
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router(engine)).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        _rt: rt,
        _dir: dir,
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().new_agent()
}

fn post(s: &Server, path: &str, body: Value) -> (u16, Value) {
    let mut r = agent().post(format!("{}{path}", s.base)).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn get(s: &Server, path: &str) -> (u16, String, Option<String>) {
    let mut r = agent().get(format!("{}{path}", s.base)).call().unwrap();
    let header = r.headers().get(SUMMARY_HEADER).map(|v| v.to_str().unwrap().to_owned());
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap(), header)
}

#[test]
fn session_turn_click_export_flow() {
    let s = start();
    let (status, body) = post(&s, "/v1/sessions", json!({}));
    assert_eq!(status, 201);
    let id = body["id"].as_str().unwrap().to_owned();

    let (status, body) = post(&s, &format!("/v1/sessions/{id}/turns"), json!({"query": QUERIES[0]}));
    assert_eq!(status, 200);
    let turn: TurnResponse = serde_json::from_value(body).unwrap();
    assert_eq!(turn.turn_index, 1);
    assert_eq!(turn.guidance.len(), 3);
    assert!(!turn.shift_detected);

    let (status, body) = post(&s, &format!("/v1/sessions/{id}/turns/1/click"), json!({"guidance_index": 2}));
    assert_eq!((status, body), (200, json!({})));
    let (status, _) = post(&s, &format!("/v1/sessions/{id}/turns/1/click"), json!({"guidance_index": 0}));
    assert_eq!(status, 409);

    let (status, body) = post(&s, &format!("/v1/sessions/{id}/turns"), json!({"query": QUERIES[5]}));
    assert_eq!(status, 200);
    assert_eq!(body["turn_index"], 2);
    assert_eq!(body["shift_detected"], true);

    let (status, text, _) = get(&s, &format!("/v1/sessions/{id}"));
    assert_eq!(status, 200);
    let session: Session = serde_json::from_str(&text).unwrap();
    assert_eq!(session.turns.len(), 2);
    assert_eq!(session.turns[0].clicked_index, Some(2));
    assert_eq!(session.turns[0].guidance.iter().map(|g| g.text.clone()).collect::<Vec<_>>(), turn.guidance);

    let (status, text, summary) = get(&s, "/v1/export/preferences?format=one-pair");
    assert_eq!(status, 200);
    assert_eq!(text.lines().count(), 2);
    let summary: Value = serde_json::from_str(&summary.unwrap()).unwrap();
    assert_eq!(summary["emitted"], 2);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["chosen"].as_str(), Some(turn.guidance[2].as_str()));
    }

    let (status, text, _) = get(&s, "/v1/metrics");
    assert_eq!(status, 200);
    let m: Value = serde_json::from_str(&text).unwrap();
    assert_eq!((m["turns"].as_u64(), m["clicked_turns"].as_u64()), (Some(2), Some(1)));
    assert_eq!(m["ctr"].as_f64(), Some(0.5));
    assert!(m["latency"]["total"]["count"].as_u64() == Some(2));
}

#[test]
fn errors_map_to_status_codes() {
    let s = start();
    let (_, body) = post(&s, "/v1/sessions", json!({}));
    let id = body["id"].as_str().unwrap().to_owned();
    assert_eq!(post(&s, "/v1/sessions/missing/turns", json!({"query": "x"})).0, 404);
    assert_eq!(get(&s, "/v1/sessions/missing").0, 404);
    let (status, body) = post(&s, &format!("/v1/sessions/{id}/turns"), json!({"query": "  "}));
    assert_eq!(status, 400);
    assert!(body["error"].is_string());
    assert_eq!(post(&s, &format!("/v1/sessions/{id}/turns/1/click"), json!({"guidance_index": 0})).0, 404);
    post(&s, &format!("/v1/sessions/{id}/turns"), json!({"query": QUERIES[0]}));
    assert_eq!(post(&s, &format!("/v1/sessions/{id}/turns/1/click"), json!({"guidance_index": 3})).0, 400);
    assert_eq!(get(&s, "/v1/export/preferences?format=three-pair").0, 400);
    let (status, text, _) = get(&s, "/v1/export/preferences?format=k-pair");
    assert_eq!((status, text.as_str()), (200, ""));
}
