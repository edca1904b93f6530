use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use wstta_core::detector::{DetectorConfig, DetectorModel};
use wstta_core::scene::{decode_png, CATEGORIES};
use wstta_core::session::{RunReport, SessionConfig, SessionEvent};
use wstta_server::{read_event_log, router, AppState, EventRecord, ServerConfig};

struct Server {
    base: String,
    data_dir: PathBuf,
    _tmp: tempfile::TempDir,
    agent: ureq::Agent,
}

fn start() -> Server {
    let tmp = tempfile::tempdir().unwrap();
    let model_path = tmp.path().join("model.ckpt");
    DetectorModel::new(DetectorConfig::reference(), 7, &CATEGORIES)
        .unwrap()
        .save(&model_path)
        .unwrap();
    let data_dir = tmp.path().join("data");
    let base = SessionConfig {
        budget: 5,
        eval_every: 2,
        test_frames: 4,
        ..SessionConfig::default()
    };
    let state = AppState::new(ServerConfig {
        model: Some(model_path),
        base,
        data_dir: data_dir.clone(),
    })
    .unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .new_agent();
    Server {
        base: format!("http://{addr}"),
        data_dir,
        _tmp: tmp,
        agent,
    }
}

impl Server {
    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        let status = r.status().as_u16();
        (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
    }

    fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body.to_string())
            .unwrap();
        let status = r.status().as_u16();
        (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
    }

    fn create(&self, body: Value) -> String {
        let (status, v) = self.post("/api/sessions", &body);
        assert_eq!(status, 201, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    /// Fetch/label until the budget is spent; returns the label responses.
    fn drive(&self, id: &str) -> Vec<Value> {
        let mut out = Vec::new();
        loop {
            let (status, frame) = self.get(&format!("/api/sessions/{id}/frame"));
            assert_eq!(status, 200, "{frame}");
            if frame["status"] == "end_of_stream" {
                return out;
            }
            let (status, v) = self.post(
                &format!("/api/sessions/{id}/label"),
                &json!({ "frame_id": frame["frame_id"], "categories": null }),
            );
            assert_eq!(status, 200, "{v}");
            out.push(v);
        }
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(format!("{id}.ndjson"))
    }
}

fn parse_sse(text: &str) -> Vec<EventRecord> {
    text.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| serde_json::from_str(d.trim_start()).unwrap())
        .collect()
}

#[test]
fn health_reports_ok() {
    let s = start();
    let (status, v) = s.get("/api/health");
    assert_eq!(status, 200);
    assert_eq!(v["status"], "ok");
}

#[test]
fn observe_once_protocol() {
    let s = start();
    let id = s.create(json!({ "method": "wstta" }));

    let (status, frame) = s.get(&format!("/api/sessions/{id}/frame"));
    assert_eq!(status, 200);
    assert_eq!(frame["status"], "awaiting_label");
    assert_eq!(frame["t"], 0);
    let cats: Vec<&str> = frame["categories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    assert_eq!(cats, CATEGORIES);
    assert!(frame["prediction"].is_array());
    let png = base64::engine::general_purpose::STANDARD
        .decode(frame["image_png"].as_str().unwrap())
        .unwrap();
    let img = decode_png(&png).unwrap();
    assert_eq!(img.shape(), &[3, 64, 64]);
    let fid = frame["frame_id"].as_u64().unwrap();

    // second fetch before labelling
    let (status, v) = s.get(&format!("/api/sessions/{id}/frame"));
    assert_eq!(status, 409);
    assert_eq!(v["error"], "conflict");

    let (status, v) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": fid, "categories": ["disc", "hexagon"] }),
    );
    assert_eq!(status, 422);
    assert_eq!(v["error"], "unknown_category");

    let (status, v) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": fid + 1, "categories": ["disc"] }),
    );
    assert_eq!(status, 404);
    assert_eq!(v["error"], "unknown_frame");

    let (status, v) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": fid, "categories": ["disc", "square"] }),
    );
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["step"]["t"], 0);
    assert_eq!(v["step"]["weak_label"], json!(["disc", "square"]));
    assert_eq!(v["finished"], false);

    let (status, v) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": fid, "categories": ["disc"] }),
    );
    assert_eq!(status, 409);
    assert_eq!(v["error"], "conflict");

    let (_, m) = s.get(&format!("/api/sessions/{id}/metrics"));
    assert_eq!(m["steps"], 1);
    assert_eq!(m["awaiting_label"], Value::Null);

    let rest = s.drive(&id);
    assert_eq!(rest.len(), 4);
    assert_eq!(rest.last().unwrap()["finished"], true);

    let (status, v) = s.get(&format!("/api/sessions/{id}/frame"));
    assert_eq!(status, 200);
    assert_eq!(v["status"], "end_of_stream");
    assert_eq!(v["budget"], 5);

    let (_, m) = s.get(&format!("/api/sessions/{id}/metrics"));
    assert_eq!(m["steps"], 5);
    assert_eq!(m["finished"], true);
    assert_eq!(m["history"].as_array().unwrap().len(), 5);
    // cadence 2 over 5 steps: t=2, t=4, then the final pair
    let ts: Vec<u64> = m["evals"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["t"].as_u64().unwrap())
        .collect();
    assert_eq!(ts, [2, 4, 5, 5]);

    let ckpt = s.data_dir.join(format!("{id}-step0005.ckpt"));
    assert!(ckpt.exists());
    let final_digest = m["history"][4]["model_digest"].as_str().unwrap();
    assert_eq!(DetectorModel::load(&ckpt).unwrap().digest(), final_digest);
}

#[test]
fn errors_are_machine_readable() {
    let s = start();
    let (status, v) = s.get("/api/sessions/nope/metrics");
    assert_eq!(status, 404);
    assert_eq!(v["error"], "unknown_session");

    for body in [
        json!({ "omega": 1.5 }),
        json!({ "method": "magic" }),
        json!({ "budget": 0 }),
        json!({ "noise": -0.1 }),
        json!({ "tau": 2.0 }),
        json!({ "bogus": 1 }),
        json!({ "model": "/does/not/exist.ckpt" }),
    ] {
        let (status, v) = s.post("/api/sessions", &body);
        assert_eq!(status, 422, "{body} -> {v}");
        assert!(v["error"].is_string() && v["message"].is_string(), "{v}");
    }

    let id = s.create(json!({ "auto_oracle": false }));
    let (_, frame) = s.get(&format!("/api/sessions/{id}/frame"));
    let (status, v) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": frame["frame_id"], "categories": null }),
    );
    assert_eq!(status, 422, "{v}");
    // the frame is still waiting
    let (status, _) = s.post(
        &format!("/api/sessions/{id}/label"),
        &json!({ "frame_id": frame["frame_id"], "categories": [] }),
    );
    assert_eq!(status, 200);
}

#[test]
fn event_stream_is_ordered_and_exactly_once() {
    let s = start();
    let id = s.create(json!({ "method": "dua", "budget": 4 }));

    // live subscriber connected before any step
    let url = format!("{}/api/sessions/{id}/events", s.base);
    let agent = s.agent.clone();
    let (tx, rx) = mpsc::channel();
    let reader = std::thread::spawn(move || {
        let resp = agent.get(url).call().unwrap();
        tx.send(()).unwrap();
        let mut lines = BufReader::new(resp.into_body().into_reader()).lines();
        let mut got = Vec::new();
        while let Some(Ok(l)) = lines.next() {
            if let Some(d) = l.strip_prefix("data:") {
                let rec: EventRecord = serde_json::from_str(d.trim_start()).unwrap();
                let done = matches!(
                    &rec.event,
                    SessionEvent::EvalCompleted(e) if e.scope == wstta_core::session::EvalScope::Online
                );
                got.push(rec);
                if done {
                    break;
                }
            }
        }
        got
    });
    rx.recv().unwrap();
    s.drive(&id);
    let live = reader.join().unwrap();

    let mut r = s
        .agent
        .get(format!("{}/api/sessions/{id}/events?follow=false", s.base))
        .call()
        .unwrap();
    assert!(r
        .headers()
        .get("content-type")
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    let backlog = parse_sse(&r.body_mut().read_to_string().unwrap());
    let logged = read_event_log(&s.log_path(&id)).unwrap();

    assert_eq!(live, backlog);
    assert_eq!(live, logged);
    for (i, rec) in live.iter().enumerate() {
        assert_eq!(rec.seq, i as u64);
        assert_eq!(rec.session_id, id);
    }
    assert!(matches!(live[0].event, SessionEvent::SessionCreated { .. }));
    // served → received → completed for every step
    let kinds: Vec<&str> = live
        .iter()
        .filter_map(|r| match r.event {
            SessionEvent::FrameServed { .. } => Some("f"),
            SessionEvent::LabelReceived { .. } => Some("l"),
            SessionEvent::StepCompleted(_) => Some("s"),
            _ => None,
        })
        .collect();
    assert_eq!(kinds.concat(), "fls".repeat(4));

    // a late subscriber gets the same backlog
    let mut r = s
        .agent
        .get(format!("{}/api/sessions/{id}/events?follow=false", s.base))
        .call()
        .unwrap();
    assert_eq!(parse_sse(&r.body_mut().read_to_string().unwrap()), live);
}

#[test]
fn event_log_replays_to_metrics_without_pixels() {
    let s = start();
    let id = s.create(json!({ "method": "wstta", "noise": 0.3, "seed": 3 }));
    s.drive(&id);
    let (_, metrics) = s.get(&format!("/api/sessions/{id}/metrics"));

    let path = s.log_path(&id);
    let events: Vec<SessionEvent> = read_event_log(&path)
        .unwrap()
        .into_iter()
        .map(|r| r.event)
        .collect();
    let report = RunReport::from_events(&events).unwrap();
    assert_eq!(serde_json::to_value(&report.steps).unwrap(), metrics["history"]);
    assert_eq!(serde_json::to_value(&report.evals).unwrap(), metrics["evals"]);
    let m = report.momentum_trajectory();
    assert_eq!(m.len(), 5);

    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(!contains_key(&v, "image") && !contains_key(&v, "image_png"), "{line}");
        assert!(line.len() < 4096, "suspiciously long log line");
    }
}

fn contains_key(v: &Value, key: &str) -> bool {
    match v {
        Value::Object(m) => m.contains_key(key) || m.values().any(|x| contains_key(x, key)),
        Value::Array(a) => a.iter().any(|x| contains_key(x, key)),
        _ => false,
    }
}

#[test]
fn identical_sessions_are_identical() {
    let s = start();
    let a = s.create(json!({ "method": "wstta", "seed": 11, "noise": 0.2 }));
    let b = s.create(json!({ "method": "wstta", "seed": 11, "noise": 0.2 }));
    s.drive(&a);
    s.drive(&b);
    let (_, ma) = s.get(&format!("/api/sessions/{a}/metrics"));
    let (_, mb) = s.get(&format!("/api/sessions/{b}/metrics"));
    assert_eq!(ma["history"], mb["history"]);
    assert_eq!(ma["evals"], mb["evals"]);

    let strip = |p: &Path| -> Vec<SessionEvent> {
        read_event_log(p).unwrap().into_iter().map(|r| r.event).collect()
    };
    assert_eq!(strip(&s.log_path(&a)), strip(&s.log_path(&b)));
}
