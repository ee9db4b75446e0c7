#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::sync::mpsc;
use std::time::Duration;

use hrc_service::{BackgroundServer, ServiceConfig};
use serde_json::{json, Value};

pub fn start() -> BackgroundServer {
    let config = ServiceConfig {
        bind: "127.0.0.1:0".into(),
        ..Default::default()
    };
    BackgroundServer::start(config, std::env::temp_dir()).unwrap()
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into()
}

/// Status and body text.
pub fn post(server: &BackgroundServer, path: &str, body: Value) -> (u16, String) {
    let mut resp = agent().post(&server.url(path)).send_json(&body).unwrap();
    (
        resp.status().as_u16(),
        resp.body_mut().read_to_string().unwrap(),
    )
}

pub fn get(server: &BackgroundServer, path: &str) -> (u16, String) {
    let mut resp = agent().get(&server.url(path)).call().unwrap();
    (
        resp.status().as_u16(),
        resp.body_mut().read_to_string().unwrap(),
    )
}

pub fn json_of(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

pub fn ndjson(text: &str) -> Vec<Value> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(json_of)
        .collect()
}

/// Submits a command and returns the plan id.
pub fn command(server: &BackgroundServer, text: &str) -> String {
    let (status, body) = post(server, "/command", json!({ "text": text }));
    assert_eq!(status, 200, "{body}");
    json_of(&body)["plan_id"].as_str().unwrap().to_string()
}

/// Approves and returns the ND-JSON events of the execution.
pub fn approve(server: &BackgroundServer, plan_id: &str) -> Vec<Value> {
    let (status, body) = post(server, &format!("/plan/{plan_id}/approve"), json!({}));
    assert_eq!(status, 200, "{body}");
    ndjson(&body)
}

/// Opens `/stream` and forwards each event on a channel.
pub fn subscribe(server: &BackgroundServer) -> mpsc::Receiver<Value> {
    let url = server.url("/stream");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let agent: ureq::Agent = ureq::Agent::config_builder().build().into();
        let resp = agent.get(&url).call().unwrap();
        let reader = BufReader::new(resp.into_body().into_reader());
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if tx.send(serde_json::from_str(&line).unwrap()).is_err() {
                break;
            }
        }
    });
    rx
}

/// Operator drags from the bowl centre to its rim at 60 Hz over 1.5 s and
/// closes the gripper at the end, as the UI would send it.
pub fn demonstrate_bowl_grasp(server: &BackgroundServer, session_id: u64) {
    let (from, to) = ((0.50, -0.20), (0.57, -0.20));
    let n = 91;
    for k in 0..n {
        let s = k as f64 / (n - 1) as f64;
        let blend = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
        let mut sample = json!({
            "session_id": session_id,
            "x": from.0 + blend * (to.0 - from.0),
            "y": from.1 + blend * (to.1 - from.1) + 0.01 * (std::f64::consts::PI * s).sin(),
            "t": 1.5 * s,
        });
        if k == n - 1 {
            sample["gripper"] = json!("close");
        }
        let (status, body) = post(server, "/teleop/sample", sample);
        assert_eq!(status, 204, "{body}");
    }
}

pub fn bowl_suite(n: usize) -> Value {
    json!({ "suite": { "experiments": [
        { "command": "catch the bowl", "n": n, "seed": 0,
          "backend": { "kind": "stub", "error_probability": 0.0 } }
    ] } })
}
