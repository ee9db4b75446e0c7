mod common;

use std::time::Duration;

use common::*;
use serde_json::{json, Value};

#[test]
fn command_approve_and_report() {
    let server = start();
    let id = command(&server, "catch the cup");

    let (status, body) = get(&server, &format!("/plan/{id}"));
    assert_eq!(status, 200);
    let plan = json_of(&body);
    assert_eq!(plan["total_functions"], 3);
    assert_eq!(plan["layer"], "second");

    let events = approve(&server, &id);
    let kinds: Vec<&str> = events
        .iter()
        .map(|e| e["event"].as_str().unwrap())
        .collect();
    assert_eq!(
        kinds,
        ["step_result", "step_result", "step_result", "report"]
    );
    assert_eq!(events[3]["report"]["success"], true);

    let (status, _) = post(&server, &format!("/plan/{id}/approve"), json!({}));
    assert_eq!(status, 404);
    let (status, _) = get(&server, "/plan/000000000000");
    assert_eq!(status, 404);
}

#[test]
fn illegal_transitions_are_rejected() {
    let server = start();
    let (status, _) = post(
        &server,
        "/teleop/sample",
        json!({ "x": 0.1, "y": 0.0, "t": 0.0 }),
    );
    assert_eq!(status, 409);
    let (status, _) = post(&server, "/teleop/finish", json!({}));
    assert_eq!(status, 409);

    let id = command(&server, "catch the box");
    let (status, _) = post(&server, "/command", json!({ "text": "catch the cup" }));
    assert_eq!(status, 409);
    let (status, _) = post(
        &server,
        "/teleop/begin",
        json!({ "function": "grasp_default", "target": "box" }),
    );
    assert_eq!(status, 409);
    let (status, _) = post(&server, "/plan/ffffffffffff/approve", json!({}));
    assert_eq!(status, 404);

    let (status, body) = post(&server, &format!("/plan/{id}/reject"), json!({}));
    assert_eq!(
        (status, json_of(&body)["mode"].as_str()),
        (200, Some("idle"))
    );
    let (status, _) = post(&server, &format!("/plan/{id}/approve"), json!({}));
    assert_eq!(status, 404);
}

#[test]
fn unknown_command_is_a_plan_failure() {
    let server = start();
    let (status, body) = post(&server, "/command", json!({ "text": "juggle the plates" }));
    assert_eq!(status, 422);
    assert!(json_of(&body)["error"]
        .as_str()
        .unwrap()
        .contains("plan failed"));
    command(&server, "catch the cup");
}

#[test]
fn stream_carries_snapshots_steps_and_report() {
    let server = start();
    let rx = subscribe(&server);
    let opening = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    assert_eq!(opening["event"], "world_snapshot");

    let id = command(&server, "put the cup on the tray");
    approve(&server, &id);

    let mut events: Vec<Value> = Vec::new();
    while let Ok(e) = rx.recv_timeout(Duration::from_secs(10)) {
        let done = e["event"] == "report";
        events.push(e);
        if done {
            break;
        }
    }
    let count = |kind: &str| events.iter().filter(|e| e["event"] == kind).count();
    assert_eq!(count("plan_ready"), 1);
    assert_eq!(count("step_result"), 6);
    assert_eq!(count("report"), 1);

    let executing: Vec<f64> = events
        .iter()
        .filter(|e| e["event"] == "world_snapshot" && e["mode"] == "executing")
        .map(|e| e["world"]["clock"].as_f64().unwrap())
        .collect();
    assert!(executing.len() > 10);
    assert!(
        executing
            .windows(2)
            .all(|w| w[1] >= w[0] && w[1] - w[0] <= 0.1 + 1e-9),
        "{executing:?}"
    );
    let all: Vec<f64> = events
        .iter()
        .filter(|e| e["event"] == "world_snapshot")
        .map(|e| e["world"]["clock"].as_f64().unwrap())
        .collect();
    assert!(all.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn teleop_correction_cycle() {
    let server = start();
    let id = command(&server, "catch the bowl");
    let events = approve(&server, &id);
    let report = &events.last().unwrap()["report"];
    assert_eq!(report["feasible"], false);
    assert_eq!(report["steps"][1]["status"], "infeasible");

    let (status, body) = post(
        &server,
        "/teleop/begin",
        json!({ "function": "grasp_default", "target": "bowl" }),
    );
    assert_eq!(status, 200, "{body}");
    let started = json_of(&body);
    assert_eq!(started["triggered_by_failure"], true);
    let session = started["session_id"].as_u64().unwrap();

    let (status, _) = post(&server, "/command", json!({ "text": "catch the cup" }));
    assert_eq!(status, 409);

    demonstrate_bowl_grasp(&server, session);
    let (status, _) = post(
        &server,
        "/teleop/sample",
        json!({ "session_id": session, "x": 0.5, "y": 0.0, "t": 0.5 }),
    );
    assert_eq!(status, 422, "out-of-order sample");

    let (status, body) = post(&server, "/teleop/finish", json!({ "session_id": session }));
    assert_eq!(status, 200, "{body}");
    let summary = json_of(&body);
    assert_eq!(summary["samples"], 91);
    assert_eq!(summary["shape"], "bowl");

    let (_, body) = get(&server, "/overrides");
    assert_eq!(json_of(&body)["overrides"].as_array().unwrap().len(), 1);

    let id = command(&server, "catch the bowl");
    let events = approve(&server, &id);
    let report = &events.last().unwrap()["report"];
    assert_eq!(report["success"], true, "{report}");
    assert_eq!(report["steps"][1]["overridden"], true);
}

#[test]
fn finishing_with_two_samples_keeps_recording() {
    let server = start();
    let (status, _) = post(
        &server,
        "/teleop/begin",
        json!({ "function": "grasp_default", "target": "bowl" }),
    );
    assert_eq!(status, 200);
    for (k, x) in [0.5, 0.52].into_iter().enumerate() {
        post(
            &server,
            "/teleop/sample",
            json!({ "x": x, "y": -0.2, "t": k as f64 * 0.1 }),
        );
    }
    let (status, body) = post(&server, "/teleop/finish", json!({}));
    assert_eq!(status, 422);
    assert!(body.contains("insufficient"));
    let (status, _) = post(
        &server,
        "/teleop/sample",
        json!({ "x": 0.54, "y": -0.2, "t": 0.2 }),
    );
    assert_eq!(status, 204);
    let (status, _) = post(&server, "/teleop/abort", json!({}));
    assert_eq!(status, 200);
    let (_, body) = get(&server, "/overrides");
    assert!(json_of(&body)["overrides"].as_array().unwrap().is_empty());
}

#[test]
fn registry_and_metrics_endpoints() {
    let server = start();
    let (status, _) = get(&server, "/metrics/latest");
    assert_eq!(status, 404);

    command(&server, "catch the cup");
    let (_, body) = get(&server, "/registry");
    let registry = json_of(&body);
    assert_eq!(registry["entries"].as_array().unwrap().len(), 8);

    let (status, body) = post(&server, "/metrics/run", bowl_suite(20));
    assert_eq!(status, 200, "{body}");
    let (status, csv) = get(&server, "/metrics/latest");
    assert_eq!(status, 200);
    assert_eq!(
        csv,
        "Task,Num,Fns,SR,Exec,FSB\ncatch the bowl,20,2,0.00,1.00,0.00\n"
    );
    assert_eq!(json_of(&body)["csv"], csv);

    let (status, _) = post(&server, "/metrics/run", json!({}));
    assert_eq!(status, 422);
}
