use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use keyhand_core::session::{Record, SessionLog};
use keyhand_host::config::RunConfig;
use keyhand_host::serve::{start, ServeOptions, ServerHandle};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn server(record: Option<std::path::PathBuf>) -> ServerHandle {
    let opts = ServeOptions {
        addr: ([127, 0, 0, 1], 0).into(),
        record,
        snapshot_rate: 20.0,
        speed: 4.0,
    };
    start(RunConfig::default(), 5, opts).await.unwrap()
}

async fn connect(h: &ServerHandle) -> Ws {
    connect_async(format!("ws://{}", h.addr)).await.unwrap().0
}

async fn next_json(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server went quiet")
            .expect("stream ended")
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn next_of(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Value {
    loop {
        let v = next_json(ws).await;
        if pred(&v) {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

#[tokio::test]
async fn hello_echoes_config() {
    let h = server(None).await;
    let mut ws = connect(&h).await;
    let hello = next_json(&mut ws).await;
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["protocol"], 1);
    assert_eq!(hello["role"], "controller");
    assert_eq!(hello["seed"], 5);
    assert_eq!(hello["tick_rate"], 100.0);
    assert_eq!(hello["snapshot_rate"], 20.0);
    assert_eq!(hello["config"]["seed"], 5);
    assert_eq!(hello["config"]["firmware"]["stall_window"], 8);
    assert!(hello["keybed"]["keys"].as_array().unwrap().len() >= 9);
    let snap = next_of(&mut ws, |v| v["type"] == "snapshot").await;
    assert_eq!(snap["world"]["angles"].as_array().unwrap().len(), 7);
    drop(ws);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn flex_command_reaches_telemetry_in_time() {
    let h = server(None).await;
    let mut ws = connect(&h).await;
    next_json(&mut ws).await;
    send(
        &mut ws,
        json!({"type": "command", "id": 1, "command": {"kind": "joint", "joint": "Index", "target": 255, "pwm": 255}}),
    )
    .await;
    let ack = next_of(&mut ws, |v| {
        v["type"] == "event" && v["event"]["kind"] == "ack"
    })
    .await;
    assert_eq!(ack["event"]["id"], 1);
    let sent = ack["t"].as_f64().unwrap();
    let snap = next_of(&mut ws, |v| {
        v["type"] == "snapshot" && !v["telemetry"]["channels"][1]["active"].is_null()
    })
    .await;
    let seen = snap["t"].as_f64().unwrap();
    // latency bound + one snapshot period + one tick
    let bound = 0.1 + 1.0 / 20.0 + 0.01;
    assert!(
        seen - sent <= bound + 1e-9,
        "target visible after {:.3} s",
        seen - sent
    );
    assert!(seen - sent >= 0.05 - 1e-9);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn second_client_is_read_only() {
    let h = server(None).await;
    let mut a = connect(&h).await;
    assert_eq!(next_json(&mut a).await["role"], "controller");
    let mut b = connect(&h).await;
    assert_eq!(next_json(&mut b).await["role"], "observer");
    send(
        &mut b,
        json!({"type": "command", "command": {"kind": "splay", "level": 2}}),
    )
    .await;
    let err = next_of(&mut b, |v| v["type"] == "error").await;
    assert_eq!(err["code"], "read_only");
    // observers still receive the stream
    next_of(&mut b, |v| v["type"] == "snapshot").await;
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn protocol_violation_closes_with_code() {
    let h = server(None).await;
    let mut ws = connect(&h).await;
    next_json(&mut ws).await;
    ws.send(Message::text("{not json")).await.unwrap();
    let err = next_of(&mut ws, |v| v["type"] == "error").await;
    assert_eq!(err["code"], "protocol_violation");
    let close = loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .unwrap()
        {
            Some(Ok(Message::Close(frame))) => break frame,
            Some(Ok(_)) => continue,
            other => panic!("expected close, got {other:?}"),
        }
    };
    assert_eq!(u16::from(close.unwrap().code), 4001);

    // the server keeps serving; the controller slot was freed
    let mut again = connect(&h).await;
    assert_eq!(next_json(&mut again).await["role"], "controller");
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn invalid_command_reported_not_fatal() {
    let h = server(None).await;
    let mut ws = connect(&h).await;
    next_json(&mut ws).await;
    send(
        &mut ws,
        json!({"type": "command", "command": {"kind": "splay", "level": 9}}),
    )
    .await;
    let err = next_of(&mut ws, |v| v["type"] == "error").await;
    assert_eq!(err["code"], "invalid_command");
    send(
        &mut ws,
        json!({"type": "command", "id": 3, "command": {"kind": "splay", "level": 4}}),
    )
    .await;
    let ev = next_of(&mut ws, |v| {
        v["type"] == "event" && v["event"]["kind"] == "splay"
    })
    .await;
    assert_eq!(ev["event"]["level"], 4);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn live_session_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.jsonl");
    let h = server(Some(path.clone())).await;
    let mut ws = connect(&h).await;
    next_json(&mut ws).await;
    send(
        &mut ws,
        json!({"type": "command", "command": {"kind": "translate", "x": 3.0, "y": -1.0}}),
    )
    .await;
    send(
        &mut ws,
        json!({"type": "command", "id": 2, "command": {"kind": "joints", "targets": [{"joint": "Middle", "target": 100, "pwm": 200}]}}),
    )
    .await;
    next_of(&mut ws, |v| v["event"]["id"] == 2).await;
    next_of(&mut ws, |v| v["type"] == "snapshot").await;
    drop(ws);
    let summary = h.shutdown().await.unwrap();
    assert!(summary.commands >= 2);

    let log =
        SessionLog::read(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    log.validate().unwrap();
    assert!(log.header.wall_clock.is_some());
    assert_eq!(log.commands().count(), 1);
    assert!(log
        .records
        .iter()
        .any(|r| matches!(r, Record::Translate { x, .. } if *x == 3.0)));
    assert!(matches!(log.records.last(), Some(Record::End { .. })));
}
