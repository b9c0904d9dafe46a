use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::routing::post;
use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use futures::StreamExt;
use serde_json::{json, Value};
use tadbot_core::device::{DeviceState, Mode};
use tadbot_core::experiment::{log_path, read_log, randomize_order, CareEventKind, Stimulus};
use tadbot_core::protocol::{decode, encode, Ack, LineBuffer, Motion, Telemetry, WireMessage};
use tadbot_gateway::{start, Binding, GatewayConfig, ManualClock, RunningGateway};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

const PAIR: &str = "pair-7";
const START: (i32, u32, u32) = (2024, 3, 4);

fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(START.0, START.1, START.2).unwrap()
}

fn noon(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_hms_opt(12, 0, 0).unwrap())
}

fn config(dir: &std::path::Path) -> GatewayConfig {
    let mut c = GatewayConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        device_listen: "127.0.0.1:0".parse().unwrap(),
        data_dir: dir.to_owned(),
        webhook_backoff_ms: 10,
        command_timeout_ms: 500,
        ..GatewayConfig::default()
    };
    c.devices.insert("bot-1".into(), Binding { pair_id: PAIR.into() });
    c.cameras.insert("cam-1".into(), Binding { pair_id: PAIR.into() });
    c
}

async fn boot(cfg: GatewayConfig, at: DateTime<Utc>) -> (RunningGateway, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(at));
    let gw = start(cfg, clock.clone()).await.unwrap();
    (gw, clock)
}

fn http() -> reqwest::Client {
    reqwest::Client::new()
}

fn motion(score: f64, second: u32) -> Motion {
    Motion {
        camera: "cam-1".into(),
        score,
        ts: Utc.with_ymd_and_hms(2024, 3, 5, 8, 0, second).unwrap(),
    }
}

async fn post_motion(gw: &RunningGateway, m: &Motion) -> reqwest::Response {
    http()
        .post(format!("{}/cameras/{}/motion", gw.base_url(), m.camera))
        .body(encode(&WireMessage::Motion(m.clone())).unwrap())
        .send()
        .await
        .unwrap()
}

async fn create_trial(gw: &RunningGateway, fed: bool) -> reqwest::Response {
    http()
        .post(format!("{}/trials", gw.base_url()))
        .json(&json!({
            "pair_id": PAIR,
            "canister_id": "can-2",
            "start_date": start_date().to_string(),
            "seed": 11,
            "fed_confirmed": fed,
        }))
        .send()
        .await
        .unwrap()
}

/// Date inside the phase running `stimulus` for the test pair.
fn day_of(stimulus: Stimulus) -> NaiveDate {
    let idx = randomize_order(PAIR, 11).iter().position(|s| *s == stimulus).unwrap();
    start_date() + chrono::Days::new(14 * idx as u64 + 3)
}

/// Records POSTed bodies; answers 500 for the first `failures` requests.
async fn webhook_receiver(failures: usize) -> (String, Arc<Mutex<Vec<Bytes>>>, Arc<AtomicUsize>) {
    let got = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (g, h) = (got.clone(), hits.clone());
    let app = axum::Router::new().route(
        "/hook",
        post(move |body: Bytes| {
            let (g, h) = (g.clone(), h.clone());
            async move {
                if h.fetch_add(1, Ordering::SeqCst) < failures {
                    return StatusCode::INTERNAL_SERVER_ERROR;
                }
                g.lock().unwrap().push(body);
                StatusCode::NO_CONTENT
            }
        }),
    );
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/hook"), got, hits)
}

async fn eventually<F: Fn() -> bool>(what: &str, f: F) {
    for _ in 0..300 {
        if f() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("timed out waiting for {what}");
}

/// Minimal device on the raw line protocol; acks with `ok` unless `mute`.
struct FakeDevice {
    commands: Arc<Mutex<Vec<WireMessage>>>,
}

impl FakeDevice {
    async fn connect(addr: SocketAddr, id: &str, mute: bool) -> Self {
        let mut stream = TcpStream::connect(addr).await.unwrap();
        let hello = WireMessage::Telemetry(Telemetry::from(DeviceState::new(id).telemetry()));
        stream.write_all(&encode(&hello).unwrap()).await.unwrap();
        let commands = Arc::new(Mutex::new(Vec::new()));
        let seen = commands.clone();
        tokio::spawn(async move {
            let mut lines = LineBuffer::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = match stream.read(&mut buf).await {
                    Ok(0) | Err(_) => return,
                    Ok(n) => n,
                };
                for line in lines.push(&buf[..n]).unwrap() {
                    let msg = decode(&line).unwrap();
                    seen.lock().unwrap().push(msg.clone());
                    if let (WireMessage::Cmd(c), false) = (msg, mute) {
                        let ack = encode(&WireMessage::Ack(Ack::ok(c.id))).unwrap();
                        stream.write_all(&ack).await.unwrap();
                    }
                }
            }
        });
        Self { commands }
    }
}

async fn wait_connected(gw: &RunningGateway, id: &str) {
    let state = gw.state.clone();
    let id = id.to_owned();
    eventually("device link", move || state.devices.is_connected(&id)).await;
}

async fn command(gw: &RunningGateway, body: Value) -> (StatusCode, Value) {
    let resp = http()
        .post(format!("{}/devices/bot-1/command", gw.base_url()))
        .json(&body)
        .send()
        .await
        .unwrap();
    (resp.status(), resp.json().await.unwrap())
}

#[tokio::test]
async fn status_after_boot() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    let s: Value = http()
        .get(format!("{}/status", gw.base_url()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(s["last_seq"], 0);
    assert_eq!(s["event_counts"]["total"], 0);
    assert_eq!(s["devices"]["bot-1"]["connected"], false);
    assert_eq!(s["devices"]["bot-1"]["pair_id"], PAIR);
    assert_eq!(s["epoch"].as_str().unwrap().len(), 32);
    gw.shutdown().await;
}

#[tokio::test]
async fn motion_above_threshold_is_stored_and_notified() {
    let dir = tempfile::tempdir().unwrap();
    let (url, got, _) = webhook_receiver(0).await;
    let mut cfg = config(dir.path());
    cfg.webhook = Some(url);
    let (gw, _) = boot(cfg, noon(start_date())).await;

    let m = motion(0.031, 1);
    let resp = post_motion(&gw, &m).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let receipt: Value = resp.json().await.unwrap();
    assert_eq!(receipt["notified"], true);
    assert_eq!(receipt["seq"], 1);

    let g = got.clone();
    eventually("webhook delivery", move || !g.lock().unwrap().is_empty()).await;
    let body = got.lock().unwrap()[0].clone();
    assert_eq!(decode(&body).unwrap(), WireMessage::Motion(m.clone()));

    let below = post_motion(&gw, &motion(0.019, 2)).await.json::<Value>().await.unwrap();
    assert_eq!(below["notified"], false);
    let dup = post_motion(&gw, &m).await.json::<Value>().await.unwrap();
    assert_eq!(dup["duplicate"], true);
    assert_eq!(dup["seq"], 1);

    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(got.lock().unwrap().len(), 1);
    let status = gw.state.status();
    assert_eq!(status.event_counts.motion, 2);
    assert_eq!(status.notifications.delivered, 1);
    gw.shutdown().await;
}

#[tokio::test]
async fn motion_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    let mut m = motion(0.5, 1);
    m.camera = "cam-9".into();
    assert_eq!(post_motion(&gw, &m).await.status(), StatusCode::NOT_FOUND);

    let url = format!("{}/cameras/cam-1/motion", gw.base_url());
    let not_motion = encode(&WireMessage::Ack(Ack::ok("x"))).unwrap();
    let resp = http().post(&url).body(not_motion).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let resp = http()
        .post(&url)
        .body(r#"{"v":1,"type":"motion","camera":"cam-1","score":"high","ts":"2024-03-05T08:00:00Z"}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let err: Value = resp.json().await.unwrap();
    assert!(err["error"].as_str().unwrap().contains("score"), "{err}");
    assert_eq!(gw.state.store.last_seq(), 0);
    gw.shutdown().await;
}

#[tokio::test]
async fn webhook_retries_with_backoff() {
    let dir = tempfile::tempdir().unwrap();
    let (url, got, hits) = webhook_receiver(2).await;
    let mut cfg = config(dir.path());
    cfg.webhook = Some(url);
    let (gw, _) = boot(cfg, noon(start_date())).await;
    post_motion(&gw, &motion(0.9, 1)).await;
    let g = got.clone();
    eventually("retried delivery", move || !g.lock().unwrap().is_empty()).await;
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let n = gw.state.notifier.snapshot();
    assert_eq!((n.attempts, n.delivered, n.failed), (3, 1, 0));
    gw.shutdown().await;
}

#[tokio::test]
async fn trial_creation_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    assert_eq!(create_trial(&gw, false).await.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let resp = create_trial(&gw, true).await;
    assert_eq!(resp.status(), StatusCode::CREATED);
    let trial: Value = resp.json().await.unwrap();
    assert_eq!(trial["trial_id"], "pair-7-20240304");
    assert_eq!(create_trial(&gw, true).await.status(), StatusCode::CONFLICT);

    let list: Value = http()
        .get(format!("{}/trials", gw.base_url()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["current_phase"]["index"], 0);
    assert_eq!(list[0]["summary"]["phases"].as_array().unwrap().len(), 3);
    gw.shutdown().await;
}

#[tokio::test]
async fn command_guard_follows_trial_phase() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, clock) = boot(config(dir.path()), noon(day_of(Stimulus::ActuatedTadbot))).await;

    // No trial yet: activation refused, stop allowed once the device is up.
    let dev = FakeDevice::connect(gw.device_addr, "bot-1", false).await;
    wait_connected(&gw, "bot-1").await;
    let (code, _) = command(&gw, json!({"action": "activate", "mode": "begging"})).await;
    assert_eq!(code, StatusCode::FORBIDDEN);

    assert_eq!(create_trial(&gw, true).await.status(), StatusCode::CREATED);
    let (code, ack) = command(&gw, json!({"action": "activate", "mode": "begging"})).await;
    assert_eq!(code, StatusCode::OK, "{ack}");
    assert_eq!(ack["ok"], true);
    match &dev.commands.lock().unwrap()[0] {
        WireMessage::Cmd(c) => assert_eq!(c.mode, Some(Mode::Begging)),
        other => panic!("{other:?}"),
    }

    clock.set(noon(day_of(Stimulus::InertTadbot)));
    let (code, err) = command(&gw, json!({"action": "activate", "mode": "swimming"})).await;
    assert_eq!(code, StatusCode::FORBIDDEN);
    assert_eq!(err["phase"], "INERT_TADBOT");
    assert!(err["error"].as_str().unwrap().contains("INERT_TADBOT"));

    let (code, ack) = command(&gw, json!({"action": "stop"})).await;
    assert_eq!((code, ack["ok"].clone()), (StatusCode::OK, json!(true)));
    assert_eq!(dev.commands.lock().unwrap().len(), 2);

    let (code, _) = command(&gw, json!({"action": "warp"})).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    let log = read_log(&log_path(dir.path(), "pair-7-20240304")).unwrap();
    let activations: Vec<_> = log.iter().filter(|e| e.kind == CareEventKind::ModeActivated).collect();
    assert_eq!(activations.len(), 1);
    assert!(activations[0].is_begging_activation());
    gw.shutdown().await;
}

#[tokio::test]
async fn command_failures_map_to_gateway_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    let (code, _) = command(&gw, json!({"action": "stop"})).await;
    assert_eq!(code, StatusCode::BAD_GATEWAY);

    let _mute = FakeDevice::connect(gw.device_addr, "bot-1", true).await;
    wait_connected(&gw, "bot-1").await;
    let (code, _) = command(&gw, json!({"action": "stop"})).await;
    assert_eq!(code, StatusCode::GATEWAY_TIMEOUT);

    let resp = http()
        .post(format!("{}/devices/bot-9/command", gw.base_url()))
        .json(&json!({"action": "stop"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    gw.shutdown().await;
}

#[tokio::test]
async fn unregistered_device_is_turned_away() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    let mut stream = TcpStream::connect(gw.device_addr).await.unwrap();
    let hello = WireMessage::Telemetry(Telemetry::from(DeviceState::new("intruder").telemetry()));
    stream.write_all(&encode(&hello).unwrap()).await.unwrap();
    let mut reply = Vec::new();
    stream.read_to_end(&mut reply).await.unwrap();
    match decode(&reply).unwrap() {
        WireMessage::Ack(a) => assert!(!a.ok && a.error.unwrap().contains("intruder")),
        other => panic!("{other:?}"),
    }
    assert_eq!(gw.state.store.last_seq(), 0);
    gw.shutdown().await;
}

/// Reads `(id, event)` pairs from a raw SSE response until `n` are collected.
async fn sse_ids(resp: reqwest::Response, n: usize) -> Vec<(u64, String)> {
    let mut body = resp.bytes_stream();
    let mut text = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let chunk = tokio::time::timeout(Duration::from_secs(5), body.next())
            .await
            .expect("sse stalled")
            .unwrap()
            .unwrap();
        text.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = text.find("\n\n") {
            let frame: String = text.drain(..end + 2).collect();
            let field = |name: &str| {
                frame
                    .lines()
                    .find_map(|l| l.strip_prefix(name).map(|v| v.trim_start().to_owned()))
            };
            if let (Some(id), Some(ev)) = (field("id:"), field("event:")) {
                out.push((id.parse().unwrap(), ev));
            }
        }
    }
    out
}

#[tokio::test]
async fn event_stream_resumes_without_gaps_or_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    for s in 1..=3 {
        post_motion(&gw, &motion(0.01, s)).await;
    }
    let first = http().get(format!("{}/events", gw.base_url())).send().await.unwrap();
    assert_eq!(
        first.headers()["x-gateway-epoch"].to_str().unwrap(),
        gw.state.store.epoch()
    );
    let second = http()
        .get(format!("{}/events?since=2", gw.base_url()))
        .send()
        .await
        .unwrap();
    let resumed = http()
        .get(format!("{}/events", gw.base_url()))
        .header("last-event-id", "1")
        .send()
        .await
        .unwrap();
    post_motion(&gw, &motion(0.01, 4)).await;

    let ids = |v: Vec<(u64, String)>| v.into_iter().map(|(id, _)| id).collect::<Vec<_>>();
    assert_eq!(ids(sse_ids(first, 4).await), vec![1, 2, 3, 4]);
    assert_eq!(ids(sse_ids(second, 2).await), vec![3, 4]);
    assert_eq!(ids(sse_ids(resumed, 3).await), vec![2, 3, 4]);
    gw.shutdown().await;
}

#[tokio::test]
async fn restart_keeps_trials_and_logs_under_a_new_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let day = day_of(Stimulus::LiveCrossFoster);
    let (gw, _) = boot(config(dir.path()), noon(day)).await;
    create_trial(&gw, true).await;
    let receipt: Value = post_motion(&gw, &motion(0.2, 1)).await.json().await.unwrap();
    assert_eq!(receipt["trial_id"], "pair-7-20240304");
    let epoch = gw.state.store.epoch().to_owned();
    gw.shutdown().await;

    let (gw, _) = boot(config(dir.path()), noon(day)).await;
    assert_ne!(gw.state.store.epoch(), epoch);
    assert_eq!(gw.state.store.last_seq(), 0);
    let list: Value = http()
        .get(format!("{}/trials", gw.base_url()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let phase = list[0]["current_phase"]["index"].as_u64().unwrap() as usize;
    assert_eq!(list[0]["summary"]["phases"][phase]["counts"]["MOTION_DETECTED"], 1);
    gw.shutdown().await;
}

#[tokio::test]
async fn characterization_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = boot(config(dir.path()), noon(start_date())).await;
    let resp = http()
        .get(format!("{}/characterization?fmin=5&fmax=28&step=1", gw.base_url()))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let csv = resp.text().await.unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "freq_hz,amplitude_mm,estimated_freq_hz");
    assert_eq!(lines.len(), 25);

    let bad = http()
        .get(format!("{}/characterization?fmin=10&fmax=5&step=1", gw.base_url()))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
    let missing = http()
        .get(format!("{}/characterization?fmin=10", gw.base_url()))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), StatusCode::BAD_REQUEST);
    gw.shutdown().await;
}
