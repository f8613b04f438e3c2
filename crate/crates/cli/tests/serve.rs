use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use pairsim_cli::serve::{now_ms, router, AppState};
use pairsim_core::engine::{EventLog, LogSink, Outcome, TrialMode};
use pairsim_core::interactive::{ClientEvent, ServerEvent, SessionDescriptor, SessionView};
use pairsim_core::{Capability, PairingMethod};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

async fn start(sink: Option<LogSink>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(AppState::new(sink))).await.unwrap() });
    format!("127.0.0.1:{}", addr.port())
}

fn scenario(file: &str) -> Value {
    let path = format!("{}/../../scenarios/{file}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

async fn create(addr: &str, body: &Value) -> reqwest::Response {
    reqwest::Client::new().post(format!("http://{addr}/sessions")).json(body).send().await.unwrap()
}

#[tokio::test]
async fn health_check() {
    let addr = start(None).await;
    let body: Value = reqwest::get(format!("http://{addr}/healthz")).await.unwrap().json().await.unwrap();
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn descriptors_follow_device_capabilities() {
    let addr = start(None).await;
    let resp = create(&addr, &scenario("live_d2b.json")).await;
    assert_eq!(resp.status(), 201);
    let d2b: SessionDescriptor = resp.json().await.unwrap();
    assert!(!d2b.session_id.is_empty());
    assert_eq!(d2b.live_url, format!("/sessions/{}/live", d2b.session_id));
    assert_eq!(d2b.panels[0].widgets, vec![Capability::Button]);
    assert_eq!(d2b.panels[1].widgets, vec![Capability::Display]);

    let b2b: SessionDescriptor = create(&addr, &scenario("live_b2b.json")).await.json().await.unwrap();
    assert_eq!(b2b.method, PairingMethod::BtoB);
    assert!(b2b.panels.iter().all(|p| p.widgets == vec![Capability::Button]));
    assert_ne!(b2b.session_id, d2b.session_id);
}

#[tokio::test]
async fn bad_scenarios_and_unknown_sessions() {
    let addr = start(None).await;
    let mut headless = scenario("live_d2b.json");
    headless.as_object_mut().unwrap().remove("human");
    assert_eq!(create(&addr, &headless).await.status(), 422);
    assert_eq!(create(&addr, &scenario("invalid_d2b.json")).await.status(), 422);
    let resp = reqwest::Client::new().post(format!("http://{addr}/sessions")).body("{").send().await.unwrap();
    assert_eq!(resp.status(), 422);
    assert_eq!(reqwest::get(format!("http://{addr}/sessions/nope")).await.unwrap().status(), 404);
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/nope/live")).await.is_err());
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn send(ws: &mut Ws, ev: &ClientEvent) {
    ws.send(Message::text(serde_json::to_string(ev).unwrap())).await.unwrap();
}

async fn next_event(ws: &mut Ws) -> ServerEvent {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next()).await.expect("server went quiet").unwrap().unwrap();
        if let Message::Text(text) = msg {
            return serde_json::from_str(&text).unwrap();
        }
    }
}

#[tokio::test]
async fn press_before_sync_is_rejected_with_a_warning() {
    let addr = start(None).await;
    let d: SessionDescriptor = create(&addr, &scenario("live_d2b.json")).await.json().await.unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}{}", d.live_url)).await.unwrap();
    assert!(matches!(next_event(&mut ws).await, ServerEvent::SyncPing { .. }));
    send(&mut ws, &ClientEvent::Press { t_client: now_ms() as i64, device: None }).await;
    match next_event(&mut ws).await {
        ServerEvent::Warn { msg } => assert!(msg.starts_with("SyncIncomplete"), "{msg}"),
        other => panic!("expected a warning, got {other:?}"),
    }
    // A second live connection to the same session is refused.
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}{}", d.live_url)).await.is_err());
    let view: SessionView = reqwest::get(format!("http://{addr}/sessions/{}", d.session_id)).await.unwrap().json().await.unwrap();
    assert_eq!(view.presses_a, 0);
}

/// A client whose clock runs `skew` ms ahead of the server's, pressing exactly
/// when each signal is due on its own clock.
#[tokio::test]
async fn scripted_client_completes_a_display_trial() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("live.jsonl");
    let addr = start(Some(LogSink::append_file(&log).unwrap())).await;
    let d: SessionDescriptor = create(&addr, &scenario("live_d2b.json")).await.json().await.unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}{}", d.live_url)).await.unwrap();
    let skew = 12_345i64;
    let client_now = || now_ms() as i64 + skew;
    let mut signals = Vec::new();
    let record = loop {
        match next_event(&mut ws).await {
            ServerEvent::SyncPing { t } => send(&mut ws, &ClientEvent::SyncPong { t, t_client: client_now() }).await,
            ServerEvent::TrialStart => {}
            ServerEvent::Signal { at_wall_ms, .. } => {
                signals.push(at_wall_ms);
                if signals.len() == 8 {
                    for &at in &signals {
                        let wait = at - client_now();
                        if wait > 0 {
                            tokio::time::sleep(Duration::from_millis(wait as u64)).await;
                        }
                        send(&mut ws, &ClientEvent::Press { t_client: at, device: None }).await;
                        send(&mut ws, &ClientEvent::Release { t_client: at + 80, device: None }).await;
                    }
                }
            }
            ServerEvent::Result { record } => break *record,
            ServerEvent::Warn { msg } => panic!("unexpected warning {msg}"),
        }
    };
    assert_eq!(record.outcome, Outcome::Success, "{record:?}");
    assert_eq!(record.mode, TrialMode::Interactive);
    let view: SessionView = reqwest::get(format!("http://{addr}/sessions/{}", d.session_id)).await.unwrap().json().await.unwrap();
    let offset = view.clock_offset_ms.unwrap();
    assert!((offset - skew).abs() <= 20, "offset {offset}");
    let logged = EventLog::load(&log).unwrap();
    assert_eq!(logged.records(), &[record]);
}
