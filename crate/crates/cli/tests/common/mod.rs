//! In-process server and a scripted socket client.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use fluidforge::server::{router, ServerConfig};
use futures::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

pub async fn spawn_server(config: ServerConfig) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(config)).await.unwrap() });
    addr
}

/// Minimal HTTP/1.1 request; returns status and body.
pub async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let body = body.unwrap_or("");
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8_lossy(&raw).to_string();
    let status = text.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let body = text.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// What the scripted client observed.
#[derive(Debug, Default)]
pub struct Transcript {
    pub frame_indices: Vec<u64>,
    pub frame_modes: Vec<String>,
    /// `(mode, state)` of every mode_change, in order.
    pub mode_changes: Vec<(String, String)>,
    pub control_started: usize,
    pub busy: usize,
    pub errors: Vec<String>,
    pub control_frames: usize,
}

impl Transcript {
    pub fn indices_strictly_increase(&self) -> bool {
        self.frame_indices.windows(2).all(|w| w[0] < w[1])
    }

    /// Session states only move IDLE -> RUNNING_HYBRID -> CONTROLLING -> RUNNING_HYBRID.
    pub fn states_are_legal(&self) -> bool {
        let mut prev = "IDLE".to_string();
        for (_, state) in &self.mode_changes {
            let ok = state == &prev
                || matches!(
                    (prev.as_str(), state.as_str()),
                    ("IDLE", "RUNNING_HYBRID") | ("RUNNING_HYBRID", "CONTROLLING") | ("CONTROLLING", "RUNNING_HYBRID")
                );
            if !ok {
                return false;
            }
            prev = state.clone();
        }
        true
    }

    pub fn saw_cycle(&self) -> bool {
        let states: Vec<&str> = self.mode_changes.iter().map(|(_, s)| s.as_str()).collect();
        let c = states.iter().position(|s| *s == "CONTROLLING");
        c.is_some_and(|c| states[c..].contains(&"RUNNING_HYBRID"))
    }
}

const STROKE: &str = r#"{"type":"stroke","points":[[0.15,0.15],[0.3,0.2],[0.45,0.25]]}"#;

/// Creates a coarse-MPM session, lets it run, draws one stroke, draws a
/// second one mid-episode and keeps reading until the session returns to
/// hybrid running.
pub async fn scripted_control_cycle(addr: SocketAddr, t_ctr: usize) -> Transcript {
    let body = format!(
        r#"{{"scenario":"water2d-desk","fast_path":"coarse_mpm","t_ctr":{t_ctr},"frame_rate":10000,"step_rate":200}}"#
    );
    let (status, created) = http(addr, "POST", "/sessions", Some(&body)).await;
    assert_eq!(status, 201, "{created}");
    let created: Value = serde_json::from_str(&created).unwrap();
    let url = format!("ws://{addr}{}", created["stream"].as_str().unwrap());
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let mut t = Transcript::default();
    let mut sent_first = false;
    let mut sent_second = false;
    let mut frames_after_return = 0;
    let deadline = tokio::time::Instant::now() + Duration::from_secs(120);
    while tokio::time::Instant::now() < deadline {
        let msg = match tokio::time::timeout(Duration::from_secs(10), ws.next()).await {
            Ok(Some(Ok(Message::Text(text)))) => text.to_string(),
            Ok(Some(Ok(_))) => continue,
            _ => break,
        };
        let v: Value = serde_json::from_str(&msg).unwrap();
        match v["type"].as_str().unwrap() {
            "frame" => {
                t.frame_indices.push(v["index"].as_u64().unwrap());
                let mode = v["mode"].as_str().unwrap().to_string();
                if mode == "CONTROL" {
                    t.control_frames += 1;
                }
                t.frame_modes.push(mode);
                let returned = t.mode_changes.last().is_some_and(|(_, s)| s == "RUNNING_HYBRID") && sent_second;
                if returned {
                    frames_after_return += 1;
                }
            }
            "mode_change" => {
                t.mode_changes.push((v["mode"].as_str().unwrap().into(), v["state"].as_str().unwrap().into()));
            }
            "control_started" => t.control_started += 1,
            "error" => {
                if v["code"] == "busy" {
                    t.busy += 1;
                } else {
                    t.errors.push(v["detail"].to_string());
                }
            }
            other => t.errors.push(format!("unexpected message type {other}")),
        }
        if !sent_first && t.frame_indices.len() >= 3 {
            ws.send(Message::Text(STROKE.into())).await.unwrap();
            sent_first = true;
        }
        if sent_first && !sent_second && t.control_frames >= 2 {
            ws.send(Message::Text(STROKE.into())).await.unwrap();
            sent_second = true;
        }
        if frames_after_return >= 3 {
            break;
        }
    }
    let _ = ws.close(None).await;
    t
}
