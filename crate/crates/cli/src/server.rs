//! HTTP and WebSocket front end for live sessions.
//!
//! Each session owns one simulation thread. Connected clients read from their
//! own bounded queue; when a queue is full the oldest frame is dropped, state
//! messages are always kept.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use fluidforge_core::hybrid::{FastPath, HybridConfig};
use fluidforge_core::neural::SurrogateWeights;
use fluidforge_core::resolution::ReductionConfig;
use fluidforge_core::ScenarioConfig;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Notify;

use crate::protocol::{ErrorCode, ServerMessage};
use crate::session::{Session, SessionOptions};

pub const DEFAULT_FRAME_RATE: f64 = 30.0;
pub const DEFAULT_STEP_RATE: f64 = 120.0;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Clone)]
pub struct ServerConfig {
    /// Maximum frame messages per second per session.
    pub frame_rate: f64,
    /// Maximum coarse steps per second per session; `None` runs flat out.
    pub step_rate: Option<f64>,
    pub queue_capacity: usize,
    /// Surrogate used by sessions that ask for the neural fast path.
    pub weights: Option<Arc<SurrogateWeights<f32>>>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { frame_rate: DEFAULT_FRAME_RATE, step_rate: Some(DEFAULT_STEP_RATE), queue_capacity: DEFAULT_QUEUE_CAPACITY, weights: None }
    }
}

/// Per-client outgoing queue.
pub struct ClientQueue {
    items: Mutex<VecDeque<ServerMessage>>,
    capacity: usize,
    notify: Notify,
    closed: AtomicBool,
}

impl ClientQueue {
    pub fn new(capacity: usize) -> Self {
        Self { items: Mutex::new(VecDeque::new()), capacity: capacity.max(1), notify: Notify::new(), closed: AtomicBool::new(false) }
    }

    pub fn push(&self, msg: ServerMessage) {
        let mut items = self.items.lock().expect("queue lock");
        if items.len() >= self.capacity {
            if let Some(k) = items.iter().position(ServerMessage::is_droppable) {
                items.remove(k);
            } else if msg.is_droppable() {
                return;
            }
        }
        items.push_back(msg);
        drop(items);
        self.notify.notify_one();
    }

    pub fn drain(&self) -> Vec<ServerMessage> {
        self.items.lock().expect("queue lock").drain(..).collect()
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.notify.notify_one();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

enum Command {
    Text(String),
    Wake,
    Shutdown,
}

struct SessionHandle {
    commands: mpsc::Sender<Command>,
    clients: Arc<Mutex<Vec<Arc<ClientQueue>>>>,
}

impl SessionHandle {
    fn shutdown(&self) {
        let _ = self.commands.send(Command::Shutdown);
        for c in self.clients.lock().expect("clients lock").iter() {
            c.close();
        }
    }
}

#[derive(Clone)]
struct AppState {
    config: ServerConfig,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub scenario: String,
    pub r_c: Option<f64>,
    pub r_p: Option<f64>,
    pub r_t: Option<usize>,
    /// `"neural"` or `"coarse_mpm"`; defaults to neural when weights are loaded.
    pub fast_path: Option<String>,
    pub t_ctr: Option<usize>,
    pub frame_rate: Option<f64>,
    pub step_rate: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub stream: String,
}

pub fn router(config: ServerConfig) -> Router {
    let state = AppState { config, sessions: Arc::new(Mutex::new(HashMap::new())) };
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/scenarios", get(scenarios))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", delete(delete_session))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(config)).await
}

async fn scenarios() -> Json<serde_json::Value> {
    let list: Vec<_> = ScenarioConfig::preset_names()
        .iter()
        .filter_map(|n| ScenarioConfig::preset(n))
        .map(|c| json!({"name": c.name, "dim": c.dim, "grid_resolution": c.grid_resolution, "dt": c.dt}))
        .collect();
    Json(json!(list))
}

fn bad_request(detail: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({"error": detail.into()}))).into_response()
}

fn session_options(req: &CreateSession, config: &ServerConfig) -> Result<SessionOptions, String> {
    let scenario = ScenarioConfig::preset(&req.scenario).ok_or_else(|| format!("unknown scenario {:?}", req.scenario))?;
    let fast_path = match (req.fast_path.as_deref(), &config.weights) {
        (Some("coarse_mpm"), _) | (None, None) => FastPath::CoarseMpm,
        (Some("neural") | None, Some(w)) => FastPath::NeuralSurrogate(w.clone()),
        (Some("neural"), None) => return Err("the server was started without surrogate weights".into()),
        (Some(other), _) => return Err(format!("unknown fast path {other:?}")),
    };
    let mut hybrid = HybridConfig::new(fast_path);
    let defaults = ReductionConfig::default();
    hybrid.reduction = ReductionConfig { r_p: req.r_p.unwrap_or(defaults.r_p), r_t: req.r_t.unwrap_or(defaults.r_t) };
    if let Some(r_c) = req.r_c {
        hybrid = hybrid.with_threshold(r_c);
    }
    hybrid.validate().map_err(|e| e.to_string())?;
    let mut options = SessionOptions::new(scenario, hybrid);
    if let Some(t) = req.t_ctr {
        if t == 0 {
            return Err("t_ctr must be positive".into());
        }
        options.t_ctr = t;
    }
    Ok(options)
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateSession>) -> Response {
    let options = match session_options(&req, &state.config) {
        Ok(o) => o,
        Err(e) => return bad_request(e),
    };
    let built = tokio::task::spawn_blocking(move || Session::new(options)).await;
    let session = match built {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return bad_request(e.to_string()),
        Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))).into_response(),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let (tx, rx) = mpsc::channel();
    let clients = Arc::new(Mutex::new(Vec::new()));
    let pacing = Pacing {
        frame_interval: interval(req.frame_rate.unwrap_or(state.config.frame_rate)),
        step_interval: req.step_rate.or(state.config.step_rate).map_or(Duration::ZERO, interval),
    };
    let thread_clients = clients.clone();
    thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || run_session(session, rx, thread_clients, pacing))
        .expect("spawn session thread");
    state.sessions.lock().expect("registry lock").insert(id.clone(), SessionHandle { commands: tx, clients });
    let body = SessionCreated { stream: format!("/sessions/{id}/stream"), session_id: id };
    (StatusCode::CREATED, Json(body)).into_response()
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> StatusCode {
    match state.sessions.lock().expect("registry lock").remove(&id) {
        Some(h) => {
            h.shutdown();
            StatusCode::NO_CONTENT
        }
        None => StatusCode::NOT_FOUND,
    }
}

async fn stream(State(state): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    let attached = {
        let sessions = state.sessions.lock().expect("registry lock");
        sessions.get(&id).map(|h| {
            let queue = Arc::new(ClientQueue::new(state.config.queue_capacity));
            h.clients.lock().expect("clients lock").push(queue.clone());
            let _ = h.commands.send(Command::Wake);
            (queue, h.commands.clone(), h.clients.clone())
        })
    };
    match attached {
        Some((queue, commands, clients)) => ws.on_upgrade(move |socket| client_loop(socket, queue, commands, clients)),
        None => (StatusCode::NOT_FOUND, Json(json!({"error": "no such session"}))).into_response(),
    }
}

async fn client_loop(
    socket: WebSocket,
    queue: Arc<ClientQueue>,
    commands: mpsc::Sender<Command>,
    clients: Arc<Mutex<Vec<Arc<ClientQueue>>>>,
) {
    let (mut sink, mut source) = socket.split();
    let writer_queue = queue.clone();
    let writer = tokio::spawn(async move {
        loop {
            for msg in writer_queue.drain() {
                if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                    return;
                }
            }
            if writer_queue.is_closed() {
                let _ = sink.close().await;
                return;
            }
            writer_queue.notify.notified().await;
        }
    });
    while let Some(Ok(msg)) = source.next().await {
        match msg {
            Message::Text(text) => {
                if commands.send(Command::Text(text.to_string())).is_err() {
                    break;
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    queue.close();
    clients.lock().expect("clients lock").retain(|c| !Arc::ptr_eq(c, &queue));
    let _ = writer.await;
}

#[derive(Clone, Copy)]
struct Pacing {
    frame_interval: Duration,
    step_interval: Duration,
}

fn interval(rate: f64) -> Duration {
    if rate.is_finite() && rate > 0.0 {
        Duration::from_secs_f64(1.0 / rate)
    } else {
        Duration::ZERO
    }
}

fn broadcast(clients: &Mutex<Vec<Arc<ClientQueue>>>, msg: &ServerMessage) {
    for c in clients.lock().expect("clients lock").iter() {
        c.push(msg.clone());
    }
}

/// Simulation loop of one session. Steps only while a client is attached.
fn run_session(mut session: Session, rx: mpsc::Receiver<Command>, clients: Arc<Mutex<Vec<Arc<ClientQueue>>>>, pacing: Pacing) {
    let mut last_frame: Option<Instant> = None;
    let mut next_step = Instant::now();
    loop {
        let attached = !clients.lock().expect("clients lock").is_empty();
        let idle = !attached || session.is_paused();
        let first = if idle {
            match rx.recv_timeout(Duration::from_millis(100)) {
                Ok(c) => Some(c),
                Err(mpsc::RecvTimeoutError::Timeout) => None,
                Err(mpsc::RecvTimeoutError::Disconnected) => return,
            }
        } else {
            None
        };
        for cmd in first.into_iter().chain(rx.try_iter()) {
            match cmd {
                Command::Text(text) => session.handle_text(&text).iter().for_each(|m| broadcast(&clients, m)),
                Command::Wake => {}
                Command::Shutdown => return,
            }
        }
        if idle {
            continue;
        }
        let now = Instant::now();
        if now < next_step {
            thread::sleep((next_step - now).min(Duration::from_millis(20)));
            continue;
        }
        next_step = now + pacing.step_interval;
        match session.advance() {
            Ok(msgs) => {
                for m in msgs {
                    if m.is_droppable() {
                        let due = last_frame.is_none_or(|t| t.elapsed() >= pacing.frame_interval);
                        if !due {
                            continue;
                        }
                        last_frame = Some(Instant::now());
                    }
                    broadcast(&clients, &m);
                }
            }
            Err(e) => {
                broadcast(&clients, &ServerMessage::error(ErrorCode::Simulation, e.to_string()));
                session.handle(crate::protocol::ClientMessage::Pause);
            }
        }
    }
}
