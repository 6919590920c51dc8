//! Long-running service: pose loop, planner loop and HTTP/WebSocket API.
//!
//! The pose loop is the only writer of the track state and the planner loop the only
//! writer of paths. Both publish immutable snapshots. Goal, prompt and command
//! changes go through one control channel and are applied in order by a settings
//! thread. Loops never queue work: a slow pose step skips the frames that went by.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Vector3;
use parking_lot::{Mutex, RwLock};
use serde::Deserialize;
use serde_json::json;
use teleassist_core::planner::{plan, smooth, PlanError};
use teleassist_core::splat::{OccupancyGrid, SplatMap};
use teleassist_core::tracker::{update, TrackMode, TrackState};
use teleassist_core::wpca::Pose6DoF;
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};

use crate::backend::FrameSource;
use crate::command::{parse_command, Action, SpatialCommand};
use crate::config::PipelineConfig;
use crate::pipeline::{run_pipeline_step, FrameInputs};
use crate::record::{map_record, AlertRecord, PathRecord, PoseRecord};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port unavailable at {addr}: {source}")]
    PortUnavailable { addr: SocketAddr, source: std::io::Error },
    #[error("invalid startup configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct ServeOptions {
    pub config: PipelineConfig,
    pub map: Arc<SplatMap>,
    pub addr: SocketAddr,
    /// Extra time spent in every planner iteration (testing hook).
    pub planner_delay: Duration,
    /// Upper bound on splats returned by `/api/map`.
    pub map_limit: usize,
}

impl ServeOptions {
    pub fn new(config: PipelineConfig, map: SplatMap, addr: SocketAddr) -> Self {
        Self { config, map: Arc::new(map), addr, planner_delay: Duration::ZERO, map_limit: 5000 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub goal: Option<Vector3<f64>>,
    pub prompt: String,
    pub command: Option<SpatialCommand>,
}

#[derive(Debug)]
enum Control {
    Goal(Vector3<f64>),
    Prompt(String),
    Command(SpatialCommand),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceStats {
    pub pose_records: u64,
    pub planner_ticks: u64,
    /// Seconds since start at which recent pose records were published.
    pub pose_tick_times: Vec<f64>,
    /// Seconds since start at which recent planner iterations began.
    pub planner_tick_times: Vec<f64>,
    pub elapsed: f64,
}

struct Shared {
    config: PipelineConfig,
    grid: Option<Arc<OccupancyGrid>>,
    map_json: String,
    started: Instant,
    stop: AtomicBool,
    state: RwLock<Option<Arc<TrackState>>>,
    pose: RwLock<Option<Arc<PoseRecord>>>,
    alert: RwLock<Option<Arc<AlertRecord>>>,
    path: RwLock<Option<Arc<PathRecord>>>,
    plan_error: RwLock<Option<String>>,
    settings: RwLock<Arc<Settings>>,
    control: Mutex<mpsc::Sender<Control>>,
    stream: broadcast::Sender<String>,
    pose_records: AtomicU64,
    planner_ticks: AtomicU64,
    pose_times: Mutex<VecDeque<f64>>,
    planner_times: Mutex<VecDeque<f64>>,
}

const TICK_HISTORY: usize = 4096;

fn push_tick(times: &Mutex<VecDeque<f64>>, t: f64) {
    let mut q = times.lock();
    if q.len() == TICK_HISTORY {
        q.pop_front();
    }
    q.push_back(t);
}

impl Shared {
    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    /// Sleeps until `deadline` or shutdown, whichever is first.
    fn sleep_until(&self, deadline: Instant) {
        while !self.stopped() {
            let now = Instant::now();
            if now >= deadline {
                return;
            }
            std::thread::sleep((deadline - now).min(Duration::from_millis(50)));
        }
    }

    fn send(&self, c: Control) {
        // The settings thread outlives every handler; a send error only happens at shutdown.
        let _ = self.control.lock().send(c);
    }

    fn publish(&self, line: String) {
        // No subscribers is fine.
        let _ = self.stream.send(line);
    }
}

pub struct Service {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    runtime: Option<tokio::runtime::Runtime>,
    http_stop: Option<oneshot::Sender<()>>,
}

impl Service {
    pub fn start(opts: ServeOptions, source: Box<dyn FrameSource>) -> Result<Self, ServeError> {
        opts.config.validate().map_err(|e| ServeError::Config(e.to_string()))?;
        let grid = match opts.map.build_occupancy(opts.config.voxel_size, opts.config.sigma_gate, opts.config.robot_radius) {
            Ok(g) => Some(Arc::new(g)),
            Err(e) => {
                tracing::warn!(error = %e, "no occupancy grid; planning disabled");
                None
            }
        };
        let listener = std::net::TcpListener::bind(opts.addr)
            .map_err(|source| ServeError::PortUnavailable { addr: opts.addr, source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;

        let (control_tx, control_rx) = mpsc::channel();
        let (stream, _) = broadcast::channel(64);
        let shared = Arc::new(Shared {
            map_json: serde_json::to_string(&map_record(&opts.map, opts.map_limit)).expect("plain data serializes"),
            settings: RwLock::new(Arc::new(Settings { prompt: opts.config.prompt.clone(), ..Default::default() })),
            config: opts.config,
            grid,
            started: Instant::now(),
            stop: AtomicBool::new(false),
            state: RwLock::new(None),
            pose: RwLock::new(None),
            alert: RwLock::new(None),
            path: RwLock::new(None),
            plan_error: RwLock::new(None),
            control: Mutex::new(control_tx),
            stream,
            pose_records: AtomicU64::new(0),
            planner_ticks: AtomicU64::new(0),
            pose_times: Mutex::new(VecDeque::new()),
            planner_times: Mutex::new(VecDeque::new()),
        });

        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (http_stop, stop_rx) = oneshot::channel();
        let app = router(shared.clone());
        runtime.spawn(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => return tracing::error!(error = %e, "listener handoff failed"),
            };
            let shutdown = async {
                let _ = stop_rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                tracing::error!(error = %e, "http server stopped");
            }
        });

        let map = opts.map.clone();
        let threads = vec![
            spawn("settings", { let s = shared.clone(); move || settings_loop(&s, control_rx) })?,
            spawn("pose", { let s = shared.clone(); move || pose_loop(&s, source, &map) })?,
            spawn("planner", { let s = shared.clone(); let d = opts.planner_delay; move || planner_loop(&s, d) })?,
        ];
        tracing::info!(%addr, "serving");
        Ok(Self { addr, shared, threads, runtime: Some(runtime), http_stop: Some(http_stop) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServiceStats {
        ServiceStats {
            pose_records: self.shared.pose_records.load(Ordering::Relaxed),
            planner_ticks: self.shared.planner_ticks.load(Ordering::Relaxed),
            pose_tick_times: self.shared.pose_times.lock().iter().copied().collect(),
            planner_tick_times: self.shared.planner_times.lock().iter().copied().collect(),
            elapsed: self.shared.now(),
        }
    }

    pub fn settings(&self) -> Arc<Settings> {
        self.shared.settings.read().clone()
    }

    pub fn latest_pose(&self) -> Option<Arc<PoseRecord>> {
        self.shared.pose.read().clone()
    }

    /// Blocks until Ctrl-C.
    pub fn run_until_interrupted(self) -> Result<(), ServeError> {
        if let Some(rt) = &self.runtime {
            rt.block_on(tokio::signal::ctrl_c())?;
        }
        self.shutdown();
        Ok(())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(tx) = self.http_stop.take() {
            let _ = tx.send(());
        }
        // Unblocks the settings thread.
        let (dead, _) = mpsc::channel();
        *self.shared.control.lock() = dead;
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> std::io::Result<JoinHandle<()>> {
    std::thread::Builder::new().name(format!("teleassist-{name}")).spawn(f)
}

fn settings_loop(shared: &Shared, rx: mpsc::Receiver<Control>) {
    while !shared.stopped() {
        let Ok(c) = rx.recv_timeout(Duration::from_millis(50)) else { continue };
        let mut next = Settings::clone(&shared.settings.read());
        match c {
            Control::Goal(g) => next.goal = Some(g),
            Control::Prompt(p) => {
                tracing::info!(prompt = %p, "prompt changed");
                next.prompt = p;
            }
            Control::Command(cmd) => {
                match cmd.action {
                    Action::Goto { target } => next.goal = Some(target),
                    Action::Stop => {
                        next.goal = None;
                        *shared.path.write() = None;
                    }
                    Action::Follow { .. } => next.goal = None,
                }
                next.command = Some(cmd);
            }
        }
        *shared.settings.write() = Arc::new(next);
    }
}

fn pose_loop(shared: &Shared, mut source: Box<dyn FrameSource>, map: &SplatMap) {
    let cfg = &shared.config;
    let period = Duration::from_secs_f64(1.0 / cfg.tracker.rate_hz);
    let mut state = TrackState::lost(0.0, &cfg.tracker);
    let mut deadline = shared.started;
    while !shared.stopped() {
        let now = shared.now();
        // Latest-wins: frames that elapsed while the previous step ran are skipped.
        let frame_id = (now * cfg.tracker.rate_hz) as u64;
        let prompt = shared.settings.read().prompt.clone();
        let (record, alert) = match source.frame(frame_id, &prompt) {
            Ok((depth, logits)) => {
                let inputs = FrameInputs { frame_id, timestamp: now, depth, logits };
                match run_pipeline_step(&inputs, &state, cfg, Some(map)) {
                    Ok(out) => {
                        state = out.state;
                        (out.record, out.alert)
                    }
                    Err(e) => {
                        tracing::error!(error = %e, "pipeline step rejected");
                        (PoseRecord::from_state(&state, 0.0), None)
                    }
                }
            }
            Err(e) => {
                tracing::warn!(frame = frame_id, error = %e, "backend failed; frame missed");
                let missing = Pose6DoF::invalid(now, teleassist_core::fusion::Frame::World, state.pose.rotation);
                if let Ok(next) = update(&state, &missing, 0.0, now, &cfg.tracker) {
                    state = next;
                }
                (PoseRecord::from_state(&state, 0.0), None)
            }
        };
        *shared.state.write() = Some(Arc::new(state));
        shared.publish(record.to_json_line());
        *shared.pose.write() = Some(Arc::new(record));
        if let Some(a) = alert {
            shared.publish(serde_json::to_string(&a).expect("plain data serializes"));
            *shared.alert.write() = Some(Arc::new(a));
        }
        shared.pose_records.fetch_add(1, Ordering::Relaxed);
        push_tick(&shared.pose_times, shared.now());

        deadline += period;
        let now = Instant::now();
        if deadline < now {
            deadline = now;
        }
        shared.sleep_until(deadline);
    }
}

fn planner_loop(shared: &Shared, delay: Duration) {
    let cfg = &shared.config;
    let period = Duration::from_secs_f64(cfg.replan_period.max(1e-3));
    let mut deadline = shared.started;
    while !shared.stopped() {
        let started_at = shared.now();
        shared.planner_ticks.fetch_add(1, Ordering::Relaxed);
        push_tick(&shared.planner_times, started_at);
        if !delay.is_zero() {
            shared.sleep_until(Instant::now() + delay);
        }
        let goal = shared.settings.read().goal;
        let state = shared.state.read().clone();
        if let (Some(grid), Some(goal), Some(state)) = (&shared.grid, goal, state) {
            if state.mode != TrackMode::Lost {
                match plan(grid, &state.pose.translation, &goal, started_at) {
                    Ok(path) => {
                        let path = smooth(&path, grid, cfg.smooth_iterations, cfg.seed);
                        *shared.path.write() = Some(Arc::new(PathRecord::from(&path)));
                        *shared.plan_error.write() = None;
                    }
                    Err(e) => {
                        tracing::debug!(error = %e, "planning failed");
                        *shared.plan_error.write() = Some(plan_error_name(&e).to_string());
                    }
                }
            }
        }
        deadline += period;
        let now = Instant::now();
        if deadline < now {
            deadline = now;
        }
        shared.sleep_until(deadline);
    }
}

pub fn plan_error_name(e: &PlanError) -> &'static str {
    match e {
        PlanError::StartOutOfBounds(_) => "StartOutOfBounds",
        PlanError::GoalOutOfBounds(_) => "GoalOutOfBounds",
        PlanError::StartOccupied => "StartOccupied",
        PlanError::GoalOccupied => "GoalOccupied",
        PlanError::NoPath => "NoPath",
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/map", get(get_map))
        .route("/api/pose", get(get_pose))
        .route("/api/path", get(get_path))
        .route("/api/alerts", get(get_alerts))
        .route("/api/goal", post(post_goal))
        .route("/api/prompt", post(post_prompt))
        .route("/api/command", post(post_command))
        .route("/ws", get(ws_upgrade))
        .with_state(shared)
}

type App = State<Arc<Shared>>;

fn error(status: StatusCode, name: &str, detail: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": name, "detail": detail.to_string()}))).into_response()
}

async fn get_map(State(s): App) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], s.map_json.clone()).into_response()
}

fn snapshot<T: serde::Serialize>(v: Option<Arc<T>>) -> Response {
    match v {
        Some(v) => Json(&*v).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn get_pose(State(s): App) -> Response {
    snapshot(s.pose.read().clone())
}

async fn get_path(State(s): App) -> Response {
    snapshot(s.path.read().clone())
}

async fn get_alerts(State(s): App) -> Response {
    let collision = s.alert.read().clone();
    let planner = s.plan_error.read().clone();
    Json(json!({"collision": collision.as_deref(), "planner": planner})).into_response()
}

/// Rejects goals the planner could never reach.
fn check_goal(s: &Shared, target: &Vector3<f64>) -> Result<(), Response> {
    if !target.iter().all(|v| v.is_finite()) {
        return Err(error(StatusCode::UNPROCESSABLE_ENTITY, "InvalidGoal", "non-finite coordinate"));
    }
    let Some(grid) = &s.grid else { return Ok(()) };
    match grid.voxel_of(target) {
        None => Err(error(StatusCode::UNPROCESSABLE_ENTITY, "GoalOutOfBounds", PlanError::GoalOutOfBounds((*target).into()))),
        Some(v) if grid.is_occupied(v) => Err(error(StatusCode::CONFLICT, "GoalOccupied", PlanError::GoalOccupied)),
        Some(_) => Ok(()),
    }
}

#[derive(Deserialize)]
struct GoalBody {
    target: [f64; 3],
}

async fn post_goal(State(s): App, Json(body): Json<GoalBody>) -> Response {
    let target = Vector3::from(body.target);
    if let Err(r) = check_goal(&s, &target) {
        return r;
    }
    s.send(Control::Goal(target));
    (StatusCode::ACCEPTED, Json(json!({"target": body.target}))).into_response()
}

#[derive(Deserialize)]
struct PromptBody {
    prompt: String,
}

async fn post_prompt(State(s): App, Json(body): Json<PromptBody>) -> Response {
    if body.prompt.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "EmptyPrompt", "prompt must not be empty");
    }
    s.send(Control::Prompt(body.prompt.clone()));
    (StatusCode::ACCEPTED, Json(json!({"prompt": body.prompt}))).into_response()
}

#[derive(Deserialize)]
struct CommandBody {
    text: String,
}

async fn post_command(State(s): App, Json(body): Json<CommandBody>) -> Response {
    let z = s.state.read().as_ref().filter(|st| st.mode != TrackMode::Lost).map_or(0.0, |st| st.pose.translation.z);
    let cmd = match parse_command(&body.text, z) {
        Ok(c) => c,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({"error": "UnrecognizedCommand", "position": e.position, "token": e.token})),
            )
                .into_response()
        }
    };
    if let Action::Goto { target } = cmd.action {
        if let Err(r) = check_goal(&s, &target) {
            return r;
        }
    }
    let reply = serde_json::to_value(cmd.to_json()).expect("plain data serializes");
    s.send(Control::Command(cmd));
    (StatusCode::ACCEPTED, Json(reply)).into_response()
}

async fn ws_upgrade(State(s): App, ws: WebSocketUpgrade) -> Response {
    let rx = s.stream.subscribe();
    ws.on_upgrade(move |socket| ws_stream(socket, rx))
}

async fn ws_stream(mut socket: WebSocket, mut rx: broadcast::Receiver<String>) {
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(mut line) => {
                    line.push('\n');
                    if socket.send(Message::Text(line.into())).await.is_err() {
                        return;
                    }
                }
                // A slow client misses records rather than delaying everyone.
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::debug!(skipped = n, "ws client lagging"),
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
