//! TCP control server. The simulation thread owns the fleet and is the
//! clock master; each accepted controller gets a reader thread and a writer
//! thread that talk to it only through channels.

use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{aggregate_power, Fleet, FleetError};
use crate::protocol::{
    encode, ControlMessage, ErrorCode, FrameReader, HouseReport, RequestEntry, VerdictEntry, NEVER_OFF_SENTINEL,
    PROTOCOL_VERSION,
};
use crate::switching::SwitchRequest;

pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:47810";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServeMode {
    /// Steps on the server clock and applies whatever arrived in between.
    FreeRun,
    /// Waits for the controller's requests for every step.
    Lockstep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub endpoint: String,
    pub mode: ServeMode,
    /// Simulated seconds per step.
    pub latch_dt: f64,
    /// Steps to run before shutting down.
    pub steps: u64,
    /// LOCKSTEP wait for a step's requests before proceeding without them, s.
    pub lockstep_timeout_s: f64,
    /// Pace steps to wall-clock time.
    pub realtime: bool,
    /// In LOCKSTEP, hold step 0 until a controller has completed the
    /// handshake.
    pub wait_for_controller: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            endpoint: DEFAULT_ENDPOINT.into(),
            mode: ServeMode::Lockstep,
            latch_dt: 1.0,
            steps: 3600,
            lockstep_timeout_s: 10.0,
            realtime: false,
            wait_for_controller: true,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.latch_dt.is_finite() && self.latch_dt > 0.0) {
            return Err(format!("latch_dt must be > 0, got {}", self.latch_dt));
        }
        if !(self.lockstep_timeout_s.is_finite() && self.lockstep_timeout_s > 0.0) {
            return Err(format!("lockstep_timeout_s must be > 0, got {}", self.lockstep_timeout_s));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {endpoint}: {source}")]
    Bind { endpoint: String, source: std::io::Error },
    #[error("invalid server config: {0}")]
    Config(String),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation thread panicked")]
    Panicked,
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct RunSummary {
    pub fleet: Fleet,
    pub steps: u64,
    pub requests: u64,
    pub rejected_frames: u64,
    pub timeouts: u64,
}

pub struct ServeHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: JoinHandle<Result<RunSummary, ServerError>>,
    acceptor: JoinHandle<()>,
}

impl ServeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Asks the simulation to finish after the current step.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(self) -> Result<RunSummary, ServerError> {
        let result = self.sim.join().map_err(|_| ServerError::Panicked)?;
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.acceptor.join();
        result
    }
}

enum Outbound {
    Frame(Vec<u8>),
    Close,
}

enum Inbound {
    Connected { conn: u64, out: Sender<Outbound> },
    Requests { conn: u64, step: u64, requests: Vec<RequestEntry> },
    Disconnected { conn: u64 },
}

/// Binds `config.endpoint` and starts stepping `fleet` on a background
/// thread.
pub fn serve(fleet: Fleet, config: ServerConfig) -> Result<ServeHandle, ServerError> {
    config.validate().map_err(ServerError::Config)?;
    let listener = TcpListener::bind(&config.endpoint).map_err(|source| ServerError::Bind {
        endpoint: config.endpoint.clone(),
        source,
    })?;
    let local_addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    info!("serving {} houses on {local_addr} ({:?})", fleet.len(), config.mode);

    let stop = Arc::new(AtomicBool::new(false));
    let (in_tx, in_rx) = mpsc::channel();
    let hello = ControlMessage::Hello {
        protocol: PROTOCOL_VERSION.into(),
        n_houses: fleet.len() as u32,
        latch_dt: config.latch_dt,
    };
    let acceptor = {
        let stop = stop.clone();
        let hello = encode(&hello).expect("finite latch_dt");
        thread::spawn(move || accept_loop(listener, hello, in_tx, stop))
    };
    let sim = {
        let stop = stop.clone();
        thread::spawn(move || Stepper::new(fleet, config, in_rx, stop).run())
    };
    Ok(ServeHandle {
        local_addr,
        stop,
        sim,
        acceptor,
    })
}

fn accept_loop(listener: TcpListener, hello: Vec<u8>, in_tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let busy = Arc::new(AtomicBool::new(false));
    let mut next_conn = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                if busy.swap(true, Ordering::SeqCst) {
                    info!("refusing second controller from {peer}");
                    let frame = ControlMessage::error(ErrorCode::Busy, "another controller is connected");
                    let _ = stream.write_all(&encode(&frame).expect("finite"));
                    let _ = stream.shutdown(Shutdown::Both);
                    continue;
                }
                info!("controller connected from {peer}");
                let conn = next_conn;
                next_conn += 1;
                let (hello, in_tx, busy) = (hello.clone(), in_tx.clone(), busy.clone());
                thread::spawn(move || {
                    handle_connection(stream, conn, hello, &in_tx);
                    busy.store(false, Ordering::SeqCst);
                    let _ = in_tx.send(Inbound::Disconnected { conn });
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn send_frame(out: &Sender<Outbound>, msg: &ControlMessage) {
    if let Ok(bytes) = encode(msg) {
        let _ = out.send(Outbound::Frame(bytes));
    }
}

fn handle_connection(stream: TcpStream, conn: u64, hello: Vec<u8>, in_tx: &Sender<Inbound>) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let (out_tx, out_rx) = mpsc::channel::<Outbound>();
    let writer = thread::spawn(move || write_loop(stream, out_rx));
    let _ = out_tx.send(Outbound::Frame(hello));

    let mut frames = FrameReader::new(BufReader::new(read_half));
    let mut handshaken = false;
    while let Some(frame) = frames.next_frame() {
        match frame {
            Err(crate::protocol::DecodeError::Io { detail, .. }) => {
                debug!("connection {conn} read error: {detail}");
                break;
            }
            Err(e) => {
                warn!("connection {conn}: {e}");
                send_frame(&out_tx, &ControlMessage::error(e.code(), e.to_string()));
            }
            Ok(ControlMessage::Hello { protocol, .. }) if !handshaken => {
                if protocol != PROTOCOL_VERSION {
                    warn!("connection {conn}: protocol `{protocol}` refused");
                    send_frame(
                        &out_tx,
                        &ControlMessage::error(
                            ErrorCode::VersionMismatch,
                            format!("server speaks {PROTOCOL_VERSION}, client sent {protocol}"),
                        ),
                    );
                    break;
                }
                handshaken = true;
                if in_tx
                    .send(Inbound::Connected {
                        conn,
                        out: out_tx.clone(),
                    })
                    .is_err()
                {
                    break;
                }
            }
            Ok(ControlMessage::SwitchRequests { step, requests }) if handshaken => {
                if in_tx.send(Inbound::Requests { conn, step, requests }).is_err() {
                    break;
                }
            }
            Ok(other) => {
                let why = if handshaken {
                    format!("{} frames are not accepted from controllers", other.kind())
                } else {
                    format!("expected HELLO, got {}", other.kind())
                };
                send_frame(&out_tx, &ControlMessage::error(ErrorCode::UnexpectedFrame, why));
            }
        }
    }
    let _ = out_tx.send(Outbound::Close);
    drop(out_tx);
    let _ = writer.join();
}

fn write_loop(mut stream: TcpStream, out_rx: Receiver<Outbound>) {
    for item in out_rx {
        match item {
            Outbound::Frame(bytes) => {
                if stream.write_all(&bytes).is_err() {
                    break;
                }
            }
            Outbound::Close => break,
        }
    }
    let _ = stream.flush();
    let _ = stream.shutdown(Shutdown::Both);
}

/// Builds the STATE_REPORT frame for the fleet's current state.
pub fn state_report(fleet: &Fleet, step: u64) -> ControlMessage {
    let houses = fleet
        .houses()
        .iter()
        .map(|h| HouseReport {
            house_id: h.id,
            t_therm: h.t_therm(),
            t_a: h.state.t_a,
            t_w: h.state.t_w,
            mode: h.state.mode,
            time_in_mode: h.state.time_in_mode,
            time_since_off: if h.state.time_since_off.is_finite() {
                h.state.time_since_off
            } else {
                NEVER_OFF_SENTINEL
            },
            real_power: h.real_power(),
        })
        .collect();
    ControlMessage::StateReport {
        step,
        time: fleet.time(),
        houses,
        aggregate_power: aggregate_power(fleet),
    }
}

struct Stepper {
    fleet: Fleet,
    config: ServerConfig,
    inbox: Receiver<Inbound>,
    stop: Arc<AtomicBool>,
    controller: Option<(u64, Sender<Outbound>)>,
    pending: Vec<(u64, Vec<RequestEntry>)>,
    summary: (u64, u64, u64),
}

impl Stepper {
    fn new(fleet: Fleet, config: ServerConfig, inbox: Receiver<Inbound>, stop: Arc<AtomicBool>) -> Self {
        Stepper {
            fleet,
            config,
            inbox,
            stop,
            controller: None,
            pending: Vec::new(),
            summary: (0, 0, 0),
        }
    }

    fn send(&self, msg: &ControlMessage) {
        if let Some((_, out)) = &self.controller {
            send_frame(out, msg);
        }
    }

    /// Folds one inbound message into the stepper's state.
    fn absorb(&mut self, msg: Inbound) {
        match msg {
            Inbound::Connected { conn, out } => self.controller = Some((conn, out)),
            Inbound::Disconnected { conn } => {
                if self.controller.as_ref().is_some_and(|(c, _)| *c == conn) {
                    info!("controller disconnected at t = {} s", self.fleet.time());
                    self.controller = None;
                    self.pending.clear();
                }
            }
            Inbound::Requests { conn, step, requests } => {
                if self.controller.as_ref().is_some_and(|(c, _)| *c == conn) {
                    self.pending.push((step, requests));
                }
            }
        }
    }

    fn drain(&mut self) {
        while let Ok(msg) = self.inbox.try_recv() {
            self.absorb(msg);
        }
    }

    fn wait_for_controller(&mut self) {
        while self.controller.is_none() && !self.stop.load(Ordering::SeqCst) {
            match self.inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(msg) => self.absorb(msg),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }

    /// Request frames to adjudicate at `step`, in arrival order.
    fn collect(&mut self, step: u64) -> Vec<(u64, Vec<RequestEntry>)> {
        match self.config.mode {
            ServeMode::FreeRun => {
                self.drain();
                std::mem::take(&mut self.pending)
            }
            ServeMode::Lockstep => {
                let deadline = Instant::now() + Duration::from_secs_f64(self.config.lockstep_timeout_s);
                loop {
                    let mut taken = Vec::new();
                    for (s, reqs) in std::mem::take(&mut self.pending) {
                        if s == step {
                            taken.push((s, reqs));
                        } else if s < step {
                            self.summary.2 += 1;
                            self.send(&ControlMessage::error(
                                ErrorCode::Ordering,
                                format!("SWITCH_REQUESTS for step {s} arrived after step {step} began"),
                            ));
                        } else {
                            self.summary.2 += 1;
                            self.send(&ControlMessage::error(
                                ErrorCode::UnexpectedFrame,
                                format!("SWITCH_REQUESTS for future step {s} during step {step}"),
                            ));
                        }
                    }
                    if !taken.is_empty() {
                        return taken;
                    }
                    if self.controller.is_none() {
                        return Vec::new();
                    }
                    let now = Instant::now();
                    if now >= deadline {
                        warn!("no SWITCH_REQUESTS for step {step} within {} s", self.config.lockstep_timeout_s);
                        self.summary.1 += 1;
                        return Vec::new();
                    }
                    match self.inbox.recv_timeout(deadline - now) {
                        Ok(msg) => self.absorb(msg),
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => return Vec::new(),
                    }
                }
            }
        }
    }

    fn adjudicate(&mut self, frame_step: u64, entries: Vec<RequestEntry>) -> Result<(), ServerError> {
        if let Some(bad) = entries.iter().find(|r| self.fleet.house(r.house_id).is_none()) {
            self.summary.2 += 1;
            self.send(&ControlMessage::error(
                ErrorCode::UnknownHouse,
                format!("step {frame_step}: unknown house {}; frame rejected", bad.house_id),
            ));
            return Ok(());
        }
        let time = self.fleet.time();
        let requests: Vec<SwitchRequest> = entries
            .iter()
            .map(|r| SwitchRequest {
                house_id: r.house_id,
                desired_mode: r.desired_mode,
                request_time: time,
            })
            .collect();
        let verdicts = self.fleet.apply_requests(&requests)?;
        self.summary.0 += requests.len() as u64;
        let verdicts = entries
            .iter()
            .zip(verdicts)
            .map(|(r, v)| VerdictEntry {
                house_id: r.house_id,
                accepted: v.accepted,
                reason: v.reason,
            })
            .collect();
        self.send(&ControlMessage::Verdicts {
            step: frame_step,
            verdicts,
        });
        Ok(())
    }

    fn run(mut self) -> Result<RunSummary, ServerError> {
        if self.config.mode == ServeMode::Lockstep && self.config.wait_for_controller {
            self.wait_for_controller();
        }
        let started = Instant::now();
        let mut step = 0;
        while step < self.config.steps && !self.stop.load(Ordering::SeqCst) {
            self.drain();
            self.send(&state_report(&self.fleet, step));
            for (frame_step, entries) in self.collect(step) {
                self.adjudicate(frame_step, entries)?;
            }
            self.fleet.advance(self.config.latch_dt)?;
            self.send(&ControlMessage::StepAck { step });
            step += 1;
            if self.config.realtime {
                let due = started + Duration::from_secs_f64(step as f64 * self.config.latch_dt);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                }
            }
        }
        if let Some((_, out)) = self.controller.take() {
            let _ = out.send(Outbound::Close);
        }
        info!("server finished after {step} steps");
        Ok(RunSummary {
            fleet: self.fleet,
            steps: step,
            requests: self.summary.0,
            timeouts: self.summary.1,
            rejected_frames: self.summary.2,
        })
    }
}
