//! Controller side of the wire protocol and the square-wave exerciser.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream};

use log::{debug, warn};
use thiserror::Error;

use crate::etp::Mode;
use crate::protocol::{
    encode, ControlMessage, DecodeError, EncodeError, ErrorCode, FrameReader, RequestEntry, VerdictEntry,
    PROTOCOL_VERSION,
};
use crate::switching::Reason;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: std::io::Error },
    #[error("server refused the connection: {code:?}: {message}")]
    Refused { code: ErrorCode, message: String },
    #[error("server speaks {0}, expected {PROTOCOL_VERSION}")]
    Version(String),
    #[error("protocol: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("expected {expected}, server sent {found}")]
    Unexpected { expected: &'static str, found: &'static str },
    #[error("connection closed before the handshake finished")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A connected, handshaken controller.
pub struct ControllerClient {
    frames: FrameReader<BufReader<TcpStream>>,
    writer: TcpStream,
    pub n_houses: u32,
    pub latch_dt: f64,
    /// Raw bytes of every STATE_REPORT received, when recording is on.
    transcript: Option<Vec<u8>>,
}

impl ControllerClient {
    pub fn connect(endpoint: &str) -> Result<Self, ClientError> {
        Self::connect_with_version(endpoint, PROTOCOL_VERSION)
    }

    /// Connects announcing `version`; only useful for testing refusal.
    pub fn connect_with_version(endpoint: &str, version: &str) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(endpoint).map_err(|source| ClientError::Connect {
            endpoint: endpoint.to_owned(),
            source,
        })?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut frames = FrameReader::new(BufReader::new(stream));
        let (n_houses, latch_dt) = match frames.next_frame().ok_or(ClientError::Closed)?? {
            ControlMessage::Hello {
                protocol,
                n_houses,
                latch_dt,
            } => {
                if protocol != PROTOCOL_VERSION {
                    return Err(ClientError::Version(protocol));
                }
                (n_houses, latch_dt)
            }
            ControlMessage::Error { code, message } => return Err(ClientError::Refused { code, message }),
            other => {
                return Err(ClientError::Unexpected {
                    expected: "HELLO",
                    found: other.kind(),
                })
            }
        };
        let mut client = ControllerClient {
            frames,
            writer,
            n_houses,
            latch_dt,
            transcript: None,
        };
        client.send(&ControlMessage::Hello {
            protocol: version.to_owned(),
            n_houses,
            latch_dt,
        })?;
        Ok(client)
    }

    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn take_transcript(&mut self) -> Vec<u8> {
        self.transcript.take().unwrap_or_default()
    }

    pub fn send(&mut self, msg: &ControlMessage) -> Result<(), ClientError> {
        self.writer.write_all(&encode(msg)?)?;
        Ok(())
    }

    /// Sends raw bytes, bypassing the encoder.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.writer.write_all(bytes)?;
        Ok(())
    }

    /// Next frame from the server, or `None` once it closes the stream.
    pub fn next_frame(&mut self) -> Result<Option<ControlMessage>, ClientError> {
        match self.frames.next_frame() {
            None => Ok(None),
            Some(Err(DecodeError::Io { .. })) => Ok(None),
            Some(Err(e)) => Err(e.into()),
            Some(Ok(msg)) => {
                if let (Some(t), ControlMessage::StateReport { .. }) = (&mut self.transcript, &msg) {
                    t.extend_from_slice(self.frames.last_frame_bytes());
                }
                Ok(Some(msg))
            }
        }
    }

    pub fn close(self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

/// Square-wave request pattern. `duty_pct = None` keeps the exerciser
/// silent: it answers every step with an empty request list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareWave {
    pub period_s: f64,
    pub duty_pct: Option<f64>,
}

impl SquareWave {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return Err(format!("period must be > 0, got {}", self.period_s));
        }
        if let Some(d) = self.duty_pct {
            if !(0.0..=100.0).contains(&d) {
                return Err(format!("duty must be within [0, 100] %, got {d}"));
            }
        }
        Ok(())
    }

    /// Mode requested at simulated time `t`: ON for the first `duty` share
    /// of every period.
    pub fn level(&self, t: f64) -> Option<Mode> {
        let duty = self.duty_pct? / 100.0;
        let phase = t.rem_euclid(self.period_s) / self.period_s;
        Some(if phase < duty { Mode::On } else { Mode::Off })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExerciseReport {
    pub steps: u64,
    pub requests_sent: u64,
    /// `(step, verdict)` for every verdict received.
    pub verdicts: Vec<(u64, VerdictEntry)>,
    /// ERROR frames from the server, verbatim.
    pub errors: Vec<(ErrorCode, String)>,
    /// Raw STATE_REPORT bytes, if the client was recording.
    pub transcript: Vec<u8>,
}

impl ExerciseReport {
    pub fn rejections(&self) -> usize {
        self.verdicts.iter().filter(|(_, v)| !v.accepted).count()
    }

    pub fn count(&self, reason: Reason) -> usize {
        self.verdicts.iter().filter(|(_, v)| v.reason == reason).count()
    }
}

/// Drives a connected controller until the server closes the stream,
/// requesting the square-wave level for every house at every step.
/// `observe` sees every frame before it is handled.
pub fn run_square_wave(
    mut client: ControllerClient,
    wave: SquareWave,
    mut observe: impl FnMut(&ControlMessage),
) -> Result<ExerciseReport, ClientError> {
    wave.validate().map_err(ClientError::InvalidArgument)?;
    let mut report = ExerciseReport::default();
    while let Some(frame) = client.next_frame()? {
        observe(&frame);
        match frame {
            ControlMessage::StateReport { step, time, houses, .. } => {
                let requests: Vec<RequestEntry> = match wave.level(time) {
                    Some(mode) => houses
                        .iter()
                        .map(|h| RequestEntry {
                            house_id: h.house_id,
                            desired_mode: mode,
                        })
                        .collect(),
                    None => Vec::new(),
                };
                report.requests_sent += requests.len() as u64;
                match client.send(&ControlMessage::SwitchRequests { step, requests }) {
                    Err(ClientError::Io(e)) if is_disconnect(&e) => break,
                    other => other?,
                }
            }
            ControlMessage::Verdicts { step, verdicts } => {
                report.verdicts.extend(verdicts.into_iter().map(|v| (step, v)));
            }
            ControlMessage::StepAck { step } => {
                report.steps = step + 1;
                debug!("step {step} acknowledged");
            }
            ControlMessage::Error { code, message } => {
                warn!("server error {code:?}: {message}");
                report.errors.push((code, message));
            }
            other => {
                return Err(ClientError::Unexpected {
                    expected: "STATE_REPORT, VERDICTS, STEP_ACK or ERROR",
                    found: other.kind(),
                })
            }
        }
    }
    report.transcript = client.take_transcript();
    Ok(report)
}

fn is_disconnect(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(e.kind(), BrokenPipe | ConnectionReset | ConnectionAborted)
}

/// Connects to `endpoint` and runs the square-wave exerciser.
pub fn square_wave_exerciser(endpoint: &str, period_s: f64, duty_pct: Option<f64>) -> Result<ExerciseReport, ClientError> {
    let wave = SquareWave { period_s, duty_pct };
    wave.validate().map_err(ClientError::InvalidArgument)?;
    run_square_wave(ControllerClient::connect(endpoint)?, wave, |_| {})
}
