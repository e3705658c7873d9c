//! Newline-delimited JSON wire protocol between the testbed server and an
//! external controller.
//!
//! Every frame is one UTF-8 JSON object terminated by `\n`. The `type`
//! field selects the frame kind; all other fields are mandatory and
//! unknown fields are rejected. See `docs/protocol.md` for byte-exact
//! examples.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etp::Mode;
use crate::switching::{HouseId, Reason};

pub const PROTOCOL_VERSION: &str = "tcl-testbed/1";

/// Longest accepted frame, bytes including the newline.
pub const MAX_FRAME_BYTES: usize = 1 << 20;

/// Wire stand-in for a `time_since_off` that has no previous OFF event.
pub const NEVER_OFF_SENTINEL: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseReport {
    pub house_id: HouseId,
    pub t_therm: f64,
    pub t_a: f64,
    pub t_w: f64,
    pub mode: Mode,
    pub time_in_mode: f64,
    pub time_since_off: f64,
    pub real_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEntry {
    pub house_id: HouseId,
    pub desired_mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictEntry {
    pub house_id: HouseId,
    pub accepted: bool,
    pub reason: Reason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Malformed,
    Ordering,
    UnknownHouse,
    VersionMismatch,
    Busy,
    UnexpectedFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum ControlMessage {
    Hello {
        protocol: String,
        n_houses: u32,
        latch_dt: f64,
    },
    StateReport {
        step: u64,
        time: f64,
        houses: Vec<HouseReport>,
        aggregate_power: f64,
    },
    SwitchRequests {
        step: u64,
        requests: Vec<RequestEntry>,
    },
    Verdicts {
        step: u64,
        verdicts: Vec<VerdictEntry>,
    },
    StepAck {
        step: u64,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ControlMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlMessage::Hello { .. } => "HELLO",
            ControlMessage::StateReport { .. } => "STATE_REPORT",
            ControlMessage::SwitchRequests { .. } => "SWITCH_REQUESTS",
            ControlMessage::Verdicts { .. } => "VERDICTS",
            ControlMessage::StepAck { .. } => "STEP_ACK",
            ControlMessage::Error { .. } => "ERROR",
        }
    }

    pub fn step(&self) -> Option<u64> {
        match self {
            ControlMessage::StateReport { step, .. }
            | ControlMessage::SwitchRequests { step, .. }
            | ControlMessage::Verdicts { step, .. }
            | ControlMessage::StepAck { step } => Some(*step),
            _ => None,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ControlMessage::Error {
            code,
            message: message.into(),
        }
    }

    fn floats(&self) -> Vec<f64> {
        match self {
            ControlMessage::Hello { latch_dt, .. } => vec![*latch_dt],
            ControlMessage::StateReport {
                time,
                houses,
                aggregate_power,
                ..
            } => {
                let mut v = vec![*time, *aggregate_power];
                for h in houses {
                    v.extend([h.t_therm, h.t_a, h.t_w, h.time_in_mode, h.time_since_off, h.real_power]);
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

const FRAME_TYPES: [&str; 6] = ["HELLO", "STATE_REPORT", "SWITCH_REQUESTS", "VERDICTS", "STEP_ACK", "ERROR"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("{kind} frame carries a non-finite number")]
    NonFinite { kind: &'static str },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid UTF-8 at byte {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("truncated frame: no newline by byte {offset}")]
    Truncated { offset: u64 },
    #[error("frame exceeds {limit} bytes at byte {offset}")]
    TooLong { offset: u64, limit: usize },
    #[error("unknown frame type `{found}` at byte {offset}")]
    UnknownFrameType { offset: u64, found: String },
    #[error("malformed frame at byte {offset}: {detail}")]
    Malformed { offset: u64, detail: String },
    #[error("{kind} step {step} at byte {offset} does not follow step {last}")]
    Ordering {
        offset: u64,
        kind: &'static str,
        step: u64,
        last: u64,
    },
    #[error("read error at byte {offset}: {detail}")]
    Io { offset: u64, detail: String },
}

impl DecodeError {
    pub fn offset(&self) -> u64 {
        match self {
            DecodeError::InvalidUtf8 { offset }
            | DecodeError::Truncated { offset }
            | DecodeError::TooLong { offset, .. }
            | DecodeError::UnknownFrameType { offset, .. }
            | DecodeError::Malformed { offset, .. }
            | DecodeError::Ordering { offset, .. }
            | DecodeError::Io { offset, .. } => *offset,
        }
    }

    fn shifted(self, by: u64) -> Self {
        match self {
            DecodeError::InvalidUtf8 { offset } => DecodeError::InvalidUtf8 { offset: offset + by },
            DecodeError::Truncated { offset } => DecodeError::Truncated { offset: offset + by },
            DecodeError::TooLong { offset, limit } => DecodeError::TooLong { offset: offset + by, limit },
            DecodeError::UnknownFrameType { offset, found } => DecodeError::UnknownFrameType {
                offset: offset + by,
                found,
            },
            DecodeError::Malformed { offset, detail } => DecodeError::Malformed {
                offset: offset + by,
                detail,
            },
            DecodeError::Ordering { offset, kind, step, last } => DecodeError::Ordering {
                offset: offset + by,
                kind,
                step,
                last,
            },
            DecodeError::Io { offset, detail } => DecodeError::Io { offset: offset + by, detail },
        }
    }

    /// Wire error code for reporting this failure back to the peer.
    pub fn code(&self) -> ErrorCode {
        match self {
            DecodeError::Ordering { .. } => ErrorCode::Ordering,
            _ => ErrorCode::Malformed,
        }
    }
}

/// Serializes one frame, including the trailing newline.
pub fn encode(msg: &ControlMessage) -> Result<Vec<u8>, EncodeError> {
    if msg.floats().iter().any(|v| !v.is_finite()) {
        return Err(EncodeError::NonFinite { kind: msg.kind() });
    }
    let mut out = serde_json::to_vec(msg).expect("control messages always serialize");
    out.push(b'\n');
    Ok(out)
}

/// Parses exactly one newline-terminated frame.
pub fn decode(bytes: &[u8]) -> Result<ControlMessage, DecodeError> {
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        return Err(DecodeError::Truncated {
            offset: bytes.len() as u64,
        });
    };
    if nl + 1 != bytes.len() {
        return Err(DecodeError::Malformed {
            offset: nl as u64 + 1,
            detail: "trailing bytes after frame terminator".into(),
        });
    }
    decode_line(&bytes[..nl])
}

fn decode_line(line: &[u8]) -> Result<ControlMessage, DecodeError> {
    let line = if line.last() == Some(&b'\r') {
        &line[..line.len() - 1]
    } else {
        line
    };
    let text = std::str::from_utf8(line).map_err(|e| DecodeError::InvalidUtf8 {
        offset: e.valid_up_to() as u64,
    })?;
    serde_json::from_str::<ControlMessage>(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        let detail = e.to_string();
        if let Some(found) = unknown_type(text, &detail) {
            DecodeError::UnknownFrameType { offset, found }
        } else {
            DecodeError::Malformed { offset, detail }
        }
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len()) as u64
}

fn unknown_type(text: &str, detail: &str) -> Option<String> {
    if !detail.starts_with("unknown variant") {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let found = value.get("type")?.as_str()?;
    (!FRAME_TYPES.contains(&found)).then(|| found.to_owned())
}

/// Enforces strictly increasing step indices for one frame kind.
#[derive(Debug, Clone, Default)]
pub struct StepOrder {
    last: Option<u64>,
}

impl StepOrder {
    pub fn last(&self) -> Option<u64> {
        self.last
    }

    pub fn accept(&mut self, kind: &'static str, step: u64, offset: u64) -> Result<(), DecodeError> {
        match self.last {
            Some(last) if step <= last => Err(DecodeError::Ordering { offset, kind, step, last }),
            _ => {
                self.last = Some(step);
                Ok(())
            }
        }
    }
}

/// Incremental frame reader over a byte stream. Error offsets are counted
/// from the start of the stream. Step indices are checked per frame kind.
pub struct FrameReader<R> {
    inner: R,
    offset: u64,
    buf: Vec<u8>,
    order: [StepOrder; 4],
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            offset: 0,
            buf: Vec::new(),
            order: Default::default(),
        }
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Raw bytes of the frame most recently returned, newline included.
    pub fn last_frame_bytes(&self) -> &[u8] {
        &self.buf
    }

    /// Next frame, or `None` at a clean end of stream. A malformed frame
    /// is consumed whole so the reader can continue with the next line.
    pub fn next_frame(&mut self) -> Option<Result<ControlMessage, DecodeError>> {
        self.buf.clear();
        let start = self.offset;
        let mut limited = std::io::Read::take(&mut self.inner, MAX_FRAME_BYTES as u64);
        let n = match limited.read_until(b'\n', &mut self.buf) {
            Ok(n) => n,
            Err(e) => {
                return Some(Err(DecodeError::Io {
                    offset: start,
                    detail: e.to_string(),
                }))
            }
        };
        if n == 0 {
            return None;
        }
        self.offset += n as u64;
        if self.buf.last() != Some(&b'\n') {
            if n >= MAX_FRAME_BYTES {
                self.skip_rest_of_line();
                return Some(Err(DecodeError::TooLong {
                    offset: start,
                    limit: MAX_FRAME_BYTES,
                }));
            }
            return Some(Err(DecodeError::Truncated { offset: self.offset }));
        }
        let result = decode_line(&self.buf[..n - 1])
            .map_err(|e| e.shifted(start))
            .and_then(|msg| {
                if let Some(step) = msg.step() {
                    let slot = match msg {
                        ControlMessage::StateReport { .. } => 0,
                        ControlMessage::SwitchRequests { .. } => 1,
                        ControlMessage::Verdicts { .. } => 2,
                        _ => 3,
                    };
                    self.order[slot].accept(msg.kind(), step, start)?;
                }
                Ok(msg)
            });
        Some(result)
    }

    fn skip_rest_of_line(&mut self) {
        loop {
            let (done, used) = match self.inner.fill_buf() {
                Ok([]) | Err(_) => return,
                Ok(avail) => match avail.iter().position(|&b| b == b'\n') {
                    Some(i) => (true, i + 1),
                    None => (false, avail.len()),
                },
            };
            self.inner.consume(used);
            self.offset += used as u64;
            if done {
                return;
            }
        }
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<ControlMessage, DecodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ControlMessage {
        ControlMessage::StateReport {
            step: 3,
            time: 3.0,
            houses: vec![HouseReport {
                house_id: 0,
                t_therm: 22.75,
                t_a: 20.1,
                t_w: 23.6,
                mode: Mode::On,
                time_in_mode: 12.5,
                time_since_off: NEVER_OFF_SENTINEL,
                real_power: 455.25,
            }],
            aggregate_power: 455.25,
        }
    }

    fn all_frames() -> Vec<ControlMessage> {
        vec![
            ControlMessage::Hello {
                protocol: PROTOCOL_VERSION.into(),
                n_houses: 20,
                latch_dt: 1.0,
            },
            report(),
            ControlMessage::SwitchRequests {
                step: 3,
                requests: vec![RequestEntry { house_id: 1, desired_mode: Mode::Off }],
            },
            ControlMessage::Verdicts {
                step: 3,
                verdicts: vec![VerdictEntry {
                    house_id: 1,
                    accepted: false,
                    reason: Reason::LockoutActive,
                }],
            },
            ControlMessage::StepAck { step: 3 },
            ControlMessage::error(ErrorCode::Ordering, "late"),
        ]
    }

    #[test]
    fn every_frame_type_round_trips() {
        for m in all_frames() {
            let bytes = encode(&m).unwrap();
            assert_eq!(*bytes.last().unwrap(), b'\n');
            assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
            assert_eq!(decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn byte_exact_frames() {
        let hello = ControlMessage::Hello {
            protocol: PROTOCOL_VERSION.into(),
            n_houses: 2,
            latch_dt: 1.0,
        };
        assert_eq!(
            encode(&hello).unwrap(),
            b"{\"type\":\"HELLO\",\"protocol\":\"tcl-testbed/1\",\"n_houses\":2,\"latch_dt\":1.0}\n"
        );
        let empty = ControlMessage::SwitchRequests { step: 7, requests: vec![] };
        assert_eq!(encode(&empty).unwrap(), b"{\"type\":\"SWITCH_REQUESTS\",\"step\":7,\"requests\":[]}\n");
        assert_eq!(decode(b"{\"type\":\"SWITCH_REQUESTS\",\"step\":7,\"requests\":[]}\n").unwrap(), empty);
    }

    #[test]
    fn missing_newline_is_truncation() {
        let mut bytes = encode(&ControlMessage::StepAck { step: 1 }).unwrap();
        bytes.pop();
        assert_eq!(
            decode(&bytes),
            Err(DecodeError::Truncated {
                offset: bytes.len() as u64
            })
        );
    }

    #[test]
    fn invalid_utf8_names_offset() {
        let bytes = b"{\"type\":\"ST\xffEP_ACK\",\"step\":1}\n";
        assert_eq!(decode(bytes), Err(DecodeError::InvalidUtf8 { offset: 11 }));
    }

    #[test]
    fn unknown_type_is_named() {
        let err = decode(b"{\"type\":\"REBOOT\",\"step\":1}\n").unwrap_err();
        match err {
            DecodeError::UnknownFrameType { found, offset } => {
                assert_eq!(found, "REBOOT");
                assert!(offset > 0 && offset < 27);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_fields_rejected() {
        assert!(matches!(
            decode(b"{\"type\":\"STEP_ACK\",\"step\":1,\"extra\":0}\n"),
            Err(DecodeError::Malformed { .. })
        ));
        assert!(matches!(decode(b"{\"type\":\"STEP_ACK\"}\n"), Err(DecodeError::Malformed { .. })));
        assert!(matches!(
            decode(b"{\"type\":\"SWITCH_REQUESTS\",\"step\":1,\"requests\":[{\"house_id\":0,\"desired_mode\":\"ON\",\"x\":1}]}\n"),
            Err(DecodeError::Malformed { .. })
        ));
        assert!(matches!(
            decode(b"{\"type\":\"SWITCH_REQUESTS\",\"step\":1,\"requests\":[{\"house_id\":0,\"desired_mode\":\"on\"}]}\n"),
            Err(DecodeError::Malformed { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert!(matches!(
            decode(b"{\"type\":\"STEP_ACK\",\"step\":1}\nxx"),
            Err(DecodeError::Malformed { offset: 29, .. })
        ));
    }

    #[test]
    fn non_finite_numbers_do_not_encode() {
        let m = ControlMessage::Hello {
            protocol: PROTOCOL_VERSION.into(),
            n_houses: 1,
            latch_dt: f64::NAN,
        };
        assert!(encode(&m).is_err());
    }

    #[test]
    fn reader_enforces_step_order_and_continues() {
        let mut stream = Vec::new();
        for step in [1u64, 2, 1, 3] {
            stream.extend(encode(&ControlMessage::SwitchRequests { step, requests: vec![] }).unwrap());
        }
        let first_len = encode(&ControlMessage::SwitchRequests { step: 1, requests: vec![] }).unwrap().len() as u64;
        let mut r = FrameReader::new(stream.as_slice());
        assert!(r.next_frame().unwrap().is_ok());
        assert!(r.next_frame().unwrap().is_ok());
        match r.next_frame().unwrap() {
            Err(DecodeError::Ordering { step: 1, last: 2, offset, .. }) => assert_eq!(offset, 2 * first_len),
            other => panic!("{other:?}"),
        }
        assert!(matches!(r.next_frame(), Some(Ok(ControlMessage::SwitchRequests { step: 3, .. }))));
        assert!(r.next_frame().is_none());
    }

    #[test]
    fn reader_offsets_malformed_frames_from_stream_start() {
        let mut stream = encode(&ControlMessage::StepAck { step: 1 }).unwrap();
        let base = stream.len() as u64;
        stream.extend_from_slice(b"{oops}\n");
        let mut r = FrameReader::new(stream.as_slice());
        r.next_frame().unwrap().unwrap();
        let err = r.next_frame().unwrap().unwrap_err();
        assert_eq!(err.offset(), base + 1);
    }

    #[test]
    fn reader_reports_unterminated_tail() {
        let mut r = FrameReader::new(&b"{\"type\":\"STEP_ACK\",\"step\":1}"[..]);
        assert!(matches!(r.next_frame(), Some(Err(DecodeError::Truncated { offset: 28 }))));
        assert!(r.next_frame().is_none());
    }
}
