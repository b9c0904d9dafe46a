//! Newline-delimited JSON wire protocol.
//!
//! One message per line, `"v":1` first, then `"type"`, then the type's keys
//! in a fixed order. Unknown keys are ignored on decode; unknown types are
//! rejected. Numbers are written without exponents.

use std::fmt::Write as _;

use chrono::{DateTime, SecondsFormat, Utc};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::device::{Mode, Phase, TelemetrySnapshot};

pub const PROTOCOL_VERSION: u64 = 1;
/// Longest accepted line, newline included.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("cannot encode: `{key}` {reason}")]
    Encode { key: &'static str, reason: String },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("bad `{key}`: {reason}")]
    Decode { key: String, reason: String },
    #[error("line of {len} bytes exceeds the {MAX_LINE_BYTES} byte cap")]
    Oversize { len: usize },
}

impl ProtocolError {
    /// Key named by a decode or encode error, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ProtocolError::Decode { key, .. } => Some(key),
            ProtocolError::Encode { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandAction {
    Activate,
    Stop,
    SetTension,
}

impl CommandAction {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandAction::Activate => "activate",
            CommandAction::Stop => "stop",
            CommandAction::SetTension => "set_tension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "activate" => Some(CommandAction::Activate),
            "stop" => Some(CommandAction::Stop),
            "set_tension" => Some(CommandAction::SetTension),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub id: String,
    pub device: String,
    pub action: CommandAction,
    /// Present iff `action` is activate.
    pub mode: Option<Mode>,
    /// Present iff `action` is set_tension.
    pub tension_n: Option<f64>,
}

impl Command {
    pub fn activate(id: impl Into<String>, device: impl Into<String>, mode: Mode) -> Self {
        Self {
            id: id.into(),
            device: device.into(),
            action: CommandAction::Activate,
            mode: Some(mode),
            tension_n: None,
        }
    }

    pub fn stop(id: impl Into<String>, device: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            device: device.into(),
            action: CommandAction::Stop,
            mode: None,
            tension_n: None,
        }
    }

    pub fn set_tension(id: impl Into<String>, device: impl Into<String>, tension_n: f64) -> Self {
        Self {
            id: id.into(),
            device: device.into(),
            action: CommandAction::SetTension,
            mode: None,
            tension_n: Some(tension_n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ack {
    pub id: String,
    pub ok: bool,
    pub error: Option<String>,
}

impl Ack {
    pub fn ok(id: impl Into<String>) -> Self {
        Self { id: id.into(), ok: true, error: None }
    }

    pub fn err(id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ok: false,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Telemetry {
    pub device: String,
    pub t_s: f64,
    pub mode: Mode,
    pub phase: Phase,
    pub freq_hz: f64,
    pub remaining_s: f64,
    pub tension_n: f64,
}

impl From<TelemetrySnapshot> for Telemetry {
    fn from(s: TelemetrySnapshot) -> Self {
        Self {
            device: s.device,
            t_s: s.t_s,
            mode: s.mode,
            phase: s.phase,
            freq_hz: s.freq_hz,
            remaining_s: s.remaining_s,
            tension_n: s.tension_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub camera: String,
    /// Frame-difference score in [0, 1].
    pub score: f64,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Cmd(Command),
    Ack(Ack),
    Telemetry(Telemetry),
    Motion(Motion),
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Cmd(_) => "cmd",
            WireMessage::Ack(_) => "ack",
            WireMessage::Telemetry(_) => "telemetry",
            WireMessage::Motion(_) => "motion",
        }
    }

    /// Checks the type invariants that `encode` enforces.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |key: &'static str, reason: &str| {
            Err(ProtocolError::Encode {
                key,
                reason: reason.to_owned(),
            })
        };
        match self {
            WireMessage::Cmd(c) => {
                match (c.action, c.mode, c.tension_n) {
                    (CommandAction::Activate, None, _) => return bad("mode", "is required for activate"),
                    (CommandAction::Activate, Some(Mode::Idle), _) => {
                        return bad("mode", "must be swimming or begging")
                    }
                    (a, Some(_), _) if a != CommandAction::Activate => {
                        return bad("mode", "is only allowed for activate")
                    }
                    (CommandAction::SetTension, _, None) => return bad("tension_n", "is required for set_tension"),
                    (a, _, Some(_)) if a != CommandAction::SetTension => {
                        return bad("tension_n", "is only allowed for set_tension")
                    }
                    _ => {}
                }
                if let Some(t) = c.tension_n {
                    if !(t.is_finite() && t >= 0.0) {
                        return bad("tension_n", "must be finite and >= 0");
                    }
                }
            }
            WireMessage::Ack(_) => {}
            WireMessage::Telemetry(t) => {
                for (key, v) in [
                    ("t_s", t.t_s),
                    ("freq_hz", t.freq_hz),
                    ("remaining_s", t.remaining_s),
                    ("tension_n", t.tension_n),
                ] {
                    if !v.is_finite() {
                        return bad(key, "must be finite");
                    }
                }
            }
            WireMessage::Motion(m) => {
                if !(0.0..=1.0).contains(&m.score) {
                    return bad("score", "must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

struct LineWriter(String);

impl LineWriter {
    fn new(kind: &str) -> Self {
        Self(format!("{{\"v\":{PROTOCOL_VERSION},\"type\":\"{kind}\""))
    }

    fn str(mut self, key: &str, value: &str) -> Self {
        let quoted = serde_json::to_string(value).expect("strings always serialize");
        let _ = write!(self.0, ",\"{key}\":{quoted}");
        self
    }

    fn num(mut self, key: &str, value: f64) -> Self {
        // f64 Display never uses an exponent and round-trips exactly.
        let _ = write!(self.0, ",\"{key}\":{value}");
        self
    }

    fn bool(mut self, key: &str, value: bool) -> Self {
        let _ = write!(self.0, ",\"{key}\":{value}");
        self
    }

    fn finish(mut self) -> Result<Vec<u8>, ProtocolError> {
        self.0.push_str("}\n");
        if self.0.len() > MAX_LINE_BYTES {
            return Err(ProtocolError::Oversize { len: self.0.len() });
        }
        Ok(self.0.into_bytes())
    }
}

/// Encodes one message as a newline-terminated UTF-8 JSON line.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    msg.validate()?;
    let w = LineWriter::new(msg.type_name());
    let w = match msg {
        WireMessage::Cmd(c) => {
            let mut w = w.str("id", &c.id).str("device", &c.device).str("action", c.action.as_str());
            if let Some(mode) = c.mode {
                w = w.str("mode", mode.as_str());
            }
            if let Some(t) = c.tension_n {
                w = w.num("tension_n", t);
            }
            w
        }
        WireMessage::Ack(a) => {
            let mut w = w.str("id", &a.id).bool("ok", a.ok);
            if let Some(e) = &a.error {
                w = w.str("error", e);
            }
            w
        }
        WireMessage::Telemetry(t) => w
            .str("device", &t.device)
            .num("t_s", t.t_s)
            .str("mode", t.mode.as_str())
            .str("phase", t.phase.as_str())
            .num("freq_hz", t.freq_hz)
            .num("remaining_s", t.remaining_s)
            .num("tension_n", t.tension_n),
        WireMessage::Motion(m) => w
            .str("camera", &m.camera)
            .num("score", m.score)
            .str("ts", &format_ts(&m.ts)),
    };
    w.finish()
}

/// UTC ISO-8601 with a trailing `Z`, sub-second digits only when present.
pub fn format_ts(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_ts(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| e.to_string())
}

struct Fields<'a>(&'a Map<String, Value>);

impl<'a> Fields<'a> {
    fn err(key: &str, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Decode {
            key: key.to_owned(),
            reason: reason.into(),
        }
    }

    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.0.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&'a Value, ProtocolError> {
        self.opt(key).ok_or_else(|| Self::err(key, "missing"))
    }

    fn string(&self, key: &str) -> Result<String, ProtocolError> {
        self.req(key)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Self::err(key, "expected a string"))
    }

    fn number(&self, key: &str) -> Result<f64, ProtocolError> {
        self.req(key)?
            .as_f64()
            .ok_or_else(|| Self::err(key, "expected a number"))
    }

    fn boolean(&self, key: &str) -> Result<bool, ProtocolError> {
        self.req(key)?
            .as_bool()
            .ok_or_else(|| Self::err(key, "expected a boolean"))
    }

    fn mode(&self, key: &str) -> Result<Mode, ProtocolError> {
        self.string(key)?.parse().map_err(|e: String| Self::err(key, e))
    }
}

/// Decodes one line; a trailing newline is optional.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    if bytes.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::Oversize { len: bytes.len() });
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if body.contains(&b'\n') {
        return Err(ProtocolError::Malformed("interior newline".into()));
    }
    let value: Value = serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::Malformed("expected a JSON object".into()))?;
    let f = Fields(obj);

    match f.req("v")?.as_u64() {
        Some(PROTOCOL_VERSION) => {}
        _ => return Err(Fields::err("v", format!("unsupported version, expected {PROTOCOL_VERSION}"))),
    }

    let msg = match f.string("type")?.as_str() {
        "cmd" => {
            let action_str = f.string("action")?;
            let action = CommandAction::parse(&action_str)
                .ok_or_else(|| Fields::err("action", format!("unknown action `{action_str}`")))?;
            let mode = match f.opt("mode") {
                Some(_) => Some(f.mode("mode")?),
                None => None,
            };
            let tension_n = match f.opt("tension_n") {
                Some(_) => Some(f.number("tension_n")?),
                None => None,
            };
            WireMessage::Cmd(Command {
                id: f.string("id")?,
                device: f.string("device")?,
                action,
                mode,
                tension_n,
            })
        }
        "ack" => WireMessage::Ack(Ack {
            id: f.string("id")?,
            ok: f.boolean("ok")?,
            error: match f.opt("error") {
                Some(_) => Some(f.string("error")?),
                None => None,
            },
        }),
        "telemetry" => WireMessage::Telemetry(Telemetry {
            device: f.string("device")?,
            t_s: f.number("t_s")?,
            mode: f.mode("mode")?,
            phase: f.string("phase")?.parse().map_err(|e: String| Fields::err("phase", e))?,
            freq_hz: f.number("freq_hz")?,
            remaining_s: f.number("remaining_s")?,
            tension_n: f.number("tension_n")?,
        }),
        "motion" => WireMessage::Motion(Motion {
            camera: f.string("camera")?,
            score: f.number("score")?,
            ts: parse_ts(&f.string("ts")?).map_err(|e| Fields::err("ts", e))?,
        }),
        other => return Err(Fields::err("type", format!("unknown message type `{other}`"))),
    };

    msg.validate().map_err(|e| match e {
        ProtocolError::Encode { key, reason } => Fields::err(key, reason),
        other => other,
    })?;
    Ok(msg)
}

/// Splits at each 0x0A. Returns complete lines without their terminator and
/// the unterminated tail.
pub fn frame_split(stream: &[u8]) -> (Vec<&[u8]>, &[u8]) {
    let mut lines = Vec::new();
    let mut rest = stream;
    while let Some(pos) = rest.iter().position(|&b| b == b'\n') {
        lines.push(&rest[..pos]);
        rest = &rest[pos + 1..];
    }
    (lines, rest)
}

/// Reassembles lines from arbitrarily chunked input, enforcing the line cap.
#[derive(Debug, Default)]
pub struct LineBuffer {
    pending: Vec<u8>,
}

impl LineBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds a chunk and returns every line it completes. After an oversize
    /// error the buffered partial line is discarded.
    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<Vec<u8>>, ProtocolError> {
        self.pending.extend_from_slice(chunk);
        let (lines, rest) = frame_split(&self.pending);
        if let Some(long) = lines.iter().find(|l| l.len() + 1 > MAX_LINE_BYTES) {
            let len = long.len() + 1;
            self.pending.clear();
            return Err(ProtocolError::Oversize { len });
        }
        if rest.len() >= MAX_LINE_BYTES {
            let len = rest.len();
            self.pending.clear();
            return Err(ProtocolError::Oversize { len });
        }
        let out: Vec<Vec<u8>> = lines.into_iter().map(<[u8]>::to_vec).collect();
        let keep = rest.len();
        let start = self.pending.len() - keep;
        self.pending.drain(..start);
        Ok(out)
    }

    pub fn pending(&self) -> &[u8] {
        &self.pending
    }
}
