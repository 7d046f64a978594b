//! Newline-delimited JSON frames between the runtime and an operator console.
//!
//! Every frame is one flat object with a `type` field. Incoming text is
//! checked field by field before decoding so a rejection can name the field.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::scheduler::TraceRecord;
use super::state_machine::SmMode;
use crate::kinematics::TOTAL_DOF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Policy,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainName {
    Damping,
    PdVelocityScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireMetrics {
    pub cs_mean: f64,
    pub ct_mean: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub q: [f64; TOTAL_DOF],
    /// Position then unit quaternion `w, x, y, z`.
    pub palm_pose: [f64; 7],
    pub obj_pos: [f64; 3],
    pub obj_pred: [f64; 3],
    pub grasped: bool,
    pub sm_mode: SmMode,
    pub metrics: WireMetrics,
    pub adr_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    State(StateFrame),
    Target {
        palm: [f64; 6],
        pca: [f64; 5],
    },
    Mode {
        value: ControlMode,
    },
    Gain {
        name: GainName,
        value: f64,
    },
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
    },
    Trace(TraceRecord),
}

impl Frame {
    pub fn error(message: impl Into<String>, field: Option<&str>) -> Frame {
        Frame::Error { message: message.into(), field: field.map(str::to_string) }
    }

    /// One line of text, newline included.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames are plain data");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct WireError {
    pub message: String,
    pub field: Option<String>,
}

impl WireError {
    fn at(field: &str, message: String) -> Self {
        WireError { message, field: Some(field.to_string()) }
    }

    pub fn to_frame(&self) -> Frame {
        Frame::Error { message: self.message.clone(), field: self.field.clone() }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Number,
    Integer,
    Bool,
    Text,
    Numbers(usize),
    OneOf(&'static [&'static str]),
    Object(&'static [(&'static str, Kind)]),
    Any,
}

const METRICS: &[(&str, Kind)] = &[("cs_mean", Kind::Number), ("ct_mean", Kind::Number), ("sr", Kind::Number)];
const SM_MODES: &[&str] = &["PolicyActive", "LiftToBin", "Deposit", "ReturnHome"];

fn schema(kind: &str) -> Option<&'static [(&'static str, Kind)]> {
    Some(match kind {
        "state" => &[
            ("tick", Kind::Integer),
            ("q", Kind::Numbers(TOTAL_DOF)),
            ("palm_pose", Kind::Numbers(7)),
            ("obj_pos", Kind::Numbers(3)),
            ("obj_pred", Kind::Numbers(3)),
            ("grasped", Kind::Bool),
            ("sm_mode", Kind::OneOf(SM_MODES)),
            ("metrics", Kind::Object(METRICS)),
            ("adr_fraction", Kind::Number),
        ],
        "target" => &[("palm", Kind::Numbers(6)), ("pca", Kind::Numbers(5))],
        "mode" => &[("value", Kind::OneOf(&["policy", "manual"]))],
        "gain" => &[("name", Kind::OneOf(&["damping", "pd_velocity_scale"])), ("value", Kind::Number)],
        "error" => &[("message", Kind::Text)],
        "trace" => &[("tick", Kind::Integer), ("node", Kind::Text), ("kind", Kind::Text), ("payload", Kind::Any)],
        _ => return None,
    })
}

fn check(field: &str, kind: Kind, v: &Value) -> Result<(), WireError> {
    let bad = |what: &str| Err(WireError::at(field, format!("field `{field}` must be {what}")));
    match kind {
        Kind::Number if v.is_number() => Ok(()),
        Kind::Number => bad("a number"),
        Kind::Integer if v.is_u64() => Ok(()),
        Kind::Integer => bad("a non-negative integer"),
        Kind::Bool if v.is_boolean() => Ok(()),
        Kind::Bool => bad("true or false"),
        Kind::Text if v.is_string() => Ok(()),
        Kind::Text => bad("a string"),
        Kind::Numbers(n) => match v.as_array() {
            Some(a) if a.len() == n && a.iter().all(Value::is_number) => Ok(()),
            _ => bad(&format!("an array of {n} numbers")),
        },
        Kind::OneOf(options) => match v.as_str() {
            Some(s) if options.contains(&s) => Ok(()),
            _ => bad(&format!("one of {}", options.join(", "))),
        },
        Kind::Object(fields) => match v.as_object() {
            Some(o) => check_fields(o, fields),
            None => bad("an object"),
        },
        Kind::Any => Ok(()),
    }
}

fn check_fields(obj: &Map<String, Value>, fields: &[(&str, Kind)]) -> Result<(), WireError> {
    for &(name, kind) in fields {
        match obj.get(name) {
            Some(v) => check(name, kind, v)?,
            None => return Err(WireError::at(name, format!("missing field `{name}`"))),
        }
    }
    Ok(())
}

/// Checks a decoded JSON value against the frame grammar.
pub fn validate_frame(v: &Value) -> Result<(), WireError> {
    let obj = v.as_object().ok_or_else(|| WireError { message: "frame must be a JSON object".into(), field: None })?;
    let kind = match obj.get("type") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(WireError::at("type", "field `type` must be a string".into())),
        None => return Err(WireError::at("type", "missing field `type`".into())),
    };
    let fields = schema(kind).ok_or_else(|| WireError::at("type", format!("unknown frame type `{kind}`")))?;
    check_fields(obj, fields)?;
    if kind == "error" {
        if let Some(f) = obj.get("field") {
            check("field", Kind::Text, f)?;
        }
    }
    Ok(())
}

/// Parses and validates any frame.
pub fn parse_frame(line: &str) -> Result<Frame, WireError> {
    let v: Value =
        serde_json::from_str(line.trim()).map_err(|e| WireError { message: format!("malformed JSON: {e}"), field: None })?;
    validate_frame(&v)?;
    serde_json::from_value(v).map_err(|e| WireError { message: e.to_string(), field: None })
}

/// Parses a frame a console may send: `target`, `mode` or `gain`.
pub fn parse_command(line: &str) -> Result<Frame, WireError> {
    let frame = parse_frame(line)?;
    match frame {
        Frame::Target { .. } | Frame::Mode { .. } | Frame::Gain { .. } => Ok(frame),
        _ => Err(WireError::at("type", "only target, mode and gain frames are accepted".into())),
    }
}

/// Trace file text: one `trace` frame per line.
pub fn write_trace(trace: &[TraceRecord]) -> String {
    trace.iter().map(|r| Frame::Trace(r.clone()).to_line()).collect()
}

pub fn read_trace(text: &str) -> Result<Vec<TraceRecord>, WireError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match parse_frame(l) {
            Ok(Frame::Trace(r)) => Ok(r),
            Ok(_) => Err(WireError::at("type", format!("line {}: expected a trace frame", i + 1))),
            Err(e) => Err(WireError { message: format!("line {}: {}", i + 1, e.message), field: e.field }),
        })
        .collect()
}
