//! JSON messages exchanged over `/sessions/{id}/stream`.
//!
//! Every message is a text frame holding one JSON object tagged by `type`.
//! Frame positions travel as base64 of little-endian `f32`, `count * dim`
//! values, particle-major.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use fluidforge_core::control::SketchGeometry;
use fluidforge_core::{StepMode, Vector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Freehand stroke in domain x/y coordinates.
    Stroke { points: Vec<[f64; 2]> },
    SetRc { value: f64 },
    Pause,
    Resume,
    Reset,
}

/// Lifecycle state of a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionMode {
    Idle,
    RunningHybrid,
    Controlling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// A stroke arrived during a control episode.
    Busy,
    BadMessage,
    BadStroke,
    NotRunning,
    Simulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        index: u64,
        mode: StepMode,
        latency_ms: f64,
        dim: usize,
        count: usize,
        positions: String,
    },
    /// Sent whenever the solver mode or the session state changes, before the
    /// frame it applies to. Never dropped.
    ModeChange { index: u64, mode: StepMode, state: SessionMode },
    ControlStarted { index: u64, sketch: SketchGeometry, controller: String, frames: usize },
    Error { code: ErrorCode, detail: String },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error { code, detail: detail.into() }
    }

    /// Frames may be coalesced or dropped under backpressure; everything else
    /// is delivered.
    pub fn is_droppable(&self) -> bool {
        matches!(self, ServerMessage::Frame { .. })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }
}

pub fn encode_positions(positions: &[Vector<f32>], dim: usize) -> String {
    let mut bytes = Vec::with_capacity(positions.len() * dim * 4);
    for p in positions {
        for a in 0..dim {
            bytes.extend_from_slice(&p[a].to_le_bytes());
        }
    }
    STANDARD.encode(bytes)
}

pub fn decode_positions(encoded: &str, dim: usize) -> Option<Vec<Vec<f32>>> {
    let bytes = STANDARD.decode(encoded).ok()?;
    if dim == 0 || bytes.len() % (4 * dim) != 0 {
        return None;
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Some(values.chunks_exact(dim).map(<[f32]>::to_vec).collect())
}

/// Protocol schema shipped for client code generation.
pub const SCHEMA: &str = include_str!("../protocol.schema.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_grammar() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"stroke","points":[[0.1,0.2],[0.3,0.4]]}"#).unwrap();
        assert_eq!(m, ClientMessage::Stroke { points: vec![[0.1, 0.2], [0.3, 0.4]] });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"set_rc","value":0.5}"#).unwrap();
        assert_eq!(m, ClientMessage::SetRc { value: 0.5 });
        for (text, expected) in [("pause", ClientMessage::Pause), ("resume", ClientMessage::Resume), ("reset", ClientMessage::Reset)] {
            let m: ClientMessage = serde_json::from_str(&format!(r#"{{"type":"{text}"}}"#)).unwrap();
            assert_eq!(m, expected);
        }
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"explode"}"#).is_err());
    }

    #[test]
    fn server_grammar() {
        let m = ServerMessage::ModeChange { index: 3, mode: StepMode::Control, state: SessionMode::Controlling };
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["type"], "mode_change");
        assert_eq!(v["mode"], "CONTROL");
        assert_eq!(v["state"], "CONTROLLING");
        let e = ServerMessage::error(ErrorCode::Busy, "control in progress");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["code"], "busy");
        assert!(!e.is_droppable());
    }

    #[test]
    fn positions_round_trip() {
        let p = vec![Vector::from_f64(&[0.25, 0.5]), Vector::from_f64(&[0.125, 0.75])];
        let s = encode_positions(&p, 2);
        assert_eq!(decode_positions(&s, 2).unwrap(), vec![vec![0.25, 0.5], vec![0.125, 0.75]]);
        assert!(decode_positions("!!", 2).is_none());
    }

    #[test]
    fn schema_lists_every_message_type() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let types = |key: &str| -> Vec<String> {
            schema["definitions"][key]["oneOf"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d["properties"]["type"]["const"].as_str().unwrap().to_string())
                .collect()
        };
        assert_eq!(types("ClientMessage"), ["stroke", "set_rc", "pause", "resume", "reset"]);
        assert_eq!(types("ServerMessage"), ["frame", "mode_change", "control_started", "error"]);
    }
}
