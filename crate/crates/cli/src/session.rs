//! Transport-free session state machine.
//!
//! `IDLE -> RUNNING_HYBRID` on the first step, `RUNNING_HYBRID -> CONTROLLING`
//! on an accepted stroke and back once the control episode has run its
//! course. No other edges exist.

use fluidforge_core::control::{
    fit_sketch_from_stroke, BaselineAdapter, Controller, ControllerInput, Sketch, DEFAULT_T_CTR,
};
use fluidforge_core::hybrid::{HybridConfig, HybridRunner, StepRecord};
use fluidforge_core::{ScenarioConfig, StepMode, Vector};

use crate::protocol::{encode_positions, ClientMessage, ErrorCode, ServerMessage, SessionMode};

/// Which controller turns sketches into force fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ControllerKind {
    #[default]
    Baseline,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Baseline => "baseline",
        }
    }

    fn build(self, dt: f64, fine_steps: usize, gravity: Vector<f32>) -> Box<dyn Controller<f32>> {
        match self {
            ControllerKind::Baseline => Box::new(BaselineAdapter::new(fine_steps, dt, gravity)),
        }
    }
}

#[derive(Clone)]
pub struct SessionOptions {
    pub scenario: ScenarioConfig,
    pub hybrid: HybridConfig<f32>,
    pub controller: ControllerKind,
    /// Fine MPM steps per control episode.
    pub t_ctr: usize,
}

impl SessionOptions {
    pub fn new(scenario: ScenarioConfig, hybrid: HybridConfig<f32>) -> Self {
        Self { scenario, hybrid, controller: ControllerKind::Baseline, t_ctr: DEFAULT_T_CTR }
    }

    /// Coarse frames per control episode; the episode is rounded up to whole
    /// coarse steps.
    pub fn control_frames(&self) -> usize {
        self.t_ctr.div_ceil(self.hybrid.reduction.r_t).max(1)
    }
}

struct Episode {
    controller: Box<dyn Controller<f32>>,
    sketch: Sketch,
    fine_step: usize,
    frames_left: usize,
}

pub struct Session {
    options: SessionOptions,
    runner: HybridRunner<f32>,
    state: SessionMode,
    paused: bool,
    frames: u64,
    last_mode: Option<StepMode>,
    episode: Option<Episode>,
}

impl Session {
    pub fn new(options: SessionOptions) -> fluidforge_core::Result<Self> {
        let runner = HybridRunner::new(&options.scenario, options.hybrid.clone())?;
        Ok(Self { options, runner, state: SessionMode::Idle, paused: false, frames: 0, last_mode: None, episode: None })
    }

    pub fn state(&self) -> SessionMode {
        self.state
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Index the next frame will carry.
    pub fn frame_index(&self) -> u64 {
        self.frames
    }

    pub fn runner(&self) -> &HybridRunner<f32> {
        &self.runner
    }

    pub fn options(&self) -> &SessionOptions {
        &self.options
    }

    /// Parses and applies one client text message.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![ServerMessage::error(ErrorCode::BadMessage, e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Stroke { points } => self.start_control(&points),
            ClientMessage::SetRc { value } => match self.runner.set_threshold(value) {
                Ok(()) => {
                    self.options.hybrid.r_c = value;
                    Vec::new()
                }
                Err(e) => vec![ServerMessage::error(ErrorCode::BadMessage, e.to_string())],
            },
            ClientMessage::Pause => {
                self.paused = true;
                Vec::new()
            }
            ClientMessage::Resume => {
                self.paused = false;
                Vec::new()
            }
            ClientMessage::Reset => self.reset(),
        }
    }

    fn start_control(&mut self, points: &[[f64; 2]]) -> Vec<ServerMessage> {
        match self.state {
            SessionMode::Controlling => {
                return vec![ServerMessage::error(ErrorCode::Busy, "a control episode is already running")];
            }
            SessionMode::Idle => {
                return vec![ServerMessage::error(ErrorCode::NotRunning, "the session has not started")];
            }
            SessionMode::RunningHybrid => {}
        }
        let sketch = match fit_sketch_from_stroke(points) {
            Ok(s) => s,
            Err(e) => return vec![ServerMessage::error(ErrorCode::BadStroke, e.to_string())],
        };
        self.runner.force_fallback();
        let frames = self.options.control_frames();
        let fine_steps = frames * self.options.hybrid.reduction.r_t;
        let gravity = self.options.scenario.gravity_vector::<f32>();
        let controller = self.options.controller.build(self.options.scenario.dt, fine_steps, gravity);
        let started = ServerMessage::ControlStarted {
            index: self.frames,
            sketch: sketch.geometry.clone(),
            controller: self.options.controller.label().to_string(),
            frames,
        };
        self.episode = Some(Episode { controller, sketch, fine_step: 0, frames_left: frames });
        self.state = SessionMode::Controlling;
        vec![started]
    }

    fn reset(&mut self) -> Vec<ServerMessage> {
        match HybridRunner::new(&self.options.scenario, self.options.hybrid.clone()) {
            Ok(runner) => self.runner = runner,
            Err(e) => return vec![ServerMessage::error(ErrorCode::Simulation, e.to_string())],
        }
        self.episode = None;
        if self.state == SessionMode::Controlling {
            self.state = SessionMode::RunningHybrid;
        }
        // forces a mode_change on the next frame
        self.last_mode = None;
        Vec::new()
    }

    /// Advances one coarse step and returns the messages it produced: an
    /// optional mode change followed by the frame.
    pub fn advance(&mut self) -> fluidforge_core::Result<Vec<ServerMessage>> {
        if self.paused {
            return Ok(Vec::new());
        }
        if self.state == SessionMode::Idle {
            self.state = SessionMode::RunningHybrid;
        }
        let record = match self.episode.as_mut() {
            Some(ep) => {
                let rows = control_rows(&mut self.runner, ep, self.options.hybrid.reduction.r_t)?;
                let record = self.runner.step_controlled(&rows)?;
                ep.frames_left -= 1;
                record
            }
            None => self.runner.step()?,
        };
        let mut out = Vec::with_capacity(2);
        let index = self.frames;
        if self.last_mode != Some(record.mode) {
            out.push(ServerMessage::ModeChange { index, mode: record.mode, state: self.state });
            self.last_mode = Some(record.mode);
        }
        out.push(self.frame_message(index, &record));
        self.frames += 1;
        if self.episode.as_ref().is_some_and(|ep| ep.frames_left == 0) {
            self.episode = None;
            self.state = SessionMode::RunningHybrid;
            let mode = self.runner.mode();
            out.push(ServerMessage::ModeChange { index: self.frames, mode, state: self.state });
            self.last_mode = Some(mode);
        }
        Ok(out)
    }

    fn frame_message(&self, index: u64, record: &StepRecord) -> ServerMessage {
        let p = self.runner.particles();
        ServerMessage::Frame {
            index,
            mode: record.mode,
            latency_ms: record.latency * 1e3,
            dim: p.dim,
            count: p.len(),
            positions: encode_positions(&p.positions, p.dim),
        }
    }
}

/// Queries the controller once per fine step of the next coarse step, with the
/// state at the start of that coarse step.
fn control_rows(runner: &mut HybridRunner<f32>, ep: &mut Episode, r_t: usize) -> fluidforge_core::Result<Vec<Vec<Vector<f32>>>> {
    let history = runner.recent_frames();
    let mut rows = Vec::with_capacity(r_t);
    for _ in 0..r_t {
        let input = ControllerInput {
            state_history: &history,
            state: runner.particles(),
            sketch: &ep.sketch,
            control_step_index: ep.fine_step,
        };
        let row = ep.controller.evaluate(&input)?;
        if !row.iter().all(Vector::is_finite) {
            return Err(fluidforge_core::Error::NonFiniteField { step: ep.fine_step });
        }
        rows.push(row);
        ep.fine_step += 1;
    }
    Ok(rows)
}
