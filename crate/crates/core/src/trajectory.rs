//! Trajectories and their little-endian binary file format.
//!
//! Layout (`FLF1`):
//!
//! ```text
//! magic "FLF1" | version u16 | dim u8 | reserved u8 | N u32 | frame_count u32 | dt f64 | flags u32
//! material_ids            N x u8
//! masses                  N x f32                      (flags bit 3)
//! per frame:  positions   N*dim x f32
//!             velocities  N*dim x f32                  (flags bit 0)
//!             accels      N*dim x f32                  (flags bit 1)
//! mode_log                frame_count x u8             (flags bit 2)
//! ```
//!
//! The scenario configuration (and timing log, when present) lives in a JSON
//! sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::linalg::Vector;
use crate::num::Real;
use crate::particles::ParticleSet;
use crate::scenario::ScenarioConfig;

pub const TRAJECTORY_MAGIC: [u8; 4] = *b"FLF1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

pub const FLAG_VELOCITIES: u32 = 1 << 0;
pub const FLAG_ACCELS: u32 = 1 << 1;
pub const FLAG_MODE_LOG: u32 = 1 << 2;
pub const FLAG_MASSES: u32 = 1 << 3;

/// Which solver produced a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepMode {
    Neural,
    Mpm,
    Control,
}

impl StepMode {
    pub fn as_byte(self) -> u8 {
        match self {
            StepMode::Neural => 0,
            StepMode::Mpm => 1,
            StepMode::Control => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(StepMode::Neural),
            1 => Some(StepMode::Mpm),
            2 => Some(StepMode::Control),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StepMode::Neural => "NEURAL",
            StepMode::Mpm => "MPM",
            StepMode::Control => "CONTROL",
        }
    }
}

/// Mode byte stored for frame 0, which no step produced.
const INITIAL_FRAME_MODE: u8 = 0xFF;

pub type Frame<T> = Vec<Vector<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub config: ScenarioConfig,
    pub dim: usize,
    /// Time between consecutive frames.
    pub dt: f64,
    pub material_ids: Vec<u8>,
    pub masses: Option<Vec<T>>,
    pub positions: Vec<Frame<T>>,
    pub velocities: Option<Vec<Frame<T>>>,
    pub accels: Option<Vec<Frame<T>>>,
    /// One entry per step, i.e. `frame_count - 1` entries.
    pub mode_log: Option<Vec<StepMode>>,
    /// Wall-clock seconds per step.
    pub timing_log: Option<Vec<f64>>,
}

impl<T: Real> Trajectory<T> {
    /// Starts a trajectory whose first frame is `particles`.
    pub fn from_initial(config: ScenarioConfig, dt: f64, particles: &ParticleSet<T>) -> Self {
        Self {
            config,
            dim: particles.dim,
            dt,
            material_ids: particles.material_ids.clone(),
            masses: Some(particles.masses.clone()),
            positions: vec![particles.positions.clone()],
            velocities: Some(vec![particles.velocities.clone()]),
            accels: None,
            mode_log: None,
            timing_log: None,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.positions.len()
    }

    pub fn particle_count(&self) -> usize {
        self.material_ids.len()
    }

    /// Appends positions and velocities of `particles` as the next frame.
    pub fn push_particles(&mut self, particles: &ParticleSet<T>) {
        self.positions.push(particles.positions.clone());
        if let Some(v) = &mut self.velocities {
            v.push(particles.velocities.clone());
        }
    }

    /// Masses, or unit masses when the trajectory does not carry them.
    pub fn masses_or_unit(&self) -> Vec<T> {
        self.masses.clone().unwrap_or_else(|| vec![T::one(); self.particle_count()])
    }

    /// Reassembles frame `k` as a particle set (deformation state at rest).
    pub fn particles_at(&self, k: usize) -> ParticleSet<T> {
        let n = self.particle_count();
        let mut p = ParticleSet::new(self.dim);
        let velocities = self.velocities.as_ref().map(|v| &v[k]);
        let masses = self.masses_or_unit();
        for i in 0..n {
            let v = velocities.map(|v| v[i]).unwrap_or_else(Vector::zero);
            p.push(self.positions[k][i], v, masses[i], self.material_ids[i]);
        }
        p
    }

    /// Checks the shape invariants shared by every frame.
    pub fn validate(&self) -> Result<()> {
        let n = self.particle_count();
        let frames = self.frame_count();
        let frames_ok = |f: &Vec<Frame<T>>| f.len() == frames && f.iter().all(|x| x.len() == n);
        if !frames_ok(&self.positions) {
            return Err(argument("position frames have inconsistent particle counts"));
        }
        if self.velocities.as_ref().is_some_and(|v| !frames_ok(v)) {
            return Err(argument("velocity frames do not match position frames"));
        }
        if self.accels.as_ref().is_some_and(|v| !frames_ok(v)) {
            return Err(argument("acceleration frames do not match position frames"));
        }
        if self.masses.as_ref().is_some_and(|m| m.len() != n) {
            return Err(argument("mass column does not match particle count"));
        }
        let steps = frames.saturating_sub(1);
        if self.mode_log.as_ref().is_some_and(|m| m.len() != steps) {
            return Err(argument("mode log length must equal the step count"));
        }
        if self.timing_log.as_ref().is_some_and(|m| m.len() != steps) {
            return Err(argument("timing log length must equal the step count"));
        }
        if !(2..=3).contains(&self.dim) {
            return Err(argument("dim must be 2 or 3"));
        }
        Ok(())
    }

    pub fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.velocities.is_some() {
            flags |= FLAG_VELOCITIES;
        }
        if self.accels.is_some() {
            flags |= FLAG_ACCELS;
        }
        if self.mode_log.is_some() {
            flags |= FLAG_MODE_LOG;
        }
        if self.masses.is_some() {
            flags |= FLAG_MASSES;
        }
        flags
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = self.particle_count();
        let frames = self.frame_count();
        let header = Header {
            magic: TRAJECTORY_MAGIC,
            dim: self.dim as u8,
            count: n as u32,
            frames: frames as u32,
            dt: self.dt,
            flags: self.flags(),
        };
        let mut out = Vec::with_capacity(expected_len(&header));
        header.write(&mut out);
        out.extend_from_slice(&self.material_ids);
        if let Some(m) = &self.masses {
            m.iter().for_each(|x| out.extend_from_slice(&x.as_f32().to_le_bytes()));
        }
        for k in 0..frames {
            write_frame(&mut out, &self.positions[k], self.dim);
            if let Some(v) = &self.velocities {
                write_frame(&mut out, &v[k], self.dim);
            }
            if let Some(a) = &self.accels {
                write_frame(&mut out, &a[k], self.dim);
            }
        }
        if let Some(log) = &self.mode_log {
            out.push(INITIAL_FRAME_MODE);
            out.extend(log.iter().map(|m| m.as_byte()));
        }
        Ok(out)
    }

    /// Decodes a payload; the configuration must be supplied separately.
    pub fn from_bytes(bytes: &[u8], config: ScenarioConfig) -> Result<Self> {
        let header = Header::read(bytes, TRAJECTORY_MAGIC)?;
        let want = expected_len(&header);
        if bytes.len() < want {
            return Err(Error::Corrupt(format!("payload truncated: {} of {want} bytes", bytes.len())));
        }
        if bytes.len() > want {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - want)));
        }
        let dim = header.dim as usize;
        let n = header.count as usize;
        let frames = header.frames as usize;
        let mut cur = Cursor { bytes, pos: HEADER_LEN };
        let material_ids = cur.take(n).to_vec();
        let masses = (header.flags & FLAG_MASSES != 0).then(|| cur.f32s::<T>(n));
        let mut positions = Vec::with_capacity(frames);
        let mut velocities = (header.flags & FLAG_VELOCITIES != 0).then(Vec::new);
        let mut accels = (header.flags & FLAG_ACCELS != 0).then(Vec::new);
        for _ in 0..frames {
            positions.push(cur.frame(n, dim));
            if let Some(v) = &mut velocities {
                v.push(cur.frame(n, dim));
            }
            if let Some(a) = &mut accels {
                a.push(cur.frame(n, dim));
            }
        }
        let mode_log = if header.flags & FLAG_MODE_LOG != 0 {
            let raw = cur.take(frames);
            let mut log = Vec::with_capacity(frames.saturating_sub(1));
            for b in raw.iter().skip(1) {
                log.push(StepMode::from_byte(*b).ok_or_else(|| Error::Corrupt(format!("bad mode byte {b}")))?);
            }
            Some(log)
        } else {
            None
        };
        let traj = Self {
            config,
            dim,
            dt: header.dt,
            material_ids,
            masses,
            positions,
            velocities,
            accels,
            mode_log,
            timing_log: None,
        };
        Ok(traj)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timing_log: Option<Vec<f64>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_trajectory<T: Real>(traj: &Trajectory<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, traj.to_bytes()?)?;
    let sidecar = Sidecar { config: traj.config.clone(), timing_log: traj.timing_log.clone() };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_trajectory<T: Real>(path: impl AsRef<Path>) -> Result<Trajectory<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut traj = Trajectory::from_bytes(&bytes, sidecar.config)?;
    if let Some(t) = sidecar.timing_log {
        if t.len() != traj.frame_count().saturating_sub(1) {
            return Err(Error::Corrupt("timing log length does not match frames".into()));
        }
        traj.timing_log = Some(t);
    }
    Ok(traj)
}

/// Fixed 28-byte header shared by trajectory and force-field files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Header {
    pub magic: [u8; 4],
    pub dim: u8,
    pub count: u32,
    pub frames: u32,
    pub dt: f64,
    pub flags: u32,
}

impl Header {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dim);
        out.push(0);
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.frames.to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
    }

    pub fn read(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != magic {
            return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(&magic))));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt("header truncated".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = bytes[6];
        if !(2..=3).contains(&dim) {
            return Err(Error::Format(format!("unsupported dim {dim}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        Ok(Self {
            magic,
            dim,
            count: u32_at(8),
            frames: u32_at(12),
            dt: f64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            flags: u32_at(24),
        })
    }
}

fn expected_len(h: &Header) -> usize {
    let n = h.count as usize;
    let frames = h.frames as usize;
    let block = n * h.dim as usize * 4;
    let per_frame_blocks = 1
        + (h.flags & FLAG_VELOCITIES != 0) as usize
        + (h.flags & FLAG_ACCELS != 0) as usize;
    HEADER_LEN
        + n
        + if h.flags & FLAG_MASSES != 0 { n * 4 } else { 0 }
        + frames * per_frame_blocks * block
        + if h.flags & FLAG_MODE_LOG != 0 { frames } else { 0 }
}

pub(crate) fn write_frame<T: Real>(out: &mut Vec<u8>, frame: &[Vector<T>], dim: usize) {
    for v in frame {
        for a in 0..dim {
            out.extend_from_slice(&v[a].as_f32().to_le_bytes());
        }
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, len: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        s
    }

    pub fn f32s<T: Real>(&mut self, count: usize) -> Vec<T> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    }

    pub fn frame<T: Real>(&mut self, n: usize, dim: usize) -> Frame<T> {
        let flat = self.f32s::<T>(n * dim);
        flat.chunks_exact(dim).map(Vector::from_slice).collect()
    }
}
