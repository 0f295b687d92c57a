//! Sketch-driven control: reverse-simulated force fields, temporal smoothing,
//! sketches and their rasters, the constant-force baseline and controlled
//! MPM rollouts.
//!
//! Force field file (`FFF1`), little endian:
//!
//! ```text
//! magic "FFF1" | version u16 | dim u8 | reserved u8 | N u32 | T_ctr u32 | dt f64 | flags u32
//! per step:   accels  N*dim x f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::linalg::Vector;
use crate::mpm::MpmSolver;
use crate::num::Real;
use crate::particles::ParticleSet;
use crate::scenario::ScenarioConfig;
use crate::trajectory::{write_frame, Cursor, Frame, Header, StepMode, Trajectory, HEADER_LEN};

pub const FORCE_FIELD_MAGIC: [u8; 4] = *b"FFF1";
pub const DEFAULT_T_CTR: usize = 100;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 2.0;

pub const RASTER_SIZE: usize = 128;
pub const ARROW_SEGMENTS_3D: usize = 8;
pub const ARROW_WIDTH_MIN: f64 = 2.0;
pub const ARROW_WIDTH_MAX: f64 = 10.0;
/// Stroke width of 2D arrows and oval outlines, in pixels.
pub const STROKE_WIDTH: f64 = 3.0;
/// A stroke is a closed loop when its endpoints are closer than this
/// fraction of its length.
pub const CLOSED_STROKE_FRACTION: f64 = 0.15;

/// Per-step, per-particle external accelerations of one control episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField<T> {
    pub dim: usize,
    pub dt: f64,
    /// `accels[k][i]` is applied to particle `i` during control step `k`.
    pub accels: Vec<Frame<T>>,
}

impl<T: Real> ForceField<T> {
    /// The same acceleration for every particle and step.
    pub fn constant(dim: usize, dt: f64, t_ctr: usize, n: usize, a: Vector<T>) -> Self {
        Self { dim, dt, accels: vec![vec![a; n]; t_ctr] }
    }

    pub fn t_ctr(&self) -> usize {
        self.accels.len()
    }

    pub fn particle_count(&self) -> usize {
        self.accels.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(argument("dim must be 2 or 3"));
        }
        let n = self.particle_count();
        if self.accels.iter().any(|row| row.len() != n) {
            return Err(argument("force field rows differ in particle count"));
        }
        if let Some(step) = self.accels.iter().position(|row| !row.iter().all(Vector::is_finite)) {
            return Err(Error::NonFiniteField { step });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            magic: FORCE_FIELD_MAGIC,
            dim: self.dim as u8,
            count: self.particle_count() as u32,
            frames: self.t_ctr() as u32,
            dt: self.dt,
            flags: 0,
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.t_ctr() * self.particle_count() * self.dim * 4);
        header.write(&mut out);
        for row in &self.accels {
            write_frame(&mut out, row, self.dim);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = Header::read(bytes, FORCE_FIELD_MAGIC)?;
        let (n, steps, dim) = (h.count as usize, h.frames as usize, h.dim as usize);
        let expected = HEADER_LEN + steps * n * dim * 4;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut cursor = Cursor { bytes, pos: HEADER_LEN };
        let accels = (0..steps).map(|_| cursor.frame(n, dim)).collect();
        let field = Self { dim, dt: h.dt, accels };
        field.validate()?;
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Solves the external accelerations that walk a trajectory backwards.
///
/// Starting from rest at the last frame, row `k` of the result drives the
/// particles from frame `T - k` to frame `T - k - 1` under symplectic Euler
/// with gravity added, so a ballistic replay retraces every frame.
pub fn reverse_force_field<T: Real>(traj: &Trajectory<T>, gravity: &Vector<T>, dt: f64) -> Result<ForceField<T>> {
    traj.validate()?;
    let frames = traj.frame_count();
    if frames < 2 {
        return Err(argument("reverse simulation needs at least two frames"));
    }
    let t_ctr = frames - 1;
    let n = traj.particle_count();
    let h = T::lit(dt);
    let inv_h2 = T::lit(1.0 / (dt * dt));
    let mut v = vec![Vector::<T>::zero(); n];
    let mut accels = Vec::with_capacity(t_ctr);
    for t in (1..=t_ctr).rev() {
        let (prev, cur) = (&traj.positions[t - 1], &traj.positions[t]);
        let row: Frame<T> = (0..n).map(|i| ((prev[i] - cur[i]) - v[i] * h) * inv_h2 - *gravity).collect();
        for (vi, a) in v.iter_mut().zip(&row) {
            *vi += (*a + *gravity) * h;
        }
        accels.push(row);
    }
    Ok(ForceField { dim: traj.dim, dt, accels })
}

/// Cosine of the angle between two vectors; zero when either vanishes.
fn cosine<T: Real>(a: &Vector<T>, b: &Vector<T>) -> f64 {
    let den = (a.norm() * b.norm()).as_f64();
    if den > 0.0 {
        a.dot(b).as_f64() / den
    } else {
        0.0
    }
}

/// Blend weight pulling an acceleration toward its successor.
pub fn blend_coefficient(cos: f64, lambda: f64, beta: f64) -> f64 {
    lambda * (-beta * cos).exp()
}

/// One forward pass of direction-aware temporal smoothing. Each step is
/// pulled toward the original value of the next one; the last step is kept.
pub fn smooth_field<T: Real>(field: &ForceField<T>, lambda: f64, beta: f64) -> Result<ForceField<T>> {
    if !(lambda >= 0.0 && beta >= 0.0) {
        return Err(argument("smoothing needs lambda >= 0 and beta >= 0"));
    }
    let mut out = field.clone();
    for t in 0..field.t_ctr().saturating_sub(1) {
        for (i, a) in out.accels[t].iter_mut().enumerate() {
            let next = field.accels[t + 1][i];
            let c = blend_coefficient(cosine(a, &next), lambda, beta);
            *a = *a - (*a - next) * T::lit(c);
        }
    }
    Ok(out)
}

/// `Σ_t Σ_i ‖a_t,i − a_t+1,i‖²`.
pub fn successor_difference<T: Real>(field: &ForceField<T>) -> f64 {
    field.accels.windows(2).flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (*a - *b).norm_squared().as_f64())).sum()
}

/// Sketch shape in domain coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SketchGeometry {
    /// Polyline from `start` to `end`; `points` holds every vertex (two in
    /// 2D) and `widths` one pixel width per segment.
    Arrow { start: Vec<f64>, end: Vec<f64>, points: Vec<Vec<f64>>, widths: Vec<f64> },
    Oval { center: Vec<f64>, semi_axes: Vec<f64> },
}

impl SketchGeometry {
    pub fn kind(&self) -> &'static str {
        match self {
            SketchGeometry::Arrow { .. } => "arrow",
            SketchGeometry::Oval { .. } => "oval",
        }
    }

    /// Where the sketch asks the fluid to go.
    pub fn target(&self) -> &[f64] {
        match self {
            SketchGeometry::Arrow { end, .. } => end,
            SketchGeometry::Oval { center, .. } => center,
        }
    }

    /// Arrow orientation `atan2(dy, dx)`.
    pub fn angle(&self) -> Option<f64> {
        match self {
            SketchGeometry::Arrow { start, end, .. } => Some((end[1] - start[1]).atan2(end[0] - start[0])),
            SketchGeometry::Oval { .. } => None,
        }
    }

    pub fn length(&self) -> Option<f64> {
        match self {
            SketchGeometry::Arrow { start, end, .. } => Some(distance(start, end)),
            SketchGeometry::Oval { .. } => None,
        }
    }
}

/// RGB image, row-major from the top, one byte per channel. Background is
/// 255 (white), strokes are 0 (black).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![255; width * height * 3] }
    }

    /// Channel value in `[0, 1]`.
    pub fn value(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + channel] as f32 / 255.0
    }

    pub fn is_ink(&self, row: usize, col: usize) -> bool {
        self.data[(row * self.width + col) * 3] == 0
    }

    pub fn ink_count(&self) -> usize {
        self.data.chunks_exact(3).filter(|p| p[0] == 0).count()
    }

    fn ink(&mut self, row: usize, col: usize) {
        let k = (row * self.width + col) * 3;
        self.data[k..k + 3].fill(0);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Inks every pixel whose center lies within `width / 2` of the segment.
    /// Endpoints are in pixel units.
    fn segment(&mut self, a: [f64; 2], b: [f64; 2], width: f64) {
        let r = (width * 0.5).max(0.5);
        let lo = |p: f64, q: f64| ((p.min(q) - r - 1.0).floor().max(0.0)) as usize;
        let hi = |p: f64, q: f64, n: usize| ((p.max(q) + r + 1.0).ceil().max(0.0) as usize).min(n);
        let (d0, d1) = (b[0] - a[0], b[1] - a[1]);
        let len2 = d0 * d0 + d1 * d1;
        for row in lo(a[1], b[1])..hi(a[1], b[1], self.height) {
            for col in lo(a[0], b[0])..hi(a[0], b[0], self.width) {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                let s = if len2 > 0.0 { (((px - a[0]) * d0 + (py - a[1]) * d1) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ex, ey) = (px - (a[0] + s * d0), py - (a[1] + s * d1));
                if ex * ex + ey * ey <= r * r {
                    self.ink(row, col);
                }
            }
        }
    }
}

/// A sketch drawn over the x/y projection of the unit domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    pub geometry: SketchGeometry,
    pub raster: Raster,
}

impl Sketch {
    pub fn new(geometry: SketchGeometry) -> Self {
        let raster = rasterize(&geometry, RASTER_SIZE, RASTER_SIZE);
        Self { geometry, raster }
    }
}

impl Serialize for Sketch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.geometry.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sketch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        SketchGeometry::deserialize(d).map(Sketch::new)
    }
}

/// Domain x/y to pixel coordinates; y points up in the domain.
fn to_pixel(p: &[f64], width: usize, height: usize) -> [f64; 2] {
    [p[0] * width as f64, (1.0 - p[1]) * height as f64]
}

pub fn rasterize(geometry: &SketchGeometry, width: usize, height: usize) -> Raster {
    let mut raster = Raster::blank(width, height);
    match geometry {
        SketchGeometry::Arrow { points, widths, .. } => {
            let px: Vec<[f64; 2]> = points.iter().map(|p| to_pixel(p, width, height)).collect();
            for (k, w) in px.windows(2).zip(widths) {
                raster.segment(k[0], k[1], *w);
            }
            let (tip, tail) = (px[px.len() - 1], px[0]);
            let (dx, dy) = (tip[0] - tail[0], tip[1] - tail[1]);
            let len = (dx * dx + dy * dy).sqrt();
            if len > 0.0 {
                let head = (0.25 * len).clamp(4.0, 12.0);
                let w = widths.last().copied().unwrap_or(STROKE_WIDTH).min(STROKE_WIDTH);
                let back = dy.atan2(dx) + std::f64::consts::PI;
                for side in [-1.0, 1.0] {
                    let phi = back + side * std::f64::consts::FRAC_PI_6;
                    raster.segment(tip, [tip[0] + head * phi.cos(), tip[1] + head * phi.sin()], w);
                }
            }
        }
        SketchGeometry::Oval { center, semi_axes } => {
            const SAMPLES: usize = 256;
            let at = |k: usize| {
                let phi = std::f64::consts::TAU * k as f64 / SAMPLES as f64;
                to_pixel(&[center[0] + semi_axes[0] * phi.cos(), center[1] + semi_axes[1] * phi.sin()], width, height)
            };
            for k in 0..SAMPLES {
                raster.segment(at(k), at(k + 1), STROKE_WIDTH);
            }
        }
    }
    raster
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid_f64<T: Real>(positions: &[Vector<T>], dim: usize) -> Vec<f64> {
    let c = crate::particles::mean(positions);
    (0..dim).map(|a| c[a].as_f64()).collect()
}

/// Per-axis depth-coded widths: `w_min + (w_max - w_min) * (z_i - z_min) / (z_max - z_min)`,
/// with `z_i` the depth displacement of segment `i`. Flat paths get `w_min`.
pub fn depth_widths(depths: &[f64], w_min: f64, w_max: f64) -> Vec<f64> {
    let lo = depths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    depths
        .iter()
        .map(|z| if hi > lo { w_min + (w_max - w_min) * (z - lo) / (hi - lo) } else { w_min })
        .collect()
}

/// Arrow through a sequence of centroids. In 2D the arrow is one segment
/// from first to last; in 3D the path is resampled into eight segments whose
/// widths encode the mean depth displacement of each segment.
pub fn arrow_along(path: &[Vec<f64>], dim: usize) -> Result<Sketch> {
    let (start, end) = match (path.first(), path.last()) {
        (Some(s), Some(e)) if path.len() >= 2 => (s.clone(), e.clone()),
        _ => return Err(argument("an arrow needs at least two path points")),
    };
    if distance(&start, &end) == 0.0 {
        return Err(Error::DegenerateSketch("arrow start and end coincide".into()));
    }
    let (points, widths) = if dim == 3 {
        let points = resample(path, ARROW_SEGMENTS_3D);
        let depths: Vec<f64> = points.windows(2).map(|w| 0.5 * (w[0][2] + w[1][2]) - start[2]).collect();
        let widths = depth_widths(&depths, ARROW_WIDTH_MIN, ARROW_WIDTH_MAX);
        (points, widths)
    } else {
        (vec![start.clone(), end.clone()], vec![STROKE_WIDTH])
    };
    Ok(Sketch::new(SketchGeometry::Arrow { start, end, points, widths }))
}

/// `segments + 1` points evenly spaced by arc length along a polyline.
fn resample(path: &[Vec<f64>], segments: usize) -> Vec<Vec<f64>> {
    let cumulative: Vec<f64> = std::iter::once(0.0)
        .chain(path.windows(2).scan(0.0, |acc, w| {
            *acc += distance(&w[0], &w[1]);
            Some(*acc)
        }))
        .collect();
    let total = *cumulative.last().expect("nonempty");
    (0..=segments)
        .map(|k| {
            let s = total * k as f64 / segments as f64;
            let j = cumulative.partition_point(|&c| c < s).clamp(1, path.len() - 1);
            let span = cumulative[j] - cumulative[j - 1];
            let f = if span > 0.0 { ((s - cumulative[j - 1]) / span).clamp(0.0, 1.0) } else { 0.0 };
            path[j - 1].iter().zip(&path[j]).map(|(a, b)| a + f * (b - a)).collect()
        })
        .collect()
}

/// Arrow from the centroid of `start` to the centroid of `target`.
pub fn make_arrow_sketch<T: Real>(start: &ParticleSet<T>, target: &ParticleSet<T>) -> Result<Sketch> {
    if start.is_empty() || target.is_empty() {
        return Err(argument("arrow sketches need nonempty states"));
    }
    if start.dim != target.dim {
        return Err(argument("states differ in dimension"));
    }
    let dim = start.dim;
    arrow_along(&[centroid_f64(&start.positions, dim), centroid_f64(&target.positions, dim)], dim)
}

/// Arrow following the centroid path of trajectory frames `from..=to`.
pub fn make_arrow_sketch_along<T: Real>(traj: &Trajectory<T>, from: usize, to: usize) -> Result<Sketch> {
    if from >= traj.frame_count() || to >= traj.frame_count() || traj.particle_count() == 0 {
        return Err(argument("frame range outside the trajectory"));
    }
    let path: Vec<Vec<f64>> = if from <= to {
        (from..=to).map(|k| centroid_f64(&traj.positions[k], traj.dim)).collect()
    } else {
        (to..=from).rev().map(|k| centroid_f64(&traj.positions[k], traj.dim)).collect()
    };
    arrow_along(&path, traj.dim)
}

/// Axis-aligned oval: centroid and twice the per-axis standard deviation.
fn oval_of(points: &[Vec<f64>]) -> SketchGeometry {
    let dim = points[0].len();
    let n = points.len() as f64;
    let center: Vec<f64> = (0..dim).map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n).collect();
    let semi_axes = (0..dim)
        .map(|a| 2.0 * (points.iter().map(|p| (p[a] - center[a]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    SketchGeometry::Oval { center, semi_axes }
}

pub fn make_oval_sketch<T: Real>(target: &ParticleSet<T>) -> Result<Sketch> {
    if target.len() < 2 {
        return Err(argument("an oval sketch needs at least two particles"));
    }
    let points: Vec<Vec<f64>> =
        target.positions.iter().map(|p| (0..target.dim).map(|a| p[a].as_f64()).collect()).collect();
    Ok(Sketch::new(oval_of(&points)))
}

/// Fraction of `positions` inside an oval sketch (x/y for 2D, all axes in 3D).
pub fn oval_coverage<T: Real>(positions: &[Vector<T>], geometry: &SketchGeometry) -> Option<f64> {
    let SketchGeometry::Oval { center, semi_axes } = geometry else { return None };
    if positions.is_empty() {
        return None;
    }
    let inside = positions
        .iter()
        .filter(|p| {
            let r2: f64 = center
                .iter()
                .zip(semi_axes)
                .enumerate()
                .map(|(a, (c, s))| ((p[a].as_f64() - c) / s).powi(2))
                .sum();
            r2 <= 1.0
        })
        .count();
    Some(inside as f64 / positions.len() as f64)
}

/// Classifies a freehand stroke in domain x/y coordinates. Closed loops
/// become ovals, everything else an arrow from the first to the last point.
pub fn fit_sketch_from_stroke(stroke: &[[f64; 2]]) -> Result<Sketch> {
    if stroke.len() < 3 {
        return Err(argument(format!("a stroke needs at least 3 points, got {}", stroke.len())));
    }
    if stroke.iter().flatten().any(|v| !v.is_finite()) {
        return Err(argument("stroke points must be finite"));
    }
    let points: Vec<Vec<f64>> = stroke.iter().map(|p| p.to_vec()).collect();
    let length: f64 = points.windows(2).map(|w| distance(&w[0], &w[1])).sum();
    let gap = distance(&points[0], &points[points.len() - 1]);
    if length > 0.0 && gap < CLOSED_STROKE_FRACTION * length {
        return Ok(Sketch::new(oval_of(&points)));
    }
    arrow_along(&[points[0].clone(), points[points.len() - 1].clone()], 2)
}

/// Target centroid of a sketch for a `dim`-dimensional state. Missing axes
/// (a 2D sketch over a 3D state) keep the current centroid.
pub fn sketch_target<T: Real>(sketch: &Sketch, current: &Vector<T>, dim: usize) -> Vector<T> {
    let target = sketch.geometry.target();
    let mut out = *current;
    for a in 0..dim.min(target.len()) {
        out[a] = T::lit(target[a]);
    }
    out
}

/// Constant acceleration that carries the centroid, under ballistic
/// symplectic Euler, onto the sketch target in exactly `t_ctr` steps.
pub fn baseline_acceleration<T: Real>(
    state: &ParticleSet<T>,
    sketch: &Sketch,
    t_ctr: usize,
    dt: f64,
    gravity: &Vector<T>,
) -> Result<Vector<T>> {
    if state.is_empty() || t_ctr == 0 || !(dt > 0.0) {
        return Err(argument("baseline needs particles, t_ctr > 0 and dt > 0"));
    }
    let current = state.centroid();
    let delta = sketch_target(sketch, &current, state.dim) - current;
    let v0 = state.mean_velocity();
    let t = t_ctr as f64;
    let scale = T::lit(2.0 / (dt * dt * t * (t + 1.0)));
    Ok((delta - v0 * T::lit(t * dt)) * scale - *gravity)
}

pub fn baseline_controller<T: Real>(
    state: &ParticleSet<T>,
    sketch: &Sketch,
    t_ctr: usize,
    dt: f64,
    gravity: &Vector<T>,
) -> Result<ForceField<T>> {
    let a = baseline_acceleration(state, sketch, t_ctr, dt, gravity)?;
    Ok(ForceField::constant(state.dim, dt, t_ctr, state.len(), a))
}

/// What a controller sees at each control step.
#[derive(Clone, Copy, Debug)]
pub struct ControllerInput<'a, T> {
    /// Most recent frames, oldest first (up to six).
    pub state_history: &'a [Frame<T>],
    pub state: &'a ParticleSet<T>,
    pub sketch: &'a Sketch,
    pub control_step_index: usize,
}

/// Produces the external accelerations for one control step.
pub trait Controller<T>: Send {
    fn evaluate(&mut self, input: &ControllerInput<'_, T>) -> Result<Vec<Vector<T>>>;
}

/// Solves the baseline field on the first step and replays it.
pub struct BaselineAdapter<T> {
    pub t_ctr: usize,
    pub dt: f64,
    pub gravity: Vector<T>,
    field: Option<ForceField<T>>,
}

impl<T: Real> BaselineAdapter<T> {
    pub fn new(t_ctr: usize, dt: f64, gravity: Vector<T>) -> Self {
        Self { t_ctr, dt, gravity, field: None }
    }
}

impl<T: Real> Controller<T> for BaselineAdapter<T> {
    fn evaluate(&mut self, input: &ControllerInput<'_, T>) -> Result<Vec<Vector<T>>> {
        if input.control_step_index == 0 || self.field.is_none() {
            self.field = Some(baseline_controller(input.state, input.sketch, self.t_ctr, self.dt, &self.gravity)?);
        }
        let field = self.field.as_ref().expect("set above");
        field
            .accels
            .get(input.control_step_index)
            .cloned()
            .ok_or_else(|| argument("control step beyond the episode"))
    }
}

/// Replays a stored force field.
pub struct ReplayAdapter<T> {
    pub field: ForceField<T>,
}

impl<T: Real> Controller<T> for ReplayAdapter<T> {
    fn evaluate(&mut self, input: &ControllerInput<'_, T>) -> Result<Vec<Vector<T>>> {
        self.field
            .accels
            .get(input.control_step_index)
            .cloned()
            .ok_or_else(|| argument("control step beyond the stored field"))
    }
}

/// Number of recent frames handed to controllers.
pub const CONTROL_HISTORY: usize = 6;

/// Runs `t_ctr` MPM steps from `state`, asking `controller` for the external
/// accelerations of every step.
pub fn controlled_rollout_with<T: Real>(
    config: &ScenarioConfig,
    mut state: ParticleSet<T>,
    controller: &mut dyn Controller<T>,
    sketch: &Sketch,
    t_ctr: usize,
) -> Result<Trajectory<T>> {
    state.validate()?;
    let mut solver = MpmSolver::<T>::new(config)?;
    let mut traj = Trajectory::from_initial(config.clone(), config.dt, &state);
    for step in 0..t_ctr {
        let lo = traj.frame_count().saturating_sub(CONTROL_HISTORY);
        let input = ControllerInput {
            state_history: &traj.positions[lo..],
            state: &state,
            sketch,
            control_step_index: step,
        };
        let row = controller.evaluate(&input)?;
        if row.len() != state.len() {
            return Err(argument(format!("controller returned {} rows for {} particles", row.len(), state.len())));
        }
        if !row.iter().all(Vector::is_finite) {
            return Err(Error::NonFiniteField { step });
        }
        solver.step(&mut state, Some(&row))?;
        traj.push_particles(&state);
    }
    traj.mode_log = Some(vec![StepMode::Control; t_ctr]);
    Ok(traj)
}

/// Applies a precomputed field through full MPM.
pub fn controlled_rollout<T: Real>(config: &ScenarioConfig, state: ParticleSet<T>, field: &ForceField<T>) -> Result<Trajectory<T>> {
    if field.particle_count() != state.len() || field.dim != state.dim {
        return Err(argument("force field shape does not match the state"));
    }
    field.validate()?;
    let sketch = Sketch::new(SketchGeometry::Oval { center: vec![0.5; state.dim], semi_axes: vec![0.0; state.dim] });
    let t_ctr = field.t_ctr();
    controlled_rollout_with(config, state, &mut ReplayAdapter { field: field.clone() }, &sketch, t_ctr)
}

/// Symplectic Euler without internal forces: `v += (a + g) dt; p += v dt`.
pub fn ballistic_replay<T: Real>(
    positions: &[Vector<T>],
    velocities: &[Vector<T>],
    field: &ForceField<T>,
    gravity: &Vector<T>,
) -> Vec<Frame<T>> {
    let h = T::lit(field.dt);
    let mut p = positions.to_vec();
    let mut v = velocities.to_vec();
    let mut out = vec![p.clone()];
    for row in &field.accels {
        for i in 0..p.len() {
            v[i] += (row[i] + *gravity) * h;
            p[i] += v[i] * h;
        }
        out.push(p.clone());
    }
    out
}

/// A control training example: the forward trajectory, the field that
/// reverses it from rest and the sketch describing the reversal.
pub struct ControlEpisode<T> {
    pub forward: Trajectory<T>,
    pub field: ForceField<T>,
    pub sketch: Sketch,
}

impl<T: Real> ControlEpisode<T> {
    /// Final forward state at rest, where the control episode starts.
    pub fn start_state(&self) -> ParticleSet<T> {
        let mut p = self.forward.particles_at(self.forward.frame_count() - 1);
        p.velocities.iter_mut().for_each(|v| *v = Vector::zero());
        p
    }

    /// The forward trajectory's initial state, the control target.
    pub fn target_state(&self) -> ParticleSet<T> {
        self.forward.particles_at(0)
    }
}

/// Final grid-mass error of both controllers on one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub reversed_field: f64,
    pub baseline: f64,
}

/// Replays the episode's field and the baseline through full MPM from the
/// start state and scores both against the target at `config.grid_resolution`.
pub fn score_episode<T: Real>(ep: &ControlEpisode<T>) -> Result<EpisodeScore> {
    let config = &ep.forward.config;
    let start = ep.start_state();
    let target = ep.target_state();
    let t_ctr = ep.field.t_ctr();
    let baseline = baseline_controller(&start, &ep.sketch, t_ctr, config.dt, &config.gravity_vector())?;
    let score = |field: &ForceField<T>| -> Result<f64> {
        let traj = controlled_rollout(config, start.clone(), field)?;
        Ok(crate::resolution::grid_mass_rmse(&traj.particles_at(t_ctr), &target, config.grid_resolution)?.as_f64())
    };
    Ok(EpisodeScore { reversed_field: score(&ep.field)?, baseline: score(&baseline)? })
}

/// Simulates `t_ctr` forward steps from `initial`, then solves and smooths the
/// reversing field. The sketch is an arrow along the reversed centroid path.
pub fn reverse_episode<T: Real>(
    config: &ScenarioConfig,
    initial: ParticleSet<T>,
    t_ctr: usize,
    lambda: f64,
    beta: f64,
) -> Result<ControlEpisode<T>> {
    let forward = crate::mpm::rollout_from(config, initial, t_ctr, Default::default(), None)?;
    let gravity = config.gravity_vector::<T>();
    let field = smooth_field(&reverse_force_field(&forward, &gravity, config.dt)?, lambda, beta)?;
    let sketch = match make_arrow_sketch_along(&forward, t_ctr, 0) {
        Ok(s) => s,
        Err(Error::DegenerateSketch(_)) => make_oval_sketch(&forward.particles_at(0))?,
        Err(e) => return Err(e),
    };
    Ok(ControlEpisode { forward, field, sketch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v2(x: f64, y: f64) -> Vector<f64> {
        Vector::from_f64(&[x, y])
    }

    fn line_trajectory(frames: usize, speed: f64) -> Trajectory<f64> {
        let mut p = ParticleSet::new(2);
        p.push(v2(0.2, 0.5), v2(0.0, 0.0), 1.0, 0);
        let mut traj = Trajectory::from_initial(ScenarioConfig::new("line", 2), 0.0025, &p);
        for k in 1..frames {
            p.positions[0] = v2(0.2 + speed * k as f64, 0.5);
            traj.push_particles(&p);
        }
        traj
    }

    fn cloud(points: &[[f64; 2]]) -> ParticleSet<f64> {
        let mut p = ParticleSet::new(2);
        for x in points {
            p.push(v2(x[0], x[1]), v2(0.0, 0.0), 1.0, 0);
        }
        p
    }

    #[test]
    fn stationary_trajectory_hovers() {
        let traj = line_trajectory(11, 0.0);
        let g = v2(0.0, -9.8);
        let field = reverse_force_field(&traj, &g, traj.dt).unwrap();
        assert_eq!(field.t_ctr(), 10);
        for row in &field.accels {
            assert_eq!(row[0], v2(0.0, 9.8));
        }
    }

    #[test]
    fn single_particle_replay_is_exact() {
        let traj = line_trajectory(101, 1e-3);
        let g = Vector::zero();
        let field = reverse_force_field(&traj, &g, traj.dt).unwrap();
        let h2 = traj.dt * traj.dt;
        assert!((field.accels[0][0][0] + 1e-3 / h2).abs() < 1e-6);
        for row in &field.accels[1..] {
            assert!(row[0].norm() < 1e-6);
        }
        let replay = ballistic_replay(traj.positions.last().unwrap(), &[Vector::zero()], &field, &g);
        for (k, frame) in replay.iter().enumerate() {
            let truth = traj.positions[100 - k][0];
            assert!((frame[0] - truth).norm() < 1e-9, "frame {k}");
        }
    }

    #[test]
    fn mpm_trajectory_replays_backwards() {
        let config = ScenarioConfig::preset("water2d-desk").unwrap();
        let initial = crate::init_scenario::<f64>(&config).unwrap();
        let forward = crate::mpm::rollout_from(&config, initial, 40, Default::default(), None).unwrap();
        let g = config.gravity_vector::<f64>();
        let field = reverse_force_field(&forward, &g, config.dt).unwrap();
        let last = forward.positions.last().unwrap();
        let replay = ballistic_replay(last, &vec![Vector::zero(); last.len()], &field, &g);
        let worst = replay
            .iter()
            .enumerate()
            .flat_map(|(k, f)| f.iter().zip(&forward.positions[40 - k]).map(|(a, b)| (*a - *b).norm()))
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn one_frame_is_rejected() {
        let traj = line_trajectory(1, 0.0);
        assert!(matches!(reverse_force_field(&traj, &Vector::zero(), 0.01), Err(Error::Argument(_))));
    }

    #[test]
    fn smoothing_identities() {
        let constant = ForceField::constant(2, 0.01, 5, 3, v2(1.0, -2.0));
        assert_eq!(smooth_field(&constant, 0.1, 2.0).unwrap(), constant);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut random = constant.clone();
        for row in &mut random.accels {
            for a in row.iter_mut() {
                *a = v2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        assert_eq!(smooth_field(&random, 0.0, 2.0).unwrap(), random);
        assert!(smooth_field(&random, -0.1, 2.0).is_err());
    }

    #[test]
    fn aligned_blend_coefficient() {
        assert!((blend_coefficient(1.0, 0.1, 2.0) - 0.1 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((blend_coefficient(1.0, 0.1, 2.0) - 0.0135335).abs() < 1e-7);
        let mut field = ForceField::constant(2, 0.01, 2, 1, v2(2.0, 0.0));
        field.accels[1][0] = v2(1.0, 0.0);
        let smoothed = smooth_field(&field, 0.1, 2.0).unwrap();
        let c = 0.1 * (-2.0f64).exp();
        assert!((smoothed.accels[0][0][0] - (2.0 - c)).abs() < 1e-12);
        assert_eq!(smoothed.accels[1][0], v2(1.0, 0.0));
    }

    #[test]
    fn opposed_steps_can_grow_the_successor_difference() {
        let mut field = ForceField::constant(2, 0.01, 3, 1, v2(1.5, 0.0));
        field.accels[1][0] = v2(0.5, 0.0);
        field.accels[2][0] = v2(-0.5, 0.0);
        let before = successor_difference(&field);
        let after = successor_difference(&smooth_field(&field, 0.1, 2.0).unwrap());
        assert!((before - 2.0).abs() < 1e-12);
        assert!(after > 3.0, "{after}");
    }

    proptest! {
        #[test]
        fn aligned_fields_get_smoother(values in prop::collection::vec(0.1f64..5.0, 3..20), lambda in 0.01f64..0.5) {
            let mut field = ForceField::constant(2, 0.01, values.len(), 1, v2(0.0, 0.0));
            for (row, v) in field.accels.iter_mut().zip(&values) {
                row[0] = v2(*v, 0.0);
            }
            prop_assume!(successor_difference(&field) > 1e-9);
            let after = successor_difference(&smooth_field(&field, lambda, 2.0).unwrap());
            prop_assert!(after < successor_difference(&field));
        }
    }

    #[test]
    fn arrow_follows_translation() {
        let start = cloud(&[[0.2, 0.2], [0.3, 0.25], [0.25, 0.4]]);
        let mut moved = start.clone();
        moved.positions.iter_mut().for_each(|p| *p += v2(0.2, 0.0));
        let s = make_arrow_sketch(&start, &moved).unwrap();
        let SketchGeometry::Arrow { start: a, end: b, widths, .. } = &s.geometry else { panic!() };
        let c = start.centroid();
        assert_eq!(a, &vec![c[0], c[1]]);
        let c2 = moved.centroid();
        assert_eq!(b, &vec![c2[0], c2[1]]);
        assert!((s.geometry.length().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(s.geometry.angle().unwrap(), 0.0);
        assert_eq!(widths.len(), 1);
        moved.positions.iter_mut().for_each(|p| *p += v2(-0.2, 0.3));
        let up = make_arrow_sketch(&start, &moved).unwrap();
        assert!((up.geometry.angle().unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(matches!(make_arrow_sketch(&start, &start), Err(Error::DegenerateSketch(_))));
    }

    #[test]
    fn depth_coded_widths_are_linear() {
        let path: Vec<Vec<f64>> = (0..=16).map(|k| vec![0.2 + 0.02 * k as f64, 0.5, 0.1 + 0.03 * k as f64]).collect();
        let s = arrow_along(&path, 3).unwrap();
        let SketchGeometry::Arrow { widths, points, .. } = &s.geometry else { panic!() };
        assert_eq!(points.len(), ARROW_SEGMENTS_3D + 1);
        for (i, w) in widths.iter().enumerate() {
            let expected = ARROW_WIDTH_MIN + (ARROW_WIDTH_MAX - ARROW_WIDTH_MIN) * i as f64 / 7.0;
            assert!((w - expected).abs() < 1e-9, "{i}: {w} vs {expected}");
        }
        assert_eq!(depth_widths(&[0.3, 0.3], 2.0, 10.0), vec![2.0, 2.0]);
    }

    #[test]
    fn oval_moments() {
        let s = make_oval_sketch(&cloud(&[[0.4, 0.5], [0.6, 0.5]])).unwrap();
        let SketchGeometry::Oval { center, semi_axes } = &s.geometry else { panic!() };
        assert!((center[0] - 0.5).abs() < 1e-15 && (center[1] - 0.5).abs() < 1e-15);
        assert!((semi_axes[0] - 0.2).abs() < 1e-12 && semi_axes[1] == 0.0);
        assert!(matches!(make_oval_sketch(&cloud(&[[0.4, 0.5]])), Err(Error::Argument(_))));

        let side = 0.2;
        let m = 200;
        let pts: Vec<[f64; 2]> = (0..m * m)
            .map(|k| [0.3 + side * ((k % m) as f64 + 0.5) / m as f64, 0.3 + side * ((k / m) as f64 + 0.5) / m as f64])
            .collect();
        let s = make_oval_sketch(&cloud(&pts)).unwrap();
        let SketchGeometry::Oval { semi_axes, .. } = &s.geometry else { panic!() };
        assert!((semi_axes[0] - side / 3f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn gaussian_coverage_matches_mahalanobis_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 2]> = (0..100_000)
            .map(|_| {
                let (x, y): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                [0.5 + 0.05 * x, 0.5 + 0.05 * y]
            })
            .collect();
        let p = cloud(&pts);
        let s = make_oval_sketch(&p).unwrap();
        let coverage = oval_coverage(&p.positions, &s.geometry).unwrap();
        let expected = 1.0 - (-2.0f64).exp();
        assert!((coverage - expected).abs() < 0.02 * expected, "{coverage}");
    }

    #[test]
    fn stroke_classification() {
        let r = 0.1;
        let circle: Vec<[f64; 2]> = (0..=64)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / 64.0;
                [0.5 + r * phi.cos(), 0.5 + r * phi.sin()]
            })
            .collect();
        let s = fit_sketch_from_stroke(&circle[..64]).unwrap();
        let SketchGeometry::Oval { semi_axes, center } = &s.geometry else { panic!("expected oval") };
        assert!((semi_axes[0] - r * 2f64.sqrt()).abs() < 1e-9);
        assert!((semi_axes[1] - r * 2f64.sqrt()).abs() < 1e-9);
        assert!((center[0] - 0.5).abs() < 1e-12);

        let line = [[0.1, 0.1], [0.3, 0.2], [0.5, 0.3]];
        let s = fit_sketch_from_stroke(&line).unwrap();
        let SketchGeometry::Arrow { start, end, .. } = &s.geometry else { panic!("expected arrow") };
        assert_eq!(start, &vec![0.1, 0.1]);
        assert_eq!(end, &vec![0.5, 0.3]);
        assert!(matches!(fit_sketch_from_stroke(&line[..2]), Err(Error::Argument(_))));
    }

    #[test]
    fn raster_is_deterministic_and_inked() {
        let s = fit_sketch_from_stroke(&[[0.1, 0.1], [0.3, 0.2], [0.5, 0.3]]).unwrap();
        let again = rasterize(&s.geometry, RASTER_SIZE, RASTER_SIZE);
        assert_eq!(s.raster, again);
        assert!(s.raster.ink_count() > 20);
        assert!(s.raster.data.iter().all(|&b| b == 0 || b == 255));
        // Point (0.1, 0.1) maps to column 12.8, row 115.2.
        assert!(s.raster.is_ink(115, 12));
        assert_eq!(s.raster.value(0, 0, 0), 1.0);
        let ppm = s.raster.to_ppm();
        assert!(ppm.starts_with(b"P6\n128 128\n255\n"));
        assert_eq!(ppm.len(), 15 + 128 * 128 * 3);
    }

    #[test]
    fn sketch_json_round_trip() {
        let s = fit_sketch_from_stroke(&[[0.1, 0.1], [0.3, 0.2], [0.5, 0.3]]).unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["kind"], "arrow");
        let back: Sketch = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    fn ballistic_centroid(state: &ParticleSet<f64>, field: &ForceField<f64>, g: &Vector<f64>) -> Vector<f64> {
        let frames = ballistic_replay(&state.positions, &state.velocities, field, g);
        let last = frames.last().unwrap();
        last.iter().fold(Vector::zero(), |acc, p| acc + *p) * (1.0 / last.len() as f64)
    }

    #[test]
    fn baseline_lands_on_target() {
        let state = cloud(&[[0.3, 0.5], [0.4, 0.5], [0.35, 0.55]]);
        let c = state.centroid();
        let sketch = arrow_along(&[vec![c[0], c[1]], vec![c[0] + 0.1, c[1]]], 2).unwrap();
        let g = Vector::zero();
        let a = baseline_acceleration(&state, &sketch, 100, 0.0025, &g).unwrap();
        assert!((a[0] - 2.0 * 0.1 / (0.0025f64.powi(2) * 100.0 * 101.0)).abs() < 1e-9);
        assert!((a[0] - 3.1683).abs() < 1e-4);
        let field = baseline_controller(&state, &sketch, 100, 0.0025, &g).unwrap();
        let end = ballistic_centroid(&state, &field, &g);
        assert!((end[0] - (c[0] + 0.1)).abs() < 1e-9 && (end[1] - c[1]).abs() < 1e-9);

        let hover = Sketch::new(SketchGeometry::Oval { center: vec![c[0], c[1]], semi_axes: vec![0.1, 0.1] });
        let gravity = v2(0.0, -9.8);
        assert!((baseline_acceleration(&state, &hover, 100, 0.0025, &gravity).unwrap() - v2(0.0, 9.8)).norm() < 1e-12);
    }

    #[test]
    fn baseline_cancels_drift() {
        let mut state = cloud(&[[0.3, 0.5], [0.4, 0.5]]);
        state.velocities.iter_mut().for_each(|v| *v = v2(0.4, 0.1));
        let c = state.centroid();
        let target = [c[0] - 0.05, c[1] - 0.02];
        let sketch = Sketch::new(SketchGeometry::Oval { center: target.to_vec(), semi_axes: vec![0.05, 0.05] });
        let g = v2(0.0, -9.8);
        let field = baseline_controller(&state, &sketch, 80, 0.0025, &g).unwrap();
        let end = ballistic_centroid(&state, &field, &g);
        assert!((end[0] - target[0]).abs() < 1e-9 && (end[1] - target[1]).abs() < 1e-9);
    }

    #[test]
    fn force_field_file_round_trip() {
        let mut field = ForceField::constant(2, 0.0025, 4, 3, v2(0.5, -1.25));
        field.accels[2][1] = v2(3.0, 0.0);
        let bytes = field.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FFF1");
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 3 * 2 * 4);
        assert_eq!(ForceField::<f64>::from_bytes(&bytes).unwrap(), field);
        assert!(matches!(ForceField::<f64>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(ForceField::<f64>::from_bytes(b"FLF1xxxxxxxxxxxxxxxxxxxxxxxxxxxxxx"), Err(Error::Format(_))));
        field.accels[0][0] = v2(f64::NAN, 0.0);
        assert!(matches!(field.to_bytes(), Err(Error::NonFiniteField { step: 0 })));
    }

    struct NanAt(usize);

    impl Controller<f64> for NanAt {
        fn evaluate(&mut self, input: &ControllerInput<'_, f64>) -> Result<Vec<Vector<f64>>> {
            assert!(input.state_history.len() <= CONTROL_HISTORY);
            let v = if input.control_step_index == self.0 { f64::NAN } else { 0.0 };
            Ok(vec![v2(v, 0.0); input.state.len()])
        }
    }

    #[test]
    fn controlled_rollouts() {
        let config = ScenarioConfig::preset("water2d-desk").unwrap();
        let state = crate::init_scenario::<f64>(&config).unwrap();
        let n = state.len();
        let zero = ForceField::constant(2, config.dt, 5, n, Vector::zero());
        let controlled = controlled_rollout(&config, state.clone(), &zero).unwrap();
        let plain = crate::mpm::rollout_from(&config, state.clone(), 5, Default::default(), None).unwrap();
        assert_eq!(controlled.positions, plain.positions);
        assert_eq!(controlled.mode_log.as_ref().unwrap().len(), 5);

        let sketch = make_oval_sketch(&state).unwrap();
        let err = controlled_rollout_with(&config, state.clone(), &mut NanAt(3), &sketch, 5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteField { step: 3 }));
        let short = ForceField::constant(2, config.dt, 5, n - 1, Vector::zero());
        assert!(controlled_rollout(&config, state.clone(), &short).is_err());

        let g = config.gravity_vector::<f64>();
        let mut adapter = BaselineAdapter::new(5, config.dt, g);
        let direct = baseline_controller(&state, &sketch, 5, config.dt, &g).unwrap();
        let history = vec![state.positions.clone()];
        let input = ControllerInput { state_history: &history, state: &state, sketch: &sketch, control_step_index: 0 };
        assert_eq!(adapter.evaluate(&input).unwrap(), direct.accels[0]);
        let mut replay = ReplayAdapter { field: direct.clone() };
        let input = ControllerInput { control_step_index: 4, ..input };
        assert_eq!(replay.evaluate(&input).unwrap(), direct.accels[4]);
    }

    #[test]
    fn anti_gravity_matches_weightless_flow() {
        let config = ScenarioConfig::preset("water2d-desk").unwrap();
        let mut state = crate::init_scenario::<f64>(&config).unwrap();
        state.velocities.iter_mut().for_each(|v| *v = Vector::zero());
        let g = config.gravity_vector::<f64>();
        let field = ForceField::constant(2, config.dt, 20, state.len(), Vector::zero() - g);
        let lifted = controlled_rollout(&config, state.clone(), &field).unwrap();
        let mut weightless = config.clone();
        weightless.gravity = vec![0.0, 0.0];
        let free = crate::mpm::rollout_from(&weightless, state, 20, Default::default(), None).unwrap();
        let worst = lifted.positions[20]
            .iter()
            .zip(&free.positions[20])
            .map(|(a, b)| (*a - *b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn reverse_episode_shapes() {
        let config = ScenarioConfig::preset("water2d-desk").unwrap();
        let state = crate::init_scenario::<f64>(&config).unwrap();
        let ep = reverse_episode(&config, state, 30, DEFAULT_LAMBDA, DEFAULT_BETA).unwrap();
        assert_eq!(ep.field.t_ctr(), 30);
        assert_eq!(ep.forward.frame_count(), 31);
        assert!(ep.start_state().velocities.iter().all(|v| v.norm() == 0.0));
        assert_eq!(ep.target_state().positions, ep.forward.positions[0]);
    }
}
