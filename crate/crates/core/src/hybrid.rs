//! Safeguarded hybrid rollout: a fast path at reduced resolution with MPM
//! fallback whenever the acceleration complexity signal drops below `r_c`.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::linalg::{Matrix, Vector};
use crate::mpm::{rollout_from, MpmSolver, SimulateOptions};
use crate::neural::{material_kinds, NeuralRollout, SurrogateWeights, Walls, HISTORY_LEN};
use crate::num::Real;
use crate::particles::ParticleSet;
use crate::resolution::{downsample_particles, grid_mass_rmse, temporal_stride, ComplexityWindow, ReductionConfig};
use crate::scenario::{init_scenario, ScenarioConfig};
use crate::trajectory::{Frame, StepMode, Trajectory};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// What runs while the safeguard is not engaged.
#[derive(Clone, Debug)]
pub enum FastPath<T> {
    NeuralSurrogate(Arc<SurrogateWeights<T>>),
    /// MPM at the reduced resolution. Falling back from it changes nothing,
    /// which isolates the safeguard bookkeeping.
    CoarseMpm,
}

impl<T> FastPath<T> {
    pub fn label(&self) -> &'static str {
        match self {
            FastPath::NeuralSurrogate(_) => "neural",
            FastPath::CoarseMpm => "coarse_mpm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct HybridConfig<T> {
    pub reduction: ReductionConfig,
    pub r_c: f64,
    pub window: usize,
    /// Minimum length of an MPM segment, in coarse steps.
    pub fallback_hold: usize,
    pub fast_path: FastPath<T>,
}

impl<T> HybridConfig<T> {
    pub fn new(fast_path: FastPath<T>) -> Self {
        let window = ComplexityWindow::<f64>::DEFAULT_WINDOW;
        Self { reduction: ReductionConfig::default(), r_c: DEFAULT_THRESHOLD, window, fallback_hold: 2 * window, fast_path }
    }

    pub fn with_threshold(mut self, r_c: f64) -> Self {
        self.r_c = r_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.reduction.validate()?;
        if !self.r_c.is_finite() {
            return Err(argument("r_c must be finite"));
        }
        if self.window == 0 {
            return Err(argument("window must be at least 1"));
        }
        Ok(())
    }
}

/// True iff the signal is available and below the threshold.
pub fn should_fallback<T: Real>(signal: Option<T>, r_c: f64) -> bool {
    signal.is_some_and(|s| s.as_f64() < r_c)
}

/// Outcome of one coarse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Coarse steps completed, this one included.
    pub index: usize,
    pub mode: StepMode,
    /// Wall-clock seconds spent in the solver.
    pub latency: f64,
    pub signal: Option<f64>,
}

/// Incremental hybrid stepper over a reduced particle set.
pub struct HybridRunner<T> {
    config: ScenarioConfig,
    hconfig: HybridConfig<T>,
    particles: ParticleSet<T>,
    solver: MpmSolver<T>,
    kinds: Vec<usize>,
    walls: Walls,
    rollout: Option<NeuralRollout<T>>,
    window: ComplexityWindow<T>,
    recent: VecDeque<Frame<T>>,
    mode: StepMode,
    mpm_run: usize,
    good_run: usize,
    steps: usize,
}

impl<T: Real> HybridRunner<T> {
    /// Initializes the scenario and downsamples it once.
    pub fn new(config: &ScenarioConfig, hconfig: HybridConfig<T>) -> Result<Self> {
        hconfig.validate()?;
        let fine = init_scenario::<T>(config)?;
        let reduced = downsample_particles(&fine, hconfig.reduction.r_p)?;
        Self::from_state(config, hconfig, reduced)
    }

    /// Starts from an already reduced state.
    pub fn from_state(config: &ScenarioConfig, hconfig: HybridConfig<T>, particles: ParticleSet<T>) -> Result<Self> {
        hconfig.validate()?;
        if let FastPath::NeuralSurrogate(w) = &hconfig.fast_path {
            w.ensure_dim(config.dim)?;
        }
        if particles.dim != config.dim {
            return Err(argument("state dimension does not match the scenario"));
        }
        let solver = MpmSolver::new(config)?;
        let mut recent = VecDeque::with_capacity(HISTORY_LEN + 1);
        recent.push_back(particles.positions.clone());
        Ok(Self {
            kinds: material_kinds(config, &particles.material_ids),
            walls: Walls::band(config.grid_resolution),
            config: config.clone(),
            window: ComplexityWindow::new(hconfig.window),
            hconfig,
            particles,
            solver,
            rollout: None,
            recent,
            mode: StepMode::Neural,
            mpm_run: 0,
            good_run: 0,
            steps: 0,
        })
    }

    pub fn particles(&self) -> &ParticleSet<T> {
        &self.particles
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn hybrid_config(&self) -> &HybridConfig<T> {
        &self.hconfig
    }

    /// Mode the next fast/fallback step will run in.
    pub fn mode(&self) -> StepMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn coarse_dt(&self) -> f64 {
        self.config.dt * self.hconfig.reduction.r_t as f64
    }

    pub fn signal(&self) -> Option<f64> {
        self.window.signal().map(|s| s.as_f64())
    }

    pub fn set_threshold(&mut self, r_c: f64) -> Result<()> {
        if !r_c.is_finite() {
            return Err(argument("r_c must be finite"));
        }
        self.hconfig.r_c = r_c;
        Ok(())
    }

    /// Up to six most recent coarse position frames, oldest first.
    pub fn recent_frames(&self) -> Vec<Frame<T>> {
        self.recent.iter().cloned().collect()
    }

    /// Switches to MPM immediately, as before a control episode.
    pub fn force_fallback(&mut self) {
        if self.mode != StepMode::Mpm {
            self.enter_mpm();
        }
    }

    /// One coarse step in the current mode, then the safeguard update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let mode = self.mode;
        let start = Instant::now();
        let accels = match (mode, &self.hconfig.fast_path) {
            (StepMode::Neural, FastPath::NeuralSurrogate(_)) => self.neural_step()?,
            _ => self.mpm_steps(&[])?,
        };
        self.window.push(accels);
        self.finish_step();
        let signal = self.signal();
        match mode {
            StepMode::Neural => {
                if should_fallback(self.window.signal(), self.hconfig.r_c) {
                    self.enter_mpm();
                }
            }
            _ => {
                self.mpm_run += 1;
                if signal.is_some_and(|s| s >= self.hconfig.r_c) {
                    self.good_run += 1;
                } else {
                    self.good_run = 0;
                }
                if self.mpm_run >= self.hconfig.fallback_hold && self.good_run >= self.hconfig.window {
                    self.mode = StepMode::Neural;
                    self.rollout = None;
                }
            }
        }
        // the safeguard bookkeeping counts towards the step
        let latency = start.elapsed().as_secs_f64();
        Ok(StepRecord { index: self.steps, mode, latency, signal })
    }

    /// One coarse step of MPM driven by `fields`, one external acceleration
    /// row per fine step. The runner stays in MPM mode afterwards.
    pub fn step_controlled(&mut self, fields: &[Vec<Vector<T>>]) -> Result<StepRecord> {
        self.force_fallback();
        let start = Instant::now();
        let accels = self.mpm_steps(fields)?;
        let latency = start.elapsed().as_secs_f64();
        self.window.push(accels);
        self.finish_step();
        // the hold restarts once control ends
        self.mpm_run = 0;
        self.good_run = 0;
        Ok(StepRecord { index: self.steps, mode: StepMode::Control, latency, signal: self.signal() })
    }

    fn finish_step(&mut self) {
        self.steps += 1;
        self.recent.push_back(self.particles.positions.clone());
        while self.recent.len() > HISTORY_LEN {
            self.recent.pop_front();
        }
    }

    fn enter_mpm(&mut self) {
        self.mode = StepMode::Mpm;
        self.mpm_run = 0;
        self.good_run = 0;
        self.window.clear();
        if self.rollout.take().is_some() {
            // the surrogate tracks positions only
            let dim = self.particles.dim;
            self.particles.deformation.iter_mut().for_each(|f| *f = Matrix::identity(dim));
            self.particles.affine.iter_mut().for_each(|c| *c = Matrix::zero());
        }
    }

    fn neural_step(&mut self) -> Result<Vec<Vector<T>>> {
        if self.rollout.is_none() {
            let FastPath::NeuralSurrogate(weights) = &self.hconfig.fast_path else {
                unreachable!("neural step without weights")
            };
            let history = if self.recent.len() == HISTORY_LEN {
                self.recent.iter().cloned().collect()
            } else {
                NeuralRollout::ballistic_history(
                    &self.particles.positions,
                    &self.particles.velocities,
                    &self.config.gravity_vector(),
                    self.coarse_dt(),
                )
            };
            self.rollout =
                Some(NeuralRollout::new(weights.clone(), self.kinds.clone(), self.coarse_dt(), self.walls, history)?);
        }
        let rollout = self.rollout.as_mut().expect("set above");
        let accels = rollout.step()?;
        self.particles.positions.clone_from(rollout.positions());
        self.particles.velocities = rollout.velocities();
        Ok(accels)
    }

    /// `r_t` fine MPM steps; returns the velocity change per coarse time.
    fn mpm_steps(&mut self, fields: &[Vec<Vector<T>>]) -> Result<Vec<Vector<T>>> {
        let before = self.particles.velocities.clone();
        let r_t = self.hconfig.reduction.r_t;
        if !fields.is_empty() && fields.len() != r_t {
            return Err(argument(format!("{} field rows for {r_t} fine steps", fields.len())));
        }
        for k in 0..r_t {
            self.solver.step(&mut self.particles, fields.get(k).map(|f| f.as_slice()))?;
        }
        let inv = T::lit(1.0 / self.coarse_dt());
        Ok(self.particles.velocities.iter().zip(&before).map(|(a, b)| (*a - *b) * inv).collect())
    }
}

#[derive(Clone, Debug)]
pub struct HybridReport<T> {
    /// Coarse frames with mode and timing logs.
    pub trajectory: Trajectory<T>,
    pub grid_rmse_curve: Option<Vec<f64>>,
    pub signals: Vec<Option<f64>>,
    pub mpm_fraction: f64,
    pub mean_step_latency: f64,
}

impl<T> HybridReport<T> {
    pub fn final_rmse(&self) -> Option<f64> {
        self.grid_rmse_curve.as_ref().and_then(|c| c.last().copied())
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        self.grid_rmse_curve.as_ref().filter(|c| !c.is_empty()).map(|c| c.iter().sum::<f64>() / c.len() as f64)
    }
}

/// Runs `config.total_steps / r_t` coarse steps. With ground truth, the grid
/// mass error of coarse frame `k` is taken against fine frame `k r_t`.
pub fn hybrid_rollout<T: Real>(
    config: &ScenarioConfig,
    hconfig: &HybridConfig<T>,
    ground_truth: Option<&Trajectory<T>>,
) -> Result<HybridReport<T>> {
    let r_t = hconfig.reduction.r_t;
    let steps = config.total_steps / r_t;
    if let Some(gt) = ground_truth {
        if gt.frame_count() < steps * r_t + 1 {
            return Err(argument(format!("ground truth has {} frames, need {}", gt.frame_count(), steps * r_t + 1)));
        }
    }
    let mut runner = HybridRunner::new(config, hconfig.clone())?;
    let mut traj = Trajectory::from_initial(config.clone(), runner.coarse_dt(), runner.particles());
    let (mut modes, mut timing, mut signals) = (Vec::new(), Vec::new(), Vec::new());
    let mut curve = ground_truth.map(|_| Vec::with_capacity(steps));
    for _ in 0..steps {
        let rec = runner.step()?;
        modes.push(rec.mode);
        timing.push(rec.latency);
        signals.push(rec.signal);
        traj.push_particles(runner.particles());
        if let (Some(gt), Some(curve)) = (ground_truth, curve.as_mut()) {
            let truth = gt.particles_at(rec.index * r_t);
            curve.push(grid_mass_rmse(runner.particles(), &truth, config.grid_resolution)?.as_f64());
        }
    }
    let mpm = modes.iter().filter(|m| **m != StepMode::Neural).count();
    let mpm_fraction = if steps == 0 { 0.0 } else { mpm as f64 / steps as f64 };
    let mean_step_latency = if steps == 0 { 0.0 } else { timing.iter().sum::<f64>() / steps as f64 };
    traj.mode_log = Some(modes);
    traj.timing_log = Some(timing);
    Ok(HybridReport { trajectory: traj, grid_rmse_curve: curve, signals, mpm_fraction, mean_step_latency })
}

/// Plain MPM on the reduced particle set, strided to coarse frames.
pub fn reduced_mpm_reference<T: Real>(config: &ScenarioConfig, reduction: &ReductionConfig) -> Result<Trajectory<T>> {
    reduction.validate()?;
    let fine = init_scenario::<T>(config)?;
    let reduced = downsample_particles(&fine, reduction.r_p)?;
    let steps = config.total_steps / reduction.r_t * reduction.r_t;
    temporal_stride(&rollout_from(config, reduced, steps, SimulateOptions::default(), None)?, reduction.r_t)
}

/// One row of an error/latency tradeoff table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub fast_path: String,
    pub r_p: f64,
    pub r_t: usize,
    pub r_c: f64,
    pub neural_fraction: f64,
    pub mpm_fraction: f64,
    pub mean_rmse: Option<f64>,
    pub final_rmse: Option<f64>,
    pub mean_step_latency_ms: f64,
}

impl TradeoffRow {
    pub fn from_report<T>(hconfig: &HybridConfig<T>, report: &HybridReport<T>) -> Self {
        Self {
            fast_path: hconfig.fast_path.label().into(),
            r_p: hconfig.reduction.r_p,
            r_t: hconfig.reduction.r_t,
            r_c: hconfig.r_c,
            neural_fraction: 1.0 - report.mpm_fraction,
            mpm_fraction: report.mpm_fraction,
            mean_rmse: report.mean_rmse(),
            final_rmse: report.final_rmse(),
            mean_step_latency_ms: report.mean_step_latency * 1e3,
        }
    }
}

pub fn tradeoff_sweep<T: Real>(
    config: &ScenarioConfig,
    hconfigs: &[HybridConfig<T>],
    ground_truth: Option<&Trajectory<T>>,
) -> Result<Vec<TradeoffRow>> {
    hconfigs
        .iter()
        .map(|h| Ok(TradeoffRow::from_report(h, &hybrid_rollout(config, h, ground_truth)?)))
        .collect()
}

pub fn write_tradeoff_csv(rows: &[TradeoffRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "fast_path,r_p,r_t,r_c,neural_fraction,mpm_fraction,mean_rmse,final_rmse,mean_step_latency_ms")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.fast_path,
            r.r_p,
            r.r_t,
            r.r_c,
            r.neural_fraction,
            r.mpm_fraction,
            opt(r.mean_rmse),
            opt(r.final_rmse),
            r.mean_step_latency_ms
        )?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(argument("spearman needs two equal-length series of at least 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut num, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(argument("spearman is undefined for a constant series"));
    }
    Ok(num / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Architecture, NormStats};

    fn desk(steps: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::preset("water2d-desk").unwrap();
        c.total_steps = steps;
        c
    }

    #[test]
    fn fallback_predicate() {
        assert!(should_fallback(Some(0.75), 0.8));
        assert!(!should_fallback(Some(0.85), 0.8));
        assert!(!should_fallback::<f64>(None, 0.8));
        assert!(!should_fallback(Some(0.8), 0.8));
    }

    #[test]
    fn default_threshold() {
        let h = HybridConfig::<f64>::new(FastPath::CoarseMpm);
        assert_eq!(h.r_c, 0.8);
        assert_eq!((h.window, h.fallback_hold), (10, 20));
    }

    #[test]
    fn coarse_mpm_fast_path_matches_reduced_mpm_for_every_threshold() {
        let config = desk(80);
        let reference = reduced_mpm_reference::<f64>(&config, &ReductionConfig::default()).unwrap();
        for r_c in [0.0, 0.5, 0.8, 0.99, 1.5] {
            let h = HybridConfig::new(FastPath::CoarseMpm).with_threshold(r_c);
            let report = hybrid_rollout::<f64>(&config, &h, None).unwrap();
            assert_eq!(report.trajectory.positions, reference.positions, "r_c {r_c}");
            assert_eq!(report.trajectory.mode_log.as_ref().unwrap().len(), 40);
        }
    }

    #[test]
    fn unreachable_threshold_engages_after_warm_up() {
        let h = HybridConfig::new(FastPath::CoarseMpm).with_threshold(1.0 + 1e-9);
        let report = hybrid_rollout::<f64>(&desk(100), &h, None).unwrap();
        let modes = report.trajectory.mode_log.unwrap();
        assert!(modes[..20].iter().all(|m| *m == StepMode::Neural));
        assert!(modes[20..].iter().all(|m| *m == StepMode::Mpm));
        assert!((report.mpm_fraction - 0.6).abs() < 1e-12);
    }

    #[test]
    fn free_fall_never_falls_back_at_zero_threshold() {
        let mut stats = NormStats::identity(2);
        stats.acc_mean = vec![0.0, -9.8];
        let w = SurrogateWeights::<f64>::zeros(Architecture::desk(2), stats);
        let mut config = ScenarioConfig::preset("freefall2d").unwrap();
        config.total_steps = 60;
        let h = HybridConfig::new(FastPath::NeuralSurrogate(Arc::new(w))).with_threshold(0.0);
        let report = hybrid_rollout::<f64>(&config, &h, None).unwrap();
        let modes = report.trajectory.mode_log.unwrap();
        assert_eq!(modes.len(), 30);
        assert!(modes.iter().all(|m| *m == StepMode::Neural));
        let last = report.signals.last().unwrap().unwrap();
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mpm_segments_respect_the_hold() {
        let h = HybridConfig { fallback_hold: 25, ..HybridConfig::new(FastPath::CoarseMpm) }.with_threshold(0.95);
        let report = hybrid_rollout::<f64>(&desk(300), &h, None).unwrap();
        let modes = report.trajectory.mode_log.unwrap();
        let mut run = 0;
        for (k, m) in modes.iter().enumerate() {
            if *m == StepMode::Mpm {
                run += 1;
            } else {
                assert!(run == 0 || run >= 25, "segment of {run} ending at {k}");
                run = 0;
            }
        }
    }

    #[test]
    fn pure_mpm_against_itself_has_zero_error() {
        let config = desk(20);
        let reduction = ReductionConfig { r_p: 1.0, r_t: 1 };
        let truth = reduced_mpm_reference::<f64>(&config, &reduction).unwrap();
        let h = HybridConfig { reduction, ..HybridConfig::new(FastPath::CoarseMpm) }.with_threshold(2.0);
        let rows = tradeoff_sweep(&config, &[h.clone()], Some(&truth)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].final_rmse, Some(0.0));
        let report = hybrid_rollout(&config, &h, Some(&truth)).unwrap();
        assert_eq!(rows[0].mpm_fraction, report.mpm_fraction);
        let mut csv = Vec::new();
        write_tradeoff_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
    }

    #[test]
    fn short_ground_truth_is_rejected() {
        let config = desk(20);
        let truth = reduced_mpm_reference::<f64>(&desk(10), &ReductionConfig { r_p: 1.0, r_t: 1 }).unwrap();
        let h = HybridConfig::<f64>::new(FastPath::CoarseMpm);
        assert!(hybrid_rollout(&config, &h, Some(&truth)).is_err());
    }

    #[test]
    fn wrong_dimension_weights_are_rejected() {
        let w = SurrogateWeights::<f64>::zeros(Architecture::desk(3), NormStats::identity(3));
        let h = HybridConfig::new(FastPath::NeuralSurrogate(Arc::new(w)));
        assert!(matches!(HybridRunner::new(&desk(10), h), Err(crate::Error::Incompatible(_))));
    }

    #[test]
    fn controlled_steps_log_control_and_stay_in_mpm() {
        let h = HybridConfig::<f64>::new(FastPath::CoarseMpm);
        let mut runner = HybridRunner::new(&desk(10), h).unwrap();
        let n = runner.particles().len();
        let field = vec![vec![Vector::from_f64(&[1.0, 9.8]); n]; 2];
        let rec = runner.step_controlled(&field).unwrap();
        assert_eq!((rec.mode, rec.index), (StepMode::Control, 1));
        assert_eq!(runner.mode(), StepMode::Mpm);
        assert!(runner.step_controlled(&field[..1]).is_err());
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // ranks (1,2,3,4,5) vs (2,1,4,3,5): 1 - 6*4/(5*24) = 0.8
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
