//! Training data, normalization statistics and the Adam training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{assemble_features, NormStats, Walls, HISTORY_LEN};
use super::model::SurrogateWeights;
use super::rollout::NeuralRollout;
use crate::error::{argument, Error, Result};
use crate::linalg::Vector;
use crate::num::Real;
use crate::scenario::ScenarioConfig;
use crate::trajectory::{Frame, Trajectory};

/// Standard deviation of the Gaussian position noise added to training
/// histories, in domain units.
pub const DEFAULT_NOISE_STD: f64 = 3e-4;

/// One supervised example: six positions and the acceleration that produced
/// the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub dim: usize,
    pub history: Vec<Frame<T>>,
    pub kinds: Vec<usize>,
    pub target: Vec<Vector<T>>,
    pub dt: f64,
    pub walls: Walls,
}

/// Embedding rows for the material ids of a scenario.
pub fn material_kinds(config: &ScenarioConfig, ids: &[u8]) -> Vec<usize> {
    ids.iter()
        .map(|&id| config.materials.get(id as usize).map_or(0, |m| m.kind.index()))
        .collect()
}

/// Second differences of positions: `(p[k+1] - 2 p[k] + p[k-1]) / dt^2`.
pub fn finite_difference_accel<T: Real>(prev: &[Vector<T>], cur: &[Vector<T>], next: &[Vector<T>], dt: f64) -> Vec<Vector<T>> {
    let inv = T::lit(1.0 / (dt * dt));
    prev.iter()
        .zip(cur)
        .zip(next)
        .map(|((a, b), c)| (*c - *b * T::lit(2.0) + *a) * inv)
        .collect()
}

/// Samples over every step of a trajectory. The first steps see the same
/// synthetic ballistic history a rollout starts from, so cold starts stay in
/// distribution.
pub fn samples_from_trajectory<T: Real>(traj: &Trajectory<T>, walls: Walls) -> Vec<Sample<T>> {
    let kinds = material_kinds(&traj.config, &traj.material_ids);
    let Some(first) = traj.positions.first() else {
        return Vec::new();
    };
    let v0 = match (&traj.velocities, traj.positions.get(1)) {
        (Some(v), _) => v[0].clone(),
        (None, Some(next)) => next.iter().zip(first).map(|(b, a)| (*b - *a) * T::lit(1.0 / traj.dt)).collect(),
        (None, None) => vec![Vector::zero(); first.len()],
    };
    let prefix = NeuralRollout::ballistic_history(first, &v0, &traj.config.gravity_vector(), traj.dt);
    let frames: Vec<&Frame<T>> = prefix[..HISTORY_LEN - 1].iter().chain(&traj.positions).collect();
    (HISTORY_LEN - 1..frames.len().saturating_sub(1))
        .map(|k| Sample {
            dim: traj.dim,
            history: frames[k + 1 - HISTORY_LEN..=k].iter().map(|f| (*f).clone()).collect(),
            kinds: kinds.clone(),
            target: finite_difference_accel(frames[k - 1], frames[k], frames[k + 1], traj.dt),
            dt: traj.dt,
            walls,
        })
        .collect()
}

/// Per-component mean and standard deviation of history velocities and
/// target accelerations. The variance is widened by the training noise seen
/// through the finite differences, which also keeps it positive.
pub fn compute_stats<T: Real>(samples: &[Sample<T>], noise_std: f64) -> Result<NormStats> {
    let first = samples.first().ok_or_else(|| argument("dataset is empty"))?;
    let dim = first.dim;
    let mut vel = Welford::new(dim);
    let mut acc = Welford::new(dim);
    for s in samples {
        for k in 0..HISTORY_LEN - 1 {
            for (a, b) in s.history[k].iter().zip(&s.history[k + 1]) {
                vel.push(&((*b - *a) * T::lit(1.0 / s.dt)), dim);
            }
        }
        for a in &s.target {
            acc.push(a, dim);
        }
    }
    let dt = first.dt;
    let (vel_mean, vel_std) = vel.finish(noise_std / dt);
    let (acc_mean, acc_std) = acc.finish(noise_std / (dt * dt));
    Ok(NormStats { vel_mean, vel_std, acc_mean, acc_std })
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push<T: Real>(&mut self, v: &Vector<T>, dim: usize) {
        self.n += 1.0;
        for a in 0..dim {
            let x = v[a].as_f64();
            let d = x - self.mean[a];
            self.mean[a] += d / self.n;
            self.m2[a] += d * (x - self.mean[a]);
        }
    }

    fn finish(self, floor: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n.max(1.0);
        let std = self.m2.iter().map(|m| (m / n + floor * floor).sqrt().max(f64::MIN_POSITIVE)).collect();
        (self.mean, std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `decay_rate` every `decay_steps`.
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, learning_rate: 1e-4, decay_rate: 0.1, decay_steps: 5e6, noise_std: DEFAULT_NOISE_STD, seed: 0 }
    }
}

impl TrainConfig {
    /// Learning rate for step `t`.
    pub fn rate(&self, t: usize) -> f64 {
        self.learning_rate * self.decay_rate.powf(t as f64 / self.decay_steps)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(parameters: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; parameters], v: vec![0.0; parameters], t: 0 }
    }

    pub fn update<T: Real>(&mut self, weights: &mut SurrogateWeights<T>, grad: &SurrogateWeights<T>, lr: f64) {
        let mut g = Vec::with_capacity(self.m.len());
        grad.visit(&mut |_, p| g.extend(p.iter().map(|v| v.as_f64())));
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        weights.visit_mut(&mut |_, p| {
            for x in p.iter_mut() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *x -= T::lit(step);
                k += 1;
            }
        });
    }
}

/// Batch-size-one training with noisy input histories.
pub fn train<T: Real>(
    mut weights: SurrogateWeights<T>,
    dataset: &[Sample<T>],
    config: &TrainConfig,
) -> Result<(SurrogateWeights<T>, TrainReport)> {
    if dataset.is_empty() {
        return Err(argument("dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).map_err(|e| argument(e.to_string()))?;
    let mut adam = Adam::new(weights.parameter_count());
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let sample = &dataset[rng.random_range(0..dataset.len())];
        let history: Vec<Frame<T>> = sample
            .history
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|x| {
                        let mut y = *x;
                        for a in 0..weights.arch.dim {
                            y[a] += T::lit(noise.sample(&mut rng));
                        }
                        y
                    })
                    .collect()
            })
            .collect();
        let batch = assemble_features(&history, &sample.kinds, &weights.stats, sample.dt, sample.walls, weights.arch.radius)?;
        match weights.loss_and_gradients(&batch, &sample.target) {
            Ok((loss, grad)) => {
                report.losses.push(loss.as_f64());
                adam.update(&mut weights, &grad, config.rate(step));
            }
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((weights, report))
}
