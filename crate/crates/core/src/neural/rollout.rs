use std::collections::VecDeque;
use std::sync::Arc;

use super::graph::{assemble_features, integrate, Walls, HISTORY_LEN};
use super::model::SurrogateWeights;
use crate::error::{argument, Result};
use crate::linalg::Vector;
use crate::num::Real;
use crate::trajectory::Frame;

/// Autoregressive surrogate rollout over a rolling 6-frame history.
#[derive(Clone, Debug)]
pub struct NeuralRollout<T> {
    weights: Arc<SurrogateWeights<T>>,
    kinds: Vec<usize>,
    dt: f64,
    walls: Walls,
    history: VecDeque<Frame<T>>,
}

impl<T: Real> NeuralRollout<T> {
    pub fn new(
        weights: Arc<SurrogateWeights<T>>,
        kinds: Vec<usize>,
        dt: f64,
        walls: Walls,
        history: Vec<Frame<T>>,
    ) -> Result<Self> {
        if history.len() != HISTORY_LEN {
            return Err(argument(format!("rollout needs {HISTORY_LEN} frames, got {}", history.len())));
        }
        Ok(Self { weights, kinds, dt, walls, history: history.into() })
    }

    /// History synthesized backwards from one state under a constant
    /// acceleration, usually gravity. The newest backward difference equals
    /// `velocities`.
    pub fn ballistic_history(
        positions: &[Vector<T>],
        velocities: &[Vector<T>],
        accel: &Vector<T>,
        dt: f64,
    ) -> Vec<Frame<T>> {
        let h = T::lit(dt);
        (0..HISTORY_LEN)
            .map(|k| {
                let m = (HISTORY_LEN - 1 - k) as f64;
                let back = T::lit(m);
                let drop = *accel * T::lit(dt * dt * m * (m - 1.0) / 2.0);
                positions.iter().zip(velocities).map(|(p, v)| *p - *v * (h * back) + drop).collect()
            })
            .collect()
    }

    pub fn positions(&self) -> &Frame<T> {
        self.history.back().expect("history is never empty")
    }

    /// Backward-difference velocity of the newest frame.
    pub fn velocities(&self) -> Frame<T> {
        let n = self.history.len();
        let inv = T::lit(1.0 / self.dt);
        self.history[n - 1].iter().zip(&self.history[n - 2]).map(|(a, b)| (*a - *b) * inv).collect()
    }

    pub fn weights(&self) -> &Arc<SurrogateWeights<T>> {
        &self.weights
    }

    /// Predicts accelerations, advances one step and returns them.
    pub fn step(&mut self) -> Result<Vec<Vector<T>>> {
        let frames: Vec<Frame<T>> = self.history.iter().cloned().collect();
        let batch = assemble_features(&frames, &self.kinds, &self.weights.stats, self.dt, self.walls, self.weights.arch.radius)?;
        let accels = self.weights.forward(&batch)?;
        let dim = self.weights.arch.dim;
        let (p, _) = integrate(self.positions(), &self.velocities(), &accels, self.dt, dim, self.walls);
        self.history.pop_front();
        self.history.push_back(p);
        Ok(accels)
    }
}
