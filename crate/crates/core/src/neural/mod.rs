//! Graph-network surrogate: radius graphs, features, the encoder-processor-
//! decoder network with manual gradients, training and weight files.

mod graph;
mod io;
mod mlp;
mod model;
mod rollout;
mod train;

pub use graph::{
    assemble_features, build_graph, integrate, GraphBatch, NormStats, Walls, EMBEDDING_DIM, HISTORY_LEN,
    VELOCITY_FRAMES,
};
pub use io::{load_weights, load_weights_for, save_weights, weights_from_bytes, weights_to_bytes, WEIGHTS_MAGIC};
pub use mlp::{LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use model::{Architecture, ForwardCache, ProcessorLayer, SurrogateWeights, DEFAULT_RADIUS};
pub use rollout::NeuralRollout;
pub use train::{
    compute_stats, finite_difference_accel, material_kinds, samples_from_trajectory, train, Adam, Sample, TrainConfig,
    TrainReport, DEFAULT_NOISE_STD,
};

use crate::error::Result;
use crate::mpm::simulate;
use crate::num::Real;
use crate::resolution::{cluster_particles, temporal_stride, ReductionConfig};
use crate::scenario::ScenarioConfig;
use crate::trajectory::Trajectory;

/// Ground truth reduced to the surrogate's resolution: particles merged with
/// the frame-0 clustering at `r_p`, frames strided by `r_t`.
pub fn reduce_trajectory<T: Real>(traj: &Trajectory<T>, reduction: &ReductionConfig) -> Result<Trajectory<T>> {
    reduction.validate()?;
    let clustering = cluster_particles(&traj.particles_at(0), reduction.r_p)?;
    temporal_stride(&clustering.apply_trajectory(traj)?, reduction.r_t)
}

/// Training samples from a set of scenarios, each simulated at full
/// resolution and reduced.
pub fn build_dataset<T: Real>(configs: &[ScenarioConfig], reduction: &ReductionConfig) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for cfg in configs {
        let traj = simulate::<T>(cfg)?;
        let reduced = reduce_trajectory(&traj, reduction)?;
        out.extend(samples_from_trajectory(&reduced, Walls::band(cfg.grid_resolution)));
    }
    Ok(out)
}

/// The 10-sample desk training set: a short water dam break, reduced, with
/// samples spread over the rollout.
pub fn toy_dataset<T: Real>(seed: u64) -> Result<Vec<Sample<T>>> {
    let mut cfg = ScenarioConfig::preset("water2d-desk").expect("preset exists").with_seed(seed);
    cfg.total_steps = 60;
    let all = build_dataset::<T>(&[cfg], &ReductionConfig::default())?;
    let stride = (all.len() / 10).max(1);
    Ok(all.into_iter().step_by(stride).take(10).collect())
}
