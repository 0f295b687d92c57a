//! Batch subcommands. Each returns a JSON summary printed on stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fluidforge_core::control::{
    make_arrow_sketch_along, reverse_episode, score_episode, ControlEpisode, EpisodeScore, ForceField, Sketch,
    DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_T_CTR,
};
use fluidforge_core::hybrid::{hybrid_rollout, write_tradeoff_csv, FastPath, HybridConfig, TradeoffRow};
use fluidforge_core::mpm::{simulate_with, SimulateOptions};
use fluidforge_core::neural::{
    build_dataset, compute_stats, load_weights_for, reduce_trajectory, save_weights, train, Architecture,
    SurrogateWeights, TrainConfig,
};
use fluidforge_core::resolution::ReductionConfig;
use fluidforge_core::trajectory::{load_trajectory, save_trajectory};
use fluidforge_core::{init_scenario, ScenarioConfig};
use rayon::prelude::*;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "fluidforge", version, about = "Hybrid neural/MPM fluid simulation tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full-resolution MPM rollout to a trajectory file.
    Simulate(SimulateArgs),
    /// Reduce a trajectory in space and time.
    Downsample(DownsampleArgs),
    /// Train a surrogate on reduced MPM rollouts.
    Train(TrainArgs),
    /// One hybrid rollout scored against full-resolution MPM.
    Hybrid(HybridArgs),
    /// Error/latency table over a grid of r_c, r_p and r_t.
    Sweep(SweepArgs),
    /// Forward rollouts with their reversing force fields and sketches.
    Controlgen(ControlgenArgs),
    /// Reversed fields against the constant-force baseline.
    Controleval(ControlevalArgs),
    /// Streaming session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Preset name.
    #[arg(long, default_value = "water2d-desk")]
    pub scenario: String,
    /// Scenario JSON file; overrides --scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fine MPM steps; defaults to the scenario's total.
    #[arg(long)]
    pub steps: Option<usize>,
}

impl ScenarioArgs {
    pub fn load(&self) -> Result<ScenarioConfig> {
        let mut config = match &self.config {
            Some(path) => serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
                .with_context(|| format!("parsing {}", path.display()))?,
            None => ScenarioConfig::preset(&self.scenario).with_context(|| {
                format!("unknown scenario {:?}; presets: {}", self.scenario, ScenarioConfig::preset_names().join(", "))
            })?,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(steps) = self.steps {
            config.total_steps = steps;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct ReductionArgs {
    #[arg(long = "rp", default_value_t = ReductionConfig::default().r_p)]
    pub r_p: f64,
    #[arg(long = "rt", default_value_t = ReductionConfig::default().r_t)]
    pub r_t: usize,
}

impl ReductionArgs {
    fn config(&self) -> Result<ReductionConfig> {
        let r = ReductionConfig { r_p: self.r_p, r_t: self.r_t };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DownsampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub reduction: ReductionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub reduction: ReductionArgs,
    /// Number of simulated training rollouts (scenario seeds).
    #[arg(long, default_value_t = 3)]
    pub rollouts: usize,
    /// Adam steps.
    #[arg(long = "train-steps", default_value_t = 2000)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long = "train-seed", default_value_t = 0)]
    pub train_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FastPathArgs {
    /// Surrogate weights; without them the fast path is coarse MPM.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// `neural` or `coarse_mpm`.
    #[arg(long = "fast-path")]
    pub fast_path: Option<String>,
}

impl FastPathArgs {
    fn resolve(&self, dim: usize) -> Result<FastPath<f32>> {
        match (self.fast_path.as_deref(), &self.weights) {
            (Some("coarse_mpm"), _) | (None, None) => Ok(FastPath::CoarseMpm),
            (Some("neural") | None, Some(path)) => Ok(FastPath::NeuralSurrogate(Arc::new(load_weights_for(path, dim)?))),
            (Some("neural"), None) => bail!("--fast-path neural needs --weights"),
            (Some(other), _) => bail!("unknown fast path {other:?}"),
        }
    }
}

#[derive(Debug, Args)]
pub struct HybridArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub reduction: ReductionArgs,
    #[command(flatten)]
    pub fast: FastPathArgs,
    #[arg(long = "rc", default_value_t = fluidforge_core::hybrid::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub r_c: f64,
    /// Hybrid trajectory output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub fast: FastPathArgs,
    #[arg(long = "rc", value_delimiter = ',', default_value = "0.0,0.3,0.6,0.9", allow_negative_numbers = true)]
    pub r_c: Vec<f64>,
    #[arg(long = "rp", value_delimiter = ',', default_value = "0.5714285714285714")]
    pub r_p: Vec<f64>,
    #[arg(long = "rt", value_delimiter = ',', default_value = "2")]
    pub r_t: Vec<usize>,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ControlgenArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 5)]
    pub episodes: usize,
    #[arg(long = "t-ctr", default_value_t = DEFAULT_T_CTR)]
    pub t_ctr: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ControlevalArgs {
    /// Directory written by `controlgen`.
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long = "frame-rate", default_value_t = crate::server::DEFAULT_FRAME_RATE)]
    pub frame_rate: f64,
    /// Coarse steps per second per session; 0 runs unpaced.
    #[arg(long = "step-rate", default_value_t = crate::server::DEFAULT_STEP_RATE)]
    pub step_rate: f64,
}

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Downsample(a) => downsample(a),
        Command::Train(a) => train_cmd(a),
        Command::Hybrid(a) => hybrid(a),
        Command::Sweep(a) => sweep(a),
        Command::Controlgen(a) => controlgen(a),
        Command::Controleval(a) => controleval(a),
        Command::Serve(a) => serve(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<Value> {
    let config = a.scenario.load()?;
    let traj = simulate_with::<f64>(&config, SimulateOptions { record_timing: true, record_modes: true }, None)?;
    save_trajectory(&traj, &a.out)?;
    Ok(json!({
        "out": a.out,
        "frames": traj.frame_count(),
        "particles": traj.particle_count(),
        "dt": traj.dt,
    }))
}

fn downsample(a: DownsampleArgs) -> Result<Value> {
    let traj = load_trajectory::<f64>(&a.input)?;
    let reduced = reduce_trajectory(&traj, &a.reduction.config()?)?;
    save_trajectory(&reduced, &a.out)?;
    Ok(json!({
        "out": a.out,
        "frames": reduced.frame_count(),
        "particles": reduced.particle_count(),
        "dt": reduced.dt,
    }))
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let base = a.scenario.load()?;
    let reduction = a.reduction.config()?;
    if a.rollouts == 0 {
        bail!("--rollouts must be positive");
    }
    let configs: Vec<ScenarioConfig> = (0..a.rollouts as u64).map(|k| base.clone().with_seed(base.seed + k)).collect();
    let parts = configs
        .par_iter()
        .map(|c| build_dataset::<f32>(std::slice::from_ref(c), &reduction))
        .collect::<fluidforge_core::Result<Vec<_>>>()?;
    let dataset: Vec<_> = parts.into_iter().flatten().collect();
    let config = TrainConfig { steps: a.train_steps, learning_rate: a.lr, seed: a.train_seed, ..TrainConfig::default() };
    let stats = compute_stats(&dataset, config.noise_std)?;
    let arch = Architecture::new(base.dim, a.layers, a.width);
    let weights = SurrogateWeights::<f32>::random(arch, stats, a.train_seed);
    let (weights, report) = train(weights, &dataset, &config)?;
    save_weights(&weights, &a.out)?;
    let window = (report.losses.len() / 10).max(1);
    let (first, last) = report.smoothed_ends(window).unwrap_or((f64::NAN, f64::NAN));
    Ok(json!({
        "out": a.out,
        "samples": dataset.len(),
        "parameters": weights.parameter_count(),
        "steps": report.losses.len(),
        "loss_first": first,
        "loss_last": last,
    }))
}

fn hybrid(a: HybridArgs) -> Result<Value> {
    let config = a.scenario.load()?;
    let mut hconfig = HybridConfig::new(a.fast.resolve(config.dim)?).with_threshold(a.r_c);
    hconfig.reduction = a.reduction.config()?;
    let truth = simulate_with::<f32>(&config, SimulateOptions::default(), None)?;
    let report = hybrid_rollout(&config, &hconfig, Some(&truth))?;
    if let Some(out) = &a.out {
        save_trajectory(&report.trajectory, out)?;
    }
    let row = TradeoffRow::from_report(&hconfig, &report);
    Ok(json!({
        "out": a.out,
        "coarse_steps": report.trajectory.frame_count() - 1,
        "fast_path": row.fast_path,
        "r_c": row.r_c,
        "mpm_fraction": row.mpm_fraction,
        "mean_rmse": row.mean_rmse,
        "final_rmse": row.final_rmse,
        "mean_step_latency_ms": row.mean_step_latency_ms,
    }))
}

fn sweep(a: SweepArgs) -> Result<Value> {
    let config = a.scenario.load()?;
    let fast = a.fast.resolve(config.dim)?;
    let truth = simulate_with::<f32>(&config, SimulateOptions::default(), None)?;
    let mut rows = Vec::new();
    // sequential on purpose: rows report latency
    for &r_p in &a.r_p {
        for &r_t in &a.r_t {
            for &r_c in &a.r_c {
                let mut h = HybridConfig::new(fast.clone()).with_threshold(r_c);
                h.reduction = ReductionConfig { r_p, r_t };
                h.validate()?;
                rows.push(TradeoffRow::from_report(&h, &hybrid_rollout(&config, &h, Some(&truth))?));
            }
        }
    }
    let mut file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_tradeoff_csv(&rows, &mut file)?;
    Ok(json!({ "out": a.out, "rows": rows.len() }))
}

fn episode_paths(dir: &Path, k: usize) -> [PathBuf; 4] {
    let stem = dir.join(format!("episode_{k:03}"));
    ["flf", "fff", "sketch.json", "ppm"].map(|ext| stem.with_extension(ext))
}

fn controlgen(a: ControlgenArgs) -> Result<Value> {
    let base = a.scenario.load()?;
    if a.episodes == 0 || a.t_ctr == 0 {
        bail!("--episodes and --t-ctr must be positive");
    }
    fs::create_dir_all(&a.out)?;
    let written = (0..a.episodes)
        .into_par_iter()
        .map(|k| -> Result<Value> {
            let config = base.clone().with_seed(base.seed + k as u64);
            let initial = init_scenario::<f64>(&config)?;
            let ep = reverse_episode(&config, initial, a.t_ctr, a.lambda, a.beta)?;
            let [flf, fff, sketch, ppm] = episode_paths(&a.out, k);
            save_trajectory(&ep.forward, &flf)?;
            ep.field.save(&fff)?;
            fs::write(&sketch, serde_json::to_vec_pretty(&ep.sketch)?)?;
            fs::write(&ppm, ep.sketch.raster.to_ppm())?;
            Ok(json!({ "episode": k, "particles": ep.forward.particle_count(), "sketch": ep.sketch.geometry.kind() }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "out": a.out, "episodes": written }))
}

fn controleval(a: ControlevalArgs) -> Result<Value> {
    let mut k = 0;
    let mut episodes = Vec::new();
    while episode_paths(&a.dir, k)[0].exists() {
        episodes.push(k);
        k += 1;
    }
    if episodes.is_empty() {
        bail!("no episodes found in {}", a.dir.display());
    }
    let rows = episodes
        .par_iter()
        .map(|&k| -> Result<EpisodeScore> {
            let [flf, fff, sketch_path, _] = episode_paths(&a.dir, k);
            let forward = load_trajectory::<f64>(&flf)?;
            let field = ForceField::<f64>::load(&fff)?;
            if field.t_ctr() + 1 != forward.frame_count() || field.particle_count() != forward.particle_count() {
                bail!("episode {k}: field and trajectory disagree in shape");
            }
            let sketch: Sketch = match fs::read(&sketch_path) {
                Ok(bytes) => serde_json::from_slice(&bytes)?,
                Err(_) => make_arrow_sketch_along(&forward, forward.frame_count() - 1, 0)?,
            };
            Ok(score_episode(&ControlEpisode { forward, field, sketch })?)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(f64, f64)> = rows.iter().map(|r| (r.reversed_field, r.baseline)).collect();
    let n = rows.len() as f64;
    let ours = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let baseline = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(json!({
        "episodes": rows.len(),
        "reversed_field_rmse": ours,
        "baseline_rmse": baseline,
        "per_episode": rows.iter().map(|r| json!({"reversed_field": r.0, "baseline": r.1})).collect::<Vec<_>>(),
    }))
}

fn serve(a: ServeArgs) -> Result<Value> {
    let weights = match &a.weights {
        Some(p) => Some(Arc::new(fluidforge_core::neural::load_weights::<f32>(p)?)),
        None => None,
    };
    let config = crate::server::ServerConfig {
        frame_rate: a.frame_rate,
        step_rate: (a.step_rate > 0.0).then_some(a.step_rate),
        weights,
        ..Default::default()
    };
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("listening on {}", a.addr);
    runtime.block_on(crate::server::serve(a.addr, config))?;
    Ok(json!({ "addr": a.addr.to_string() }))
}
