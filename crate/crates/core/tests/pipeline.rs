use std::sync::Arc;

use fluidforge_core::control::{ballistic_replay, reverse_force_field, smooth_field, ForceField};
use fluidforge_core::hybrid::{hybrid_rollout, FastPath, HybridConfig};
use fluidforge_core::mpm::simulate;
use fluidforge_core::neural::{
    build_dataset, compute_stats, load_weights, reduce_trajectory, save_weights, train, Architecture, SurrogateWeights,
    TrainConfig,
};
use fluidforge_core::resolution::{grid_mass_rmse, ReductionConfig};
use fluidforge_core::trajectory::{load_trajectory, save_trajectory};
use fluidforge_core::{ParticleSet, ScenarioConfig, StepMode, Trajectory, Vector};
use proptest::prelude::*;

fn short_desk(steps: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::preset("water2d-desk").unwrap().with_seed(4);
    cfg.total_steps = steps;
    cfg
}

#[test]
fn files_carry_a_run_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_desk(40);
    let full = simulate::<f32>(&cfg).unwrap();
    let path = dir.path().join("full.flf");
    save_trajectory(&full, &path).unwrap();
    let loaded = load_trajectory::<f32>(&path).unwrap();
    assert_eq!(loaded.positions, full.positions);
    assert_eq!(loaded.config, cfg);

    let reduction = ReductionConfig::default();
    let reduced = reduce_trajectory(&loaded, &reduction).unwrap();
    assert_eq!(reduced.frame_count(), 21);

    let data = build_dataset::<f32>(&[cfg.clone()], &reduction).unwrap();
    let tc = TrainConfig { steps: 10, learning_rate: 1e-3, ..TrainConfig::default() };
    let stats = compute_stats(&data, tc.noise_std).unwrap();
    let (w, report) = train(SurrogateWeights::random(Architecture::desk(2), stats, 2), &data, &tc).unwrap();
    assert_eq!(report.losses.len(), 10);
    let wpath = dir.path().join("w.ffw");
    save_weights(&w, &wpath).unwrap();
    let w = Arc::new(load_weights::<f32>(&wpath).unwrap());

    let h = HybridConfig::new(FastPath::NeuralSurrogate(w)).with_threshold(-1.0);
    let report = hybrid_rollout(&cfg, &h, Some(&full)).unwrap();
    assert_eq!(report.trajectory.frame_count(), 21);
    assert!(report.trajectory.mode_log.as_ref().unwrap().iter().all(|m| *m == StepMode::Neural));
    assert_eq!(report.grid_rmse_curve.as_ref().unwrap().len(), 20);
    let hpath = dir.path().join("hybrid.flf");
    save_trajectory(&report.trajectory, &hpath).unwrap();
    let back = load_trajectory::<f32>(&hpath).unwrap();
    assert_eq!(back.mode_log, report.trajectory.mode_log);
    assert_eq!(back.timing_log, report.trajectory.timing_log);
}

#[test]
fn f32_and_f64_solvers_agree() {
    let cfg = short_desk(20);
    let a = simulate::<f32>(&cfg).unwrap();
    let b = simulate::<f64>(&cfg).unwrap();
    let worst = a.positions[20]
        .iter()
        .zip(&b.positions[20])
        .map(|(x, y)| (x.cast::<f64>() - *y).norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

/// Coordinates that survive the f32 file payload unchanged.
fn coord() -> impl Strategy<Value = f64> {
    (0.1f32..0.9).prop_map(f64::from)
}

fn trajectory(frames: usize) -> impl Strategy<Value = Trajectory<f64>> {
    (1usize..6).prop_flat_map(move |n| {
        prop::collection::vec(prop::collection::vec((coord(), coord()), n), frames).prop_map(move |rows| {
            let mut p = ParticleSet::new(2);
            for &(x, y) in &rows[0] {
                p.push(Vector::from_f64(&[x, y]), Vector::zero(), 1.0, 0);
            }
            let mut t = Trajectory::from_initial(ScenarioConfig::new("prop", 2), 0.0025, &p);
            t.velocities = None;
            for row in &rows[1..] {
                t.positions.push(row.iter().map(|&(x, y)| Vector::from_f64(&[x, y])).collect());
            }
            t
        })
    })
}

proptest! {
    #[test]
    fn trajectory_bytes_round_trip(t in trajectory(4)) {
        let back = Trajectory::<f64>::from_bytes(&t.to_bytes().unwrap(), t.config.clone()).unwrap();
        prop_assert_eq!(back.positions, t.positions);
        prop_assert_eq!(back.material_ids, t.material_ids);
    }

    #[test]
    fn reversed_fields_replay_any_path(t in trajectory(8)) {
        let g = Vector::from_f64(&[0.0, -9.8]);
        let field = reverse_force_field(&t, &g, t.dt).unwrap();
        let last = t.positions.last().unwrap();
        let replay = ballistic_replay(last, &vec![Vector::zero(); last.len()], &field, &g);
        for (k, frame) in replay.iter().enumerate() {
            for (a, b) in frame.iter().zip(&t.positions[7 - k]) {
                prop_assert!((*a - *b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn field_bytes_round_trip(t in trajectory(5)) {
        let field = reverse_force_field(&t, &Vector::zero(), t.dt).unwrap();
        let narrowed: ForceField<f32> = ForceField {
            dim: field.dim,
            dt: field.dt,
            accels: field.accels.iter().map(|r| r.iter().map(|a| a.cast()).collect()).collect(),
        };
        prop_assert_eq!(ForceField::<f32>::from_bytes(&narrowed.to_bytes().unwrap()).unwrap(), narrowed);
    }

    #[test]
    fn smoothing_keeps_the_last_step(t in trajectory(6), lambda in 0.0f64..1.0, beta in 0.0f64..4.0) {
        let field = reverse_force_field(&t, &Vector::zero(), t.dt).unwrap();
        let s = smooth_field(&field, lambda, beta).unwrap();
        prop_assert_eq!(s.accels.last(), field.accels.last());
        prop_assert!(s.accels.iter().flatten().all(|a| a.is_finite()));
    }

    #[test]
    fn grid_rmse_is_zero_on_itself_and_nonnegative(a in trajectory(2), b in trajectory(2)) {
        let (p, q) = (a.particles_at(1), b.particles_at(1));
        prop_assert_eq!(grid_mass_rmse(&p, &p, 64).unwrap(), 0.0);
        prop_assert!(grid_mass_rmse(&p, &q, 64).unwrap() >= 0.0);
    }
}
