//! Spatial downsampling, temporal striding and fidelity/complexity metrics.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::mpm::{deposit_mass, GridField};
use crate::num::Real;
use crate::particles::ParticleSet;
use crate::trajectory::Trajectory;

/// Relative acceleration magnitude below which a particle is left out of
/// `particle_accel_rmse`.
pub const ACCEL_SKIP_THRESHOLD: f64 = 1e-12;

/// Starting bucket size for clustering, in domain units.
const INITIAL_BUCKET: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    /// Spatial ratio `N_l / N_h`, in (0, 1].
    pub r_p: f64,
    /// Temporal stride; one reduced step spans `r_t` fine steps.
    pub r_t: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { r_p: 1.0 / 1.75, r_t: 2 }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_p > 0.0 && self.r_p <= 1.0) {
            return Err(argument(format!("r_p must lie in (0, 1], got {}", self.r_p)));
        }
        if self.r_t == 0 {
            return Err(argument("r_t must be at least 1"));
        }
        Ok(())
    }

    /// Reduced particle count `N_l` for `n` fine particles.
    pub fn reduced_count(&self, n: usize) -> usize {
        (self.r_p * n as f64).round() as usize
    }
}

/// Assignment of fine particles to merged particles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    /// `cluster[i]` is the merged index of fine particle `i`.
    pub cluster: Vec<usize>,
    pub count: usize,
}

impl Clustering {
    /// Applies the clustering to a particle set with the same fine layout.
    pub fn apply<T: Real>(&self, particles: &ParticleSet<T>) -> Result<ParticleSet<T>> {
        if particles.len() != self.cluster.len() {
            return Err(argument(format!(
                "clustering covers {} particles, got {}",
                self.cluster.len(),
                particles.len()
            )));
        }
        let dim = particles.dim;
        let mut mass = vec![T::zero(); self.count];
        let mut pos = vec![Vector::zero(); self.count];
        let mut vel = vec![Vector::zero(); self.count];
        let mut def = vec![Matrix::zero(); self.count];
        let mut aff = vec![Matrix::zero(); self.count];
        let mut heaviest: Vec<Option<(T, usize)>> = vec![None; self.count];
        let mut size = vec![0usize; self.count];
        for (i, &c) in self.cluster.iter().enumerate() {
            let m = particles.masses[i];
            size[c] += 1;
            mass[c] += m;
            pos[c] += particles.positions[i] * m;
            vel[c] += particles.velocities[i] * m;
            def[c] = def[c].add(&particles.deformation[i].scale(m));
            aff[c] = aff[c].add(&particles.affine[i].scale(m));
            if heaviest[c].is_none_or(|(hm, _)| m > hm) {
                heaviest[c] = Some((m, i));
            }
        }
        let mut out = ParticleSet::new(dim);
        for c in 0..self.count {
            let inv = T::one() / mass[c];
            let (_, rep) = heaviest[c].expect("every cluster has a member");
            if size[c] == 1 {
                // singletons are copied bit for bit
                out.push(particles.positions[rep], particles.velocities[rep], particles.masses[rep], particles.material_ids[rep]);
                let last = out.len() - 1;
                out.deformation[last] = particles.deformation[rep];
                out.affine[last] = particles.affine[rep];
                continue;
            }
            out.push(pos[c] * inv, vel[c] * inv, mass[c], particles.material_ids[rep]);
            let last = out.len() - 1;
            out.deformation[last] = def[c].scale(inv);
            out.affine[last] = aff[c].scale(inv);
        }
        Ok(out)
    }

    /// Applies the clustering to every frame of a trajectory. Positions and
    /// velocities are mass-weighted cluster means.
    pub fn apply_trajectory<T: Real>(&self, traj: &Trajectory<T>) -> Result<Trajectory<T>> {
        let first = self.apply(&traj.particles_at(0))?;
        let masses = traj.masses_or_unit();
        let merge = |frame: &[crate::linalg::Vector<T>]| {
            let mut acc = vec![Vector::zero(); self.count];
            for (i, &c) in self.cluster.iter().enumerate() {
                acc[c] += frame[i] * masses[i];
            }
            acc.iter().zip(&first.masses).map(|(s, m)| *s * (T::one() / *m)).collect::<Vec<_>>()
        };
        let mut out = Trajectory::from_initial(traj.config.clone(), traj.dt, &first);
        out.positions = traj.positions.iter().map(|f| merge(f)).collect();
        out.velocities = traj.velocities.as_ref().map(|vs| vs.iter().map(|f| merge(f)).collect());
        out.accels = traj.accels.as_ref().map(|acc| acc.iter().map(|f| merge(f)).collect());
        out.mode_log = traj.mode_log.clone();
        Ok(out)
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // reversed so the max-heap pops the nearest pair, ties by index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist2
            .total_cmp(&self.dist2)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Cluster {
    members: Vec<usize>,
    mass: f64,
    weighted: [f64; 3],
    material: u8,
    alive: bool,
}

impl Cluster {
    fn centroid(&self) -> [f64; 3] {
        self.weighted.map(|w| w / self.mass)
    }
}

/// Clusters `particles` into `round(r_p * N)` groups.
///
/// Particles are bucketed into cells; within each cell the nearest pairs of
/// the same material are merged greedily, nearest first, each cluster at most
/// once per pass, until the target count is reached. Passes repeat with the
/// cell size doubled. When materials cannot be kept apart a last pass merges
/// across them. The result depends only on the input order.
pub fn cluster_particles<T: Real>(particles: &ParticleSet<T>, r_p: f64) -> Result<Clustering> {
    if !(r_p > 0.0 && r_p <= 1.0) {
        return Err(argument(format!("r_p must lie in (0, 1], got {r_p}")));
    }
    let n = particles.len();
    let target = (r_p * n as f64).round() as usize;
    if n > 0 && target == 0 {
        return Err(argument(format!("r_p = {r_p} leaves no particles out of {n}")));
    }
    let dim = particles.dim;
    let mut clusters: Vec<Cluster> = (0..n)
        .map(|i| {
            let m = particles.masses[i].as_f64();
            let x = particles.positions[i];
            Cluster {
                members: vec![i],
                mass: m,
                weighted: [x[0].as_f64() * m, x[1].as_f64() * m, x[2].as_f64() * m],
                material: particles.material_ids[i],
                alive: true,
            }
        })
        .collect();
    let mut count = n;
    let mut cell = INITIAL_BUCKET;
    let mut mixed = false;
    while count > target {
        let mut buckets: HashMap<(u8, [i64; 3]), Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for (k, c) in clusters.iter().enumerate().filter(|(_, c)| c.alive) {
            let x = c.centroid();
            let mut key = [0i64; 3];
            for a in 0..dim {
                key[a] = (x[a] / cell).floor() as i64;
            }
            let material = if mixed { 0 } else { c.material };
            let slot = buckets.entry((material, key)).or_default();
            if slot.is_empty() {
                order.push((material, key));
            }
            slot.push(k);
        }
        let mut heap = BinaryHeap::new();
        for key in &order {
            let members = &buckets[key];
            for (ia, &a) in members.iter().enumerate() {
                let xa = clusters[a].centroid();
                for &b in &members[ia + 1..] {
                    let xb = clusters[b].centroid();
                    let dist2 = (0..dim).map(|d| (xa[d] - xb[d]).powi(2)).sum();
                    heap.push(Candidate { dist2, a, b });
                }
            }
        }
        let mut merged_now = vec![false; clusters.len()];
        let mut merged_any = false;
        while count > target {
            let Some(Candidate { a, b, .. }) = heap.pop() else { break };
            if merged_now[a] || merged_now[b] {
                continue;
            }
            merged_now[a] = true;
            merged_now[b] = true;
            let taken = std::mem::take(&mut clusters[b].members);
            let (mb, wb) = (clusters[b].mass, clusters[b].weighted);
            clusters[b].alive = false;
            let ca = &mut clusters[a];
            ca.members.extend(taken);
            ca.mass += mb;
            for d in 0..3 {
                ca.weighted[d] += wb[d];
            }
            count -= 1;
            merged_any = true;
        }
        if !merged_any {
            if cell > 4.0 {
                // no same-material pair left anywhere
                mixed = true;
            }
            cell *= 2.0;
        }
    }
    let mut alive: Vec<&Cluster> = clusters.iter().filter(|c| c.alive).collect();
    alive.sort_by_key(|c| c.members.iter().copied().min().unwrap_or(usize::MAX));
    let mut assignment = vec![0; n];
    for (k, c) in alive.iter().enumerate() {
        for &i in &c.members {
            assignment[i] = k;
        }
    }
    Ok(Clustering { cluster: assignment, count: alive.len() })
}

/// Merges particles down to `round(r_p * N)`; mass and momentum are
/// conserved.
pub fn downsample_particles<T: Real>(particles: &ParticleSet<T>, r_p: f64) -> Result<ParticleSet<T>> {
    cluster_particles(particles, r_p)?.apply(particles)
}

/// Keeps frames `0, r_t, 2 r_t, ...` and recomputes velocities by backward
/// differences of the kept positions. Frame 0 keeps its stored velocity (or a
/// forward difference when none is stored).
pub fn temporal_stride<T: Real>(traj: &Trajectory<T>, r_t: usize) -> Result<Trajectory<T>> {
    if r_t == 0 {
        return Err(argument("r_t must be at least 1"));
    }
    if r_t == 1 {
        return Ok(traj.clone());
    }
    let positions: Vec<_> = traj.positions.iter().step_by(r_t).cloned().collect();
    let dt = traj.dt * r_t as f64;
    let inv = T::lit(1.0 / dt);
    let n = traj.particle_count();
    let mut velocities = Vec::with_capacity(positions.len());
    let first = match &traj.velocities {
        Some(v) => v[0].clone(),
        None if positions.len() > 1 => (0..n).map(|i| (positions[1][i] - positions[0][i]) * inv).collect(),
        None => vec![Vector::zero(); n],
    };
    velocities.push(first);
    for k in 1..positions.len() {
        velocities.push((0..n).map(|i| (positions[k][i] - positions[k - 1][i]) * inv).collect());
    }
    Ok(Trajectory {
        config: traj.config.clone(),
        dim: traj.dim,
        dt,
        material_ids: traj.material_ids.clone(),
        masses: traj.masses.clone(),
        positions,
        velocities: Some(velocities),
        accels: None,
        mode_log: None,
        timing_log: None,
    })
}

/// Normalized grid-mass field of a set of weighted points.
pub fn normalized_grid_mass<T: Real>(positions: &[Vector<T>], masses: &[T], dim: usize, resolution: usize) -> Vec<T> {
    let mut grid = GridField::new(dim, resolution);
    deposit_mass(positions, masses, &mut grid);
    let total = grid.total_mass();
    if total > T::zero() {
        let inv = T::one() / total;
        grid.mass.iter_mut().for_each(|m| *m *= inv);
    }
    grid.mass
}

/// `||m_pred - m_truth|| / ||m_truth||` over normalized grid-mass fields.
pub fn grid_mass_rmse<T: Real>(pred: &ParticleSet<T>, truth: &ParticleSet<T>, resolution: usize) -> Result<T> {
    grid_mass_rmse_points(&pred.positions, &pred.masses, &truth.positions, &truth.masses, pred.dim, truth.dim, resolution)
}

pub fn grid_mass_rmse_points<T: Real>(
    pred_positions: &[Vector<T>],
    pred_masses: &[T],
    truth_positions: &[Vector<T>],
    truth_masses: &[T],
    pred_dim: usize,
    truth_dim: usize,
    resolution: usize,
) -> Result<T> {
    if pred_dim != truth_dim {
        return Err(argument("pred and truth differ in dimension"));
    }
    if pred_positions.len() != pred_masses.len() || truth_positions.len() != truth_masses.len() {
        return Err(argument("positions and masses differ in length"));
    }
    if !(truth_masses.iter().copied().sum::<T>() > T::zero()) {
        return Err(argument("truth has zero total mass"));
    }
    let t = normalized_grid_mass(truth_positions, truth_masses, truth_dim, resolution);
    let p = normalized_grid_mass(pred_positions, pred_masses, pred_dim, resolution);
    let num: T = p.iter().zip(&t).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
    let den: T = t.iter().map(|b| *b * *b).sum();
    if !(den > T::zero()) {
        return Err(argument("truth mass falls outside the grid"));
    }
    Ok((num / den).sqrt())
}

/// Mean per-particle relative acceleration error; particles with negligible
/// true acceleration are skipped.
pub fn particle_accel_rmse<T: Real>(pred: &[Vector<T>], truth: &[Vector<T>]) -> Result<T> {
    if pred.len() != truth.len() {
        return Err(argument(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let mut sum = T::zero();
    let mut kept = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let nt = t.norm();
        if nt < T::lit(ACCEL_SKIP_THRESHOLD) {
            continue;
        }
        sum += (*p - *t).norm() / nt;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::UndefinedMetric("all true accelerations are zero".into()));
    }
    Ok(sum / T::lit(kept as f64))
}

/// Rolling acceleration history for the cosine-similarity complexity signal.
#[derive(Clone, Debug)]
pub struct ComplexityWindow<T> {
    pub window: usize,
    history: VecDeque<Vec<Vector<T>>>,
}

impl<T: Real> ComplexityWindow<T> {
    pub const DEFAULT_WINDOW: usize = 10;

    pub fn new(window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        Self { window, history: VecDeque::with_capacity(2 * window + 1) }
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }

    pub fn is_ready(&self) -> bool {
        self.history.len() >= 2 * self.window
    }

    /// Records one step of per-particle accelerations. A change in particle
    /// count restarts the history.
    pub fn push(&mut self, accels: Vec<Vector<T>>) {
        if self.history.front().is_some_and(|h| h.len() != accels.len()) {
            self.history.clear();
        }
        self.history.push_back(accels);
        while self.history.len() > 2 * self.window {
            self.history.pop_front();
        }
    }

    /// Mean over particles of the cosine between the older and newer
    /// `window`-step acceleration blocks, or `None` until the buffer is full.
    pub fn signal(&self) -> Option<T> {
        if !self.is_ready() {
            return None;
        }
        let n = self.history[0].len();
        if n == 0 {
            return Some(T::one());
        }
        let w = self.window;
        let mut total = T::zero();
        for i in 0..n {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for k in 0..w {
                let a = self.history[k][i];
                let b = self.history[k + w][i];
                dot += a.dot(&b);
                na += a.norm_squared();
                nb += b.norm_squared();
            }
            total += if na > T::zero() && nb > T::zero() {
                (dot / (na.sqrt() * nb.sqrt())).max(-T::one()).min(T::one())
            } else {
                T::one()
            };
        }
        Some(total / T::lit(n as f64))
    }
}

impl<T: Real> Default for ComplexityWindow<T> {
    fn default() -> Self {
        Self::new(Self::DEFAULT_WINDOW)
    }
}

/// One `(step, metric, value)` row of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,metric,value")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.metric, r.value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{init_scenario, ScenarioConfig};
    use proptest::prelude::*;

    fn line(points: &[(f64, f64)]) -> ParticleSet<f64> {
        let mut p = ParticleSet::new(2);
        for &(x, m) in points {
            p.push(Vector::from_f64(&[x, 0.5]), Vector::from_f64(&[x, -x]), m, 0);
        }
        p
    }

    #[test]
    fn unit_ratio_is_identity() {
        let cfg = ScenarioConfig::preset("water2d-desk").unwrap();
        let p = init_scenario::<f64>(&cfg).unwrap();
        assert_eq!(downsample_particles(&p, 1.0).unwrap(), p);
    }

    #[test]
    fn pair_merges_to_mass_weighted_mean() {
        let p = line(&[(0.2, 1.0), (0.4, 3.0)]);
        let d = downsample_particles(&p, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.positions[0][0] - 0.35).abs() < 1e-15);
        assert_eq!(d.masses[0], 4.0);
        assert!((d.velocities[0][0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn zero_target_is_an_error() {
        let p = line(&[(0.2, 1.0), (0.4, 3.0)]);
        assert!(matches!(downsample_particles(&p, 0.1), Err(Error::Argument(_))));
        assert!(downsample_particles(&p, 0.0).is_err());
        assert!(downsample_particles(&p, 1.5).is_err());
    }

    #[test]
    fn merging_across_materials_when_unavoidable() {
        let mut p = line(&[(0.2, 1.0)]);
        p.push(Vector::from_f64(&[0.6, 0.5]), Vector::zero(), 2.0, 1);
        let d = downsample_particles(&p, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.material_ids[0], 1);
    }

    #[test]
    fn materials_stay_apart_when_possible() {
        let cfg = ScenarioConfig::preset("watersand2d-desk").unwrap();
        let p = init_scenario::<f64>(&cfg).unwrap();
        let c = cluster_particles(&p, 1.0 / 1.75).unwrap();
        let mut seen = vec![None; c.count];
        for (i, &k) in c.cluster.iter().enumerate() {
            let m = p.material_ids[i];
            assert!(seen[k].is_none_or(|s| s == m));
            seen[k] = Some(m);
        }
    }

    #[test]
    fn desk_scenario_reaches_target_count() {
        let cfg = ScenarioConfig::preset("water2d-desk").unwrap();
        let p = init_scenario::<f64>(&cfg).unwrap();
        let d = downsample_particles(&p, 1.0 / 1.75).unwrap();
        assert_eq!(d.len(), 286);
        assert!(((d.total_mass() - p.total_mass()) / p.total_mass()).abs() < 1e-12);
        // near-uniform clusters: no merged particle is more than three fine ones
        let m = p.masses[0];
        assert!(d.masses.iter().all(|x| *x <= 3.0 * m + 1e-15));
    }

    #[test]
    fn stride_keeps_every_other_frame() {
        let mut cfg = ScenarioConfig::preset("freefall2d").unwrap();
        cfg.total_steps = 9;
        let traj = crate::mpm::simulate::<f64>(&cfg).unwrap();
        assert_eq!(traj.frame_count(), 10);
        let s = temporal_stride(&traj, 2).unwrap();
        assert_eq!(s.frame_count(), 5);
        for (k, f) in s.positions.iter().enumerate() {
            assert_eq!(f, &traj.positions[2 * k]);
        }
        assert!((s.dt - 0.005).abs() < 1e-15);
        assert_eq!(temporal_stride(&traj, 1).unwrap(), traj);
    }

    #[test]
    fn stride_of_linear_motion_recovers_velocity() {
        let mut p = ParticleSet::new(2);
        let v = Vector::from_f64(&[0.3, -0.1]);
        p.push(Vector::from_f64(&[0.4, 0.6]), v, 1.0, 0);
        let mut traj = Trajectory::from_initial(ScenarioConfig::new("lin", 2), 0.0025, &p);
        for _ in 0..8 {
            p.positions[0] += v * 0.0025;
            traj.push_particles(&p);
        }
        let s = temporal_stride(&traj, 2).unwrap();
        for f in s.velocities.as_ref().unwrap() {
            assert!((f[0] - v).norm() < 1e-12);
        }
    }

    fn on_node(i: usize, j: usize) -> ParticleSet<f64> {
        let mut p = ParticleSet::new(2);
        p.push(Vector::from_f64(&[i as f64 / 64.0, j as f64 / 64.0]), Vector::zero(), 1.0, 0);
        p
    }

    #[test]
    fn grid_rmse_identity_and_scaling() {
        let cfg = ScenarioConfig::preset("water2d-desk").unwrap();
        let p = init_scenario::<f64>(&cfg).unwrap();
        assert_eq!(grid_mass_rmse(&p, &p, 128).unwrap(), 0.0);
        let mut heavy = p.clone();
        heavy.masses.iter_mut().for_each(|m| *m *= 5.0);
        assert!(grid_mass_rmse(&heavy, &p, 128).unwrap() < 1e-14);
    }

    #[test]
    fn grid_rmse_disjoint_support_is_sqrt_two() {
        let e = grid_mass_rmse(&on_node(10, 10), &on_node(40, 40), 64).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn grid_rmse_rejects_massless_truth() {
        let empty = ParticleSet::<f64>::new(2);
        assert!(matches!(grid_mass_rmse(&on_node(10, 10), &empty, 64), Err(Error::Argument(_))));
    }

    #[test]
    fn accel_rmse_cases() {
        let t: Vec<Vector<f64>> = vec![Vector::from_f64(&[1.0, 2.0]), Vector::from_f64(&[-3.0, 0.5]), Vector::zero()];
        let scaled: Vec<_> = t.iter().map(|a| *a * 2.0).collect();
        let neg: Vec<_> = t.iter().map(|a| -*a).collect();
        assert_eq!(particle_accel_rmse(&t, &t).unwrap(), 0.0);
        assert!((particle_accel_rmse(&scaled, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((particle_accel_rmse(&neg, &t).unwrap() - 2.0).abs() < 1e-15);
        let zeros = vec![Vector::<f64>::zero(); 3];
        assert!(matches!(particle_accel_rmse(&t, &zeros), Err(Error::UndefinedMetric(_))));
        assert!(particle_accel_rmse(&t[..2], &t).is_err());
    }

    fn filled(first: Vector<f64>, second: Vector<f64>, n: usize) -> ComplexityWindow<f64> {
        let mut w = ComplexityWindow::new(10);
        for k in 0..20 {
            assert!(w.signal().is_none());
            w.push(vec![if k < 10 { first } else { second }; n]);
        }
        w
    }

    #[test]
    fn complexity_signal_cases() {
        let a = Vector::from_f64(&[1.0, 0.0]);
        let b = Vector::from_f64(&[0.0, 1.0]);
        assert!((filled(a, a, 3).signal().unwrap() - 1.0).abs() < 1e-15);
        assert!((filled(a, -a, 3).signal().unwrap() + 1.0).abs() < 1e-15);
        assert!(filled(a, b, 3).signal().unwrap().abs() < 1e-15);
        assert_eq!(filled(Vector::zero(), Vector::zero(), 3).signal().unwrap(), 1.0);
    }

    #[test]
    fn complexity_window_restarts_on_count_change() {
        let mut w = filled(Vector::from_f64(&[1.0, 0.0]), Vector::from_f64(&[1.0, 0.0]), 3);
        assert!(w.is_ready());
        w.push(vec![Vector::zero(); 4]);
        assert_eq!(w.len(), 1);
        assert!(w.signal().is_none());
    }

    #[test]
    fn free_fall_signal_is_exactly_one() {
        let cfg = ScenarioConfig::preset("freefall2d").unwrap();
        let traj = crate::mpm::simulate::<f64>(&cfg).unwrap();
        let g = cfg.gravity_vector::<f64>();
        let mut w = ComplexityWindow::new(10);
        for _ in 1..traj.frame_count() {
            w.push(vec![g; traj.particle_count()]);
        }
        assert_eq!(w.signal().unwrap(), 1.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricRow { step: 3, metric: "grid_rmse".into(), value: 0.25 }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,metric,value\n3,grid_rmse,0.25\n");
    }

    fn cloud() -> impl Strategy<Value = ParticleSet<f64>> {
        proptest::collection::vec((0.1f64..0.9, 0.1f64..0.9, 0.1f64..2.0, -1.0f64..1.0, 0u8..2), 1..120).prop_map(
            |rows| {
                let mut p = ParticleSet::new(2);
                for (x, y, m, v, mat) in rows {
                    p.push(Vector::from_f64(&[x, y]), Vector::from_f64(&[v, -v * 0.5]), m, mat);
                }
                p
            },
        )
    }

    proptest! {
        #[test]
        fn downsample_conserves_mass_and_momentum(p in cloud(), r in 0.3f64..1.0) {
            prop_assume!((r * p.len() as f64).round() >= 1.0);
            let d = downsample_particles(&p, r).unwrap();
            prop_assert_eq!(d.len(), (r * p.len() as f64).round() as usize);
            let (m0, m1) = (p.total_mass(), d.total_mass());
            prop_assert!(((m1 - m0) / m0).abs() < 1e-13);
            let dp = (d.total_momentum() - p.total_momentum()).norm();
            prop_assert!(dp <= 1e-12 * (1.0 + p.total_momentum().norm()));
        }

        #[test]
        fn grid_rmse_ignores_uniform_rescaling(p in cloud(), q in cloud(), s in 0.1f64..10.0) {
            let base = grid_mass_rmse(&p, &q, 64).unwrap();
            let mut ps = p.clone();
            ps.masses.iter_mut().for_each(|m| *m *= s);
            let scaled = grid_mass_rmse(&ps, &q, 64).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-10 * (1.0 + base));
        }

        #[test]
        fn complexity_signal_ignores_positive_scaling(
            vals in proptest::collection::vec(-1.0f64..1.0, 20 * 2 * 4), s in 0.01f64..100.0
        ) {
            let mut a = ComplexityWindow::new(10);
            let mut b = ComplexityWindow::new(10);
            for k in 0..20 {
                let step: Vec<_> = (0..4)
                    .map(|i| Vector::from_f64(&[vals[(k * 4 + i) * 2], vals[(k * 4 + i) * 2 + 1]]))
                    .collect();
                b.push(step.iter().map(|v| *v * s).collect());
                a.push(step);
            }
            let (sa, sb) = (a.signal().unwrap(), b.signal().unwrap());
            prop_assert!((sa - sb).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&sa));
        }
    }
}
