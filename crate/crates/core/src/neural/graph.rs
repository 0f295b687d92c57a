//! Radius graphs and node/edge feature assembly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::linalg::Vector;
use crate::num::Real;
use crate::trajectory::Frame;

/// Number of position frames the surrogate consumes.
pub const HISTORY_LEN: usize = 6;
/// Finite-difference velocities derived from the history.
pub const VELOCITY_FRAMES: usize = HISTORY_LEN - 1;
pub const EMBEDDING_DIM: usize = 16;

/// Directed edges `(sender, receiver)` with `|p_s - p_r| <= radius`, built by
/// spatial hashing. Edges are grouped by sender, receivers ascending.
pub fn build_graph<T: Real>(positions: &[Vector<T>], dim: usize, radius: T) -> (Vec<usize>, Vec<usize>) {
    assert!(radius > T::zero(), "radius must be positive");
    let inv = radius.recip();
    let key = |x: &Vector<T>| {
        let mut k = [0i64; 3];
        for a in 0..dim {
            k[a] = (x[a] * inv).floor().to_i64().unwrap_or(i64::MIN);
        }
        k
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::with_capacity(positions.len());
    for (i, x) in positions.iter().enumerate() {
        cells.entry(key(x)).or_default().push(i);
    }
    let r2 = radius * radius;
    let (mut senders, mut receivers) = (Vec::new(), Vec::new());
    let span: &[i64] = &[-1, 0, 1];
    let zspan: &[i64] = if dim == 3 { span } else { &[0] };
    let mut found = Vec::new();
    for (i, x) in positions.iter().enumerate() {
        let k = key(x);
        found.clear();
        for &dx in span {
            for &dy in span {
                for &dz in zspan {
                    if let Some(list) = cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in list {
                            if j != i && (*x - positions[j]).norm_squared() <= r2 {
                                found.push(j);
                            }
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        for &j in &found {
            senders.push(i);
            receivers.push(j);
        }
    }
    (senders, receivers)
}

/// Velocity and acceleration normalization, per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vel_mean: Vec<f64>,
    pub vel_std: Vec<f64>,
    pub acc_mean: Vec<f64>,
    pub acc_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { vel_mean: vec![0.0; dim], vel_std: vec![1.0; dim], acc_mean: vec![0.0; dim], acc_std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.vel_mean.len()
    }
}

/// Axis-aligned walls the boundary features measure against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walls {
    pub lo: f64,
    pub hi: f64,
}

impl Walls {
    pub const UNIT: Walls = Walls { lo: 0.0, hi: 1.0 };

    /// Walls at the solver's boundary band for a grid resolution.
    pub fn band(resolution: usize) -> Self {
        let lo = crate::mpm::BOUNDARY_CELLS as f64 / resolution as f64;
        Self { lo, hi: 1.0 - lo }
    }
}

/// Inputs of one surrogate evaluation. `node_features` holds the velocity and
/// wall blocks; the material embedding is looked up from `kinds` inside the
/// network, completing the `D`-wide node row.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch<T> {
    pub dim: usize,
    pub nodes: usize,
    pub node_features: Vec<T>,
    pub kinds: Vec<usize>,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// `E x (dim + 1)`: sender minus receiver displacement and its length.
    pub edge_features: Vec<T>,
}

impl<T: Real> GraphBatch<T> {
    pub fn dynamic_width(dim: usize) -> usize {
        VELOCITY_FRAMES * dim + 2 * dim
    }

    /// Full encoder input width `D` (30 in 2D, 37 in 3D).
    pub fn feature_dim(dim: usize) -> usize {
        Self::dynamic_width(dim) + EMBEDDING_DIM
    }

    pub fn edge_width(dim: usize) -> usize {
        dim + 1
    }

    pub fn edge_count(&self) -> usize {
        self.senders.len()
    }

    /// Reorders nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w = Self::dynamic_width(self.dim);
        let mut inverse = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let mut node_features = Vec::with_capacity(self.node_features.len());
        for &p in perm {
            node_features.extend_from_slice(&self.node_features[p * w..(p + 1) * w]);
        }
        Self {
            dim: self.dim,
            nodes: self.nodes,
            node_features,
            kinds: perm.iter().map(|&p| self.kinds[p]).collect(),
            senders: self.senders.iter().map(|&s| inverse[s]).collect(),
            receivers: self.receivers.iter().map(|&r| inverse[r]).collect(),
            edge_features: self.edge_features.clone(),
        }
    }
}

/// Builds the graph batch for the newest frame of a 6-frame history taken at
/// step `dt`.
pub fn assemble_features<T: Real>(
    history: &[Frame<T>],
    kinds: &[usize],
    stats: &NormStats,
    dt: f64,
    walls: Walls,
    radius: f64,
) -> Result<GraphBatch<T>> {
    if history.len() != HISTORY_LEN {
        return Err(argument(format!("history must hold {HISTORY_LEN} frames, got {}", history.len())));
    }
    let n = history[0].len();
    if history.iter().any(|f| f.len() != n) || kinds.len() != n {
        return Err(argument("history frames and materials differ in particle count"));
    }
    let dim = stats.dim();
    if !(2..=3).contains(&dim) {
        return Err(argument("normalization statistics must have 2 or 3 components"));
    }
    let w = GraphBatch::<T>::dynamic_width(dim);
    let mut node_features = Vec::with_capacity(n * w);
    let inv_dt = T::lit(1.0 / dt);
    let inv_r = T::lit(1.0 / radius);
    let (lo, hi) = (T::lit(walls.lo), T::lit(walls.hi));
    let vm: Vec<T> = stats.vel_mean.iter().map(|&x| T::lit(x)).collect();
    let vs: Vec<T> = stats.vel_std.iter().map(|&x| T::lit(1.0 / x)).collect();
    let current = &history[HISTORY_LEN - 1];
    for i in 0..n {
        for k in 0..VELOCITY_FRAMES {
            let v = (history[k + 1][i] - history[k][i]) * inv_dt;
            for a in 0..dim {
                node_features.push((v[a] - vm[a]) * vs[a]);
            }
        }
        let x = current[i];
        for a in 0..dim {
            node_features.push(((x[a] - lo) * inv_r).max(-T::one()).min(T::one()));
            node_features.push(((hi - x[a]) * inv_r).max(-T::one()).min(T::one()));
        }
    }
    let (senders, receivers) = build_graph(current, dim, T::lit(radius));
    let mut edge_features = Vec::with_capacity(senders.len() * (dim + 1));
    for (&s, &r) in senders.iter().zip(&receivers) {
        let d = current[s] - current[r];
        for a in 0..dim {
            edge_features.push(d[a]);
        }
        edge_features.push(d.norm());
    }
    Ok(GraphBatch { dim, nodes: n, node_features, kinds: kinds.to_vec(), senders, receivers, edge_features })
}

/// Symplectic Euler: `v' = v + dt a`, `p' = p + dt v'`, clamped to the walls.
pub fn integrate<T: Real>(
    positions: &[Vector<T>],
    velocities: &[Vector<T>],
    accels: &[Vector<T>],
    dt: f64,
    dim: usize,
    walls: Walls,
) -> (Vec<Vector<T>>, Vec<Vector<T>>) {
    let h = T::lit(dt);
    let (lo, hi) = (T::lit(walls.lo), T::lit(walls.hi));
    let mut p_out = Vec::with_capacity(positions.len());
    let mut v_out = Vec::with_capacity(positions.len());
    for ((p, v), a) in positions.iter().zip(velocities).zip(accels) {
        let v1 = *v + *a * h;
        let mut p1 = *p + v1 * h;
        for k in 0..dim {
            p1[k] = p1[k].max(lo).min(hi);
        }
        p_out.push(p1);
        v_out.push(v1);
    }
    (p_out, v_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(xy: &[[f64; 2]]) -> Vec<Vector<f64>> {
        xy.iter().map(|p| Vector::from_f64(p)).collect()
    }

    #[test]
    fn radius_is_inclusive_and_symmetric() {
        let (s, r) = build_graph(&pts(&[[0.5, 0.5], [0.51, 0.5]]), 2, 0.015);
        assert_eq!((s, r), (vec![0, 1], vec![1, 0]));
        let (s, _) = build_graph(&pts(&[[0.5, 0.5], [0.52, 0.5]]), 2, 0.015);
        assert!(s.is_empty());
        let (s, _) = build_graph(&pts(&[[0.25, 0.5], [0.25, 0.75]]), 2, 0.25);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn hashed_graph_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2, 3] {
            let p: Vec<Vector<f64>> = (0..100)
                .map(|_| {
                    let mut v = Vector::zero();
                    for a in 0..dim {
                        v[a] = rng.random_range(0.4..0.5);
                    }
                    v
                })
                .collect();
            let (s, r) = build_graph(&p, dim, 0.015);
            let mut want = Vec::new();
            for i in 0..100 {
                for j in 0..100 {
                    if i != j && (p[i] - p[j]).norm() <= 0.015 {
                        want.push((i, j));
                    }
                }
            }
            let got: Vec<_> = s.into_iter().zip(r).collect();
            assert_eq!(got, want);
        }
    }

    fn still_history(x: [f64; 2]) -> Vec<Frame<f64>> {
        vec![pts(&[x]); HISTORY_LEN]
    }

    #[test]
    fn feature_layout_and_width() {
        assert_eq!(GraphBatch::<f64>::feature_dim(2), 30);
        assert_eq!(GraphBatch::<f64>::feature_dim(3), 37);
        let mut stats = NormStats::identity(2);
        stats.vel_mean = vec![0.5, -1.0];
        stats.vel_std = vec![2.0, 4.0];
        let b = assemble_features(&still_history([0.5, 0.5]), &[0], &stats, 0.005, Walls::UNIT, 0.015).unwrap();
        assert_eq!(b.node_features.len(), 14);
        for k in 0..5 {
            assert_eq!(b.node_features[2 * k], -0.25);
            assert_eq!(b.node_features[2 * k + 1], 0.25);
        }
        assert!(b.node_features[10..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn wall_features_near_the_lower_wall() {
        let stats = NormStats::identity(2);
        let b = assemble_features(&still_history([0.0075, 0.5]), &[0], &stats, 0.005, Walls::UNIT, 0.015).unwrap();
        assert!((b.node_features[10] - 0.5).abs() < 1e-12);
        assert_eq!(b.node_features[11], 1.0);
    }

    #[test]
    fn constant_velocity_history_gives_equal_differences() {
        let v = [0.2, -0.4];
        let hist: Vec<Frame<f64>> =
            (0..6).map(|k| pts(&[[0.3 + v[0] * 0.005 * k as f64, 0.6 + v[1] * 0.005 * k as f64]])).collect();
        let b = assemble_features(&hist, &[1], &NormStats::identity(2), 0.005, Walls::UNIT, 0.015).unwrap();
        for k in 0..5 {
            assert!((b.node_features[2 * k] - v[0]).abs() < 1e-12);
            assert!((b.node_features[2 * k + 1] - v[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_history_length_is_rejected() {
        let hist = vec![pts(&[[0.5, 0.5]]); 5];
        assert!(assemble_features(&hist, &[0], &NormStats::identity(2), 0.005, Walls::UNIT, 0.015).is_err());
    }

    #[test]
    fn edge_rows_hold_displacement_and_length() {
        let hist = vec![pts(&[[0.5, 0.5], [0.506, 0.508]]); 6];
        let b = assemble_features(&hist, &[0, 0], &NormStats::identity(2), 0.005, Walls::UNIT, 0.015).unwrap();
        assert_eq!(b.edge_count(), 2);
        assert!((b.edge_features[0] + 0.006).abs() < 1e-12);
        assert!((b.edge_features[1] + 0.008).abs() < 1e-12);
        assert!((b.edge_features[2] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn euler_step_formulas() {
        let p = pts(&[[0.5, 0.5]]);
        let v = pts(&[[0.1, 0.2]]);
        let zero = pts(&[[0.0, 0.0]]);
        let (p1, _) = integrate(&p, &v, &zero, 0.01, 2, Walls::UNIT);
        assert!((p1[0] - Vector::from_f64(&[0.501, 0.502])).norm() < 1e-15);
        let a = pts(&[[1.0, -2.0]]);
        let (p1, _) = integrate(&p, &zero, &a, 0.01, 2, Walls::UNIT);
        assert!((p1[0] - Vector::from_f64(&[0.5001, 0.4998])).norm() < 1e-15);
        let (p1, v1) = integrate(&p, &v, &a, 0.01, 2, Walls::UNIT);
        let (p2, _) = integrate(&p1, &v1, &a, 0.01, 2, Walls::UNIT);
        let want = p[0] + v[0] * 0.02 + a[0] * (3.0 * 0.01 * 0.01);
        assert!((p2[0] - want).norm() < 1e-15);
    }
}
