use crate::linalg::{Vector, MAX_DIM};
use crate::num::Real;

/// Background grid of nodal mass and momentum over the unit box. Nodes sit at
/// `index * dx` for `index` in `0..resolution` on every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<T> {
    pub dim: usize,
    pub resolution: usize,
    pub mass: Vec<T>,
    pub momentum: Vec<Vector<T>>,
}

impl<T: Real> GridField<T> {
    pub fn new(dim: usize, resolution: usize) -> Self {
        let nodes = resolution.pow(dim as u32);
        Self { dim, resolution, mass: vec![T::zero(); nodes], momentum: vec![Vector::zero(); nodes] }
    }

    pub fn node_count(&self) -> usize {
        self.mass.len()
    }

    pub fn dx(&self) -> T {
        T::one() / T::lit(self.resolution as f64)
    }

    pub fn clear(&mut self) {
        self.mass.iter_mut().for_each(|m| *m = T::zero());
        self.momentum.iter_mut().for_each(|p| *p = Vector::zero());
    }

    pub fn flat_index(&self, idx: [usize; MAX_DIM]) -> usize {
        let r = self.resolution;
        if self.dim == 2 {
            idx[0] * r + idx[1]
        } else {
            (idx[0] * r + idx[1]) * r + idx[2]
        }
    }

    pub fn node_coords(&self, flat: usize) -> [usize; MAX_DIM] {
        let r = self.resolution;
        if self.dim == 2 {
            [flat / r, flat % r, 0]
        } else {
            [flat / (r * r), (flat / r) % r, flat % r]
        }
    }

    pub fn total_mass(&self) -> T {
        self.mass.iter().copied().sum()
    }

    pub fn total_momentum(&self) -> Vector<T> {
        self.momentum.iter().fold(Vector::zero(), |acc, p| acc + *p)
    }

    pub fn velocity(&self, flat: usize) -> Vector<T> {
        let m = self.mass[flat];
        if m > T::zero() {
            self.momentum[flat] * (T::one() / m)
        } else {
            Vector::zero()
        }
    }
}

/// Quadratic B-spline weights of one particle over its 3^dim node stencil.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub base: [isize; MAX_DIM],
    /// Particle position relative to `base`, in cell units.
    pub frac: [T; MAX_DIM],
    pub weights: [[T; 3]; MAX_DIM],
}

impl<T: Real> Stencil<T> {
    pub fn new(x: &Vector<T>, inv_dx: T, dim: usize) -> Self {
        let half = T::lit(0.5);
        let mut base = [0isize; MAX_DIM];
        let mut frac = [T::zero(); MAX_DIM];
        let mut weights = [[T::zero(), T::one(), T::zero()]; MAX_DIM];
        for a in 0..dim {
            let xi = x[a] * inv_dx;
            let b = (xi - half).floor();
            base[a] = b.to_isize().unwrap_or(isize::MIN);
            let f = xi - b;
            frac[a] = f;
            let t0 = T::lit(1.5) - f;
            let t1 = f - T::one();
            let t2 = f - half;
            weights[a] = [half * t0 * t0, T::lit(0.75) - t1 * t1, half * t2 * t2];
        }
        Self { base, frac, weights }
    }

    /// True when every stencil node is a valid grid node.
    pub fn in_grid(&self, resolution: usize, dim: usize) -> bool {
        (0..dim).all(|a| self.base[a] >= 0 && self.base[a] + 2 < resolution as isize)
    }

    /// Visits `(node coords, weight, offset - frac in cell units)` for every
    /// stencil node; coordinates may be out of range when `in_grid` is false.
    #[inline]
    pub fn for_each(&self, dim: usize, mut f: impl FnMut([isize; MAX_DIM], T, Vector<T>)) {
        let kz = if dim == 3 { 3 } else { 1 };
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..kz {
                    let off = [i, j, k];
                    let mut w = T::one();
                    let mut node = [0isize; MAX_DIM];
                    let mut dpos = Vector::zero();
                    for a in 0..dim {
                        w *= self.weights[a][off[a]];
                        node[a] = self.base[a] + off[a] as isize;
                        dpos[a] = T::lit(off[a] as f64) - self.frac[a];
                    }
                    f(node, w, dpos);
                }
            }
        }
    }
}

/// Deposits particle masses with the transfer kernel, dropping weight that
/// falls outside the grid. Used by fidelity metrics, which only need the mass
/// distribution.
pub fn deposit_mass<T: Real>(positions: &[Vector<T>], masses: &[T], grid: &mut GridField<T>) {
    let inv_dx = T::lit(grid.resolution as f64);
    let dim = grid.dim;
    let r = grid.resolution as isize;
    for (x, m) in positions.iter().zip(masses) {
        let st = Stencil::new(x, inv_dx, dim);
        st.for_each(dim, |node, w, _| {
            if (0..dim).all(|a| node[a] >= 0 && node[a] < r) {
                let idx = grid.flat_index([node[0] as usize, node[1] as usize, node[2].max(0) as usize]);
                grid.mass[idx] += w * *m;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for &x in &[0.2, 0.2371, 0.5, 0.61234] {
            let st = Stencil::new(&Vector::from_f64(&[x, 0.4, 0.33]), 128.0, 3);
            let mut total = 0.0;
            st.for_each(3, |_, w, _| total += w);
            assert!((total - 1.0_f64).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_first_moment_vanishes() {
        let st = Stencil::new(&Vector::from_f64(&[0.3141, 0.2718]), 64.0, 2);
        let mut moment = Vector::<f64>::zero();
        st.for_each(2, |_, w, d| moment += d * w);
        assert!(moment.norm() < 1e-14);
    }

    #[test]
    fn node_index_round_trip() {
        let g = GridField::<f64>::new(3, 8);
        for flat in [0, 7, 63, 100, 511] {
            assert_eq!(g.flat_index(g.node_coords(flat)), flat);
        }
    }
}
