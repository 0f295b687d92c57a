//! MLS-MPM solver: p2g, grid update, g2p and advection for water and sand.

mod constitutive;
mod grid;

use std::time::Instant;

pub use constitutive::{deviatoric_strain_norm, drucker_prager_return, water_pressure, MaterialModel};
pub use grid::{deposit_mass, GridField, Stencil};

use crate::error::{argument, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::num::Real;
use crate::particles::ParticleSet;
use crate::scenario::{init_scenario, ScenarioConfig};
use crate::trajectory::{StepMode, Trajectory};

/// Width of the boundary band, in cells. Particles are clamped to
/// `[BOUNDARY_CELLS * dx, 1 - BOUNDARY_CELLS * dx]` and wall nodes in the band
/// reject outward velocity.
pub const BOUNDARY_CELLS: usize = 3;

/// Rest density used to turn particle mass into volume.
const REST_DENSITY: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct HalfSpace<T> {
    pub point: Vector<T>,
    pub normal: Vector<T>,
    pub friction: bool,
}

/// Static collision geometry: the box walls plus half-space obstacles.
#[derive(Clone, Debug)]
pub struct Boundary<T> {
    pub band_cells: usize,
    pub obstacles: Vec<HalfSpace<T>>,
}

impl<T: Real> Boundary<T> {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        let obstacles = config
            .obstacles
            .iter()
            .map(|o| {
                let n = Vector::<T>::from_f64(&o.normal);
                HalfSpace { point: Vector::from_f64(&o.point), normal: n * (T::one() / n.norm()), friction: o.friction }
            })
            .collect();
        Self { band_cells: BOUNDARY_CELLS, obstacles }
    }

    pub fn walls_only() -> Self {
        Self { band_cells: BOUNDARY_CELLS, obstacles: Vec::new() }
    }

    /// Applies wall and obstacle conditions to one nodal velocity.
    pub fn apply(&self, node: [usize; 3], x: &Vector<T>, v: &mut Vector<T>, dim: usize, resolution: usize) {
        let band = self.band_cells;
        for a in 0..dim {
            if node[a] < band && v[a] < T::zero() {
                v[a] = T::zero();
            }
            if node[a] + band > resolution && v[a] > T::zero() {
                v[a] = T::zero();
            }
        }
        for o in &self.obstacles {
            if (*x - o.point).dot(&o.normal) < T::zero() {
                if o.friction {
                    *v = Vector::zero();
                } else {
                    let vn = v.dot(&o.normal);
                    if vn < T::zero() {
                        *v -= o.normal * vn;
                    }
                }
            }
        }
    }
}

/// Particle-to-grid transfer of mass and APIC momentum with the MLS stress
/// contribution. `external` adds `m * dt * a` of body-force momentum per
/// particle.
pub fn p2g<T: Real>(
    particles: &ParticleSet<T>,
    grid: &mut GridField<T>,
    dt: T,
    models: &[MaterialModel<T>],
    external: Option<&[Vector<T>]>,
) -> Result<()> {
    let dim = particles.dim;
    if grid.dim != dim {
        return Err(argument("grid and particle dimensions differ"));
    }
    if let Some(ext) = external {
        if ext.len() != particles.len() {
            return Err(argument(format!(
                "external acceleration has {} rows for {} particles",
                ext.len(),
                particles.len()
            )));
        }
    }
    grid.clear();
    let inv_dx = T::lit(grid.resolution as f64);
    let dx = T::one() / inv_dx;
    let res = grid.resolution;
    let stress_scale = -dt * T::lit(4.0) * inv_dx * inv_dx / T::lit(REST_DENSITY);
    for i in 0..particles.len() {
        let x = particles.positions[i];
        let st = Stencil::new(&x, inv_dx, dim);
        if !st.in_grid(res, dim) {
            return Err(Error::Domain { index: i });
        }
        let m = particles.masses[i];
        let model = models.get(particles.material_ids[i] as usize).copied().unwrap_or(MaterialModel::Rigid);
        let (v, affine) = if model.is_rigid() {
            (Vector::zero(), Matrix::zero())
        } else {
            let tau = model.kirchhoff_stress(&particles.deformation[i], dim);
            // volume = m / rho
            let affine = tau.scale(stress_scale * m).add(&particles.affine[i].scale(m));
            let mut v = particles.velocities[i];
            if let Some(ext) = external {
                v += ext[i] * dt;
            }
            (v, affine)
        };
        st.for_each(dim, |node, w, dpos| {
            let idx = grid.flat_index([node[0] as usize, node[1] as usize, node[2] as usize]);
            grid.mass[idx] += w * m;
            grid.momentum[idx] += (v * m + affine.mul_vec(&(dpos * dx))) * w;
        });
    }
    Ok(())
}

/// Converts momentum to velocity, adds gravity and applies boundary
/// conditions. Masses are untouched; empty nodes keep zero momentum.
pub fn grid_update<T: Real>(grid: &mut GridField<T>, dt: T, gravity: &Vector<T>, boundary: &Boundary<T>) {
    let dim = grid.dim;
    let res = grid.resolution;
    let dx = grid.dx();
    for flat in 0..grid.node_count() {
        let m = grid.mass[flat];
        if m <= T::zero() {
            grid.momentum[flat] = Vector::zero();
            continue;
        }
        let mut v = grid.momentum[flat] * (T::one() / m) + *gravity * dt;
        let node = grid.node_coords(flat);
        let mut x = Vector::zero();
        for a in 0..dim {
            x[a] = T::lit(node[a] as f64) * dx;
        }
        boundary.apply(node, &x, &mut v, dim, res);
        grid.momentum[flat] = v * m;
    }
}

/// Grid-to-particle transfer, deformation update, plasticity and advection.
pub fn g2p<T: Real>(grid: &GridField<T>, particles: &mut ParticleSet<T>, dt: T, models: &[MaterialModel<T>], band_cells: usize) {
    let dim = particles.dim;
    let inv_dx = T::lit(grid.resolution as f64);
    let dx = T::one() / inv_dx;
    let lo = dx * T::lit(band_cells as f64);
    let hi = T::one() - lo;
    let four_inv_dx = T::lit(4.0) * inv_dx;
    for i in 0..particles.len() {
        let model = models.get(particles.material_ids[i] as usize).copied().unwrap_or(MaterialModel::Rigid);
        if model.is_rigid() {
            continue;
        }
        let st = Stencil::new(&particles.positions[i], inv_dx, dim);
        let mut v = Vector::zero();
        let mut c = Matrix::zero();
        st.for_each(dim, |node, w, dpos| {
            let idx = grid.flat_index([node[0] as usize, node[1] as usize, node[2] as usize]);
            let vn = grid.velocity(idx);
            v += vn * w;
            // 4 / dx^2 * w * v (x) (dpos * dx)
            c = c.add(&vn.outer(&dpos).scale(w * four_inv_dx));
        });
        let mut x = particles.positions[i] + v * dt;
        for a in 0..dim {
            // a clamped particle keeps only its tangential and inward motion
            if x[a] < lo {
                x[a] = lo;
                v[a] = v[a].max(T::zero());
            } else if x[a] > hi {
                x[a] = hi;
                v[a] = v[a].min(T::zero());
            }
        }
        particles.velocities[i] = v;
        particles.affine[i] = c;
        particles.positions[i] = x;
        let grad = Matrix::identity(dim).add(&c.scale(dt));
        particles.deformation[i] = model.project(&grad.matmul(&particles.deformation[i]), dim);
    }
}

/// Reusable MPM stepper for one scenario; owns its grid buffers.
#[derive(Clone, Debug)]
pub struct MpmSolver<T> {
    pub dim: usize,
    pub dt: T,
    pub substeps: usize,
    pub gravity: Vector<T>,
    pub boundary: Boundary<T>,
    pub models: Vec<MaterialModel<T>>,
    grid: GridField<T>,
}

impl<T: Real> MpmSolver<T> {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dim: config.dim,
            dt: T::lit(config.dt),
            substeps: config.substep_count(),
            gravity: config.gravity_vector(),
            boundary: Boundary::from_config(config),
            models: config.materials.iter().map(MaterialModel::from_material).collect(),
            grid: GridField::new(config.dim, config.grid_resolution),
        })
    }

    pub fn grid(&self) -> &GridField<T> {
        &self.grid
    }

    pub fn resolution(&self) -> usize {
        self.grid.resolution
    }

    /// Advances by `dt` using `substeps` p2g, grid update, g2p cycles. The
    /// external acceleration is held constant over the step.
    pub fn step(&mut self, particles: &mut ParticleSet<T>, external: Option<&[Vector<T>]>) -> Result<()> {
        if particles.dim != self.dim {
            return Err(argument("particle dimension does not match the solver"));
        }
        let h = self.dt / T::lit(self.substeps as f64);
        for _ in 0..self.substeps {
            self.cycle(particles, h, external)?;
        }
        Ok(())
    }

    /// A single transfer cycle of length `h`.
    pub fn cycle(&mut self, particles: &mut ParticleSet<T>, h: T, external: Option<&[Vector<T>]>) -> Result<()> {
        p2g(particles, &mut self.grid, h, &self.models, external)?;
        grid_update(&mut self.grid, h, &self.gravity, &self.boundary);
        g2p(&self.grid, particles, h, &self.models, self.boundary.band_cells);
        Ok(())
    }
}

/// Convenience wrapper for a single step with a freshly built solver.
pub fn mpm_step<T: Real>(
    particles: &mut ParticleSet<T>,
    config: &ScenarioConfig,
    external: Option<&[Vector<T>]>,
) -> Result<()> {
    MpmSolver::new(config)?.step(particles, external)
}

/// Per-step external acceleration callback: `(step, state) -> accelerations`.
pub type ControllerHook<'a, T> = &'a mut dyn FnMut(usize, &ParticleSet<T>) -> Option<Vec<Vector<T>>>;

#[derive(Clone, Copy, Debug, Default)]
pub struct SimulateOptions {
    pub record_timing: bool,
    pub record_modes: bool,
}

/// Ground-truth rollout of `config.total_steps` steps from the initial state.
pub fn simulate<T: Real>(config: &ScenarioConfig) -> Result<Trajectory<T>> {
    simulate_with(config, SimulateOptions::default(), None)
}

pub fn simulate_with<T: Real>(
    config: &ScenarioConfig,
    options: SimulateOptions,
    hook: Option<ControllerHook<'_, T>>,
) -> Result<Trajectory<T>> {
    let particles = init_scenario::<T>(config)?;
    rollout_from(config, particles, config.total_steps, options, hook)
}

/// Runs `steps` MPM steps from an explicit state.
pub fn rollout_from<T: Real>(
    config: &ScenarioConfig,
    mut particles: ParticleSet<T>,
    steps: usize,
    options: SimulateOptions,
    mut hook: Option<ControllerHook<'_, T>>,
) -> Result<Trajectory<T>> {
    let mut solver = MpmSolver::<T>::new(config)?;
    let mut traj = Trajectory::from_initial(config.clone(), config.dt, &particles);
    let mut timing = Vec::new();
    for step in 0..steps {
        let external = hook.as_mut().and_then(|h| h(step, &particles));
        let start = Instant::now();
        solver.step(&mut particles, external.as_deref())?;
        timing.push(start.elapsed().as_secs_f64());
        traj.push_particles(&particles);
    }
    if options.record_timing {
        traj.timing_log = Some(timing);
    }
    if options.record_modes {
        traj.mode_log = Some(vec![StepMode::Mpm; steps]);
    }
    Ok(traj)
}
