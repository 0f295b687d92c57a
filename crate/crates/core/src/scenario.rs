//! Scenario configuration and deterministic particle initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::material::Material;
use crate::num::Real;
use crate::particles::ParticleSet;

pub const DEFAULT_DT: f64 = 0.0025;
/// Blobs must fit inside `[BLOB_MARGIN, 1 - BLOB_MARGIN]^dim`.
pub const BLOB_MARGIN: f64 = 0.05;
/// Lattice jitter amplitude as a fraction of the spacing.
pub const JITTER_FRACTION: f64 = 0.25;
/// Lattice spacing of the desk presets, about 2.5 particles per 2D cell.
pub const DEFAULT_SPACING: f64 = 0.005;
/// Courant number used when choosing substeps automatically.
pub const CFL: f64 = 0.5;
/// Flow speed allowance added to the material wave speed in the CFL bound.
const FLOW_SPEED: f64 = 2.0;

pub fn default_grid_resolution(dim: usize) -> usize {
    if dim == 3 {
        64
    } else {
        128
    }
}

/// Static half-space obstacle. The solid side is `(x - point) . normal < 0`;
/// `normal` points into free space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    /// Sticky contact: tangential velocity is removed along with the normal part.
    #[serde(default)]
    pub friction: bool,
}

impl Obstacle {
    pub fn new(point: &[f64], normal: &[f64], friction: bool) -> Self {
        let len = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self {
            point: point.to_vec(),
            normal: normal.iter().map(|x| x / len).collect(),
            friction,
        }
    }

    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.point)
            .zip(&self.normal)
            .map(|((x, p), n)| (x - p) * n)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum BlobShape {
    Box { min: Vec<f64>, max: Vec<f64> },
    Sphere { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    #[serde(flatten)]
    pub shape: BlobShape,
    /// Index into [`ScenarioConfig::materials`].
    pub material: u8,
    /// Initial blob velocity is drawn uniformly per axis from this range.
    pub velocity_min: Vec<f64>,
    pub velocity_max: Vec<f64>,
}

impl Blob {
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            BlobShape::Box { min, max } => (min.clone(), max.clone()),
            BlobShape::Sphere { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        match &self.shape {
            BlobShape::Box { min, max } => {
                x.iter().zip(min.iter().zip(max)).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
            }
            BlobShape::Sphere { center, radius } => {
                x.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>() <= radius * radius
            }
        }
    }

    fn overlaps(&self, obstacle: &Obstacle) -> bool {
        match &self.shape {
            BlobShape::Box { min, max } => {
                let dim = min.len();
                (0..1usize << dim).any(|corner| {
                    let x: Vec<f64> = (0..dim)
                        .map(|a| if corner >> a & 1 == 1 { max[a] } else { min[a] })
                        .collect();
                    obstacle.signed_distance(&x) < 0.0
                })
            }
            BlobShape::Sphere { center, radius } => obstacle.signed_distance(center) < *radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub spacing: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    pub blobs: Vec<Blob>,
}

fn default_density() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub dim: usize,
    /// Cells per axis; the domain is the unit box.
    pub grid_resolution: usize,
    pub dt: f64,
    /// Solver substeps per `dt`; 0 picks the smallest count that satisfies the
    /// CFL bound of the stiffest material.
    #[serde(default)]
    pub substeps: usize,
    pub total_steps: usize,
    pub gravity: Vec<f64>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub materials: Vec<Material>,
    pub init: InitConfig,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Empty scenario with the default grid, time step and gravity.
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gravity = vec![0.0; dim];
        gravity[1] = -9.8;
        Self {
            name: name.to_string(),
            dim,
            grid_resolution: default_grid_resolution(dim),
            dt: DEFAULT_DT,
            substeps: 0,
            total_steps: 300,
            gravity,
            obstacles: Vec::new(),
            materials: vec![Material::water(), Material::sand(), Material::rigid()],
            init: InitConfig { spacing: DEFAULT_SPACING, density: 1.0, blobs: Vec::new() },
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["water2d-desk", "sand2d-desk", "waterramps2d-desk", "watersand2d-desk", "water3d-desk", "freefall2d"]
    }

    pub fn preset(name: &str) -> Option<Self> {
        let water_block = |material: u8| Blob {
            shape: BlobShape::Box { min: vec![0.08, 0.08], max: vec![0.205, 0.18] },
            material,
            velocity_min: vec![-0.5, -0.5],
            velocity_max: vec![0.5, 0.5],
        };
        let mut cfg = match name {
            "water2d-desk" => {
                let mut c = Self::new(name, 2);
                c.init.blobs.push(water_block(0));
                c
            }
            "sand2d-desk" => {
                let mut c = Self::new(name, 2);
                c.init.blobs.push(water_block(1));
                c
            }
            "waterramps2d-desk" => {
                let mut c = Self::new(name, 2);
                c.init.blobs.push(water_block(0));
                c.obstacles.push(Obstacle::new(&[0.8, 0.15], &[-1.0, 2.0], false));
                c
            }
            "watersand2d-desk" => {
                let mut c = Self::new(name, 2);
                c.init.blobs.push(Blob {
                    shape: BlobShape::Box { min: vec![0.08, 0.08], max: vec![0.18, 0.16] },
                    material: 0,
                    velocity_min: vec![0.0, -0.5],
                    velocity_max: vec![0.5, 0.0],
                });
                c.init.blobs.push(Blob {
                    shape: BlobShape::Box { min: vec![0.6, 0.3], max: vec![0.7, 0.38] },
                    material: 1,
                    velocity_min: vec![-0.5, -0.5],
                    velocity_max: vec![0.0, 0.0],
                });
                c
            }
            "water3d-desk" => {
                let mut c = Self::new(name, 3);
                c.init.spacing = 0.01;
                c.init.blobs.push(Blob {
                    shape: BlobShape::Box { min: vec![0.1, 0.1, 0.1], max: vec![0.18, 0.18, 0.18] },
                    material: 0,
                    velocity_min: vec![-0.3, -0.3, -0.3],
                    velocity_max: vec![0.3, 0.3, 0.3],
                });
                c
            }
            "freefall2d" => {
                let mut c = Self::new(name, 2);
                c.total_steps = 60;
                c.init.spacing = 0.02;
                c.init.blobs.push(Blob {
                    shape: BlobShape::Box { min: vec![0.4, 0.7], max: vec![0.6, 0.9] },
                    material: 0,
                    velocity_min: vec![0.0, 0.0],
                    velocity_max: vec![0.0, 0.0],
                });
                c
            }
            _ => return None,
        };
        cfg.name = name.to_string();
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dim) {
            return cfg_err(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.grid_resolution < 8 {
            return cfg_err("grid_resolution must be at least 8".into());
        }
        if !(self.dt > 0.0) {
            return cfg_err("dt must be positive".into());
        }
        if self.gravity.len() != self.dim {
            return cfg_err("gravity must have dim components".into());
        }
        if self.materials.len() > u8::MAX as usize {
            return cfg_err("too many materials".into());
        }
        for m in &self.materials {
            m.validate()?;
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            let n2: f64 = o.normal.iter().map(|x| x * x).sum();
            if o.point.len() != self.dim || o.normal.len() != self.dim || !(n2 > 0.0) {
                return cfg_err(format!("obstacle {k} needs dim-sized point and nonzero normal"));
            }
        }
        if !(self.init.spacing > 0.0) || !(self.init.density > 0.0) {
            return cfg_err("spacing and density must be positive".into());
        }
        for (k, b) in self.init.blobs.iter().enumerate() {
            if b.material as usize >= self.materials.len() {
                return cfg_err(format!("blob {k} references unknown material {}", b.material));
            }
            if b.velocity_min.len() != self.dim || b.velocity_max.len() != self.dim {
                return cfg_err(format!("blob {k} velocity ranges need dim components"));
            }
            let (lo, hi) = b.bounds();
            if lo.len() != self.dim || hi.len() != self.dim {
                return cfg_err(format!("blob {k} geometry needs dim components"));
            }
            let inside = lo.iter().chain(&hi).all(|x| (BLOB_MARGIN..=1.0 - BLOB_MARGIN).contains(x));
            if !inside {
                return cfg_err(format!("blob {k} must fit inside [{BLOB_MARGIN}, {}]^dim", 1.0 - BLOB_MARGIN));
            }
            if let Some(j) = self.obstacles.iter().position(|o| b.overlaps(o)) {
                return cfg_err(format!("blob {k} overlaps obstacle {j}"));
            }
        }
        Ok(())
    }

    /// Solver substeps per step, resolving the automatic setting.
    pub fn substep_count(&self) -> usize {
        if self.substeps > 0 {
            return self.substeps;
        }
        let c = self.materials.iter().map(|m| m.wave_speed(self.init.density)).fold(0.0, f64::max);
        (((c + FLOW_SPEED) * self.dt / (CFL * self.dx())).ceil() as usize).max(1)
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.grid_resolution as f64
    }

    pub fn gravity_vector<T: Real>(&self) -> Vector<T> {
        Vector::from_f64(&self.gravity)
    }
}

/// Lattice sites of a blob at `spacing`, offset half a spacing from its
/// lower corner.
fn lattice_sites(blob: &Blob, spacing: f64, dim: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = blob.bounds();
    let counts: Vec<usize> =
        (0..dim).map(|a| ((hi[a] - lo[a]) / spacing + 1e-9).floor().max(0.0) as usize).collect();
    let total: usize = counts.iter().product();
    let mut sites = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0; dim];
        for a in (0..dim).rev() {
            let i = rem % counts[a];
            rem /= counts[a];
            x[a] = lo[a] + (i as f64 + 0.5) * spacing;
        }
        if blob.contains(&x) {
            sites.push(x);
        }
    }
    sites
}

/// Lays particles on a jittered lattice inside every blob. A pure function of
/// the configuration (including its seed).
pub fn init_scenario<T: Real>(config: &ScenarioConfig) -> Result<ParticleSet<T>> {
    config.validate()?;
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spacing = config.init.spacing;
    let mass = T::lit(config.init.density * spacing.powi(dim as i32));
    let amp = JITTER_FRACTION * spacing;
    let mut particles = ParticleSet::new(dim);
    for blob in &config.init.blobs {
        let velocity: Vec<f64> = (0..dim)
            .map(|a| {
                let (lo, hi) = (blob.velocity_min[a], blob.velocity_max[a]);
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        let velocity = Vector::from_f64(&velocity);
        for site in lattice_sites(blob, spacing, dim) {
            let jittered: Vec<f64> = site.iter().map(|x| x + rng.random_range(-amp..=amp)).collect();
            particles.push(Vector::from_f64(&jittered), velocity, mass, blob.material);
        }
    }
    Ok(particles)
}
