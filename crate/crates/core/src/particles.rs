use crate::error::{argument, Result};
use crate::linalg::{Matrix, Vector};
use crate::num::Real;

/// State of every simulated particle. Columns are parallel vectors indexed by
/// particle.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet<T> {
    pub dim: usize,
    pub positions: Vec<Vector<T>>,
    pub velocities: Vec<Vector<T>>,
    pub masses: Vec<T>,
    pub material_ids: Vec<u8>,
    /// Deformation gradient `F` per particle.
    pub deformation: Vec<Matrix<T>>,
    /// APIC affine velocity matrix `C` per particle.
    pub affine: Vec<Matrix<T>>,
}

impl<T: Real> ParticleSet<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            positions: Vec::new(),
            velocities: Vec::new(),
            masses: Vec::new(),
            material_ids: Vec::new(),
            deformation: Vec::new(),
            affine: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector<T>, velocity: Vector<T>, mass: T, material: u8) {
        self.positions.push(position);
        self.velocities.push(velocity);
        self.masses.push(mass);
        self.material_ids.push(material);
        self.deformation.push(Matrix::identity(self.dim));
        self.affine.push(Matrix::zero());
    }

    pub fn total_mass(&self) -> T {
        self.masses.iter().copied().sum()
    }

    pub fn total_momentum(&self) -> Vector<T> {
        self.velocities
            .iter()
            .zip(&self.masses)
            .fold(Vector::zero(), |acc, (v, m)| acc + *v * *m)
    }

    pub fn kinetic_energy(&self) -> T {
        let half = T::lit(0.5);
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| half * *m * v.norm_squared())
            .sum()
    }

    /// Unweighted mean position.
    pub fn centroid(&self) -> Vector<T> {
        mean(&self.positions)
    }

    pub fn mean_velocity(&self) -> Vector<T> {
        mean(&self.velocities)
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(Vector::is_finite) && self.velocities.iter().all(Vector::is_finite)
    }

    /// Checks column lengths and positive masses.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if !(2..=3).contains(&self.dim) {
            return Err(argument(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        if self.velocities.len() != n
            || self.masses.len() != n
            || self.material_ids.len() != n
            || self.deformation.len() != n
            || self.affine.len() != n
        {
            return Err(argument("particle columns have inconsistent lengths"));
        }
        if self.masses.iter().any(|m| !(*m > T::zero())) {
            return Err(argument("particle masses must be strictly positive"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParticleSet<U> {
        let cast_m = |m: &Matrix<T>| {
            let mut out = Matrix::<U>::zero();
            for i in 0..3 {
                for j in 0..3 {
                    out.0[i][j] = U::lit(m.0[i][j].as_f64());
                }
            }
            out
        };
        ParticleSet {
            dim: self.dim,
            positions: self.positions.iter().map(|v| v.cast()).collect(),
            velocities: self.velocities.iter().map(|v| v.cast()).collect(),
            masses: self.masses.iter().map(|m| U::lit(m.as_f64())).collect(),
            material_ids: self.material_ids.clone(),
            deformation: self.deformation.iter().map(cast_m).collect(),
            affine: self.affine.iter().map(cast_m).collect(),
        }
    }
}

pub(crate) fn mean<T: Real>(values: &[Vector<T>]) -> Vector<T> {
    if values.is_empty() {
        return Vector::zero();
    }
    let sum = values.iter().fold(Vector::zero(), |acc, v| acc + *v);
    sum * (T::one() / T::lit(values.len() as f64))
}
