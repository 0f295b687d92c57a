//! Constitutive models: weakly compressible water and Drucker-Prager sand.

use crate::linalg::{svd, Matrix, Vector};
use crate::material::{Material, MaterialKind};
use crate::num::Real;

/// Volume ratio limits applied to water to keep the equation of state finite.
const WATER_J_MIN: f64 = 0.1;
const WATER_J_MAX: f64 = 10.0;
const SINGULAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum MaterialModel<T> {
    Water { stiffness: T, gamma: T },
    Sand { lambda: T, mu: T, alpha: T },
    Rigid,
}

impl<T: Real> MaterialModel<T> {
    pub fn from_material(m: &Material) -> Self {
        match m.kind {
            MaterialKind::Water => Self::Water {
                stiffness: T::lit(m.params.eos_stiffness),
                gamma: T::lit(m.params.eos_gamma),
            },
            MaterialKind::Sand => {
                let (lambda, mu) = m.lame();
                let s = m.params.friction_angle.sin();
                let alpha = (2.0f64 / 3.0).sqrt() * 2.0 * s / (3.0 - s);
                Self::Sand { lambda: T::lit(lambda), mu: T::lit(mu), alpha: T::lit(alpha) }
            }
            MaterialKind::RigidBoundary => Self::Rigid,
        }
    }

    pub fn is_rigid(&self) -> bool {
        matches!(self, Self::Rigid)
    }

    /// Kirchhoff stress for deformation gradient `f`.
    pub fn kirchhoff_stress(&self, f: &Matrix<T>, dim: usize) -> Matrix<T> {
        match *self {
            Self::Water { stiffness, gamma } => {
                let j = f.determinant(dim);
                let p = water_pressure(stiffness, gamma, j);
                Matrix::identity(dim).scale(-p * j)
            }
            Self::Sand { lambda, mu, .. } => {
                let (u, sigma, _) = svd(f, dim, T::lit(SINGULAR_FLOOR));
                let eps = sigma.map(|s| if s > T::zero() { s.ln() } else { T::zero() });
                let trace: T = (0..dim).map(|a| eps[a]).sum();
                let mut diag = Vector::zero();
                for a in 0..dim {
                    diag[a] = T::lit(2.0) * mu * eps[a] + lambda * trace;
                }
                u.matmul(&Matrix::diagonal(&diag, dim)).matmul(&u.transpose())
            }
            Self::Rigid => Matrix::zero(),
        }
    }

    /// Post-advection update of the stored deformation gradient.
    pub fn project(&self, f: &Matrix<T>, dim: usize) -> Matrix<T> {
        match *self {
            Self::Water { .. } => {
                let j = f
                    .determinant(dim)
                    .max(T::lit(WATER_J_MIN))
                    .min(T::lit(WATER_J_MAX));
                Matrix::identity(dim).scale(j.powf(T::one() / T::lit(dim as f64)))
            }
            Self::Sand { lambda, mu, alpha } => drucker_prager_return(f, dim, lambda, mu, alpha),
            Self::Rigid => *f,
        }
    }
}

/// `p = k ((1/J)^gamma - 1)`.
pub fn water_pressure<T: Real>(stiffness: T, gamma: T, j: T) -> T {
    stiffness * (j.recip().powf(gamma) - T::one())
}

/// Drucker-Prager return mapping in Hencky strain space.
///
/// Expansive states project to the cone tip (stress free); states outside the
/// cone move radially in the deviatoric plane back onto its surface.
pub fn drucker_prager_return<T: Real>(f: &Matrix<T>, dim: usize, lambda: T, mu: T, alpha: T) -> Matrix<T> {
    let (u, sigma, v) = svd(f, dim, T::lit(SINGULAR_FLOOR));
    let mut eps = sigma.map(|s| s.ln());
    for a in dim..3 {
        eps[a] = T::zero();
    }
    let d = T::lit(dim as f64);
    let trace: T = (0..dim).map(|a| eps[a]).sum();
    let new_eps = if trace >= T::zero() {
        Vector::zero()
    } else {
        let mut dev = Vector::zero();
        for a in 0..dim {
            dev[a] = eps[a] - trace / d;
        }
        let dev_norm = dev.norm();
        let delta_gamma = dev_norm + (d * lambda + T::lit(2.0) * mu) / (T::lit(2.0) * mu) * trace * alpha;
        if delta_gamma <= T::zero() || dev_norm == T::zero() {
            eps
        } else {
            let mut out = Vector::zero();
            for a in 0..dim {
                out[a] = eps[a] - dev[a] * (delta_gamma / dev_norm);
            }
            out
        }
    };
    let mut diag = Vector::zero();
    for a in 0..dim {
        diag[a] = new_eps[a].exp();
    }
    u.matmul(&Matrix::diagonal(&diag, dim)).matmul(&v.transpose())
}

/// Norm of the deviatoric Hencky strain of `f`; proportional (by `2 mu`) to
/// the deviatoric Kirchhoff stress norm.
pub fn deviatoric_strain_norm<T: Real>(f: &Matrix<T>, dim: usize) -> T {
    let (_, sigma, _) = svd(f, dim, T::lit(SINGULAR_FLOOR));
    let eps: Vec<T> = (0..dim).map(|a| sigma[a].ln()).collect();
    let mean = eps.iter().copied().sum::<T>() / T::lit(dim as f64);
    eps.iter().map(|e| (*e - mean) * (*e - mean)).sum::<T>().sqrt()
}
