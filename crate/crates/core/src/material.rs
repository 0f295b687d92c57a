use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaterialKind {
    Water,
    Sand,
    RigidBoundary,
}

impl MaterialKind {
    pub const COUNT: usize = 3;

    /// Row of the learned material embedding table.
    pub fn index(self) -> usize {
        match self {
            MaterialKind::Water => 0,
            MaterialKind::Sand => 1,
            MaterialKind::RigidBoundary => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Pressure scale of the weakly compressible equation of state.
    pub eos_stiffness: f64,
    pub eos_gamma: f64,
    /// Drucker-Prager friction angle in radians.
    pub friction_angle: f64,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub kind: MaterialKind,
    pub params: MaterialParams,
}

impl Material {
    pub fn water() -> Self {
        Self {
            kind: MaterialKind::Water,
            params: MaterialParams {
                eos_stiffness: 25.0,
                eos_gamma: 7.0,
                friction_angle: 0.0,
                youngs_modulus: 0.0,
                poisson_ratio: 0.0,
            },
        }
    }

    pub fn sand() -> Self {
        Self {
            kind: MaterialKind::Sand,
            params: MaterialParams {
                eos_stiffness: 0.0,
                eos_gamma: 0.0,
                friction_angle: 30f64.to_radians(),
                youngs_modulus: 150.0,
                poisson_ratio: 0.3,
            },
        }
    }

    pub fn rigid() -> Self {
        Self {
            kind: MaterialKind::RigidBoundary,
            params: MaterialParams {
                eos_stiffness: 0.0,
                eos_gamma: 0.0,
                friction_angle: 0.0,
                youngs_modulus: 0.0,
                poisson_ratio: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        match self.kind {
            MaterialKind::Water if !(p.eos_stiffness > 0.0) => {
                Err(Error::Config("water requires eos_stiffness > 0".into()))
            }
            MaterialKind::Sand
                if !(p.friction_angle > 0.0 && p.friction_angle < std::f64::consts::FRAC_PI_2) =>
            {
                Err(Error::Config("sand friction_angle must lie in (0, pi/2)".into()))
            }
            MaterialKind::Sand if !(p.youngs_modulus > 0.0) || !(0.0..0.5).contains(&p.poisson_ratio) => {
                Err(Error::Config("sand requires youngs_modulus > 0 and poisson_ratio in [0, 0.5)".into()))
            }
            _ => Ok(()),
        }
    }

    /// Small-strain pressure wave speed at the given rest density.
    pub fn wave_speed(&self, density: f64) -> f64 {
        match self.kind {
            MaterialKind::Water => (self.params.eos_stiffness * self.params.eos_gamma / density).sqrt(),
            MaterialKind::Sand => {
                let (lambda, mu) = self.lame();
                ((lambda + 2.0 * mu) / density).sqrt()
            }
            MaterialKind::RigidBoundary => 0.0,
        }
    }

    /// Lame parameters `(lambda, mu)`.
    pub fn lame(&self) -> (f64, f64) {
        let e = self.params.youngs_modulus;
        let nu = self.params.poisson_ratio;
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        (lambda, mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Material::water().validate().unwrap();
        Material::sand().validate().unwrap();
        Material::rigid().validate().unwrap();
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut w = Material::water();
        w.params.eos_stiffness = 0.0;
        assert!(w.validate().is_err());
        let mut s = Material::sand();
        s.params.friction_angle = std::f64::consts::FRAC_PI_2;
        assert!(s.validate().is_err());
        // friction angle is ignored for water
        let mut w = Material::water();
        w.params.friction_angle = 10.0;
        assert!(w.validate().is_ok());
    }
}
