//! Small fixed-size vectors and matrices.
//!
//! Storage is always three wide; two-dimensional simulations leave the
//! trailing component at zero, and every dimension-sensitive routine takes
//! the active `dim` explicitly.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::num::Real;

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vector<T>(pub [T; MAX_DIM]);

impl<T: Real> Vector<T> {
    pub fn zero() -> Self {
        Self([T::zero(); MAX_DIM])
    }

    pub fn splat(x: T) -> Self {
        Self([x; MAX_DIM])
    }

    /// Builds a vector from a slice, zero padding the missing components.
    pub fn from_slice(values: &[T]) -> Self {
        let mut v = Self::zero();
        for (dst, src) in v.0.iter_mut().zip(values) {
            *dst = *src;
        }
        v
    }

    pub fn from_f64(values: &[f64]) -> Self {
        let mut v = Self::zero();
        for (dst, src) in v.0.iter_mut().zip(values) {
            *dst = T::lit(*src);
        }
        v
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self([f(self.0[0]), f(self.0[1]), f(self.0[2])])
    }

    pub fn outer(&self, other: &Self) -> Matrix<T> {
        let mut m = Matrix::zero();
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                m.0[i][j] = self.0[i] * other.0[j];
            }
        }
        m
    }

    pub fn cast<U: Real>(self) -> Vector<U> {
        Vector(self.0.map(|x| U::lit(x.as_f64())))
    }
}

impl<T: Real> Add for Vector<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1], self.0[2] + rhs.0[2]])
    }
}

impl<T: Real> Sub for Vector<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self([self.0[0] - rhs.0[0], self.0[1] - rhs.0[1], self.0[2] - rhs.0[2]])
    }
}

impl<T: Real> Mul<T> for Vector<T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        Self([self.0[0] * rhs, self.0[1] * rhs, self.0[2] * rhs])
    }
}

impl<T: Real> Neg for Vector<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<T: Real> AddAssign for Vector<T> {
    fn add_assign(&mut self, rhs: Self) {
        for i in 0..MAX_DIM {
            self.0[i] += rhs.0[i];
        }
    }
}

impl<T: Real> SubAssign for Vector<T> {
    fn sub_assign(&mut self, rhs: Self) {
        for i in 0..MAX_DIM {
            self.0[i] -= rhs.0[i];
        }
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

/// Row-major 3x3 matrix; for `dim = 2` only the upper-left block is used.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Matrix<T>(pub [[T; MAX_DIM]; MAX_DIM]);

impl<T: Real> Matrix<T> {
    pub fn zero() -> Self {
        Self([[T::zero(); MAX_DIM]; MAX_DIM])
    }

    /// Identity on the active block; inactive diagonal entries stay zero.
    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zero();
        for i in 0..dim {
            m.0[i][i] = T::one();
        }
        m
    }

    pub fn diagonal(values: &Vector<T>, dim: usize) -> Self {
        let mut m = Self::zero();
        for i in 0..dim {
            m.0[i][i] = values.0[i];
        }
        m
    }

    pub fn mul_vec(&self, v: &Vector<T>) -> Vector<T> {
        let mut out = Vector::zero();
        for i in 0..MAX_DIM {
            out.0[i] = self.0[i][0] * v.0[0] + self.0[i][1] * v.0[1] + self.0[i][2] * v.0[2];
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                let mut s = T::zero();
                for k in 0..MAX_DIM {
                    s += self.0[i][k] * other.0[k][j];
                }
                out.0[i][j] = s;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zero();
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                out.0[i][j] = self.0[j][i];
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|x| *x *= s);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                out.0[i][j] += other.0[i][j];
            }
        }
        out
    }

    pub fn determinant(&self, dim: usize) -> T {
        let m = &self.0;
        match dim {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.0.iter().flatten().map(|x| *x * *x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// Eigen-decomposition of a symmetric matrix restricted to the active block
/// by cyclic Jacobi rotations. Returns eigenvalues and column eigenvectors.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>, dim: usize) -> (Vector<T>, Matrix<T>) {
    let mut m = *a;
    let mut v = Matrix::identity(dim);
    let tiny = T::epsilon() * T::epsilon();
    for _sweep in 0..32 {
        let mut off = T::zero();
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += m.0[p][q] * m.0[p][q];
            }
        }
        let diag: T = (0..dim).map(|i| m.0[i][i] * m.0[i][i]).sum();
        if off <= tiny * (diag + tiny) {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = m.0[p][q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m.0[q][q] - m.0[p][p]) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let mkp = m.0[k][p];
                    let mkq = m.0[k][q];
                    m.0[k][p] = c * mkp - s * mkq;
                    m.0[k][q] = s * mkp + c * mkq;
                }
                for k in 0..dim {
                    let mpk = m.0[p][k];
                    let mqk = m.0[q][k];
                    m.0[p][k] = c * mpk - s * mqk;
                    m.0[q][k] = s * mpk + c * mqk;
                }
                for k in 0..dim {
                    let vkp = v.0[k][p];
                    let vkq = v.0[k][q];
                    v.0[k][p] = c * vkp - s * vkq;
                    v.0[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut values = Vector::zero();
    for i in 0..dim {
        values.0[i] = m.0[i][i];
    }
    (values, v)
}

/// Singular value decomposition `F = U diag(sigma) V^T` of the active block.
///
/// Built from the eigen-decomposition of `F^T F`; singular values below
/// `floor` are raised to it so `U` stays well defined.
pub fn svd<T: Real>(f: &Matrix<T>, dim: usize, floor: T) -> (Matrix<T>, Vector<T>, Matrix<T>) {
    let ftf = f.transpose().matmul(f);
    let (eig, mut v) = symmetric_eigen(&ftf, dim);
    let mut sigma = Vector::zero();
    for i in 0..dim {
        sigma.0[i] = eig.0[i].max(T::zero()).sqrt().max(floor);
    }
    // keep det(V) = +1 so a reflection in F lands in U
    if v.determinant(dim) < T::zero() {
        for k in 0..dim {
            v.0[k][dim - 1] = -v.0[k][dim - 1];
        }
    }
    let fv = f.matmul(&v);
    let mut u = Matrix::zero();
    for j in 0..dim {
        for i in 0..dim {
            u.0[i][j] = fv.0[i][j] / sigma.0[j];
        }
    }
    (u, sigma, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_reconstructs_matrix() {
        for dim in [2usize, 3] {
            let mut f = Matrix::<f64>::zero();
            let vals = [1.2, 0.3, -0.1, 0.2, 0.9, 0.05, 0.0, 0.1, 1.1];
            for i in 0..dim {
                for j in 0..dim {
                    f.0[i][j] = vals[i * 3 + j];
                }
            }
            let (u, s, v) = svd(&f, dim, 1e-12);
            let rebuilt = u.matmul(&Matrix::diagonal(&s, dim)).matmul(&v.transpose());
            for i in 0..dim {
                for j in 0..dim {
                    assert!((rebuilt.0[i][j] - f.0[i][j]).abs() < 1e-10, "dim {dim}");
                }
            }
            let utu = u.transpose().matmul(&u);
            for i in 0..dim {
                for j in 0..dim {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((utu.0[i][j] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn determinant_uses_active_block() {
        let mut m = Matrix::<f64>::identity(2);
        m.0[0][0] = 2.0;
        m.0[1][1] = 3.0;
        assert_eq!(m.determinant(2), 6.0);
        assert_eq!(Matrix::<f64>::identity(3).determinant(3), 1.0);
    }
}
