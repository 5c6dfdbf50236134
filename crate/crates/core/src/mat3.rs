//! Exact 3×3 kernels for deformation gradients.
//!
//! Storage is row-major with rows indexing output components and columns
//! indexing input coordinates, so `m[(i, j)] = ∂Φᵢ/∂xⱼ`.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

/// 3×3 real matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat3 {
    pub m: [f64; 9],
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3 { m: [0.0; 9] };
    pub const IDENTITY: Mat3 = Mat3 {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    };

    pub const fn new(m: [f64; 9]) -> Self {
        Self { m }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        let mut m = [0.0; 9];
        for (i, row) in rows.iter().enumerate() {
            m[3 * i..3 * i + 3].copy_from_slice(row);
        }
        Self { m }
    }

    pub fn from_cols(cols: [[f64; 3]; 3]) -> Self {
        let mut m = [0.0; 9];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..3 {
                m[3 * i + j] = col[i];
            }
        }
        Self { m }
    }

    pub fn diag(d: [f64; 3]) -> Self {
        let mut out = Self::ZERO;
        out.m[0] = d[0];
        out.m[4] = d[1];
        out.m[8] = d[2];
        out
    }

    pub fn scale(s: f64) -> Self {
        Self::diag([s, s, s])
    }

    /// Rotation matrix of a unit quaternion `(w, x, y, z)`. The input is
    /// normalized first so any nonzero quaternion is accepted.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        Self::from_rows([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[3 * i + j]
    }

    /// Determinant by cofactor expansion along the first row.
    #[inline]
    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Matrix of signed 2×2 minors, so that `A · cofactor(A)ᵀ = det(A) · I`.
    #[inline]
    pub fn cofactor(&self) -> Mat3 {
        let m = &self.m;
        Mat3::new([
            m[4] * m[8] - m[5] * m[7],
            m[5] * m[6] - m[3] * m[8],
            m[3] * m[7] - m[4] * m[6],
            m[2] * m[7] - m[1] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[1] * m[5] - m[2] * m[4],
            m[2] * m[3] - m[0] * m[5],
            m[0] * m[4] - m[1] * m[3],
        ])
    }

    #[inline]
    pub fn frob_sq(&self) -> f64 {
        self.m.iter().map(|v| v * v).sum()
    }

    /// Frobenius norm `√(tr AᵀA)`.
    #[inline]
    pub fn frob(&self) -> f64 {
        self.frob_sq().sqrt()
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.m[0] + self.m[4] + self.m[8]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3::new([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    /// Frobenius inner product `tr(AᵀB)`.
    pub fn dot(&self, other: &Mat3) -> f64 {
        self.m.iter().zip(other.m.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Mat3 {
        let mut out = *self;
        out.m.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.m[3 * i + j]
    }
}

impl IndexMut<(usize, usize)> for Mat3 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.m[3 * i + j]
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, rhs: Mat3) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                out.m[3 * i + j] = (0..3).map(|k| self.m[3 * i + k] * rhs.m[3 * k + j]).sum();
            }
        }
        out
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, s: f64) -> Mat3 {
        self.scaled(s)
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(mut self, rhs: Mat3) -> Mat3 {
        self.m
            .iter_mut()
            .zip(rhs.m.iter())
            .for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(mut self, rhs: Mat3) -> Mat3 {
        self.m
            .iter_mut()
            .zip(rhs.m.iter())
            .for_each(|(a, b)| *a -= b);
        self
    }
}

impl Neg for Mat3 {
    type Output = Mat3;
    fn neg(self) -> Mat3 {
        self.scaled(-1.0)
    }
}
