//! Symmetric tridiagonal matrices and their LDLᵀ factorization.

use crate::error::{Error, Result};

/// Symmetric tridiagonal matrix stored by its main and first off-diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            off: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(Error::invalid(format!(
                "tridiagonal shape mismatch: {} diagonal and {} off-diagonal entries",
                diag.len(),
                off.len()
            )));
        }
        Ok(Self { diag, off })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    /// Adds the 2x2 block `[[a, b], [b, c]]` at rows/cols `(i, i+1)`.
    pub fn add_block(&mut self, i: usize, a: f64, b: f64, c: f64) {
        self.diag[i] += a;
        self.off[i] += b;
        self.diag[i + 1] += c;
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.diag[i] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y: Vec<f64> = self.diag.iter().zip(x).map(|(d, xi)| d * xi).collect();
        for i in 0..n - 1 {
            y[i] += self.off[i] * x[i + 1];
            y[i + 1] += self.off[i] * x[i];
        }
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// LDLᵀ factorization without pivoting; fails unless every pivot is
    /// strictly positive, i.e. unless the matrix is positive definite.
    pub fn factor(&self) -> Result<LdlFactor> {
        let n = self.dim();
        let mut d = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n.saturating_sub(1));
        let scale = self.diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        d.push(self.diag[0]);
        for i in 0..n {
            let pivot = d[i];
            if !(pivot > f64::EPSILON * scale) || !pivot.is_finite() {
                return Err(Error::numerical(format!(
                    "matrix is not positive definite: pivot {i} of {n} is {pivot:e} (diagonal scale {scale:e})"
                )));
            }
            if i + 1 < n {
                let li = self.off[i] / pivot;
                l.push(li);
                d.push(self.diag[i + 1] - li * self.off[i]);
            }
        }
        Ok(LdlFactor { d, l })
    }
}

#[derive(Clone, Debug)]
pub struct LdlFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl LdlFactor {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn pivots(&self) -> &[f64] {
        &self.d
    }

    /// Solves `A x = rhs` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(rhs.len(), n);
        for i in 1..n {
            rhs[i] -= self.l[i - 1] * rhs[i - 1];
        }
        for (r, d) in rhs.iter_mut().zip(&self.d) {
            *r /= d;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.l[i] * rhs[i + 1];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
