//! Small dense symmetric factorizations used in the sampler hot loop.
//!
//! Matrices are row-major `k × k` slices. The dimensions involved are tiny
//! (leaf-effect counts), so a hand-rolled diagonally pivoted Cholesky beats
//! allocating through a general linear-algebra crate.

use crate::error::{HdlmError, Result};

/// Relative pivot tolerance below which a Gram matrix is treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// `P A Pᵀ = L Lᵀ` with symmetric diagonal pivoting.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    k: usize,
    /// Lower factor in pivoted order, row-major.
    l: Vec<f64>,
    /// `perm[i]` is the original index placed at pivoted position `i`.
    perm: Vec<usize>,
}

impl PivotedCholesky {
    pub fn factor(a: &[f64], k: usize) -> Result<Self> {
        Self::factor_with_tolerance(a, k, PIVOT_TOLERANCE)
    }

    /// Tries the unpivoted factorization first and pivots only if some
    /// pivot falls below tolerance.
    pub fn factor_with_tolerance(a: &[f64], k: usize, rel_tol: f64) -> Result<Self> {
        debug_assert_eq!(a.len(), k * k);
        let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
        if k > 0 && !(max_diag > 0.0 && max_diag.is_finite()) {
            return Err(HdlmError::Singular("zero or non-finite diagonal"));
        }
        match Self::unpivoted(a, k, rel_tol * max_diag) {
            Some(f) => Ok(f),
            None => Self::pivoted(a, k, rel_tol),
        }
    }

    /// Row-oriented Cholesky; `None` once a pivot drops to `floor`.
    fn unpivoted(a: &[f64], k: usize, floor: f64) -> Option<Self> {
        let mut l = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let (ri, rj) = (&l[i * k..i * k + j], &l[j * k..j * k + j]);
                let dot: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
                let v = a[i * k + j] - dot;
                if i == j {
                    if !(v > floor) {
                        return None;
                    }
                    l[i * k + i] = v.sqrt();
                } else {
                    l[i * k + j] = v / l[j * k + j];
                }
            }
        }
        Some(Self {
            k,
            l,
            perm: (0..k).collect(),
        })
    }

    fn pivoted(a: &[f64], k: usize, rel_tol: f64) -> Result<Self> {
        let mut w = a.to_vec();
        let mut perm: Vec<usize> = (0..k).collect();
        let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
        if k > 0 && !(max_diag > 0.0 && max_diag.is_finite()) {
            return Err(HdlmError::Singular("zero or non-finite diagonal"));
        }
        let floor = rel_tol * max_diag;
        for j in 0..k {
            // choose the largest remaining diagonal
            let mut best = j;
            for i in j + 1..k {
                if w[i * k + i] > w[best * k + best] {
                    best = i;
                }
            }
            if best != j {
                swap_sym(&mut w, k, j, best);
                perm.swap(j, best);
            }
            let d = w[j * k + j];
            if !(d > floor) {
                return Err(HdlmError::Singular("pivot below tolerance"));
            }
            let ljj = d.sqrt();
            w[j * k + j] = ljj;
            for i in j + 1..k {
                w[i * k + j] /= ljj;
            }
            for i in j + 1..k {
                let lij = w[i * k + j];
                for m in j + 1..=i {
                    let v = w[i * k + m] - lij * w[m * k + j];
                    w[i * k + m] = v;
                    w[m * k + i] = v;
                }
            }
        }
        // keep only the lower triangle
        for i in 0..k {
            for j in i + 1..k {
                w[i * k + j] = 0.0;
            }
        }
        Ok(Self { k, l: w, perm })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.k).map(|i| self.l[i * self.k + i].ln()).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut z: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut z);
        self.backward(&mut z);
        let mut x = vec![0.0; k];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ P b‖²`.
    pub fn inv_quad(&self, b: &[f64]) -> f64 {
        let mut z: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut z);
        z.iter().map(|v| v * v).sum()
    }

    /// Maps a standard-normal vector to a draw with covariance `A⁻¹`.
    pub fn correlate_inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut v = z.to_vec();
        self.backward(&mut v);
        let mut x = vec![0.0; self.k];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = v[i];
        }
        x
    }

    fn forward(&self, z: &mut [f64]) {
        let k = self.k;
        for i in 0..k {
            let mut s = z[i];
            for j in 0..i {
                s -= self.l[i * k + j] * z[j];
            }
            z[i] = s / self.l[i * k + i];
        }
    }

    fn backward(&self, z: &mut [f64]) {
        let k = self.k;
        for i in (0..k).rev() {
            let mut s = z[i];
            for j in i + 1..k {
                s -= self.l[j * k + i] * z[j];
            }
            z[i] = s / self.l[i * k + i];
        }
    }
}

fn swap_sym(w: &mut [f64], k: usize, a: usize, b: usize) {
    for c in 0..k {
        w.swap(a * k + c, b * k + c);
    }
    for r in 0..k {
        w.swap(r * k + a, r * k + b);
    }
}
