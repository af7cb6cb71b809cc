use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::{Error, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues in `(-PSD_CLAMP_TOL, 0)` are round-off and clamp to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Eigenvalues of a symmetric matrix, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Treats the spectrum as belonging to a PSD matrix: small negative
    /// values are zeroed, anything below `-PSD_CLAMP_TOL` is an error.
    pub fn clamp_psd(mut self) -> Result<Self> {
        for v in &mut self.eigenvalues {
            if *v < 0.0 {
                if *v <= -PSD_CLAMP_TOL {
                    return Err(Error::ContractViolation(format!(
                        "matrix is not PSD: eigenvalue {v:e}"
                    )));
                }
                *v = 0.0;
            }
        }
        Ok(self)
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

fn diagonal_norm(a: &DenseMatrix) -> f64 {
    (0..a.rows()).map(|i| a.get(i, i).powi(2)).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &DenseMatrix) -> Result<Spectrum> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Dimension(format!(
            "eigenvalues of non-square {}x{} matrix",
            n,
            a.cols()
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::ContractViolation(format!(
            "matrix is not symmetric (relative asymmetry {asym:e})"
        )));
    }

    let mut m = a.clone();
    // symmetrize so rotations act on an exactly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }

    let mut converged = false;
    for _ in 0..=JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off == 0.0 || off < JACOBI_REL_TOL * diagonal_norm(&m) {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut m, p, q);
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual: off_diagonal_norm(&m),
        });
    }

    let mut eigenvalues: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eigenvalues.sort_by(|x, y| y.total_cmp(x));
    Ok(Spectrum { eigenvalues })
}

/// Zeroes `m[p][q]` with a single symmetric Givens rotation.
fn rotate(m: &mut DenseMatrix, p: usize, q: usize) {
    let apq = m.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = m.get(p, p);
    let aqq = m.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let n = m.rows();
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = m.get(r, p);
        let arq = m.get(r, q);
        let new_rp = c * arp - s * arq;
        let new_rq = s * arp + c * arq;
        m.set(r, p, new_rp);
        m.set(p, r, new_rp);
        m.set(r, q, new_rq);
        m.set(q, r, new_rq);
    }
    m.set(p, p, app - t * apq);
    m.set(q, q, aqq + t * apq);
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);
}
