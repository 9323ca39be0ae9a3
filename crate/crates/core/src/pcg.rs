//! Preconditioned conjugate gradients for symmetric (semi-)definite
//! stencil operators.

use crate::error::{Error, Result};
use crate::fv::LinearOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    /// Zero-fill incomplete Cholesky on the compact stencil (diagonal form).
    IncompleteCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl PcgSettings {
    pub fn new(tol: f64, max_iter: usize, preconditioner: Preconditioner) -> Result<Self> {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::invalid("tol", format!("must lie in (0, 1), got {tol}")));
        }
        if max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        Ok(Self {
            tol,
            max_iter,
            preconditioner,
        })
    }
}

impl Default for PcgSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            preconditioner: Preconditioner::IncompleteCholesky,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual ‖b − Ax‖₂ / ‖b‖₂ at exit.
    pub residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

enum Precond {
    Jacobi(Vec<f64>),
    /// Diagonal incomplete Cholesky: inverse pivots, per-axis (stride,
    /// coupling) and per-cell neighbour flags (bit 2a: low, bit 2a+1: high).
    Dic {
        inv_pivot: Vec<f64>,
        axes: Vec<(usize, f64)>,
        flags: Vec<u8>,
    },
}

impl Precond {
    /// Builds the preconditioner for the positive-definite form `sign · A`.
    fn build(op: &dyn LinearOperator, sign: f64, kind: Preconditioner) -> Self {
        let diag: Vec<f64> = op.diagonal().into_iter().map(|d| sign * d).collect();
        match (kind, op.stencil()) {
            (Preconditioner::IncompleteCholesky, Some((grid, off))) => {
                // off-diagonal entries of sign·A
                let axes: Vec<(usize, f64)> = (0..grid.ndim()).map(|a| (grid.stride(a), sign * off[a])).collect();
                let mut flags = vec![0u8; diag.len()];
                for (c, f) in flags.iter_mut().enumerate() {
                    let ijk = grid.cell_coords(c);
                    for (a, &n) in grid.extents().iter().enumerate() {
                        if ijk[a] > 0 {
                            *f |= 1 << (2 * a);
                        }
                        if ijk[a] + 1 < n {
                            *f |= 1 << (2 * a + 1);
                        }
                    }
                }
                let mut pivot = diag.clone();
                for c in 0..pivot.len() {
                    for (a, &(stride, w)) in axes.iter().enumerate() {
                        if flags[c] & (1 << (2 * a)) != 0 {
                            pivot[c] -= w * w / pivot[c - stride];
                        }
                    }
                    // breakdown guard for the singular Neumann corner
                    if !(pivot[c] > 1e-12 * diag[c].abs()) {
                        pivot[c] = diag[c];
                    }
                }
                Precond::Dic {
                    inv_pivot: pivot.iter().map(|p| 1.0 / p).collect(),
                    axes,
                    flags,
                }
            }
            _ => Precond::Jacobi(diag.iter().map(|d| 1.0 / d).collect()),
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
            Precond::Dic { inv_pivot, axes, flags } => {
                let n = r.len();
                // (D + L) y = r
                for c in 0..n {
                    let mut s = r[c];
                    for (a, &(stride, w)) in axes.iter().enumerate() {
                        if flags[c] & (1 << (2 * a)) != 0 {
                            s -= w * z[c - stride];
                        }
                    }
                    z[c] = s * inv_pivot[c];
                }
                // (D + U) z = D y
                for c in (0..n).rev() {
                    let mut s = 0.0;
                    for (a, &(stride, w)) in axes.iter().enumerate() {
                        if flags[c] & (1 << (2 * a + 1)) != 0 {
                            s += w * z[c + stride];
                        }
                    }
                    z[c] -= s * inv_pivot[c];
                }
            }
        }
    }
}

/// Solves `A x = b` for symmetric `A` that is positive or negative
/// (semi-)definite. Operators with a constant nullspace get `b` projected to
/// zero mean and return a zero-mean `x`.
///
/// Non-convergence is reported through [`PcgOutcome::converged`]; a NaN or
/// infinity anywhere in the iteration is an error.
pub fn pcg_solve(
    op: &dyn LinearOperator,
    b: &[f64],
    settings: &PcgSettings,
    guess: Option<&[f64]>,
) -> Result<PcgOutcome> {
    let n = op.len();
    if b.len() != n {
        return Err(Error::Shape(format!("rhs has {} entries, operator {n}", b.len())));
    }
    let diag = op.diagonal();
    let sign = if diag.iter().all(|&d| d < 0.0) { -1.0 } else { 1.0 };
    let singular = op.constant_nullspace();

    let mut rhs: Vec<f64> = b.iter().map(|v| sign * v).collect();
    if singular {
        remove_mean(&mut rhs);
    }
    let bnorm = dot(&rhs, &rhs).sqrt();
    if !bnorm.is_finite() {
        return Err(Error::NonFinite("PCG right-hand side".into()));
    }
    if bnorm == 0.0 {
        return Ok(PcgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }

    let precond = Precond::build(op, sign, settings.preconditioner);
    let mut x = guess.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut q = vec![0.0; n];
    op.apply(&x, &mut q);
    let mut r: Vec<f64> = rhs.iter().zip(&q).map(|(b, ax)| b - sign * ax).collect();
    let mut residual = dot(&r, &r).sqrt() / bnorm;
    if residual <= settings.tol {
        if singular {
            remove_mean(&mut x);
        }
        return Ok(PcgOutcome {
            x,
            iterations: 0,
            residual,
            converged: true,
        });
    }

    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    if singular {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iter {
        iterations += 1;
        op.apply(&p, &mut q);
        q.iter_mut().for_each(|v| *v *= sign);
        let pq = dot(&p, &q);
        let alpha = rz / pq;
        if !alpha.is_finite() {
            return Err(Error::NonFinite(format!("PCG step length at iteration {iterations}")));
        }
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        residual = dot(&r, &r).sqrt() / bnorm;
        if !residual.is_finite() {
            return Err(Error::NonFinite(format!("PCG residual at iteration {iterations}")));
        }
        if residual <= settings.tol {
            converged = true;
            break;
        }
        precond.apply(&r, &mut z);
        if singular {
            remove_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if singular {
        remove_mean(&mut x);
    }
    Ok(PcgOutcome {
        x,
        iterations,
        residual,
        converged,
    })
}
