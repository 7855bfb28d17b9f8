//! Feasibility solver for the data-based Lyapunov LMI
//!
//! ```text
//! [[X Phi,      Y Phi],
//!  [(Y Phi)^T,  X Phi]]  > 0,    X Phi = (X Phi)^T,
//! ```
//!
//! where `X` (n1 x T) and `Y` (n1 x T) are the shifted/unshifted slow data.
//!
//! The LMI only sees `Phi` through `[X; Y] Phi`, whose columns range over
//! `range([X; Y])`. Writing `[X; Y] Phi = R Z` with an orthonormal basis `R`
//! shrinks the unknown from `T x n1` to `rank x n1`; the symmetry of `X Phi`
//! becomes a linear constraint on `Z` and is eliminated through a nullspace
//! basis. What remains is a small homogeneous LMI `F(z) = sum z_j F_j > 0`,
//! solved as the phase-I problem
//!
//! ```text
//! maximize t  subject to  F(z) - t I > 0,  tr F(z) = 1
//! ```
//!
//! with a log-det barrier path-following method. The central-path duality
//! gap `2 n1 / tau` bounds the optimum from above, which is what lets the
//! solver *disprove* feasibility instead of merely failing to find a point.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LmiFailure, Result};
use crate::kernels::{
    nullspace_basis, pseudo_inverse, range_basis, symmetric_eigenvalues, vstack, Matrix,
    RankTolerance, Vector,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiOptions {
    /// Required minimum eigenvalue of the block matrix after scaling it to unit
    /// largest eigenvalue.
    pub eps_pd: f64,
    /// Largest acceptable `||X Phi - (X Phi)^T|| / ||X Phi||`.
    pub sym_tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Barrier parameter growth per outer step.
    pub mu: f64,
    /// Stop once the duality gap falls below this (on the unit-trace scale).
    pub gap_tol: f64,
}

impl Default for LmiOptions {
    fn default() -> Self {
        Self {
            eps_pd: 1e-6,
            sym_tol: 1e-8,
            max_outer: 60,
            max_newton: 200,
            mu: 10.0,
            gap_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    /// `T x n1`, scaled so the block matrix has largest eigenvalue 1.
    pub phi: Matrix,
    /// Minimum eigenvalue of the (symmetrized) block matrix built from `phi`.
    pub min_eig: f64,
    /// `||X Phi - (X Phi)^T||_F / ||X Phi||_F`.
    pub sym_residual: f64,
    /// Total Newton steps taken.
    pub iterations: usize,
}

/// Block matrix `[[S, G], [G^T, S]]` for the given `S`, `G`.
pub fn lyapunov_block(s: &Matrix, g: &Matrix) -> Matrix {
    let n = s.nrows();
    let mut f = Matrix::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(s);
    f.view_mut((n, n), (n, n)).copy_from(s);
    f.view_mut((0, n), (n, n)).copy_from(g);
    f.view_mut((n, 0), (n, n)).copy_from(&g.transpose());
    f
}

fn sym_eigenvalues(m: &Matrix) -> Result<Vector> {
    Ok(Vector::from_vec(symmetric_eigenvalues(m)?))
}

/// Independent checks on a candidate `Phi`: `(min eigenvalue, max eigenvalue,
/// symmetry residual)` of the block matrix built verbatim from `X Phi`, `Y Phi`.
pub fn certificate(x: &Matrix, y: &Matrix, phi: &Matrix) -> Result<(f64, f64, f64)> {
    let s = x * phi;
    let g = y * phi;
    let norm = s.norm();
    let sym_residual = if norm > 0.0 {
        (&s - s.transpose()).norm() / norm
    } else {
        f64::INFINITY
    };
    let eig = sym_eigenvalues(&lyapunov_block(&s, &g))?;
    Ok((eig.min(), eig.max(), sym_residual))
}

/// Reduced problem: `F(z) = sum_j z_j F_j` with `Phi(z) = sum_j z_j Phi_j`.
struct Reduced {
    f: Vec<Matrix>,
    phi: Vec<Matrix>,
}

fn reduce(x: &Matrix, y: &Matrix) -> Result<Reduced> {
    let n1 = x.nrows();
    let xy = vstack(&[x, y]);
    let r = range_basis(&xy, RankTolerance::Auto)?;
    let rank = r.ncols();
    if rank == 0 {
        return Ok(Reduced {
            f: Vec::new(),
            phi: Vec::new(),
        });
    }
    let r_top = r.rows(0, n1).into_owned();
    let r_bot = r.rows(n1, n1).into_owned();

    // vec(Z) is column-major: entry (a, c) of Z sits at c * rank + a.
    // (R_top Z)_{ij} = sum_a R_top[i, a] Z[a, j].
    let pairs: Vec<(usize, usize)> = (0..n1)
        .flat_map(|i| ((i + 1)..n1).map(move |j| (i, j)))
        .collect();
    let mut cons = Matrix::zeros(pairs.len().max(1), rank * n1);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        for a in 0..rank {
            cons[(row, j * rank + a)] += r_top[(i, a)];
            cons[(row, i * rank + a)] -= r_top[(j, a)];
        }
    }
    let basis = nullspace_basis(&cons, RankTolerance::Auto)?;
    let lift = pseudo_inverse(&xy, RankTolerance::Auto)? * &r;

    let mut f = Vec::with_capacity(basis.ncols());
    let mut phi = Vec::with_capacity(basis.ncols());
    for col in basis.column_iter() {
        let z = Matrix::from_column_slice(rank, n1, col.as_slice());
        let s = &r_top * &z;
        let s = (&s + s.transpose()) * 0.5;
        let g = &r_bot * &z;
        f.push(lyapunov_block(&s, &g));
        phi.push(&lift * &z);
    }
    Ok(Reduced { f, phi })
}

fn combine(mats: &[Matrix], z: &Vector) -> Matrix {
    let mut out = Matrix::zeros(mats[0].nrows(), mats[0].ncols());
    for (m, &c) in mats.iter().zip(z.iter()) {
        out += m * c;
    }
    out
}

/// Path-following state over `(w, t)` with `z = z0 + N w`.
struct Barrier<'a> {
    f: &'a [Matrix],
    z0: Vector,
    null: Matrix,
    /// `H_k = sum_j N_jk F_j`, the derivative of `F` along `w_k`.
    h: Vec<Matrix>,
}

impl<'a> Barrier<'a> {
    fn new(f: &'a [Matrix], null: Matrix, z0: Vector) -> Self {
        let h = null
            .column_iter()
            .map(|c| combine(f, &c.into_owned()))
            .collect();
        Self { f, z0, null, h }
    }

    fn z(&self, w: &Vector) -> Vector {
        &self.z0 + &self.null * w
    }

    fn slack(&self, w: &Vector, t: f64) -> Matrix {
        let mut s = combine(self.f, &self.z(w));
        for i in 0..s.nrows() {
            s[(i, i)] -= t;
        }
        s
    }

    /// `-tau t - logdet(S)`, or `None` outside the domain.
    fn value(&self, w: &Vector, t: f64, tau: f64) -> Option<(f64, Cholesky<f64, nalgebra::Dyn>)> {
        let s = self.slack(w, t);
        let chol = Cholesky::new(s)?;
        let logdet: f64 = chol
            .l_dirty()
            .diagonal()
            .iter()
            .take(self.dim())
            .map(|d| 2.0 * d.ln())
            .sum();
        Some((-tau * t - logdet, chol))
    }

    fn dim(&self) -> usize {
        self.f[0].nrows()
    }

    /// Newton step for the stacked variable `(w, t)`; returns `(step, decrement^2)`.
    fn newton(&self, chol: &Cholesky<f64, nalgebra::Dyn>, tau: f64) -> Option<(Vector, f64)> {
        let k = self.h.len();
        let d = self.dim();
        // Derivative directions: H_0..H_{k-1} for w, -I for t.
        let mut dirs: Vec<Matrix> = self.h.iter().map(|h| chol.solve(h)).collect();
        dirs.push(chol.solve(&(-Matrix::identity(d, d))));
        let mut grad = Vector::zeros(k + 1);
        let mut hess = Matrix::zeros(k + 1, k + 1);
        for a in 0..=k {
            grad[a] = -dirs[a].trace();
            for b in 0..=a {
                // tr(S^-1 H_a S^-1 H_b) = sum of elementwise products of
                // (S^-1 H_a) and (S^-1 H_b)^T.
                let v = dirs[a].component_mul(&dirs[b].transpose()).sum();
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        grad[k] -= tau;
        let step = Cholesky::new(hess.clone())
            .map(|c| c.solve(&(-&grad)))
            .or_else(|| hess.clone().lu().solve(&(-&grad)))?;
        let dec2 = -grad.dot(&step);
        Some((step, dec2))
    }
}

/// Lifting through `pinv([X; Y])` is exact only up to the conditioning of the
/// data; a minimum-norm correction `Phi += X^+ (-skew(X Phi))` restores the
/// symmetry of `X Phi` when `X` has full row rank.
fn symmetrize(x: &Matrix, mut phi: Matrix) -> Result<Matrix> {
    let x_pinv = pseudo_inverse(x, RankTolerance::Auto)?;
    for _ in 0..2 {
        let s = x * &phi;
        let skew = (&s - s.transpose()) * 0.5;
        phi -= &x_pinv * skew;
    }
    Ok(phi)
}

/// Finds `Phi` with `X Phi` symmetric and the block matrix positive definite.
pub fn solve_lyapunov_lmi(x: &Matrix, y: &Matrix, opts: &LmiOptions) -> Result<LmiSolution> {
    let n1 = x.nrows();
    if y.shape() != x.shape() || n1 == 0 {
        return Err(Error::DimensionMismatch(format!(
            "LMI data must be equal-shaped with n1 > 0, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let disproved = |best: f64| Error::LmiInfeasible {
        reason: LmiFailure::Disproved,
        best_min_eig: best,
    };
    let reduced = reduce(x, y)?;
    if reduced.f.is_empty() {
        return Err(disproved(0.0));
    }
    let p = reduced.f.len();
    let c = Vector::from_iterator(p, reduced.f.iter().map(|f| f.trace()));
    let c_norm2 = c.norm_squared();
    if c_norm2.sqrt() <= 1e-12 {
        // Every admissible block matrix is traceless, hence never definite.
        return Err(disproved(0.0));
    }
    let z0 = &c / c_norm2;
    let null = nullspace_basis(
        &Matrix::from_row_slice(1, p, c.as_slice()),
        RankTolerance::Auto,
    )?;
    let barrier = Barrier::new(&reduced.f, null, z0);
    let m_dim = (2 * n1) as f64;

    let mut w = Vector::zeros(barrier.null.ncols());
    let mut t = sym_eigenvalues(&barrier.slack(&w, 0.0))?.min() - 1.0;
    let mut tau = m_dim;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_outer {
        for _ in 0..opts.max_newton {
            let (val, chol) = barrier.value(&w, t, tau).ok_or_else(|| {
                Error::DecompositionFailure("LMI iterate left the barrier domain".into())
            })?;
            let Some((step, dec2)) = barrier.newton(&chol, tau) else {
                break;
            };
            if dec2 / 2.0 < 1e-10 {
                break;
            }
            let dw = step.rows(0, w.len()).into_owned();
            let dt = step[w.len()];
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-12 {
                let w_new = &w + &dw * alpha;
                let t_new = t + dt * alpha;
                if let Some((v_new, _)) = barrier.value(&w_new, t_new, tau) {
                    if v_new <= val - 0.25 * alpha * dec2 {
                        w = w_new;
                        t = t_new;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            iterations += 1;
            if !accepted {
                break;
            }
        }
        let gap = m_dim / tau;
        if t + gap <= 0.0 {
            return Err(disproved(t));
        }
        if gap <= opts.gap_tol {
            converged = true;
            break;
        }
        tau *= opts.mu;
    }

    let phi_raw = combine(&reduced.phi, &barrier.z(&w));
    let (_, max_eig, _) = certificate(x, y, &phi_raw)?;
    if !(max_eig > 0.0) || !max_eig.is_finite() {
        return Err(Error::LmiInfeasible {
            reason: LmiFailure::NotConverged,
            best_min_eig: t,
        });
    }
    let phi = symmetrize(x, phi_raw / max_eig)?;
    let (min_eig, _, sym_residual) = certificate(x, y, &phi)?;
    if t <= 0.0 || min_eig <= 0.0 {
        let reason = if converged {
            LmiFailure::MarginTooSmall
        } else {
            LmiFailure::NotConverged
        };
        return Err(Error::LmiInfeasible {
            reason,
            best_min_eig: min_eig,
        });
    }
    if min_eig < opts.eps_pd || sym_residual > opts.sym_tol {
        return Err(Error::LmiInfeasible {
            reason: LmiFailure::MarginTooSmall,
            best_min_eig: min_eig,
        });
    }
    Ok(LmiSolution {
        phi,
        min_eig,
        sym_residual,
        iterations,
    })
}
