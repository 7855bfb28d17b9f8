//! Dense real linear-algebra primitives.
//!
//! Rank decisions, orthonormal range/nullspace bases, general eigenvalues,
//! the core-nilpotent split of a square matrix and the map from eigenvalues
//! of `(s0 E - A)^-1 E` back to finite generalized eigenvalues of `(E, A)`.
//!
//! Matrices are `nalgebra` types. SVD and eigenvalue iterations are delegated
//! to `faer`, whose SVD stays accurate on exactly rank-deficient input (the
//! common case here); everything built on top of them lives here.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type C64 = Complex<f64>;

/// Multiple of machine epsilon used by the AUTO rank tolerance:
/// `tol = max(rows, cols) * sigma_1 * f64::EPSILON * AUTO_TOL_SCALE`.
pub const AUTO_TOL_SCALE: f64 = 1.0e4;

/// Default bound on the off-diagonal residual of the core-nilpotent split,
/// relative to `max(1, ||D||_2)`.
pub const DECOMPOSITION_TOL: f64 = 1.0e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTolerance {
    #[default]
    Auto,
    Absolute(f64),
}

impl RankTolerance {
    /// Resolves the threshold for a matrix of the given shape and leading singular value.
    pub fn resolve(self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match self {
            RankTolerance::Auto => auto_tolerance(rows, cols, sigma_max),
            RankTolerance::Absolute(t) => t,
        }
    }
}

pub fn auto_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON * AUTO_TOL_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub rank: usize,
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    pub tolerance_used: f64,
}

impl RankDecision {
    fn from_spectrum(singular_values: Vec<f64>, tolerance_used: f64) -> Self {
        let rank = singular_values
            .iter()
            .filter(|&&s| s > tolerance_used)
            .count();
        Self {
            rank,
            singular_values,
            tolerance_used,
        }
    }
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix(format!(
            "{what} has non-finite entries"
        )))
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Full SVD with descending singular values. `v` is always `cols x cols`
/// (the input is zero-padded to square when it is wide) so that the trailing
/// columns span the nullspace.
struct FullSvd {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

fn full_svd(m: &Matrix) -> Result<FullSvd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(FullSvd {
            u: Matrix::identity(rows, rows.min(cols)),
            s: Vec::new(),
            v: Matrix::identity(cols, cols),
        });
    }
    let svd = to_faer(m)
        .svd()
        .map_err(|e| Error::DecompositionFailure(format!("SVD did not converge: {e:?}")))?;
    let k = rows.min(cols);
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    Ok(FullSvd {
        u: Matrix::from_fn(rows, k, |i, j| u[(i, j)]),
        s: (0..k).map(|i| s[i].max(0.0)).collect(),
        v: Matrix::from_fn(cols, cols, |i, j| v[(i, j)]),
    })
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    ensure_square(m, "matrix")?;
    ensure_finite(m, "matrix")?;
    let sym = (m + m.transpose()) * 0.5;
    to_faer(&sym)
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| {
            Error::DecompositionFailure(format!("symmetric eigensolver did not converge: {e:?}"))
        })
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    ensure_finite(m, "matrix")?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut s = to_faer(m)
        .singular_values()
        .map_err(|e| Error::DecompositionFailure(format!("SVD did not converge: {e:?}")))?;
    for v in s.iter_mut() {
        *v = v.max(0.0);
    }
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// `sigma_max / sigma_min` for a square matrix; infinite when singular.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    ensure_square(m, "matrix")?;
    let s = singular_values(m)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(1.0),
    }
}

pub fn rank_with_tolerance(m: &Matrix, tol: RankTolerance) -> Result<RankDecision> {
    let s = singular_values(m)?;
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let t = tol.resolve(m.nrows(), m.ncols(), sigma_max);
    if !(t >= 0.0) {
        return Err(Error::InvalidMatrix(format!(
            "rank tolerance {t} is negative"
        )));
    }
    Ok(RankDecision::from_spectrum(s, t))
}

/// Orthonormal basis of the right nullspace (`cols x k`, possibly `k = 0`).
pub fn nullspace_basis(m: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let svd = full_svd(m)?;
    let sigma_max = svd.s.first().copied().unwrap_or(0.0);
    let t = tol.resolve(m.nrows(), m.ncols(), sigma_max);
    let rank = svd.s.iter().filter(|&&s| s > t).count();
    let cols = m.ncols();
    Ok(svd.v.columns(rank, cols - rank).into_owned())
}

/// Orthonormal basis of the column space (`rows x rank`).
pub fn range_basis(m: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let svd = full_svd(m)?;
    let sigma_max = svd.s.first().copied().unwrap_or(0.0);
    let t = tol.resolve(m.nrows(), m.ncols(), sigma_max);
    let rank = svd.s.iter().filter(|&&s| s > t).count();
    Ok(svd.u.columns(0, rank).into_owned())
}

/// Moore-Penrose inverse with singular values at or below the tolerance
/// treated as exact zeros.
pub fn pseudo_inverse(m: &Matrix, tol: RankTolerance) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let svd = full_svd(m)?;
    let sigma_max = svd.s.first().copied().unwrap_or(0.0);
    let t = tol.resolve(m.nrows(), m.ncols(), sigma_max);
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (j, &s) in svd.s.iter().enumerate().filter(|(_, &s)| s > t) {
        out += svd.v.column(j) * svd.u.column(j).transpose() / s;
    }
    Ok(out)
}

/// Best rank-`r` approximation (keeps the `r` leading singular triplets).
pub fn truncate_rank(m: &Matrix, r: usize) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let svd = full_svd(m)?;
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for (j, &s) in svd.s.iter().enumerate().take(r) {
        out += svd.u.column(j) * svd.v.column(j).transpose() * s;
    }
    Ok(out)
}

/// Eigenvalues of a general real square matrix. Conjugate pairs are adjacent,
/// positive imaginary part first.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<C64>> {
    ensure_square(m, "matrix")?;
    ensure_finite(m, "matrix")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out: Vec<C64> = to_faer(m)
        .eigenvalues()
        .map_err(|e| {
            Error::DecompositionFailure(format!("eigenvalue iteration did not converge: {e:?}"))
        })?
        .into_iter()
        .map(|z| C64::new(z.re, z.im))
        .collect();
    let mut i = 0;
    while i < out.len() {
        if out[i].im != 0.0 && i + 1 < out.len() && out[i + 1].im != 0.0 {
            if out[i].im < 0.0 {
                out.swap(i, i + 1);
            }
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Integer matrix power.
pub fn mat_pow(m: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Inverse with an explicit conditioning guard.
pub fn invert(m: &Matrix, cond_cap: f64) -> Result<Matrix> {
    ensure_square(m, "matrix")?;
    let cond = condition_number(m)?;
    if !(cond <= cond_cap) {
        return Err(Error::DegenerateData(format!(
            "matrix is singular or ill-conditioned (cond = {cond:e}, cap {cond_cap:e})"
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateData("LU inverse failed".into()))
}

/// `lhs * rhs^-1` via an LU solve on the transpose.
pub fn solve_right(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    ensure_square(rhs, "right factor")?;
    if lhs.ncols() != rhs.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot form {}x{} * inv({}x{})",
            lhs.nrows(),
            lhs.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let lu = rhs.transpose().lu();
    lu.solve(&lhs.transpose())
        .map(|x| x.transpose())
        .ok_or_else(|| Error::DegenerateData("singular right factor".into()))
}

pub fn hstack(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

/// Largest pairwise distance after greedily matching two eigenvalue multisets
/// (nearest remaining partner first). `None` when the sizes differ.
pub fn multiset_distance(a: &[C64], b: &[C64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push(((x - y).norm(), i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for (d, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            worst = worst.max(d);
        }
    }
    Some(worst)
}

/// Similarity split `T^-1 D T = diag(E1, E2)` with `E1` invertible and `E2` nilpotent.
#[derive(Debug, Clone)]
pub struct CoreNilpotentDecomp {
    pub t_hat: Matrix,
    pub t_hat_inv: Matrix,
    pub e1_hat: Matrix,
    pub e2_hat: Matrix,
    pub n1: usize,
    pub n2: usize,
    /// Index of `D` (smallest `k` with `rank(D^k) = rank(D^{k+1})`); the
    /// nilpotency index of `E2` when `n2 > 0`.
    pub index_h: usize,
    /// Spectral norm of the discarded off-diagonal blocks.
    pub residual: f64,
    pub e1_condition: f64,
    /// `rank(D^k)` for `k = 0..=index_h + 1`.
    pub rank_profile: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct CoreNilpotentOptions {
    pub rank_tol: RankTolerance,
    /// Relative bound on the off-diagonal residual.
    pub decomposition_tol: f64,
}

impl Default for CoreNilpotentOptions {
    fn default() -> Self {
        Self {
            rank_tol: RankTolerance::Auto,
            decomposition_tol: DECOMPOSITION_TOL,
        }
    }
}

/// Flips each column so that its largest-magnitude entry is positive.
fn canonical_signs(m: &mut Matrix) {
    for mut col in m.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// Growing kernel chain `ker D ⊂ ker D^2 ⊂ ...` until it stagnates. Returns an
/// orthonormal basis of `ker D^h` and the dimensions `dim ker D^k`, `k = 0..=h+1`.
///
/// `ker D^{k+1} = ker((I - Q_k Q_k^T) D)` with `Q_k` a basis of `ker D^k`, so
/// every rank decision is on a matrix of norm at most `||D||` and uses the same
/// tolerance; powers of `D` are never formed.
fn kernel_chain(d: &Matrix, tol: RankTolerance) -> Result<(Matrix, Vec<usize>)> {
    let n = d.nrows();
    let mut basis = Matrix::zeros(n, 0);
    let mut dims = vec![0];
    loop {
        let projected = (Matrix::identity(n, n) - &basis * basis.transpose()) * d;
        let next = nullspace_basis(&projected, tol)?;
        let grew = next.ncols() > basis.ncols();
        dims.push(next.ncols());
        basis = next;
        if !grew {
            return Ok((basis, dims));
        }
        if dims.len() > n + 2 {
            return Err(Error::DecompositionFailure(
                "kernel chain of D did not stagnate".into(),
            ));
        }
    }
}

/// Core-nilpotent decomposition `R^n = range(D^h) ⊕ ker(D^h)`.
///
/// `ker D^h` comes from the kernel chain of `D`; `range D^h` is the orthogonal
/// complement of `ker (D^T)^h`, from the kernel chain of `D^T`.
pub fn core_nilpotent(d: &Matrix, opts: CoreNilpotentOptions) -> Result<CoreNilpotentDecomp> {
    ensure_square(d, "D")?;
    ensure_finite(d, "D")?;
    let n = d.nrows();
    let norm_d = spectral_norm(d)?;
    let tol = RankTolerance::Absolute(opts.rank_tol.resolve(n, n, norm_d));

    let (null_basis, dims) = kernel_chain(d, tol)?;
    let index_h = dims.len() - 2;
    let ranks: Vec<usize> = dims.iter().map(|k| n - k).collect();

    if index_h == 0 {
        return Ok(CoreNilpotentDecomp {
            t_hat: Matrix::identity(n, n),
            t_hat_inv: Matrix::identity(n, n),
            e1_hat: d.clone(),
            e2_hat: Matrix::zeros(0, 0),
            n1: n,
            n2: 0,
            index_h: 0,
            residual: 0.0,
            e1_condition: condition_number(d)?,
            rank_profile: ranks,
        });
    }

    let (left_null, left_dims) = kernel_chain(&d.transpose(), tol)?;
    if left_null.ncols() != null_basis.ncols() {
        return Err(Error::DecompositionFailure(format!(
            "ker D^h has dimension {} but ker (D^T)^h has {} (left chain {left_dims:?})",
            null_basis.ncols(),
            left_null.ncols()
        )));
    }
    let mut range = nullspace_basis(&left_null.transpose(), RankTolerance::Auto)?;
    let mut null = null_basis;
    canonical_signs(&mut range);
    canonical_signs(&mut null);
    let n1 = range.ncols();
    let n2 = null.ncols();
    if n1 + n2 != n {
        return Err(Error::DecompositionFailure(format!(
            "range ({n1}) and nullspace ({n2}) of D^{index_h} do not split R^{n}"
        )));
    }
    let t_hat = hstack(&[&range, &null]);
    let t_hat_inv = t_hat.clone().try_inverse().ok_or_else(|| {
        Error::DecompositionFailure("range and nullspace of D^h are not complementary".into())
    })?;
    let similar = &t_hat_inv * d * &t_hat;
    let e1_hat = similar.view((0, 0), (n1, n1)).into_owned();
    let e2_hat = similar.view((n1, n1), (n2, n2)).into_owned();
    let off_upper = similar.view((0, n1), (n1, n2)).into_owned();
    let off_lower = similar.view((n1, 0), (n2, n1)).into_owned();
    let residual = spectral_norm(&off_upper)?.max(spectral_norm(&off_lower)?);
    let scale = norm_d.max(1.0);
    if residual > opts.decomposition_tol * scale {
        return Err(Error::DecompositionFailure(format!(
            "off-diagonal residual {residual:e} exceeds {:e}",
            opts.decomposition_tol * scale
        )));
    }
    let e2_pow = mat_pow(&e2_hat, index_h);
    let e2_pow_norm = spectral_norm(&e2_pow)?;
    if e2_pow_norm > opts.decomposition_tol * scale.powi(index_h as i32) {
        return Err(Error::DecompositionFailure(format!(
            "nilpotent block not annihilated by power {index_h} (norm {e2_pow_norm:e})"
        )));
    }
    let e1_condition = if n1 == 0 {
        1.0
    } else {
        condition_number(&e1_hat)?
    };
    if !e1_condition.is_finite() {
        return Err(Error::DecompositionFailure("core block is singular".into()));
    }
    Ok(CoreNilpotentDecomp {
        t_hat,
        t_hat_inv,
        e1_hat,
        e2_hat,
        n1,
        n2,
        index_h,
        residual,
        e1_condition,
        rank_profile: ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteEigenvalues {
    pub finite: Vec<C64>,
    /// Number of zero eigenvalues of `D`, i.e. infinite generalized eigenvalues.
    pub infinite_count: usize,
}

/// Finite generalized eigenvalues of `(E, A)` from `D = (s0 E - A)^-1 E`.
///
/// Nonzero eigenvalues `mu` of `D` map to `s = s0 - 1/mu`. They are read off the
/// invertible core block of the core-nilpotent split, so the zero/nonzero
/// decision is the same rank decision the split makes.
pub fn finite_generalized_eigenvalues(
    d: &Matrix,
    s0: f64,
    opts: CoreNilpotentOptions,
) -> Result<FiniteEigenvalues> {
    let split = core_nilpotent(d, opts)?;
    let mus = eigenvalues(&split.e1_hat)?;
    let finite = mus
        .into_iter()
        .map(|mu| C64::new(s0, 0.0) - mu.inv())
        .collect();
    Ok(FiniteEigenvalues {
        finite,
        infinite_count: split.n2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_rank() {
        let r = rank_with_tolerance(&Matrix::identity(4, 4), RankTolerance::Auto).unwrap();
        assert_eq!(r.rank, 4);
        for s in &r.singular_values {
            assert_relative_eq!(*s, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn circuit_e_has_rank_two() {
        let e = Matrix::from_row_slice(
            4,
            4,
            &[
                1., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0.,
            ],
        );
        assert_eq!(
            rank_with_tolerance(&e, RankTolerance::Auto).unwrap().rank,
            2
        );
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(
            rank_with_tolerance(&m, RankTolerance::Auto),
            Err(Error::InvalidMatrix(_))
        ));
        assert!(matches!(
            nullspace_basis(&m, RankTolerance::Auto),
            Err(Error::InvalidMatrix(_))
        ));
        m[(0, 1)] = f64::INFINITY;
        assert!(matches!(
            range_basis(&m, RankTolerance::Auto),
            Err(Error::InvalidMatrix(_))
        ));
    }

    #[test]
    fn zero_matrix_spaces() {
        let z = Matrix::zeros(3, 3);
        let ns = nullspace_basis(&z, RankTolerance::Auto).unwrap();
        assert_eq!(ns.shape(), (3, 3));
        assert_relative_eq!(
            ns.transpose() * &ns,
            Matrix::identity(3, 3),
            epsilon = 1e-12
        );
        assert_eq!(
            range_basis(&z, RankTolerance::Auto).unwrap().shape(),
            (3, 0)
        );
    }

    #[test]
    fn diag_one_zero_spaces() {
        let m = Matrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        let ns = nullspace_basis(&m, RankTolerance::Auto).unwrap();
        let rg = range_basis(&m, RankTolerance::Auto).unwrap();
        assert_eq!(ns.shape(), (2, 1));
        assert_eq!(rg.shape(), (2, 1));
        assert_relative_eq!(ns[(1, 0)].abs(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(rg[(0, 0)].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn wide_matrix_nullspace() {
        let m = Matrix::from_row_slice(1, 3, &[1., 1., 0.]);
        let ns = nullspace_basis(&m, RankTolerance::Auto).unwrap();
        assert_eq!(ns.shape(), (3, 2));
        assert!((&m * &ns).norm() < 1e-14);
    }

    #[test]
    fn diagonal_and_rotation_eigenvalues() {
        let d = Matrix::from_row_slice(2, 2, &[0.5, 0., 0., -0.25]);
        let mut ev: Vec<f64> = eigenvalues(&d).unwrap().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        assert_relative_eq!(ev[0], -0.25, epsilon = 1e-14);
        assert_relative_eq!(ev[1], 0.5, epsilon = 1e-14);

        let r = Matrix::from_row_slice(2, 2, &[0., 1., -1., 0.]);
        let ev = eigenvalues(&r).unwrap();
        assert_relative_eq!(ev[0].im, 1.0, epsilon = 1e-14);
        assert_relative_eq!(ev[1].im, -1.0, epsilon = 1e-14);
        assert!(ev[0].re.abs() < 1e-14);
    }

    #[test]
    fn core_nilpotent_nonsingular() {
        let d = Matrix::from_row_slice(2, 2, &[2., 1., 0., 3.]);
        let c = core_nilpotent(&d, Default::default()).unwrap();
        assert_eq!((c.n1, c.n2, c.index_h), (2, 0, 0));
        assert_eq!(c.t_hat, Matrix::identity(2, 2));
    }

    #[test]
    fn core_nilpotent_diag_two_zero() {
        let d = Matrix::from_row_slice(2, 2, &[2., 0., 0., 0.]);
        let c = core_nilpotent(&d, Default::default()).unwrap();
        assert_eq!((c.n1, c.n2, c.index_h), (1, 1, 1));
        assert_relative_eq!(c.t_hat, Matrix::identity(2, 2), epsilon = 1e-14);
        assert_relative_eq!(c.e1_hat[(0, 0)], 2.0, epsilon = 1e-14);
        assert!(c.e2_hat[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn core_nilpotent_jordan_chain() {
        // index-2 nilpotent block plus a unit core
        let d = Matrix::from_row_slice(3, 3, &[1., 0., 0., 0., 0., 1., 0., 0., 0.]);
        let c = core_nilpotent(&d, Default::default()).unwrap();
        assert_eq!((c.n1, c.n2, c.index_h), (1, 2, 2));
        assert_eq!(c.rank_profile, vec![3, 2, 1, 1]);
    }

    #[test]
    fn nilpotent_only_has_no_finite_eigenvalues() {
        let d = Matrix::from_row_slice(2, 2, &[0., 1., 0., 0.]);
        let f = finite_generalized_eigenvalues(&d, 0.3, Default::default()).unwrap();
        assert!(f.finite.is_empty());
        assert_eq!(f.infinite_count, 2);
    }

    #[test]
    fn multiset_distance_matches_permutations() {
        let a = [C64::new(1., 0.), C64::new(0., 1.), C64::new(0., -1.)];
        let b = [C64::new(0., -1.), C64::new(1., 1e-9), C64::new(0., 1.)];
        assert!(multiset_distance(&a, &b).unwrap() < 1e-8);
        assert!(multiset_distance(&a, &b[..2]).is_none());
    }

    #[test]
    fn solve_right_matches_inverse() {
        let lhs = Matrix::from_row_slice(2, 2, &[1., 2., 3., 4.]);
        let rhs = Matrix::from_row_slice(2, 2, &[2., 1., 1., 3.]);
        let x = solve_right(&lhs, &rhs).unwrap();
        assert_relative_eq!(x * rhs, lhs, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_inverse_drops_null_directions() {
        let m = Matrix::from_row_slice(2, 3, &[1., 0., 0., 0., 0., 0.]);
        let p = pseudo_inverse(&m, RankTolerance::Auto).unwrap();
        assert_eq!(p, Matrix::from_row_slice(3, 2, &[1., 0., 0., 0., 0., 0.]));
        let a = Matrix::from_row_slice(2, 2, &[2., 1., 1., 3.]);
        let inv = pseudo_inverse(&a, RankTolerance::Auto).unwrap();
        assert!((inv * &a - Matrix::identity(2, 2)).amax() < 1e-14);
    }
}
