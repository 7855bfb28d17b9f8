//! Data-only verdicts on system type, causality and C-/Y-/R-controllability,
//! together with the model-based rank conditions they replace.
//!
//! Every verdict is a rank decision and ships with the singular spectrum it
//! was taken from, so near-threshold cases can be audited.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::DataMatrices;
use crate::kernels::{
    finite_generalized_eigenvalues, hstack, rank_with_tolerance, vstack, CoreNilpotentOptions,
    Matrix, RankDecision, RankTolerance, C64,
};
use crate::model::{certify_shift, is_regular, DescriptorSystem, REGULARITY_TRIALS};

/// Minimum ratio between consecutive singular values for the automatic gap rule.
pub const MIN_GAP_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Normal,
    Descriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeMethod {
    ExactRank,
    SvdThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Plain rank of `M` at the given tolerance.
    Off(RankTolerance),
    /// Count singular values at or below `delta`.
    Threshold(Delta),
}

impl Default for NoiseMode {
    fn default() -> Self {
        NoiseMode::Off(RankTolerance::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeVerdict {
    pub kind: SystemKind,
    pub rank_e_estimate: usize,
    pub singular_values: Vec<f64>,
    pub delta_used: f64,
    pub method: TypeMethod,
}

/// Picks the threshold at the largest ratio `sigma_i / sigma_{i+1}` (geometric
/// mean of the pair). Refuses when no ratio reaches [`MIN_GAP_RATIO`].
pub fn auto_delta(singular_values: &[f64]) -> Result<f64> {
    let refuse = || Error::AmbiguousSpectrum {
        singular_values: singular_values.to_vec(),
        min_ratio: MIN_GAP_RATIO,
    };
    let mut best: Option<(f64, usize)> = None;
    for i in 0..singular_values.len().saturating_sub(1) {
        let (hi, lo) = (singular_values[i], singular_values[i + 1]);
        if hi <= 0.0 {
            break;
        }
        let ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if best.map_or(true, |(r, _)| ratio > r) {
            best = Some((ratio, i));
        }
    }
    match best {
        Some((ratio, i)) if ratio >= MIN_GAP_RATIO => {
            let (hi, lo) = (singular_values[i], singular_values[i + 1]);
            Ok(if lo > 0.0 {
                (hi * lo).sqrt()
            } else {
                hi * 1e-3
            })
        }
        _ => Err(refuse()),
    }
}

/// Normal vs. descriptor from the Experiment-1 matrix `M`.
pub fn identify_type(m_mat: &Matrix, mode: NoiseMode) -> Result<TypeVerdict> {
    let n = m_mat.nrows();
    if !m_mat.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "M must be square, got {:?}",
            m_mat.shape()
        )));
    }
    let (rank, singular_values, delta_used, method) = match mode {
        NoiseMode::Off(tol) => {
            let r = rank_with_tolerance(m_mat, tol)?;
            (
                r.rank,
                r.singular_values,
                r.tolerance_used,
                TypeMethod::ExactRank,
            )
        }
        NoiseMode::Threshold(delta) => {
            let s = rank_with_tolerance(m_mat, RankTolerance::Auto)?.singular_values;
            let delta = match delta {
                Delta::Value(d) if d >= 0.0 => d,
                Delta::Value(d) => return Err(Error::Format(format!("delta {d} is negative"))),
                Delta::Auto => auto_delta(&s)?,
            };
            let small = s.iter().filter(|&&v| v <= delta).count();
            (n - small, s, delta, TypeMethod::SvdThreshold)
        }
    };
    Ok(TypeVerdict {
        kind: if rank == n {
            SystemKind::Normal
        } else {
            SystemKind::Descriptor
        },
        rank_e_estimate: rank,
        singular_values,
        delta_used,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub holds: bool,
    pub rank: usize,
    pub expected: usize,
    pub singular_values: Vec<f64>,
    pub tolerance_used: f64,
}

impl RankTest {
    pub(crate) fn new(decision: RankDecision, expected: usize) -> Self {
        Self {
            holds: decision.rank == expected,
            rank: decision.rank,
            expected,
            singular_values: decision.singular_values,
            tolerance_used: decision.tolerance_used,
        }
    }
}

/// `[B, A B, ..., A^{n-1} B]`.
pub fn krylov_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        let next = a * &cur;
        blocks.push(cur);
        cur = next;
    }
    hstack(&blocks.iter().collect::<Vec<_>>())
}

/// `[[E, 0], [A, E]]`, optionally with a trailing `[0; B]` column block.
fn causal_block(e: &Matrix, a: &Matrix, b: Option<&Matrix>) -> Matrix {
    let n = e.nrows();
    let zero = Matrix::zeros(n, n);
    let mut top = hstack(&[e, &zero]);
    let mut bottom = hstack(&[a, e]);
    if let Some(b) = b {
        top = hstack(&[&top, &Matrix::zeros(n, b.ncols())]);
        bottom = hstack(&[&bottom, b]);
    }
    vstack(&[&top, &bottom])
}

/// Block-bidiagonal `n^2 x (m+n) n` matrix: `-A` on the diagonal and `E` on the
/// subdiagonal of the left half, `B` on the diagonal of the right half.
pub fn bidiagonal_reachability_matrix(e: &Matrix, a: &Matrix, b: &Matrix) -> Matrix {
    let n = e.nrows();
    let m = b.ncols();
    let mut out = Matrix::zeros(n * n, (m + n) * n);
    for blk in 0..n {
        let r = blk * n;
        out.view_mut((r, blk * n), (n, n)).copy_from(&(-a));
        if blk > 0 {
            out.view_mut((r, (blk - 1) * n), (n, n)).copy_from(e);
        }
        out.view_mut((r, n * n + blk * m), (n, m)).copy_from(b);
    }
    out
}

pub fn test_c_controllability(d: &DataMatrices, tol: RankTolerance) -> Result<RankTest> {
    let k = krylov_matrix(&d.d_e, &d.d_b);
    Ok(RankTest::new(rank_with_tolerance(&k, tol)?, d.n()))
}

pub fn test_causality(d: &DataMatrices, rank_m: usize, tol: RankTolerance) -> Result<RankTest> {
    let blk = causal_block(&d.d_e, &d.d_a, None);
    Ok(RankTest::new(
        rank_with_tolerance(&blk, tol)?,
        d.n() + rank_m,
    ))
}

pub fn test_y_controllability(
    d: &DataMatrices,
    rank_m: usize,
    tol: RankTolerance,
) -> Result<RankTest> {
    let blk = causal_block(&d.d_e, &d.d_a, Some(&d.d_b));
    Ok(RankTest::new(
        rank_with_tolerance(&blk, tol)?,
        d.n() + rank_m,
    ))
}

pub fn assemble_wd(d: &DataMatrices) -> Matrix {
    bidiagonal_reachability_matrix(&d.d_e, &d.d_a, &d.d_b)
}

pub fn test_r_controllability(d: &DataMatrices, tol: RankTolerance) -> Result<RankTest> {
    let n = d.n();
    Ok(RankTest::new(
        rank_with_tolerance(&assemble_wd(d), tol)?,
        n * n,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    /// `rank(M)` from data, or `rank(E)` for the model oracle.
    pub rank_e: usize,
    pub c_controllable: RankTest,
    pub causal: RankTest,
    pub y_controllable: RankTest,
    pub r_controllable: RankTest,
    pub tolerance: RankTolerance,
}

/// The five boolean verdicts in a fixed order: normal, C, causal, Y, R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub normal: bool,
    pub c_controllable: bool,
    pub causal: bool,
    pub y_controllable: bool,
    pub r_controllable: bool,
}

impl ControllabilityReport {
    pub fn verdicts(&self, n: usize) -> Verdicts {
        Verdicts {
            normal: self.rank_e == n,
            c_controllable: self.c_controllable.holds,
            causal: self.causal.holds,
            y_controllable: self.y_controllable.holds,
            r_controllable: self.r_controllable.holds,
        }
    }
}

pub fn data_report(
    d: &DataMatrices,
    rank_m: usize,
    tol: RankTolerance,
) -> Result<ControllabilityReport> {
    Ok(ControllabilityReport {
        rank_e: rank_m,
        c_controllable: test_c_controllability(d, tol)?,
        causal: test_causality(d, rank_m, tol)?,
        y_controllable: test_y_controllability(d, rank_m, tol)?,
        r_controllable: test_r_controllability(d, tol)?,
        tolerance: tol,
    })
}

/// Rank of a complex matrix through its real embedding `[[Re, -Im], [Im, Re]]`.
fn complex_rank(re: &Matrix, im: &Matrix, tol: RankTolerance) -> Result<usize> {
    let top = hstack(&[re, &(-im)]);
    let bottom = hstack(&[im, re]);
    Ok(rank_with_tolerance(&vstack(&[&top, &bottom]), tol)?.rank / 2)
}

/// Model-based conditions evaluated on the true matrices.
///
/// C-controllability checks `rank [sE - A, B] = n` at every finite generalized
/// eigenvalue (rank can only drop there) and `rank [E, B] = n`.
pub fn oracle_report(
    sys: &DescriptorSystem,
    s0: Option<f64>,
    tol: RankTolerance,
) -> Result<ControllabilityReport> {
    let n = sys.n();
    let shift = match s0 {
        Some(s) => s,
        None => {
            let check = is_regular(sys, REGULARITY_TRIALS, 0)?;
            check.witness.ok_or(Error::NotRegular {
                trials: check.trials,
            })?
        }
    };
    let pencil_inv = certify_shift(sys, shift).map_err(|e| match e {
        Error::BadShift { .. } if s0.is_none() => Error::NotRegular {
            trials: REGULARITY_TRIALS,
        },
        other => other,
    })?;
    let rank_e = rank_with_tolerance(&sys.e, tol)?.rank;

    let finite = finite_generalized_eigenvalues(
        &(&pencil_inv * &sys.e),
        shift,
        CoreNilpotentOptions::default(),
    )?;
    let c = pbh_report(sys, &finite.finite, tol)?;

    let causal = RankTest::new(
        rank_with_tolerance(&causal_block(&sys.e, &sys.a, None), tol)?,
        n + rank_e,
    );
    let y = RankTest::new(
        rank_with_tolerance(&causal_block(&sys.e, &sys.a, Some(&sys.b)), tol)?,
        n + rank_e,
    );
    let wm = bidiagonal_reachability_matrix(&sys.e, &sys.a, &sys.b);
    let r = RankTest::new(rank_with_tolerance(&wm, tol)?, n * n);
    Ok(ControllabilityReport {
        rank_e,
        c_controllable: c,
        causal,
        y_controllable: y,
        r_controllable: r,
        tolerance: tol,
    })
}

/// Folds the PBH checks into one [`RankTest`]: the reported rank is the
/// smallest one observed and the spectrum is that of `[E, B]`.
fn pbh_report(sys: &DescriptorSystem, finite: &[C64], tol: RankTolerance) -> Result<RankTest> {
    let n = sys.n();
    let eb = rank_with_tolerance(&hstack(&[&sys.e, &sys.b]), tol)?;
    let mut worst = eb.rank;
    for s in finite {
        let re = hstack(&[&(&sys.e * s.re - &sys.a), &sys.b]);
        let im = hstack(&[&(&sys.e * s.im), &Matrix::zeros(n, sys.m())]);
        worst = worst.min(complex_rank(&re, &im, tol)?);
    }
    Ok(RankTest {
        holds: worst == n,
        rank: worst,
        expected: n,
        singular_values: eb.singular_values,
        tolerance_used: eb.tolerance_used,
    })
}
