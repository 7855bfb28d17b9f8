//! Data-driven stabilization: split the Experiment-3 data into slow and fast
//! rows with the core-nilpotent decomposition of `D_E`, solve the Lyapunov
//! LMI on the slow rows, and lift the slow gain back to the full state.

use serde::{Deserialize, Serialize};

use crate::analysis::RankTest;
use crate::error::{Error, Result};
use crate::experiments::{DataMatrices, Experiment3Data};
use crate::kernels::{
    core_nilpotent, eigenvalues, finite_generalized_eigenvalues, hstack, invert,
    rank_with_tolerance, truncate_rank, vstack, CoreNilpotentDecomp, CoreNilpotentOptions, Matrix,
    RankTolerance, Vector, C64,
};
use crate::lmi::{certificate, solve_lyapunov_lmi, LmiOptions};
use crate::model::{
    certify_shift, is_regular, simulate, slow_fast_decompose, DescriptorSystem, REGULARITY_TRIALS,
};
use crate::rng::derived_rng;

/// Slow/fast rows of the Experiment-3 data in the coordinates `x = P [x^s; x^f]`.
#[derive(Debug, Clone)]
pub struct SlowDataset {
    pub u_minus: Matrix,
    pub xs_minus: Matrix,
    pub xs_plus: Matrix,
    pub xf_minus: Matrix,
    pub xf_plus: Matrix,
    pub p: Matrix,
    pub p_inv: Matrix,
    pub n1: usize,
    pub n2: usize,
    pub split: CoreNilpotentDecomp,
}

impl SlowDataset {
    pub fn horizon(&self) -> usize {
        self.u_minus.ncols()
    }
}

/// Splits the Experiment-3 data with `P = T^` from the core-nilpotent split of
/// `D_E`. With `rank_e = Some(r)` (noisy data), `D_E` is first truncated to
/// rank `r`.
pub fn data_decompose(
    d: &DataMatrices,
    e3: &Experiment3Data,
    rank_e: Option<usize>,
) -> Result<SlowDataset> {
    let n = d.n();
    if e3.x_minus.nrows() != n || e3.u_minus.nrows() != d.m() {
        return Err(Error::DimensionMismatch(format!(
            "Experiment 3 has n = {}, m = {}; data matrices have n = {n}, m = {}",
            e3.x_minus.nrows(),
            e3.u_minus.nrows(),
            d.m()
        )));
    }
    let d_e = match rank_e {
        Some(r) if r < n => truncate_rank(&d.d_e, r)?,
        _ => d.d_e.clone(),
    };
    let split = core_nilpotent(&d_e, CoreNilpotentOptions::default())?;
    if split.n1 == 0 {
        return Err(Error::NothingToStabilize);
    }
    let (n1, n2) = (split.n1, split.n2);
    let p = split.t_hat.clone();
    let p_inv = split.t_hat_inv.clone();
    let zm = &p_inv * &e3.x_minus;
    let zp = &p_inv * &e3.x_plus;
    Ok(SlowDataset {
        u_minus: e3.u_minus.clone(),
        xs_minus: zm.rows(0, n1).into_owned(),
        xs_plus: zp.rows(0, n1).into_owned(),
        xf_minus: zm.rows(n1, n2).into_owned(),
        xf_plus: zp.rows(n1, n2).into_owned(),
        p,
        p_inv,
        n1,
        n2,
        split,
    })
}

/// `rank [U_-; X_-^s] == n1 + m`.
pub fn check_persistency(sd: &SlowDataset) -> Result<RankTest> {
    let stacked = vstack(&[&sd.u_minus, &sd.xs_minus]);
    let expected = sd.n1 + sd.u_minus.nrows();
    Ok(RankTest::new(
        rank_with_tolerance(&stacked, RankTolerance::Auto)?,
        expected,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilizationResult {
    /// `T x n1`.
    pub phi_s: Matrix,
    pub k_s: Matrix,
    pub k: Matrix,
    pub p: Matrix,
    pub n1: usize,
    pub n2: usize,
    pub lmi_min_eig: f64,
    pub sym_residual: f64,
    /// Data-based closed loop `X_+^s Phi (X_-^s Phi)^-1`.
    pub a_cl: Matrix,
    pub closed_loop_eigs: Vec<C64>,
    pub spectral_radius: f64,
}

pub fn solve_stabilizing_lmi(
    sd: &SlowDataset,
    opts: &LmiOptions,
) -> Result<crate::lmi::LmiSolution> {
    solve_lyapunov_lmi(&sd.xs_minus, &sd.xs_plus, opts)
}

/// `K_s = U_- Phi (X_-^s Phi)^-1`, `K = [K_s 0] P^-1`, `A_cl = X_+^s Phi (X_-^s Phi)^-1`.
pub fn assemble_gain(sd: &SlowDataset, phi_s: &Matrix) -> Result<StabilizationResult> {
    let s = &sd.xs_minus * phi_s;
    let s_inv = invert(&s, 1.0e12)
        .map_err(|_| Error::DegenerateCertificate("X_-^s Phi is numerically singular".into()))?;
    let k_s = &sd.u_minus * phi_s * &s_inv;
    let m = k_s.nrows();
    let k = hstack(&[&k_s, &Matrix::zeros(m, sd.n2)]) * &sd.p_inv;
    let a_cl = &sd.xs_plus * phi_s * &s_inv;
    let closed_loop_eigs = eigenvalues(&a_cl)?;
    let spectral_radius = closed_loop_eigs
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let (lmi_min_eig, _, sym_residual) = certificate(&sd.xs_minus, &sd.xs_plus, phi_s)?;
    Ok(StabilizationResult {
        phi_s: phi_s.clone(),
        k_s,
        k,
        p: sd.p.clone(),
        n1: sd.n1,
        n2: sd.n2,
        lmi_min_eig,
        sym_residual,
        a_cl,
        closed_loop_eigs,
        spectral_radius,
    })
}

/// Whole pipeline from data: decompose, check excitation, solve, assemble.
pub fn stabilize(
    d: &DataMatrices,
    e3: &Experiment3Data,
    rank_e: Option<usize>,
    opts: &LmiOptions,
) -> Result<(SlowDataset, StabilizationResult)> {
    let sd = data_decompose(d, e3, rank_e)?;
    let pe = check_persistency(&sd)?;
    if !pe.holds {
        return Err(Error::NotPersistent {
            rank: pe.rank,
            expected: pe.expected,
        });
    }
    let sol = solve_stabilizing_lmi(&sd, opts)?;
    let result = assemble_gain(&sd, &sol.phi)?;
    Ok((sd, result))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedLoopCertificate {
    pub shift: f64,
    pub finite_eigs: Vec<C64>,
    pub max_modulus: f64,
    pub stable: bool,
    /// `||x_k||` for `k = 0..=steps` from a random consistent initial state.
    pub state_norms: Vec<f64>,
    /// Closed-loop states `x_0 .. x_steps`.
    #[serde(skip)]
    pub states: Vec<Vector>,
}

impl ClosedLoopCertificate {
    /// `||x_k|| / ||x_0||`.
    pub fn decay_at(&self, k: usize) -> f64 {
        self.state_norms[k] / self.state_norms[0]
    }
}

/// Model-side check of a gain: finite eigenvalues of `(E, A + B K)` at a
/// freshly certified shift, plus a closed-loop simulation of `steps` steps.
pub fn certify_closed_loop(
    sys: &DescriptorSystem,
    k: &Matrix,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopCertificate> {
    let cl = sys.closed_loop(k)?;
    let check = is_regular(&cl, REGULARITY_TRIALS, seed)?;
    let shift = check.witness.ok_or(Error::NotRegular {
        trials: check.trials,
    })?;
    let pencil_inv = certify_shift(&cl, shift)?;
    let finite = finite_generalized_eigenvalues(
        &(&pencil_inv * &cl.e),
        shift,
        CoreNilpotentOptions::default(),
    )?;
    let max_modulus = finite.finite.iter().map(|z| z.norm()).fold(0.0, f64::max);

    let autonomous = DescriptorSystem::new(cl.e.clone(), cl.a.clone(), Matrix::zeros(sys.n(), 1))?;
    let form = slow_fast_decompose(&autonomous, shift)?;
    let mut rng = derived_rng(seed, &[0xc1]);
    let x0_slow = Vector::from_fn(form.n1, |_, _| rand::Rng::gen_range(&mut rng, -1.0..=1.0));
    let inputs = vec![Vector::zeros(1); steps + form.index_h];
    let traj = simulate(&form, &x0_slow, &inputs, steps, None)?;
    let state_norms = traj.states.iter().map(|x| x.norm()).collect();
    Ok(ClosedLoopCertificate {
        shift,
        finite_eigs: finite.finite,
        max_modulus,
        stable: max_modulus < 1.0,
        state_norms,
        states: traj.states,
    })
}
