//! Ground-truth descriptor plant `E x_{k+1} = A x_k + B u_k`.
//!
//! The data-driven pipeline never reads these matrices. They drive the
//! simulator that stands in for the physical system, and every model-based
//! oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    block_diag, condition_number, core_nilpotent, ensure_finite, invert, mat_pow, spectral_norm,
    vstack, CoreNilpotentOptions, Matrix, Vector,
};
use crate::rng::derived_rng;

/// Condition-number cap for `s E - A` to count as invertible.
pub const SHIFT_CONDITION_CAP: f64 = 1.0e12;

/// Default number of random shifts tried by [`is_regular`].
pub const REGULARITY_TRIALS: usize = 16;

/// Relative bound on the slow-fast form residuals.
pub const SLOW_FAST_TOL: f64 = 1.0e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSystem {
    pub e: Matrix,
    pub a: Matrix,
    pub b: Matrix,
}

impl DescriptorSystem {
    pub fn new(e: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        let n = e.nrows();
        if !e.is_square() || a.shape() != (n, n) || b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "E {:?}, A {:?}, B {:?} are not an n x n / n x n / n x m triple",
                e.shape(),
                a.shape(),
                b.shape()
            )));
        }
        ensure_finite(&e, "E")?;
        ensure_finite(&a, "A")?;
        ensure_finite(&b, "B")?;
        Ok(Self { e, a, b })
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `s E - A`.
    pub fn pencil_at(&self, s: f64) -> Matrix {
        &self.e * s - &self.a
    }

    /// The same plant with state feedback `u = K x` folded into `A`.
    pub fn closed_loop(&self, k: &Matrix) -> Result<Self> {
        if k.shape() != (self.m(), self.n()) {
            return Err(Error::DimensionMismatch(format!(
                "gain is {:?}, expected {}x{}",
                k.shape(),
                self.m(),
                self.n()
            )));
        }
        Self::new(self.e.clone(), &self.a + &self.b * k, self.b.clone())
    }

    /// The RLC loop with `R`, `L`, `C` and state `(I, V_L, V_C, V_R)`, input `V_S`.
    pub fn circuit(r: f64, l: f64, c: f64) -> Self {
        let e = Matrix::from_row_slice(
            4,
            4,
            &[
                l, 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0.,
            ],
        );
        let a = Matrix::from_row_slice(
            4,
            4,
            &[
                0.,
                1.,
                0.,
                0.,
                1. / c,
                0.,
                0.,
                0.,
                -r,
                0.,
                0.,
                1.,
                0.,
                1.,
                1.,
                1.,
            ],
        );
        let b = Matrix::from_column_slice(4, 1, &[0., 0., 0., -1.]);
        Self { e, a, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityCheck {
    pub regular: bool,
    /// Best-conditioned shift found, if any.
    pub witness: Option<f64>,
    pub witness_condition: f64,
    pub trials: usize,
}

/// Probabilistic regularity test: samples `trials` real shifts and keeps the
/// one with the smallest `cond(s E - A)`.
pub fn is_regular(sys: &DescriptorSystem, trials: usize, seed: u64) -> Result<RegularityCheck> {
    let mut rng = derived_rng(seed, &[0x5e6a]);
    let norm_e = spectral_norm(&sys.e)?;
    let norm_a = spectral_norm(&sys.a)?;
    let radius = if norm_e > 0.0 {
        (norm_a / norm_e).min(1.0e3) + 1.0
    } else {
        1.0
    };
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..trials {
        let s = rng.gen_range(-2.0 * radius..2.0 * radius);
        let cond = condition_number(&sys.pencil_at(s))?;
        if cond < SHIFT_CONDITION_CAP && best.map_or(true, |(_, c)| cond < c) {
            best = Some((s, cond));
        }
    }
    Ok(match best {
        Some((s, cond)) => RegularityCheck {
            regular: true,
            witness: Some(s),
            witness_condition: cond,
            trials,
        },
        None => RegularityCheck {
            regular: false,
            witness: None,
            witness_condition: f64::INFINITY,
            trials,
        },
    })
}

/// Checks that `s0 E - A` is safely invertible and returns its inverse.
pub fn certify_shift(sys: &DescriptorSystem, s0: f64) -> Result<Matrix> {
    let pencil = sys.pencil_at(s0);
    let cond = condition_number(&pencil)?;
    if !(cond < SHIFT_CONDITION_CAP) {
        return Err(Error::BadShift { s0, cond });
    }
    invert(&pencil, SHIFT_CONDITION_CAP).map_err(|_| Error::BadShift { s0, cond })
}

/// Weierstrass-type form `QEP = diag(I, N_f)`, `QAP = diag(A_s, I)`, `QB = [B_s; B_f]`.
#[derive(Debug, Clone)]
pub struct SlowFastForm {
    pub q: Matrix,
    pub p: Matrix,
    pub p_inv: Matrix,
    pub a_s: Matrix,
    pub b_s: Matrix,
    pub n_f: Matrix,
    pub b_f: Matrix,
    pub n1: usize,
    pub n2: usize,
    pub index_h: usize,
    pub s0: f64,
}

impl SlowFastForm {
    pub fn n(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn m(&self) -> usize {
        self.b_s.ncols()
    }

    /// Rebuilds `(E, A, B)` from the form.
    pub fn reassemble(&self) -> Result<DescriptorSystem> {
        let q_inv = invert(&self.q, 1.0e14)?;
        let e = &q_inv * block_diag(&Matrix::identity(self.n1, self.n1), &self.n_f) * &self.p_inv;
        let a = &q_inv * block_diag(&self.a_s, &Matrix::identity(self.n2, self.n2)) * &self.p_inv;
        let b = &q_inv * vstack(&[&self.b_s, &self.b_f]);
        DescriptorSystem::new(e, a, b)
    }

    pub fn assemble_state(&self, slow: &Vector, fast: &Vector) -> Vector {
        let mut z = Vector::zeros(self.n());
        z.rows_mut(0, self.n1).copy_from(slow);
        z.rows_mut(self.n1, self.n2).copy_from(fast);
        &self.p * z
    }
}

/// Model-based slow-fast decomposition through the core-nilpotent split of
/// `(s0 E - A)^-1 E`.
pub fn slow_fast_decompose(sys: &DescriptorSystem, s0: f64) -> Result<SlowFastForm> {
    let pencil_inv = certify_shift(sys, s0)?;
    let d = &pencil_inv * &sys.e;
    let split = core_nilpotent(&d, CoreNilpotentOptions::default())?;
    let (n1, n2) = (split.n1, split.n2);

    let e1_inv = if n1 > 0 {
        invert(&split.e1_hat, 1.0e14)?
    } else {
        Matrix::zeros(0, 0)
    };
    let fast_scale = &split.e2_hat * s0 - Matrix::identity(n2, n2);
    let fast_scale_inv = if n2 > 0 {
        invert(&fast_scale, 1.0e14)?
    } else {
        Matrix::zeros(0, 0)
    };
    let q = block_diag(&e1_inv, &fast_scale_inv) * &split.t_hat_inv * &pencil_inv;
    let p = split.t_hat.clone();
    let p_inv = split.t_hat_inv.clone();

    let qep = &q * &sys.e * &p;
    let qap = &q * &sys.a * &p;
    let qb = &q * &sys.b;
    let a_s = qap.view((0, 0), (n1, n1)).into_owned();
    let n_f = qep.view((n1, n1), (n2, n2)).into_owned();
    let b_s = qb.rows(0, n1).into_owned();
    let b_f = qb.rows(n1, n2).into_owned();

    let expected_e = block_diag(&Matrix::identity(n1, n1), &n_f);
    let expected_a = block_diag(&a_s, &Matrix::identity(n2, n2));
    let scale = 1.0
        + spectral_norm(&q)?
            * spectral_norm(&p)?
            * (spectral_norm(&sys.e)? + spectral_norm(&sys.a)?);
    let residual = spectral_norm(&(&qep - &expected_e))?.max(spectral_norm(&(&qap - &expected_a))?);
    if residual > SLOW_FAST_TOL * scale {
        return Err(Error::DecompositionFailure(format!(
            "slow-fast residual {residual:e} above {:e}",
            SLOW_FAST_TOL * scale
        )));
    }
    let nil = spectral_norm(&mat_pow(&n_f, split.index_h))?;
    if n2 > 0 && nil > SLOW_FAST_TOL * scale {
        return Err(Error::DecompositionFailure(format!(
            "N_f^h has norm {nil:e}"
        )));
    }

    Ok(SlowFastForm {
        q,
        p,
        p_inv,
        a_s,
        b_s,
        n_f,
        b_f,
        n1,
        n2,
        index_h: if n2 > 0 { split.index_h } else { 0 },
        s0,
    })
}

/// Fast state `x^f_k = -sum_{i<h} N_f^i (B_f u_{k+i} + d^f_{k+i})`.
fn fast_state(
    sf: &SlowFastForm,
    inputs: &[Vector],
    fast_noise: Option<&[Vector]>,
    k: usize,
) -> Vector {
    let mut acc = Vector::zeros(sf.n2);
    let mut power = Matrix::identity(sf.n2, sf.n2);
    for i in 0..sf.index_h {
        let mut drive = &sf.b_f * &inputs[k + i];
        if let Some(noise) = fast_noise {
            drive += &noise[k + i];
        }
        acc -= &power * drive;
        power = &power * &sf.n_f;
    }
    acc
}

/// Consistent `x_0 = P [x0_slow; x^f_0]` for the given input sequence.
pub fn consistent_initial_state(
    sf: &SlowFastForm,
    inputs: &[Vector],
    x0_slow: &Vector,
) -> Result<Vector> {
    if inputs.len() < sf.index_h {
        return Err(Error::InsufficientHorizon {
            needed: sf.index_h,
            got: inputs.len(),
        });
    }
    check_slow(sf, x0_slow)?;
    Ok(sf.assemble_state(x0_slow, &fast_state(sf, inputs, None, 0)))
}

fn check_slow(sf: &SlowFastForm, x0_slow: &Vector) -> Result<()> {
    if x0_slow.len() != sf.n1 {
        return Err(Error::DimensionMismatch(format!(
            "slow initial state has length {}, expected {}",
            x0_slow.len(),
            sf.n1
        )));
    }
    Ok(())
}

/// Bounded i.i.d. system noise `d_k ~ U[-scale, scale]^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `u_0 .. u_{L-1}`.
    pub inputs: Vec<Vector>,
    /// `x_0 .. x_L`.
    pub states: Vec<Vector>,
    pub noise_seed: Option<u64>,
    pub noise_scale: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    /// Largest `||E x_{k+1} - A x_k - B u_k||` over the window.
    pub fn max_residual(&self, sys: &DescriptorSystem) -> f64 {
        (0..self.len())
            .map(|k| {
                (&sys.e * &self.states[k + 1] - &sys.a * &self.states[k] - &sys.b * &self.inputs[k])
                    .norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Simulates `horizon` steps from the consistent state with slow part `x0_slow`.
///
/// `inputs` must hold at least `horizon + index_h` entries: the fast states up
/// to `x_L` depend on inputs up to `u_{L+h-1}`. Only the first `horizon`
/// inputs are recorded. With noise, `E x_{k+1} = A x_k + B u_k + d_k` holds
/// exactly, with `d_k` injected through `Q` into the slow and fast channels.
pub fn simulate(
    sf: &SlowFastForm,
    x0_slow: &Vector,
    inputs: &[Vector],
    horizon: usize,
    noise: Option<NoiseSpec>,
) -> Result<Trajectory> {
    let needed = horizon + sf.index_h;
    if inputs.len() < needed {
        return Err(Error::InsufficientHorizon {
            needed,
            got: inputs.len(),
        });
    }
    check_slow(sf, x0_slow)?;
    if let Some(u) = inputs.iter().find(|u| u.len() != sf.m()) {
        return Err(Error::DimensionMismatch(format!(
            "input of length {} for a plant with m = {}",
            u.len(),
            sf.m()
        )));
    }

    let n = sf.n();
    let (slow_noise, fast_noise) = match noise {
        Some(spec) if spec.scale > 0.0 => {
            let mut rng = derived_rng(spec.seed, &[0xd15e]);
            let mut slow = Vec::with_capacity(needed);
            let mut fast = Vec::with_capacity(needed);
            for _ in 0..needed {
                let d = Vector::from_fn(n, |_, _| rng.gen_range(-spec.scale..=spec.scale));
                let qd = &sf.q * d;
                slow.push(qd.rows(0, sf.n1).into_owned());
                fast.push(qd.rows(sf.n1, sf.n2).into_owned());
            }
            (Some(slow), Some(fast))
        }
        _ => (None, None),
    };

    let mut slow = x0_slow.clone();
    let mut states = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let fast = fast_state(sf, inputs, fast_noise.as_deref(), k);
        states.push(sf.assemble_state(&slow, &fast));
        if k < horizon {
            let mut next = &sf.a_s * &slow + &sf.b_s * &inputs[k];
            if let Some(noise) = &slow_noise {
                next += &noise[k];
            }
            slow = next;
        }
    }
    Ok(Trajectory {
        inputs: inputs[..horizon].to_vec(),
        states,
        noise_seed: noise.filter(|s| s.scale > 0.0).map(|s| s.seed),
        noise_scale: noise.map_or(0.0, |s| s.scale),
    })
}
