//! The three data-collection protocols.
//!
//! Experiments talk to a [`Plant`]: give it inputs, get back states. The
//! simulator is one implementation; recorded trajectories are another. No
//! function here reads `E`, `A` or `B`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    condition_number, hstack, pseudo_inverse, rank_with_tolerance, solve_right, Matrix,
    RankTolerance, Vector,
};
use crate::model::{
    is_regular, simulate, slow_fast_decompose, DescriptorSystem, NoiseSpec, SlowFastForm,
    Trajectory,
};
use crate::rng::{derive_seed, derived_rng};

const TAG_EXP1: u64 = 1;
const TAG_EXP2: u64 = 2;
const TAG_EXP3: u64 = 3;
const TAG_INPUTS: u64 = 0x1;
const TAG_PLANT: u64 = 0x2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub s0: f64,
    /// Steps per sub-experiment in Experiments 1 and 2.
    pub l: usize,
    /// Experiment-3 length `T`.
    pub horizon: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub resample_cap: usize,
    /// Largest acceptable `cond(N)` and `cond(W)`.
    pub cond_cap: f64,
    /// When `N` stays rank deficient after every resample, fall back to the
    /// minimum-norm `D_E` instead of refusing.
    #[serde(default = "default_true")]
    pub complete_unexcited: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            s0: 0.5,
            l: 4,
            horizon: 80,
            seed: 0,
            noise_scale: 0.0,
            resample_cap: 8,
            cond_cap: 1.0e8,
            complete_unexcited: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Format("l must be at least 1".into()));
        }
        if !self.s0.is_finite() || !(self.noise_scale >= 0.0) {
            return Err(Error::Format(
                "s0 must be finite and noise_scale nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Smallest `T` that can satisfy the excitation rank test for any slow dimension `n1 <= n`.
    pub fn min_horizon(n: usize, m: usize) -> usize {
        (m + 1) * n + m
    }
}

/// A single run request: window inputs plus extra future inputs the plant may
/// need to settle non-causal states at the end of the window.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub inputs: Vec<Vector>,
    pub lookahead: Vec<Vector>,
    pub seed: u64,
}

/// "Apply inputs, get states." Every run starts from a fresh consistent state.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn run(&mut self, request: &RunRequest) -> Result<Trajectory>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSlow {
    /// Slow part uniform in `[-1, 1]^{n1}`.
    #[default]
    Random,
    Zero,
}

/// Simulator-backed plant.
#[derive(Debug, Clone)]
pub struct SimulatedPlant {
    sys: DescriptorSystem,
    form: SlowFastForm,
    noise_scale: f64,
    initial: InitialSlow,
}

impl SimulatedPlant {
    pub fn new(sys: DescriptorSystem, noise_scale: f64) -> Result<Self> {
        let check = is_regular(&sys, crate::model::REGULARITY_TRIALS, 0)?;
        let shift = check.witness.ok_or(Error::NotRegular {
            trials: check.trials,
        })?;
        let form = slow_fast_decompose(&sys, shift)?;
        Ok(Self {
            sys,
            form,
            noise_scale,
            initial: InitialSlow::Random,
        })
    }

    pub fn with_initial(mut self, initial: InitialSlow) -> Self {
        self.initial = initial;
        self
    }

    pub fn system(&self) -> &DescriptorSystem {
        &self.sys
    }

    pub fn form(&self) -> &SlowFastForm {
        &self.form
    }
}

impl Plant for SimulatedPlant {
    fn state_dim(&self) -> usize {
        self.sys.n()
    }

    fn input_dim(&self) -> usize {
        self.sys.m()
    }

    fn run(&mut self, request: &RunRequest) -> Result<Trajectory> {
        let n1 = self.form.n1;
        let x0_slow = match self.initial {
            InitialSlow::Random => {
                let mut rng = derived_rng(request.seed, &[0x1]);
                Vector::from_fn(n1, |_, _| rng.gen_range(-1.0..=1.0))
            }
            InitialSlow::Zero => Vector::zeros(n1),
        };
        let mut all = request.inputs.clone();
        all.extend(request.lookahead.iter().cloned());
        let noise = (self.noise_scale > 0.0).then(|| NoiseSpec {
            scale: self.noise_scale,
            seed: derive_seed(request.seed, &[0x2]),
        });
        simulate(&self.form, &x0_slow, &all, request.inputs.len(), noise)
    }
}

/// Replays recorded trajectories in order.
#[derive(Debug, Clone, Default)]
pub struct RecordedPlant {
    n: usize,
    m: usize,
    queue: VecDeque<Trajectory>,
}

impl RecordedPlant {
    pub fn new(n: usize, m: usize, trajectories: impl IntoIterator<Item = Trajectory>) -> Self {
        Self {
            n,
            m,
            queue: trajectories.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl Plant for RecordedPlant {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn run(&mut self, request: &RunRequest) -> Result<Trajectory> {
        let traj = self.queue.pop_front().ok_or_else(|| {
            Error::DegenerateData("recorded plant ran out of trajectories".into())
        })?;
        if traj.len() != request.inputs.len() {
            return Err(Error::Format(format!(
                "recorded trajectory has {} steps, request has {}",
                traj.len(),
                request.inputs.len()
            )));
        }
        Ok(traj)
    }
}

fn uniform_inputs(rng: &mut impl Rng, count: usize, m: usize) -> Vec<Vector> {
    (0..count)
        .map(|_| Vector::from_fn(m, |_, _| rng.gen::<f64>()))
        .collect()
}

/// Inputs for one Experiment-1 sub-experiment.
#[derive(Debug, Clone)]
pub struct SubExperimentInputs {
    pub inputs: Vec<Vector>,
    pub lookahead: Vec<Vector>,
}

/// `n` zero-sum input sequences of length `l`: the first `l - 1` steps are
/// uniform on `[0, 1)`, the last cancels their sum.
pub fn design_exp1_inputs(
    config: &ExperimentConfig,
    n: usize,
    m: usize,
    attempt: usize,
) -> Vec<SubExperimentInputs> {
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(
                config.seed,
                &[TAG_EXP1, attempt as u64, i as u64, TAG_INPUTS],
            );
            let mut inputs = uniform_inputs(&mut rng, config.l.saturating_sub(1), m);
            let sum = inputs.iter().fold(Vector::zeros(m), |acc, u| acc + u);
            inputs.push(-sum);
            let lookahead = uniform_inputs(&mut rng, n, m);
            SubExperimentInputs { inputs, lookahead }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Experiment1Data {
    pub s0: f64,
    pub m_mat: Matrix,
    pub n_mat: Matrix,
    pub v_mat: Matrix,
    pub w_mat: Matrix,
    pub cond_n: f64,
    pub cond_w: f64,
    /// Numerical rank of `N`: the dimension of the state subspace the
    /// sub-experiments actually visited.
    pub excited_rank: usize,
    pub attempts: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Experiment1Data {
    /// Assembles `M, N, V, W` from `n` recorded sub-experiments.
    pub fn from_trajectories(trajectories: Vec<Trajectory>, s0: f64) -> Result<Self> {
        let n = trajectories.first().map_or(0, |t| t.state_dim());
        if trajectories.len() != n || n == 0 {
            return Err(Error::DimensionMismatch(format!(
                "Experiment 1 needs n = {n} sub-experiments, got {}",
                trajectories.len()
            )));
        }
        let mut m_mat = Matrix::zeros(n, n);
        let mut n_mat = Matrix::zeros(n, n);
        let mut v_mat = Matrix::zeros(n, n);
        let mut w_mat = Matrix::zeros(n, n);
        for (i, traj) in trajectories.iter().enumerate() {
            let l = traj.len();
            if l == 0 || traj.states.len() != l + 1 || traj.state_dim() != n {
                return Err(Error::Format(format!("sub-experiment {i} is malformed")));
            }
            let x0 = &traj.states[0];
            let xl = &traj.states[l];
            let m_i: Vector = traj.states[..l].iter().sum();
            let v_i: Vector = traj.states[1..=l].iter().sum();
            let n_i = &m_i * (s0 - 1.0) + x0 - xl;
            let w_i = &v_i * (s0 - 1.0) + (x0 - xl) * s0;
            m_mat.set_column(i, &m_i);
            n_mat.set_column(i, &n_i);
            v_mat.set_column(i, &v_i);
            w_mat.set_column(i, &w_i);
        }
        let cond_n = condition_number(&n_mat)?;
        let cond_w = condition_number(&w_mat)?;
        let excited_rank = rank_with_tolerance(&n_mat, RankTolerance::Auto)?.rank;
        Ok(Self {
            s0,
            m_mat,
            n_mat,
            v_mat,
            w_mat,
            cond_n,
            cond_w,
            excited_rank,
            attempts: 1,
            trajectories,
        })
    }
}

pub fn run_experiment1(
    plant: &mut dyn Plant,
    config: &ExperimentConfig,
) -> Result<Experiment1Data> {
    config.validate()?;
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let mut last: Option<Experiment1Data> = None;
    for attempt in 0..=config.resample_cap {
        let designs = design_exp1_inputs(config, n, m, attempt);
        let mut trajectories = Vec::with_capacity(n);
        for (i, design) in designs.into_iter().enumerate() {
            let request = RunRequest {
                inputs: design.inputs,
                lookahead: design.lookahead,
                seed: derive_seed(
                    config.seed,
                    &[TAG_EXP1, attempt as u64, i as u64, TAG_PLANT],
                ),
            };
            trajectories.push(plant.run(&request)?);
        }
        let mut data = Experiment1Data::from_trajectories(trajectories, config.s0)?;
        if data.cond_n <= config.cond_cap && data.cond_w <= config.cond_cap {
            data.attempts = attempt + 1;
            return Ok(data);
        }
        data.attempts = attempt + 1;
        last = Some(data);
    }
    let last = last.expect("at least one attempt");
    // Consistent states of a plant with rank [E B] < n never leave a proper
    // subspace, so no amount of resampling makes N invertible.
    if config.complete_unexcited && last.excited_rank < n {
        return Ok(last);
    }
    Err(Error::DegenerateData(format!(
        "N or W stayed ill-conditioned after {} attempts (cond N = {:e}, cond W = {:e})",
        config.resample_cap + 1,
        last.cond_n,
        last.cond_w
    )))
}

#[derive(Debug, Clone)]
pub struct Experiment2Data {
    pub r0: Matrix,
    pub r1: Matrix,
    /// Index `i` of the unit input `e_i` behind each column.
    pub unit_inputs: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
}

impl Experiment2Data {
    /// `R0`, `R1` from the states at steps `l` and `l + 1` of each run.
    pub fn from_trajectories(trajectories: Vec<Trajectory>, l: usize) -> Result<Self> {
        let n = trajectories.first().map_or(0, |t| t.state_dim());
        let m = trajectories.len();
        let mut r0 = Matrix::zeros(n, m);
        let mut r1 = Matrix::zeros(n, m);
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.states.len() < l + 2 || traj.state_dim() != n {
                return Err(Error::Format(format!(
                    "Experiment-2 run {i} has {} states, needs {}",
                    traj.states.len(),
                    l + 2
                )));
            }
            r0.set_column(i, &traj.states[l]);
            r1.set_column(i, &traj.states[l + 1]);
        }
        Ok(Self {
            r0,
            r1,
            unit_inputs: (0..m).collect(),
            trajectories,
        })
    }
}

pub fn run_experiment2(
    plant: &mut dyn Plant,
    config: &ExperimentConfig,
) -> Result<Experiment2Data> {
    config.validate()?;
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let mut trajectories = Vec::with_capacity(m);
    for i in 0..m {
        let mut unit = Vector::zeros(m);
        unit[i] = 1.0;
        let request = RunRequest {
            inputs: vec![unit.clone(); config.l + 1],
            lookahead: vec![unit; n],
            seed: derive_seed(config.seed, &[TAG_EXP2, i as u64, TAG_PLANT]),
        };
        trajectories.push(plant.run(&request)?);
    }
    Experiment2Data::from_trajectories(trajectories, config.l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataQuality {
    pub cond_n: f64,
    pub cond_w: f64,
    pub excited_rank: usize,
    /// `true` when `N` was rank deficient and `D_E` was completed with zero on
    /// the directions no trajectory visited (see [`assemble_data_matrices`]).
    pub completed: bool,
}

/// `D_E = M N^-1`, `D_A = V W^-1`, `D_B = D_E R1 - D_A R0`.
#[derive(Debug, Clone)]
pub struct DataMatrices {
    pub d_e: Matrix,
    pub d_a: Matrix,
    pub d_b: Matrix,
    pub s0: f64,
    pub quality: DataQuality,
}

impl DataMatrices {
    pub fn n(&self) -> usize {
        self.d_e.nrows()
    }

    pub fn m(&self) -> usize {
        self.d_b.ncols()
    }
}

pub fn assemble_data_matrices(e1: &Experiment1Data, e2: &Experiment2Data) -> Result<DataMatrices> {
    let n = e1.m_mat.nrows();
    if e2.r0.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "Experiment 2 has state dimension {}, Experiment 1 has {n}",
            e2.r0.nrows()
        )));
    }
    let completed = e1.excited_rank < n;
    let (d_e, d_a) = if !completed && e1.cond_n.is_finite() && e1.cond_w.is_finite() {
        (
            solve_right(&e1.m_mat, &e1.n_mat)?,
            solve_right(&e1.v_mat, &e1.w_mat)?,
        )
    } else if completed && e1.excited_rank > 0 {
        // D_E is pinned down only on range(N); take the minimum-norm solution of
        // D_E N = M and tie D_A to it through D_A = s0 D_E - I, which every
        // regular pencil satisfies.
        let d_e = &e1.m_mat * pseudo_inverse(&e1.n_mat, RankTolerance::Auto)?;
        let d_a = &d_e * e1.s0 - Matrix::identity(n, n);
        (d_e, d_a)
    } else {
        return Err(Error::DegenerateData("N or W is singular".into()));
    };
    let d_b = &d_e * &e2.r1 - &d_a * &e2.r0;
    Ok(DataMatrices {
        d_e,
        d_a,
        d_b,
        s0: e1.s0,
        quality: DataQuality {
            cond_n: e1.cond_n,
            cond_w: e1.cond_w,
            excited_rank: e1.excited_rank,
            completed,
        },
    })
}

/// `U_-`, `X_-`, `X_+` from one persistently excited run.
#[derive(Debug, Clone)]
pub struct Experiment3Data {
    pub u_minus: Matrix,
    pub x_minus: Matrix,
    pub x_plus: Matrix,
    pub trajectory: Trajectory,
}

impl Experiment3Data {
    pub fn from_trajectory(trajectory: Trajectory) -> Result<Self> {
        let t = trajectory.len();
        if t == 0 || trajectory.states.len() != t + 1 {
            return Err(Error::Format(
                "Experiment-3 trajectory is empty or malformed".into(),
            ));
        }
        let cols = |vs: &[Vector]| -> Matrix {
            let refs: Vec<Matrix> = vs
                .iter()
                .map(|v| Matrix::from_column_slice(v.len(), 1, v.as_slice()))
                .collect();
            hstack(&refs.iter().collect::<Vec<_>>())
        };
        Ok(Self {
            u_minus: cols(&trajectory.inputs),
            x_minus: cols(&trajectory.states[..t]),
            x_plus: cols(&trajectory.states[1..]),
            trajectory,
        })
    }

    pub fn horizon(&self) -> usize {
        self.u_minus.ncols()
    }
}

pub fn run_experiment3(
    plant: &mut dyn Plant,
    config: &ExperimentConfig,
) -> Result<Experiment3Data> {
    config.validate()?;
    if config.horizon == 0 {
        return Err(Error::Format("Experiment 3 needs T >= 1".into()));
    }
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let mut rng = derived_rng(config.seed, &[TAG_EXP3, TAG_INPUTS]);
    let request = RunRequest {
        inputs: uniform_inputs(&mut rng, config.horizon, m),
        lookahead: uniform_inputs(&mut rng, n, m),
        seed: derive_seed(config.seed, &[TAG_EXP3, TAG_PLANT]),
    };
    Experiment3Data::from_trajectory(plant.run(&request)?)
}

/// Experiments 1 and 2 followed by assembly.
pub fn collect_data_matrices(
    plant: &mut dyn Plant,
    config: &ExperimentConfig,
) -> Result<(Experiment1Data, Experiment2Data, DataMatrices)> {
    let e1 = run_experiment1(plant, config)?;
    let e2 = run_experiment2(plant, config)?;
    let d = assemble_data_matrices(&e1, &e2)?;
    Ok((e1, e2, d))
}
