//! Command logic behind the `ddesc` binary.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then flags, then the
//! optional `--config` JSON file, which wins), runs the pipeline from either a
//! system file or a recorded experiment bundle, and writes a JSON report into
//! the output directory. Reports carry no timings unless `--timings` is given,
//! so identical inputs give byte-identical files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ddesc_core::analysis::{
    data_report, identify_type, oracle_report, ControllabilityReport, Delta, NoiseMode,
    TypeVerdict, Verdicts,
};
use ddesc_core::campaign::{
    evaluate_plant, generate_plant, r_controllable_plants, stabilize_plant, CaseOutcome, PlantSpec,
    StabilizationOutcome,
};
use ddesc_core::experiments::{
    assemble_data_matrices, run_experiment1, run_experiment2, run_experiment3, DataMatrices,
    Experiment1Data, Experiment2Data, Experiment3Data,
};
use ddesc_core::io::{self, Bundle, GainsFile};
use ddesc_core::kernels::{multiset_distance, Matrix, RankTolerance, Vector, C64};
use ddesc_core::lmi::LmiOptions;
use ddesc_core::model::{
    certify_shift, is_regular, simulate, slow_fast_decompose, DescriptorSystem, Trajectory,
    REGULARITY_TRIALS,
};
use ddesc_core::rng::derived_rng;
use ddesc_core::stabilization::{certify_closed_loop, stabilize, StabilizationResult};
use ddesc_core::{Error as CoreError, ExperimentConfig, SimulatedPlant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_DIR_ENV: &str = "DDESC_OUTPUT_DIR";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const REFUSED: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const INTERNAL: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CoreError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) => match e {
                CoreError::AmbiguousSpectrum { .. } | CoreError::DegenerateData(_) => exit::REFUSED,
                CoreError::LmiInfeasible { .. }
                | CoreError::NotPersistent { .. }
                | CoreError::NothingToStabilize
                | CoreError::DegenerateCertificate(_) => exit::INFEASIBLE,
                CoreError::DecompositionFailure(_) => exit::INTERNAL,
                _ => exit::USAGE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `auto` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AutoOr {
    #[default]
    Auto,
    Value(f64),
}

impl FromStr for AutoOr {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AutoOr::Auto);
        }
        s.parse::<f64>()
            .map(AutoOr::Value)
            .map_err(|_| format!("expected `auto` or a number, got `{s}`"))
    }
}

impl Serialize for AutoOr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AutoOr::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rank: AutoOr,
    pub sym: f64,
    pub eps_pd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let lmi = LmiOptions::default();
        Self {
            rank: AutoOr::Auto,
            sym: lmi.sym_tol,
            eps_pd: lmi.eps_pd,
        }
    }
}

/// Fully resolved run settings, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub system_file: Option<PathBuf>,
    pub bundle_dir: Option<PathBuf>,
    pub s0: f64,
    pub l: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub noise_scale: f64,
    /// `None`: threshold mode only when `noise_scale > 0`, with an automatic delta.
    pub delta: Option<AutoOr>,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            system_file: None,
            bundle_dir: None,
            s0: e.s0,
            l: e.l,
            horizon: e.horizon,
            seed: e.seed,
            noise_scale: e.noise_scale,
            delta: None,
            tolerances: Tolerances::default(),
            output_dir: PathBuf::from("."),
        }
    }
}

/// `--config` file: any subset of [`RunConfig`]; present fields override flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system_file: Option<PathBuf>,
    pub bundle_dir: Option<PathBuf>,
    pub s0: Option<f64>,
    pub l: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
    pub noise_scale: Option<f64>,
    pub delta: Option<AutoOr>,
    pub tolerances: Option<PartialTolerances>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTolerances {
    pub rank: Option<AutoOr>,
    pub sym: Option<f64>,
    pub eps_pd: Option<f64>,
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            s0: self.s0,
            l: self.l,
            horizon: self.horizon,
            seed: self.seed,
            noise_scale: self.noise_scale,
            ..Default::default()
        }
    }

    pub fn rank_tolerance(&self) -> RankTolerance {
        match self.tolerances.rank {
            AutoOr::Auto => RankTolerance::Auto,
            AutoOr::Value(v) => RankTolerance::Absolute(v),
        }
    }

    pub fn lmi_options(&self) -> LmiOptions {
        LmiOptions {
            eps_pd: self.tolerances.eps_pd,
            sym_tol: self.tolerances.sym,
            ..Default::default()
        }
    }

    pub fn noise_mode(&self) -> NoiseMode {
        match (self.delta, self.noise_scale > 0.0) {
            (Some(AutoOr::Auto), _) | (None, true) => NoiseMode::Threshold(Delta::Auto),
            (Some(AutoOr::Value(d)), _) => NoiseMode::Threshold(Delta::Value(d)),
            (None, false) => NoiseMode::Off(self.rank_tolerance()),
        }
    }

    fn apply(&mut self, file: ConfigFile) {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = file.$field {
                    self.$field = v.into();
                }
            )*};
        }
        take!(s0, l, horizon, seed, noise_scale, output_dir);
        if file.system_file.is_some() {
            self.system_file = file.system_file;
        }
        if file.bundle_dir.is_some() {
            self.bundle_dir = file.bundle_dir;
        }
        if file.delta.is_some() {
            self.delta = file.delta;
        }
        if let Some(t) = file.tolerances {
            if let Some(r) = t.rank {
                self.tolerances.rank = r;
            }
            if let Some(s) = t.sym {
                self.tolerances.sym = s;
            }
            if let Some(e) = t.eps_pd {
                self.tolerances.eps_pd = e;
            }
        }
    }

    fn validate(&self) -> CliResult<()> {
        if self.l == 0 {
            return Err(CliError::Usage("l must be at least 1".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.s0.is_finite() {
            return Err(CliError::Usage(
                "s0 must be finite and noise_scale nonnegative".into(),
            ));
        }
        if !(self.tolerances.eps_pd > 0.0) || !(self.tolerances.sym > 0.0) {
            return Err(CliError::Usage(
                "eps_pd and sym tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ddesc",
    version,
    about = "Data-driven analysis and stabilization of descriptor systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// System JSON with row-major `E`, `A`, `B`.
    #[arg(long, value_name = "FILE")]
    pub system: Option<PathBuf>,
    /// Recorded experiment bundle (used when no system file is given).
    #[arg(long, value_name = "DIR")]
    pub bundle: Option<PathBuf>,
    /// JSON config; fields present in the file override the flags.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub s0: Option<f64>,
    /// Steps per sub-experiment in Experiments 1 and 2.
    #[arg(long)]
    pub l: Option<usize>,
    /// Experiment-3 length.
    #[arg(long = "horizon", short = 'T')]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bound of the uniform system noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Singular-value threshold: `auto` or a number (enables threshold mode).
    #[arg(long)]
    pub delta: Option<AutoOr>,
    /// Rank tolerance: `auto` or an absolute value.
    #[arg(long)]
    pub rank_tol: Option<AutoOr>,
    #[arg(long)]
    pub sym_tol: Option<f64>,
    #[arg(long)]
    pub eps_pd: Option<f64>,
    #[arg(long, env = OUTPUT_DIR_ENV, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Add wall-clock timings to the report (breaks byte-for-byte reproducibility).
    #[arg(long)]
    pub timings: bool,
}

impl CommonArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.system_file = self.system.clone();
        cfg.bundle_dir = self.bundle.clone();
        if let Some(v) = self.s0 {
            cfg.s0 = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.noise {
            cfg.noise_scale = v;
        }
        cfg.delta = self.delta;
        if let Some(v) = self.rank_tol {
            cfg.tolerances.rank = v;
        }
        if let Some(v) = self.sym_tol {
            cfg.tolerances.sym = v;
        }
        if let Some(v) = self.eps_pd {
            cfg.tolerances.eps_pd = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let file: ConfigFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
            cfg.apply(file);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Excitation {
    Zero,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the system and write `trajectory.csv`.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, value_enum, default_value = "random")]
        inputs: Excitation,
        /// Slow part of the initial state.
        #[arg(long, value_enum, default_value = "random")]
        x0: Excitation,
    },
    /// Run Experiment 1 and write its trajectories into the bundle directory.
    Exp1 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run Experiment 2 and write its trajectories into the bundle directory.
    Exp2 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run Experiment 3 and write its trajectory into the bundle directory.
    Exp3 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Normal vs. descriptor from Experiment-1 data.
    Identify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Causality and C/Y/R-controllability from Experiments 1 and 2.
    Controllability {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Data-driven stabilizing gain; writes `gains.json` and `closed_loop.csv`.
    Stabilize {
        #[command(flatten)]
        common: CommonArgs,
        /// Closed-loop steps written to `closed_loop.csv`.
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Data verdicts and gain against the model-based oracle.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Randomized oracle-equivalence and stabilization campaigns.
    Campaign {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        stabilize_count: usize,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Common report envelope.
#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub result: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub total_ms: f64,
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn start(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }
    fn finish(&self) -> Option<Timings> {
        self.enabled.then(|| Timings {
            total_ms: self.start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn write_report<T: Serialize>(
    cfg: &RunConfig,
    command: &'static str,
    result: T,
    clock: &Clock,
) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(CoreError::from)?;
    let path = cfg.output_dir.join(format!("{command}.json"));
    let report = Report {
        command,
        version: VERSION,
        config: cfg.clone(),
        result,
        timings: clock.finish(),
    };
    io::write_json(&path, &report)?;
    Ok(path)
}

fn load_system(cfg: &RunConfig) -> CliResult<DescriptorSystem> {
    let path = cfg
        .system_file
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --system".into()))?;
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "system file {} does not exist",
            path.display()
        )));
    }
    Ok(io::read_system(path)?)
}

fn plant(cfg: &RunConfig) -> CliResult<SimulatedPlant> {
    Ok(SimulatedPlant::new(load_system(cfg)?, cfg.noise_scale)?)
}

/// Experiment data from the system (fresh runs) or from the bundle.
struct Data {
    e1: Experiment1Data,
    e2: Option<Experiment2Data>,
    e3: Option<Experiment3Data>,
    s0: f64,
}

fn gather(cfg: &RunConfig, need_e2: bool, need_e3: bool) -> CliResult<Data> {
    if cfg.system_file.is_some() {
        let exp = cfg.experiment();
        let mut p = plant(cfg)?;
        let e1 = run_experiment1(&mut p, &exp)?;
        let e2 = if need_e2 {
            Some(run_experiment2(&mut p, &exp)?)
        } else {
            None
        };
        let e3 = if need_e3 {
            Some(run_experiment3(&mut p, &exp)?)
        } else {
            None
        };
        return Ok(Data {
            e1,
            e2,
            e3,
            s0: exp.s0,
        });
    }
    let dir = cfg
        .bundle_dir
        .as_ref()
        .ok_or_else(|| CliError::Usage("give --system or --bundle".into()))?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "bundle {} is not a directory",
            dir.display()
        )));
    }
    let Bundle { config, e1, e2, e3 } = io::read_bundle(dir)?;
    if need_e3 && e3.is_none() {
        return Err(CliError::Usage(format!(
            "bundle {} has no exp3.csv",
            dir.display()
        )));
    }
    Ok(Data {
        e1,
        e2: Some(e2),
        e3,
        s0: config.s0,
    })
}

fn data_matrices(data: &Data) -> CliResult<DataMatrices> {
    let e2 = data.e2.as_ref().expect("experiment 2 gathered");
    Ok(assemble_data_matrices(&data.e1, e2)?)
}

fn write_experiment_files(
    cfg: &RunConfig,
    prefix: &str,
    trajectories: &[&Trajectory],
) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(CoreError::from)?;
    io::write_json(&cfg.output_dir.join("config.json"), &cfg.experiment())?;
    let mut paths = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        let name = if trajectories.len() == 1 && prefix == "exp3" {
            "exp3.csv".to_string()
        } else {
            format!("{prefix}_{i}.csv")
        };
        let path = cfg.output_dir.join(name);
        io::write_trajectory_csv(&path, t)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Serialize)]
pub struct SimulateResult {
    pub trajectory: PathBuf,
    pub steps: usize,
    pub inputs: Excitation,
    pub x0: Excitation,
    pub max_residual: f64,
}

pub fn cmd_simulate(
    common: &CommonArgs,
    steps: usize,
    inputs: Excitation,
    x0: Excitation,
) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let sys = load_system(&cfg)?;
    let shift = if certify_shift(&sys, cfg.s0).is_ok() {
        cfg.s0
    } else {
        let check = is_regular(&sys, REGULARITY_TRIALS, cfg.seed)?;
        check.witness.ok_or(CoreError::NotRegular {
            trials: check.trials,
        })?
    };
    let form = slow_fast_decompose(&sys, shift)?;
    let mut rng = derived_rng(cfg.seed, &[0x51]);
    let slow = match x0 {
        Excitation::Zero => Vector::zeros(form.n1),
        Excitation::Random => {
            Vector::from_fn(form.n1, |_, _| rand::Rng::gen_range(&mut rng, -1.0..=1.0))
        }
    };
    let u: Vec<Vector> = (0..steps + form.index_h)
        .map(|_| match inputs {
            Excitation::Zero => Vector::zeros(sys.m()),
            Excitation::Random => {
                Vector::from_fn(sys.m(), |_, _| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            }
        })
        .collect();
    let noise = (cfg.noise_scale > 0.0).then(|| ddesc_core::NoiseSpec {
        scale: cfg.noise_scale,
        seed: ddesc_core::rng::derive_seed(cfg.seed, &[0x52]),
    });
    let traj = simulate(&form, &slow, &u, steps, noise)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(CoreError::from)?;
    let path = cfg.output_dir.join("trajectory.csv");
    io::write_trajectory_csv(&path, &traj)?;
    let result = SimulateResult {
        trajectory: path,
        steps,
        inputs,
        x0,
        max_residual: traj.max_residual(&sys),
    };
    write_report(&cfg, "simulate", result, &clock)
}

#[derive(Debug, Serialize)]
pub struct ExperimentResult {
    pub files: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attempts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excited_rank: Option<usize>,
}

pub fn cmd_experiment(common: &CommonArgs, which: u8) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let exp = cfg.experiment();
    let mut p = plant(&cfg)?;
    let (command, result) = match which {
        1 => {
            let e1 = run_experiment1(&mut p, &exp)?;
            let files =
                write_experiment_files(&cfg, "exp1", &e1.trajectories.iter().collect::<Vec<_>>())?;
            let r = ExperimentResult {
                files,
                attempts: Some(e1.attempts),
                excited_rank: Some(e1.excited_rank),
            };
            ("exp1", r)
        }
        2 => {
            let e2 = run_experiment2(&mut p, &exp)?;
            let files =
                write_experiment_files(&cfg, "exp2", &e2.trajectories.iter().collect::<Vec<_>>())?;
            (
                "exp2",
                ExperimentResult {
                    files,
                    attempts: None,
                    excited_rank: None,
                },
            )
        }
        _ => {
            let e3 = run_experiment3(&mut p, &exp)?;
            let files = write_experiment_files(&cfg, "exp3", &[&e3.trajectory])?;
            (
                "exp3",
                ExperimentResult {
                    files,
                    attempts: None,
                    excited_rank: None,
                },
            )
        }
    };
    write_report(&cfg, command, result, &clock)
}

pub fn cmd_identify(common: &CommonArgs) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let data = gather(&cfg, false, false)?;
    let verdict: TypeVerdict = identify_type(&data.e1.m_mat, cfg.noise_mode())?;
    write_report(&cfg, "identify", verdict, &clock)
}

#[derive(Debug, Serialize)]
pub struct ControllabilityResult {
    pub type_verdict: TypeVerdict,
    pub report: ControllabilityReport,
    pub verdicts: Verdicts,
    pub quality: ddesc_core::experiments::DataQuality,
}

fn controllability(
    cfg: &RunConfig,
    data: &Data,
) -> CliResult<(ControllabilityResult, DataMatrices)> {
    let type_verdict = identify_type(&data.e1.m_mat, cfg.noise_mode())?;
    let d = data_matrices(data)?;
    let report = data_report(&d, type_verdict.rank_e_estimate, cfg.rank_tolerance())?;
    let verdicts = report.verdicts(d.n());
    let quality = d.quality;
    Ok((
        ControllabilityResult {
            type_verdict,
            report,
            verdicts,
            quality,
        },
        d,
    ))
}

pub fn cmd_controllability(common: &CommonArgs) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let data = gather(&cfg, true, false)?;
    let (result, _) = controllability(&cfg, &data)?;
    write_report(&cfg, "controllability", result, &clock)
}

#[derive(Debug, Serialize)]
pub struct StabilizeResult {
    pub gains: GainsFile,
    pub gains_file: PathBuf,
    pub closed_loop_file: PathBuf,
    /// `true`: `closed_loop.csv` holds full states of the true plant; `false`:
    /// slow coordinates driven by the data-based closed loop.
    pub model_trajectory: bool,
}

fn run_stabilization(cfg: &RunConfig, data: &Data) -> CliResult<StabilizationResult> {
    let d = data_matrices(data)?;
    let e3 = data.e3.as_ref().expect("experiment 3 gathered");
    let rank_e = match cfg.noise_mode() {
        NoiseMode::Threshold(_) => {
            Some(identify_type(&data.e1.m_mat, cfg.noise_mode())?.rank_e_estimate)
        }
        NoiseMode::Off(_) => None,
    };
    let (_, result) = stabilize(&d, e3, rank_e, &cfg.lmi_options())?;
    Ok(result)
}

/// Closed loop from the last Experiment-3 state, in slow coordinates.
fn data_closed_loop(res: &StabilizationResult, e3: &Experiment3Data, steps: usize) -> Trajectory {
    let p_inv = res
        .p
        .clone()
        .try_inverse()
        .unwrap_or_else(|| Matrix::identity(res.p.nrows(), res.p.ncols()));
    let last = e3
        .trajectory
        .states
        .last()
        .cloned()
        .unwrap_or_else(|| Vector::zeros(res.p.nrows()));
    let mut x = (p_inv * last).rows(0, res.n1).into_owned();
    let mut states = vec![x.clone()];
    let mut inputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        inputs.push(&res.k_s * &x);
        x = &res.a_cl * &x;
        states.push(x.clone());
    }
    Trajectory {
        inputs,
        states,
        noise_seed: None,
        noise_scale: 0.0,
    }
}

pub fn cmd_stabilize(common: &CommonArgs, steps: usize) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let data = gather(&cfg, true, true)?;
    let res = run_stabilization(&cfg, &data)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(CoreError::from)?;
    let gains = GainsFile::from(&res);
    let gains_file = cfg.output_dir.join("gains.json");
    io::write_json(&gains_file, &gains)?;

    let (traj, model_trajectory) = if cfg.system_file.is_some() {
        let sys = load_system(&cfg)?;
        let cert = certify_closed_loop(&sys, &res.k, steps, cfg.seed)?;
        let inputs = cert.states[..steps].iter().map(|x| &res.k * x).collect();
        let traj = Trajectory {
            inputs,
            states: cert.states,
            noise_seed: None,
            noise_scale: 0.0,
        };
        (traj, true)
    } else {
        (
            data_closed_loop(&res, data.e3.as_ref().expect("gathered"), steps),
            false,
        )
    };
    let closed_loop_file = cfg.output_dir.join("closed_loop.csv");
    io::write_trajectory_csv(&closed_loop_file, &traj)?;
    let result = StabilizeResult {
        gains,
        gains_file,
        closed_loop_file,
        model_trajectory,
    };
    write_report(&cfg, "stabilize", result, &clock)
}

#[derive(Debug, Serialize)]
pub struct VerifyResult {
    pub data: Verdicts,
    pub oracle: Verdicts,
    pub agreement: bool,
    pub data_ranks: [usize; 4],
    pub oracle_ranks: [usize; 4],
    pub stabilization: Option<StabilizationCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilization_error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct StabilizationCheck {
    pub data_eigs: Vec<C64>,
    pub model_finite_eigs: Vec<C64>,
    pub eig_distance: Option<f64>,
    pub model_stable: bool,
    pub decay_at_end: f64,
}

fn ranks(r: &ControllabilityReport) -> [usize; 4] {
    [
        r.c_controllable.rank,
        r.causal.rank,
        r.y_controllable.rank,
        r.r_controllable.rank,
    ]
}

pub fn cmd_verify(common: &CommonArgs) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let sys = load_system(&cfg)?;
    let data = gather(&cfg, true, true)?;
    let (ctrl, _) = controllability(&cfg, &data)?;
    let oracle = oracle_report(&sys, Some(data.s0), cfg.rank_tolerance())?;
    let oracle_verdicts = oracle.verdicts(sys.n());
    let (stabilization, stabilization_error) = match run_stabilization(&cfg, &data) {
        Ok(res) => {
            let cert = certify_closed_loop(&sys, &res.k, 200, cfg.seed)?;
            let check = StabilizationCheck {
                eig_distance: multiset_distance(&res.closed_loop_eigs, &cert.finite_eigs),
                data_eigs: res.closed_loop_eigs,
                model_finite_eigs: cert.finite_eigs.clone(),
                model_stable: cert.stable,
                decay_at_end: cert.decay_at(200),
            };
            (Some(check), None)
        }
        Err(CliError::Core(e)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let result = VerifyResult {
        agreement: ctrl.verdicts == oracle_verdicts,
        data: ctrl.verdicts,
        oracle: oracle_verdicts,
        data_ranks: ranks(&ctrl.report),
        oracle_ranks: ranks(&oracle),
        stabilization,
        stabilization_error,
    };
    write_report(&cfg, "verify", result, &clock)
}

#[derive(Debug, Serialize)]
pub struct CampaignResult {
    pub count: usize,
    pub agreed: usize,
    pub agreement_rate: f64,
    pub max_identity_error: f64,
    pub cases: Vec<CaseOutcome>,
    pub stabilization: Vec<StabilizationOutcome>,
    pub stabilization_certified: usize,
}

/// Maps `f` over `items` on `jobs` scoped threads, preserving order.
fn fan_out<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(jobs).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("campaign worker panicked"))
            .collect()
    })
}

pub fn cmd_campaign(
    common: &CommonArgs,
    count: usize,
    stabilize_count: usize,
    jobs: Option<usize>,
) -> CliResult<PathBuf> {
    let cfg = common.resolve()?;
    let clock = Clock::start(common.timings);
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let spec = PlantSpec::default();
    let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed + i).collect();
    let cases = fan_out(&seeds, jobs, |&s| {
        evaluate_plant(&generate_plant(&spec, s), s)
    });
    let agreed = cases.iter().filter(|c| c.agree).count();
    let max_identity_error = cases
        .iter()
        .map(|c| c.identity.map_or(f64::INFINITY, |e| e.max()))
        .fold(0.0, f64::max);
    let plants = r_controllable_plants(&spec, cfg.seed + count as u64, stabilize_count);
    let stabilization = fan_out(&plants, jobs, |gp| stabilize_plant(gp, gp.seed));
    let result = CampaignResult {
        count,
        agreed,
        agreement_rate: if count == 0 {
            0.0
        } else {
            agreed as f64 / count as f64
        },
        max_identity_error,
        stabilization_certified: stabilization.iter().filter(|o| o.certified).count(),
        cases,
        stabilization,
    };
    write_report(&cfg, "campaign", result, &clock)
}

/// Runs a parsed command; returns the report path.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    match &cli.command {
        Command::Simulate {
            common,
            steps,
            inputs,
            x0,
        } => cmd_simulate(common, *steps, *inputs, *x0),
        Command::Exp1 { common } => cmd_experiment(common, 1),
        Command::Exp2 { common } => cmd_experiment(common, 2),
        Command::Exp3 { common } => cmd_experiment(common, 3),
        Command::Identify { common } => cmd_identify(common),
        Command::Controllability { common } => cmd_controllability(common),
        Command::Stabilize { common, steps } => cmd_stabilize(common, *steps),
        Command::Verify { common } => cmd_verify(common),
        Command::Campaign {
            common,
            count,
            stabilize_count,
            jobs,
        } => cmd_campaign(common, *count, *stabilize_count, *jobs),
    }
}

/// Entry point used by `main`: parses arguments and maps errors to exit codes.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            exit::OK
        }
        Err(e) => {
            eprintln!("ddesc: {e}");
            e.exit_code()
        }
    }
}

/// Helper for tests and scripts: a system file next to `dir`.
pub fn write_system_file(dir: &Path, sys: &DescriptorSystem) -> CliResult<PathBuf> {
    let path = dir.join("system.json");
    io::write_system(&path, sys)?;
    Ok(path)
}
