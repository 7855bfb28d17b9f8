//! File formats: system JSON, trajectory CSV, experiment bundles and gain files.
//!
//! Matrices are written row-major as nested JSON arrays; complex numbers as
//! `[re, im]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    assemble_data_matrices, DataMatrices, DataQuality, Experiment1Data, Experiment2Data,
    Experiment3Data, ExperimentConfig,
};
use crate::kernels::{Matrix, Vector, C64};
use crate::model::{DescriptorSystem, Trajectory};
use crate::stabilization::StabilizationResult;

/// `#[serde(with = "rows")]` for a `Matrix` stored as a list of rows.
pub mod rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], cols_if_empty: usize) -> Result<Matrix> {
        let ncols = rows.first().map_or(cols_if_empty, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Format("ragged matrix rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Matrix::from_row_slice(rows.len(), ncols, &flat))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows, 0).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    #[serde(rename = "E", with = "rows")]
    pub e: Matrix,
    #[serde(rename = "A", with = "rows")]
    pub a: Matrix,
    #[serde(rename = "B", with = "rows")]
    pub b: Matrix,
}

pub fn read_system(path: &Path) -> Result<DescriptorSystem> {
    let file: SystemFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    DescriptorSystem::new(file.e, file.a, file.b)
}

pub fn write_system(path: &Path, sys: &DescriptorSystem) -> Result<()> {
    let file = SystemFile {
        e: sys.e.clone(),
        a: sys.a.clone(),
        b: sys.b.clone(),
    };
    write_json(path, &file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Header `k,u_1..u_m,x_1..x_n`; the final row (state `x_L`) has empty inputs.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let (n, m) = (traj.state_dim(), traj.input_dim());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend((1..=n).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        match traj.inputs.get(k) {
            Some(u) => rec.extend(u.iter().map(|v| format!("{v:e}"))),
            None => rec.extend(std::iter::repeat(String::new()).take(m)),
        }
        rec.extend(x.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let m = header.iter().filter(|h| h.starts_with("u_")).count();
    let n = header.iter().filter(|h| h.starts_with("x_")).count();
    if header.len() != 1 + m + n || header.get(0) != Some("k") || n == 0 {
        return Err(Error::Format(format!(
            "{}: expected header k,u_1..u_m,x_1..x_n",
            path.display()
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("{}: bad number {s:?}: {e}", path.display())))
    };
    let mut inputs = Vec::new();
    let mut states = Vec::new();
    let mut saw_last = false;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if saw_last {
            return Err(Error::Format(format!(
                "{}: rows after the final state row",
                path.display()
            )));
        }
        if parse(&rec[0])? as usize != row {
            return Err(Error::Format(format!(
                "{}: row {row} has k = {}",
                path.display(),
                &rec[0]
            )));
        }
        let u_fields: Vec<&str> = (1..=m).map(|i| &rec[i]).collect();
        if u_fields.iter().all(|s| s.trim().is_empty()) {
            saw_last = true;
        } else {
            inputs.push(Vector::from_iterator(
                m,
                u_fields
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>>>()?,
            ));
        }
        states.push(Vector::from_iterator(
            n,
            (1 + m..1 + m + n)
                .map(|i| parse(&rec[i]))
                .collect::<Result<Vec<_>>>()?,
        ));
    }
    if !saw_last && m > 0 {
        return Err(Error::Format(format!(
            "{}: missing final state row with empty inputs",
            path.display()
        )));
    }
    Ok(Trajectory {
        inputs,
        states,
        noise_seed: None,
        noise_scale: 0.0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatricesFile {
    #[serde(rename = "M", with = "rows")]
    pub m: Matrix,
    #[serde(rename = "N", with = "rows")]
    pub n: Matrix,
    #[serde(rename = "V", with = "rows")]
    pub v: Matrix,
    #[serde(rename = "W", with = "rows")]
    pub w: Matrix,
    #[serde(rename = "R0", with = "rows")]
    pub r0: Matrix,
    #[serde(rename = "R1", with = "rows")]
    pub r1: Matrix,
    #[serde(rename = "D_E", with = "rows")]
    pub d_e: Matrix,
    #[serde(rename = "D_A", with = "rows")]
    pub d_a: Matrix,
    #[serde(rename = "D_B", with = "rows")]
    pub d_b: Matrix,
    pub quality: DataQuality,
}

/// Everything the data-side pipeline needs, as stored on disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: ExperimentConfig,
    pub e1: Experiment1Data,
    pub e2: Experiment2Data,
    pub e3: Option<Experiment3Data>,
}

impl Bundle {
    pub fn data_matrices(&self) -> Result<DataMatrices> {
        assemble_data_matrices(&self.e1, &self.e2)
    }
}

/// Writes `config.json`, `exp1_<i>.csv`, `exp2_<i>.csv`, `exp3.csv` (when
/// present) and `matrices.json` under `dir`.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &bundle.config)?;
    for (i, t) in bundle.e1.trajectories.iter().enumerate() {
        write_trajectory_csv(&dir.join(format!("exp1_{i}.csv")), t)?;
    }
    for (i, t) in bundle.e2.trajectories.iter().enumerate() {
        write_trajectory_csv(&dir.join(format!("exp2_{i}.csv")), t)?;
    }
    if let Some(e3) = &bundle.e3 {
        write_trajectory_csv(&dir.join("exp3.csv"), &e3.trajectory)?;
    }
    let d = bundle.data_matrices()?;
    let file = MatricesFile {
        m: bundle.e1.m_mat.clone(),
        n: bundle.e1.n_mat.clone(),
        v: bundle.e1.v_mat.clone(),
        w: bundle.e1.w_mat.clone(),
        r0: bundle.e2.r0.clone(),
        r1: bundle.e2.r1.clone(),
        d_e: d.d_e,
        d_a: d.d_a,
        d_b: d.d_b,
        quality: d.quality,
    };
    write_json(&dir.join("matrices.json"), &file)
}

fn numbered(dir: &Path, prefix: &str) -> Vec<std::path::PathBuf> {
    (0..)
        .map(|i| dir.join(format!("{prefix}_{i}.csv")))
        .take_while(|p| p.exists())
        .collect()
}

/// Reads a bundle back, recomputing every matrix from the trajectories
/// (`matrices.json` is informational).
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let config: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let e1_trajs = numbered(dir, "exp1")
        .iter()
        .map(|p| read_trajectory_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let e2_trajs = numbered(dir, "exp2")
        .iter()
        .map(|p| read_trajectory_csv(p))
        .collect::<Result<Vec<_>>>()?;
    if e1_trajs.is_empty() || e2_trajs.is_empty() {
        return Err(Error::Format(format!(
            "{}: bundle lacks exp1_*.csv or exp2_*.csv",
            dir.display()
        )));
    }
    let e1 = Experiment1Data::from_trajectories(e1_trajs, config.s0)?;
    let e2 = Experiment2Data::from_trajectories(e2_trajs, config.l)?;
    let exp3 = dir.join("exp3.csv");
    let e3 = if exp3.exists() {
        Some(Experiment3Data::from_trajectory(read_trajectory_csv(
            &exp3,
        )?)?)
    } else {
        None
    };
    Ok(Bundle { config, e1, e2, e3 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainsFile {
    #[serde(rename = "K_s", with = "rows")]
    pub k_s: Matrix,
    #[serde(rename = "K", with = "rows")]
    pub k: Matrix,
    #[serde(rename = "P", with = "rows")]
    pub p: Matrix,
    pub n1: usize,
    pub n2: usize,
    pub lmi_min_eig: f64,
    pub sym_residual: f64,
    pub spectral_radius: f64,
    pub closed_loop_eigs: Vec<C64>,
}

impl From<&StabilizationResult> for GainsFile {
    fn from(r: &StabilizationResult) -> Self {
        Self {
            k_s: r.k_s.clone(),
            k: r.k.clone(),
            p: r.p.clone(),
            n1: r.n1,
            n2: r.n2,
            lmi_min_eig: r.lmi_min_eig,
            sym_residual: r.sym_residual,
            spectral_radius: r.spectral_radius,
            closed_loop_eigs: r.closed_loop_eigs.clone(),
        }
    }
}

/// Reads the gain `K` from a gains file.
pub fn read_gain(path: &Path) -> Result<Matrix> {
    let g: GainsFile = read_json(path)?;
    Ok(g.k)
}
