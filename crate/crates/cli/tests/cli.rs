//! End-to-end runs of the `ddesc` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CIRCUIT: &str = r#"{
  "E": [[1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]],
  "A": [[0, 1, 0, 0], [1, 0, 0, 0], [-1, 0, 0, 1], [0, 1, 1, 1]],
  "B": [[0], [0], [0], [-1]]
}"#;

/// Unstable slow mode that the input cannot reach.
const UNSTABILIZABLE: &str = r#"{"E": [[1, 0], [0, 0]], "A": [[1.5, 0], [0, 1]], "B": [[0], [1]]}"#;

const SCALAR: &str = r#"{"E": [[1]], "A": [[0.5]], "B": [[1]]}"#;

fn ddesc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddesc"))
        .args(args)
        .env_remove("DDESC_OUTPUT_DIR")
        .output()
        .expect("spawn ddesc")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_ok(args: &[&str]) -> Value {
    let out = ddesc(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let path = String::from_utf8(out.stdout).unwrap();
    report(Path::new(path.trim()))
}

struct Fixture {
    dir: tempfile::TempDir,
    circuit: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let circuit = write(dir.path(), "circuit.json", CIRCUIT)
            .display()
            .to_string();
        Self { dir, circuit }
    }

    fn out(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

#[test]
fn identify_circuit_is_descriptor_with_rank_two() {
    let f = Fixture::new();
    let r = run_ok(&[
        "identify",
        "--system",
        &f.circuit,
        "--output-dir",
        &f.out("o"),
    ]);
    assert_eq!(r["result"]["kind"], "descriptor");
    assert_eq!(r["result"]["rank_e_estimate"], 2);
    assert_eq!(r["command"], "identify");
    assert!(r.get("timings").is_none());
}

#[test]
fn noisy_identify_with_auto_delta() {
    let f = Fixture::new();
    let r = run_ok(&[
        "identify",
        "--system",
        &f.circuit,
        "--noise",
        "0.01",
        "--delta",
        "auto",
        "--output-dir",
        &f.out("o"),
    ]);
    assert_eq!(r["result"]["kind"], "descriptor");
    assert_eq!(r["result"]["rank_e_estimate"], 2);
    assert_eq!(r["result"]["method"], "svd_threshold");
}

#[test]
fn controllability_reproduces_rank_quartet() {
    let f = Fixture::new();
    let r = run_ok(&[
        "controllability",
        "--system",
        &f.circuit,
        "--output-dir",
        &f.out("o"),
    ]);
    let rep = &r["result"]["report"];
    let ranks: Vec<u64> = [
        "c_controllable",
        "causal",
        "y_controllable",
        "r_controllable",
    ]
    .iter()
    .map(|k| rep[k]["rank"].as_u64().unwrap())
    .collect();
    assert_eq!(ranks, vec![3, 6, 6, 16]);
    let v = &r["result"]["verdicts"];
    assert_eq!(v["c_controllable"], false);
    assert_eq!(v["causal"], true);
    assert_eq!(v["y_controllable"], true);
    assert_eq!(v["r_controllable"], true);
}

#[test]
fn verify_agrees_with_oracle() {
    let f = Fixture::new();
    let r = run_ok(&[
        "verify",
        "--system",
        &f.circuit,
        "--output-dir",
        &f.out("o"),
    ]);
    assert_eq!(r["result"]["agreement"], true);
    let stab = &r["result"]["stabilization"];
    assert_eq!(stab["model_stable"], true);
    assert!(stab["eig_distance"].as_f64().unwrap() < 1e-6);
}

#[test]
fn stabilize_writes_gains_and_closed_loop() {
    let f = Fixture::new();
    let out = f.out("o");
    let r = run_ok(&[
        "stabilize",
        "--system",
        &f.circuit,
        "--output-dir",
        &out,
        "--steps",
        "200",
    ]);
    let gains = report(&Path::new(&out).join("gains.json"));
    assert!(gains["spectral_radius"].as_f64().unwrap() < 1.0);
    assert!(gains["lmi_min_eig"].as_f64().unwrap() > 0.0);
    assert_eq!(gains["K"].as_array().unwrap().len(), 1);
    assert_eq!(r["result"]["model_trajectory"], true);
    let csv = std::fs::read_to_string(Path::new(&out).join("closed_loop.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 201);
    let norm = |line: &str| -> f64 {
        line.split(',')
            .skip(2)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    assert!(norm(rows[201]) < 1e-3 * norm(rows[1]));
}

#[test]
fn bundle_round_trip_matches_direct_run() {
    let f = Fixture::new();
    let bundle = f.out("bundle");
    for exp in ["exp1", "exp2", "exp3"] {
        run_ok(&[
            exp,
            "--system",
            &f.circuit,
            "--output-dir",
            &bundle,
            "--seed",
            "4",
        ]);
    }
    let direct = run_ok(&[
        "controllability",
        "--system",
        &f.circuit,
        "--seed",
        "4",
        "--output-dir",
        &f.out("direct"),
    ]);
    let replay = run_ok(&[
        "controllability",
        "--bundle",
        &bundle,
        "--output-dir",
        &f.out("replay"),
    ]);
    assert_eq!(direct["result"]["verdicts"], replay["result"]["verdicts"]);
    assert_eq!(direct["result"]["report"], replay["result"]["report"]);
    let stab = run_ok(&[
        "stabilize",
        "--bundle",
        &bundle,
        "--output-dir",
        &f.out("replay"),
    ]);
    assert_eq!(stab["result"]["model_trajectory"], false);
    assert!(stab["result"]["gains"]["spectral_radius"].as_f64().unwrap() < 1.0);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let f = Fixture::new();
    let out = f.out("o");
    let read = |name: &str| std::fs::read(Path::new(&out).join(name)).unwrap();
    let mut first = Vec::new();
    for cmd in ["identify", "controllability", "stabilize"] {
        run_ok(&[cmd, "--system", &f.circuit, "--output-dir", &out]);
        first.push(read(&format!("{cmd}.json")));
    }
    first.push(read("closed_loop.csv"));
    let mut second = Vec::new();
    for cmd in ["identify", "controllability", "stabilize"] {
        run_ok(&[cmd, "--system", &f.circuit, "--output-dir", &out]);
        second.push(read(&format!("{cmd}.json")));
    }
    second.push(read("closed_loop.csv"));
    assert_eq!(first, second);
}

#[test]
fn config_file_overrides_flags() {
    let f = Fixture::new();
    let cfg = write(
        f.dir.path(),
        "cfg.json",
        r#"{"s0": 0.7, "l": 5, "tolerances": {"eps_pd": 1e-7}}"#,
    );
    let r = run_ok(&[
        "identify",
        "--system",
        &f.circuit,
        "--s0",
        "0.5",
        "--l",
        "4",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        &f.out("o"),
    ]);
    assert_eq!(r["config"]["s0"], 0.7);
    assert_eq!(r["config"]["l"], 5);
    assert_eq!(r["config"]["tolerances"]["eps_pd"], 1e-7);
    assert_eq!(r["result"]["rank_e_estimate"], 2);
}

#[test]
fn output_dir_from_environment() {
    let f = Fixture::new();
    let out = f.out("from_env");
    let status = Command::new(env!("CARGO_BIN_EXE_ddesc"))
        .args(["identify", "--system", &f.circuit])
        .env("DDESC_OUTPUT_DIR", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(Path::new(&out).join("identify.json").exists());
}

#[test]
fn simulate_zero_input_from_rest_stays_at_zero() {
    let f = Fixture::new();
    let out = f.out("o");
    run_ok(&[
        "simulate",
        "--system",
        &f.circuit,
        "--inputs",
        "zero",
        "--x0",
        "zero",
        "--steps",
        "10",
        "--output-dir",
        &out,
    ]);
    let csv = std::fs::read_to_string(Path::new(&out).join("trajectory.csv")).unwrap();
    for line in csv.lines().skip(1) {
        for v in line.split(',').skip(1).filter(|s| !s.is_empty()) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
        }
    }
}

#[test]
fn simulate_random_satisfies_the_model() {
    let f = Fixture::new();
    let r = run_ok(&[
        "simulate",
        "--system",
        &f.circuit,
        "--steps",
        "40",
        "--output-dir",
        &f.out("o"),
    ]);
    assert!(r["result"]["max_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn campaign_small_run_agrees() {
    let f = Fixture::new();
    let r = run_ok(&[
        "campaign",
        "--count",
        "6",
        "--stabilize-count",
        "3",
        "--jobs",
        "2",
        "--output-dir",
        &f.out("o"),
    ]);
    assert_eq!(r["result"]["agreed"], 6);
    assert_eq!(r["result"]["stabilization_certified"], 3);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let code = |args: &[&str]| ddesc(args).status.code();

    assert_eq!(
        code(&["identify", "--system", &f.out("missing.json")]),
        Some(1)
    );
    assert_eq!(code(&["identify", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["identify", "--output-dir", &f.out("o")]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));

    let scalar = write(f.dir.path(), "scalar.json", SCALAR);
    assert_eq!(
        code(&[
            "identify",
            "--system",
            scalar.to_str().unwrap(),
            "--delta",
            "auto",
            "--output-dir",
            &f.out("o")
        ]),
        Some(2)
    );

    let fixture = write(f.dir.path(), "unstab.json", UNSTABILIZABLE);
    assert_eq!(
        code(&[
            "stabilize",
            "--system",
            fixture.to_str().unwrap(),
            "--s0",
            "0.3",
            "-T",
            "20",
            "--output-dir",
            &f.out("o")
        ]),
        Some(3)
    );
}
