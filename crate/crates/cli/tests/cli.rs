use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsctl_core::config::LoadedConfig;
use serde_json::{json, Value};

const CONFIG: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../configs/scalar_unstable.json"
);
const GOLDEN_EPSILON: &str = include_str!("golden/epsilon-d08-d12.csv");

fn lsctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsctl"))
        .args(args)
        .output()
        .expect("run lsctl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn solve(out: &Path, degrees: &str) {
    let o = lsctl(&[
        "solve",
        "--config",
        CONFIG,
        "--out",
        out.to_str().unwrap(),
        "--degrees",
        degrees,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_str().unwrap();
    solve(&out, "8");
    let again = lsctl(&[
        "solve",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
    ]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = lsctl(&[
        "solve",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
        "--force",
    ]);
    assert_eq!(forced.status.code(), Some(0));
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "r")
        .collect();
    assert!(
        leftovers.is_empty(),
        "temporary directories left behind: {leftovers:?}"
    );
}

#[test]
fn malformed_polynomial_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = fs::read_to_string(CONFIG)
        .unwrap()
        .replace("-x^3 + 5*x^2 + 3*x", "-x^3 + 5*y");
    let path = tmp.path().join("bad.json");
    fs::write(&path, bad).unwrap();
    let o = lsctl(&[
        "solve",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("drift[0][0]"), "{}", stderr(&o));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_str().unwrap();

    let o = lsctl(&[
        "simulate",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "simulate before solve: {}",
        stderr(&o)
    );

    solve(&out, "8");
    let o = lsctl(&[
        "simulate",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
        "--runs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 2 runs"), "{}", stderr(&o));

    let o = lsctl(&[
        "verify",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(2), "missing degree: {}", stderr(&o));

    let o = lsctl(&[
        "solve",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "12:8",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solution_from_another_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    solve(&out, "8");
    let other = fs::read_to_string(CONFIG)
        .unwrap()
        .replace("\"rng_seed\": 2024", "\"rng_seed\": 2025");
    let path = tmp.path().join("other.json");
    fs::write(&path, other).unwrap();
    let o = lsctl(&[
        "verify",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--degrees",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("different configuration"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn verify_passes_then_fails_on_a_corrupted_lower_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_str().unwrap();
    solve(&out, "8");
    let o = lsctl(&[
        "verify",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        read_json(&out.join("verify-d08/audit.json"))["report"]["passed"],
        json!(true)
    );

    let path = out.join("solution-d08.json");
    let mut sol = read_json(&path);
    for piece in sol["solution"]["pieces"].as_array_mut().unwrap() {
        for term in piece["psi_l"]["terms"].as_array_mut().unwrap() {
            if term["exponents"] == json!([0]) {
                let c = term["coeff"].as_f64().unwrap();
                term["coeff"] = json!(c + 0.05);
            }
        }
    }
    fs::write(&path, serde_json::to_string_pretty(&sol).unwrap()).unwrap();
    let o = lsctl(&[
        "verify",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
        "--force",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let audit = read_json(&out.join("verify-d08/audit.json"));
    assert_eq!(audit["report"]["passed"], json!(false));
    let excess = audit["report"]["oracle"][0]["bounds"]["max_lower_excess"]
        .as_f64()
        .unwrap();
    assert!(excess > 0.04, "{excess}");
}

const PLANAR: &str = r#"{
  "name": "planar",
  "variables": ["x", "y"],
  "drift": ["-x + y", "-x - y"],
  "input_gain": [["1", "0"], ["0", "1"]],
  "noise_gain": [["1", "0"], ["0", "1"]],
  "state_cost": "x^2 + y^2",
  "control_penalty": [[1, 0], [0, 1]],
  "noise_covariance": [[0.5, 0], [0, 0.5]],
  "lambda": 0.5,
  "domain": {
    "generators": ["1 - x^2", "1 - y^2"],
    "boundary_factors": ["1 - x^2", "1 - y^2"],
    "bounds": [[-1, 1], [-1, 1]]
  },
  "boundary": {"polynomial": "exp(-2)"},
  "anchors": [{"x": [0, 0], "psi": 1}],
  "hierarchy": {"min_degree": 4, "max_degree": 4},
  "audit": {"grid_points": 21, "exclude_radius": 0.001, "oracle_nodes": 101, "sample_points": 11}
}"#;

fn write_planar_solution(dir: &Path, hash: &str) -> PathBuf {
    // Psi_l = 1 - (x^2 + y^2) / 4, Psi_u = 1.
    let psi_l = json!({"nvars": 2, "terms": [
        {"exponents": [0, 0], "coeff": 1.0},
        {"exponents": [2, 0], "coeff": -0.25},
        {"exponents": [0, 2], "coeff": -0.25}
    ]});
    let psi_u = json!({"nvars": 2, "terms": [{"exponents": [0, 0], "coeff": 1.0}]});
    let file = json!({
        "tool": "lsctl",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "solution": {"degree": 4, "lambda": 0.5, "pieces": [
            {"region": "full", "epsilon": 0.5, "psi_l": psi_l, "psi_u": psi_u}
        ]}
    });
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("solution-d04.json");
    fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    path
}

#[test]
fn n_dimensional_verify_skips_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("planar.json");
    fs::write(&cfg, PLANAR).unwrap();
    let hash = LoadedConfig::from_json(PLANAR).unwrap().hash;
    let out = tmp.path().join("r");
    write_planar_solution(&out, &hash);
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let o = lsctl(&["verify", "--config", cfg_s, "--out", out_s]);
    let audit = read_json(&out.join("verify-d04/audit.json"));
    let check = &audit["report"]["oracle"][0];
    assert_eq!(check["status"], json!("skipped"));
    assert!(check["reason"]
        .as_str()
        .unwrap()
        .contains("one-dimensional"));
    // The remaining audits still run: V_u = -0.5 ln(1 - r^2/4) is a Lyapunov
    // candidate, but the strengthened inequality fails for this crude pair.
    assert_eq!(audit["report"]["sclf"]["points"], json!(440));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = lsctl(&["oracle", "--config", cfg_s, "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("one-dimensional"));
}

#[test]
fn golden_epsilon_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    solve(&out, "8:12");
    let actual = fs::read_to_string(out.join("epsilon.csv")).unwrap();
    let (a_lines, g_lines): (Vec<_>, Vec<_>) =
        (actual.lines().collect(), GOLDEN_EPSILON.lines().collect());
    assert_eq!(a_lines.len(), g_lines.len());
    assert_eq!(a_lines[0], g_lines[0]);
    for (a, g) in a_lines.iter().zip(&g_lines).skip(1) {
        let (a, g): (Vec<&str>, Vec<&str>) = (a.split(',').collect(), g.split(',').collect());
        assert_eq!(a[..3], g[..3]);
        let (ea, eg): (f64, f64) = (a[3].parse().unwrap(), g[3].parse().unwrap());
        assert!((ea - eg).abs() <= 1e-6 * eg.abs(), "{ea} vs {eg}");
    }
}

#[test]
fn artifact_layouts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let out_s = out.to_str().unwrap();
    solve(&out, "8");

    let samples = fs::read_to_string(out.join("samples-d08.csv")).unwrap();
    let mut lines = samples.lines();
    assert_eq!(lines.next(), Some("region,x1,psi_l,psi_u,v_u"));
    assert_eq!(samples.lines().count(), 1 + 2 * 401);
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[..2], ["x-neg", "-1"]);
    let psi_l: f64 = first[2].parse().unwrap();
    assert!((psi_l - 20.0 * (-10.0f64).exp()).abs() < 1e-8);

    let o = lsctl(&[
        "simulate",
        "--config",
        CONFIG,
        "--out",
        out_s,
        "--degrees",
        "8",
        "--runs",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = fs::read_to_string(out.join("simulate-d08/run-000.csv")).unwrap();
    assert!(
        run.starts_with("t,x1,u1,running_cost\n0,-0.5,"),
        "{}",
        &run[..40]
    );
    let summary = read_json(&out.join("simulate-d08/summary.json"));
    assert_eq!(
        summary["report"]["summary"]["runs"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
    assert_eq!(summary["report"]["settings"]["rng_seed"], json!(2024));

    let o = lsctl(&["oracle", "--config", CONFIG, "--out", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("oracle/oracle-x-pos.csv")).unwrap();
    assert!(csv.starts_with("x,psi,v\n0,1,0\n"), "{}", &csv[..30]);
    assert_eq!(csv.lines().count(), 1 + 2001);
    let oracle = read_json(&out.join("oracle/summary.json"));
    for region in oracle["report"].as_array().unwrap() {
        assert!(region["refinement_gap"].as_f64().unwrap() < 1e-5);
    }
}
