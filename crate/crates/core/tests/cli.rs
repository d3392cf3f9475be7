use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pmdlab::config::Config;
use pmdlab::io::{read_matrix, RunManifest};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn pmdlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmdlab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("PMDLAB_OUT")
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn manifest(out: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_hjb_writes_one_file_per_tau_plus_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["solve-hjb", &cfg("lq.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for tag in ["0.5", "0.1", "0"] {
        let mut r = csv::Reader::from_path(dir.path().join(format!("hjb_tau_{tag}.csv"))).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 51);
        // boundary rows carry no action
        assert!(rows[0][3].is_empty() && rows[50][3].is_empty() && !rows[25][3].is_empty());
        assert!(dir.path().join(format!("hjb_tau_{tag}_residuals.csv")).exists());
    }
    let solutions = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.starts_with("hjb_tau_") && !n.contains("residuals")
        })
        .count();
    assert_eq!(solutions, 3);
    let m = manifest(dir.path());
    assert_eq!(m.command, "solve-hjb");
    assert_eq!(m.outputs.len(), 7);
}

#[test]
fn zero_data_values_vanish() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["solve-hjb", &cfg("zero.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for tag in ["0.5", "0.1", "0"] {
        let mut r = csv::Reader::from_path(dir.path().join(format!("hjb_tau_{tag}.csv"))).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["x", "v_star", "dv", "argmin"]);
        for rec in r.records() {
            let v: f64 = rec.unwrap()[1].parse().unwrap();
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn malformed_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(configs().join("lq.toml")).unwrap().replace("n_interior = 49", "n_intreior = 49");
    std::fs::write(&bad, text).unwrap();
    let o = pmdlab(&dir.path().join("out"), &["solve-hjb", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("n_intreior"), "{msg}");
    assert!(msg.contains("line"), "{msg}");

    let o = pmdlab(&dir.path().join("out"), &["solve-hjb", &cfg("lq.toml"), "--set", "grid.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn constant_tau_flow_decreases_regularized_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["run-flow", &cfg("lq.toml"), "--set", "flow.horizon=2.0", "--set", "flow.record_every=1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = read_matrix(&dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(t.nrows(), 21);
    for col in 2..5 {
        for r in 1..t.nrows() {
            assert!(t[[r, col]] <= t[[r - 1, col]] + 1e-12, "column {col} row {r}");
        }
    }
    let d = read_matrix(&dir.path().join("decomposition.csv")).unwrap();
    assert_eq!(d.nrows(), 21 * 3);
    for r in 0..d.nrows() {
        // the three terms add up to the total error
        assert!((d[[r, 3]] + d[[r, 4]] + d[[r, 5]] - d[[r, 6]]).abs() < 1e-12);
        assert!(d[[r, 3]] <= 1e-12 && d[[r, 4]] >= -1e-9 && d[[r, 5]] >= -1e-9);
    }
    let z = read_matrix(&dir.path().join("z_final.csv")).unwrap();
    assert_eq!(z.dim(), (49, 32));
}

#[test]
fn reruns_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["mc-check", &cfg("lq.toml"), "--set", "mc.n_paths=2000"];
    assert_eq!(pmdlab(a.path(), &args).status.code(), Some(0));
    assert_eq!(pmdlab(b.path(), &args).status.code(), Some(0));
    for f in ["mc_check.csv", "mc_estimates.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let args = ["run-flow", &cfg("discrete_anneal.toml"), "--set", "flow.horizon=5.0"];
    assert_eq!(pmdlab(a.path(), &args).status.code(), Some(0));
    assert_eq!(pmdlab(b.path(), &args).status.code(), Some(0));
    for f in ["trajectory.csv", "decomposition.csv", "z_final.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(manifest(a.path()).config_digest, manifest(b.path()).config_digest);
}

#[test]
fn seed_flag_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["mc-check", &cfg("lq.toml"), "--set", "mc.n_paths=500", "--set", "mc.bias_allowance=1.0"];
    pmdlab(a.path(), &args);
    let mut with_seed = args.to_vec();
    with_seed.extend(["--seed", "99"]);
    pmdlab(b.path(), &with_seed);
    assert_eq!(manifest(a.path()).seed, 7);
    assert_eq!(manifest(b.path()).seed, 99);
    assert_ne!(manifest(a.path()).config_digest, manifest(b.path()).config_digest);
    assert_ne!(std::fs::read(a.path().join("mc_check.csv")).unwrap(), std::fs::read(b.path().join("mc_check.csv")).unwrap());
}

#[test]
fn manifest_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["solve-hjb", &cfg("lq.toml"), "--set", "grid.n_interior=19"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(dir.path());
    let back = Config::from_str_with(&m.resolved_config, &[]).unwrap();
    assert_eq!(back.grid.as_ref().unwrap().n_interior, 19);
    assert_eq!(back.digest(), m.config_digest);
    assert_eq!(back.resolved(), m.resolved_config);
    assert_eq!(m.tool_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_pmdlab"))
        .args(["sweep-bounds", &cfg("bounds.toml")])
        .env("PMDLAB_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("figure.csv").exists());
    assert!(out.join("growth.csv").exists());
}

#[test]
fn sweep_bounds_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["reproduce-figure"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("figure.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["beta", "S", "bound"]);
    let rows: Vec<Vec<f64>> = r.records().map(|r| r.unwrap().iter().map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 19 * 4);
    assert!(rows.iter().all(|r| r[2].is_finite() && r[2] > 0.0));
    assert_eq!(rows.iter().map(|r| r[1]).fold(0.0, f64::max), 1e4);

    let one = dir.path().join("one");
    let o = pmdlab(&one, &["sweep-bounds", &cfg("bounds.toml"), "--set", "bounds.betas=0.5"]);
    // a scalar cannot replace a list
    assert_eq!(o.status.code(), Some(1));
    let single = dir.path().join("single.toml");
    std::fs::write(&single, "[bounds]\nbetas = [0.5]\nhorizons = [100.0]\n").unwrap();
    let o = pmdlab(&one, &["sweep-bounds", single.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_matrix(&one.join("figure.csv")).unwrap().nrows(), 1);

    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "[bounds]\nbetas = []\nhorizons = [100.0]\n").unwrap();
    let o = pmdlab(&one, &["sweep-bounds", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bounds.betas"));
}

#[test]
fn mc_check_manufactured_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["mc-check", &cfg("manufactured.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = read_matrix(&dir.path().join("mc_check.csv")).unwrap();
    for r in 0..m.nrows() {
        let x = m[[r, 0]];
        assert!((m[[r, 1]] - x * (1.0 - x)).abs() < 1e-12);
    }
}

#[test]
fn mc_check_constant_exit_cost() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(
        dir.path(),
        &["mc-check", &cfg("manufactured.toml"), "--set", "lq.f_bar=0.0", "--set", "g=1.0", "--set", "mc.n_paths=200"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = read_matrix(&dir.path().join("mc_check.csv")).unwrap();
    for r in 0..m.nrows() {
        assert!((m[[r, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(m[[r, 2]], 1.0);
    }
}

#[test]
fn mc_check_detects_mismatched_tau() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["mc-check", &cfg("lq.toml"), "--set", "mc.n_paths=4000", "--set", "mc.pde_tau=0.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("z="));
    let m = read_matrix(&dir.path().join("mc_check.csv")).unwrap();
    assert!((0..m.nrows()).any(|r| m[[r, 4]].abs() > 3.0));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn restart_from_final_feature() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = pmdlab(&first, &["run-flow", &cfg("lq.toml"), "--set", "flow.horizon=1.0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let z = first.join("z_final.csv");
    let second = dir.path().join("second");
    let set = format!("flow.z0={}", z.display());
    let o = pmdlab(&second, &["run-flow", &cfg("lq.toml"), "--set", "flow.horizon=1.0", "--set", &set]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = read_matrix(&first.join("trajectory.csv")).unwrap();
    let b = read_matrix(&second.join("trajectory.csv")).unwrap();
    // the restarted run begins where the first ended
    for c in 2..a.ncols() {
        assert!((b[[0, c]] - a[[a.nrows() - 1, c]]).abs() < 1e-14);
    }
}

#[test]
fn numerical_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmdlab(dir.path(), &["run-flow", &cfg("lq.toml"), "--set", "flow.dt=5.0", "--set", "flow.horizon=5.0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stability"));
}
