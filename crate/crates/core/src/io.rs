//! CSV emission and run manifests.
//!
//! Floats are written with 17 significant digits in scientific notation, so every value
//! round-trips and reruns can be compared byte for byte. Files are written to a
//! temporary sibling and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundCurve, GrowthIntegrals};
use crate::domain::Grid;
use crate::elliptic::ValueField;
use crate::flow::{Decomposition, FlowTrajectory};
use crate::hamiltonian::BiasRow;
use crate::hjb::HjbSolution;
use crate::montecarlo::McEstimate;
use crate::policy::{FeatureField, Policy};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a header and rows atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = csv::Writer::from_writer(tmp.as_file());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn floats(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|x| fmt_f64(*x)).collect()
}

/// `(x, v, dv)` on every node.
pub fn write_value_field(path: &Path, grid: &Grid, v: &ValueField) -> std::io::Result<()> {
    let dv = v.full_gradient(grid);
    let rows: Vec<Vec<String>> = (0..grid.n_nodes()).map(|i| floats(&[grid.nodes[i], v.v[i], dv[i]])).collect();
    write_csv(path, &["x", "v", "dv"], &rows)
}

/// `(x, v_star, dv, argmin)`; `argmin` is the selected action on interior nodes and empty at the boundary.
pub fn write_hjb_solution(path: &Path, grid: &Grid, sol: &HjbSolution) -> std::io::Result<()> {
    let dv = sol.v_star.full_gradient(grid);
    let n = grid.n_nodes();
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let a = if i == 0 || i == n - 1 { String::new() } else { fmt_f64(sol.selected_actions[i - 1]) };
            vec![fmt_f64(grid.nodes[i]), fmt_f64(sol.v_star.v[i]), fmt_f64(dv[i]), a]
        })
        .collect();
    write_csv(path, &["x", "v_star", "dv", "argmin"], &rows)
}

pub fn write_residual_history(path: &Path, history: &[f64]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = history.iter().enumerate().map(|(k, r)| vec![k.to_string(), fmt_f64(*r)]).collect();
    write_csv(path, &["iteration", "residual"], &rows)
}

/// `(s, tau_s, v_reg_<node>…, v_unreg_<node>…, kl_mass)`
pub fn write_trajectory(path: &Path, traj: &FlowTrajectory) -> std::io::Result<()> {
    let mut header: Vec<String> = vec!["s".into(), "tau_s".into()];
    header.extend(traj.probes.iter().map(|j| format!("v_reg_{j}")));
    header.extend(traj.probes.iter().map(|j| format!("v_unreg_{j}")));
    header.push("kl_mass".into());
    let rows: Vec<Vec<String>> = (0..traj.times.len())
        .map(|r| {
            let mut row = floats(&[traj.times[r], traj.taus[r]]);
            row.extend(floats(&traj.values_at_probe[r]));
            row.extend(floats(&traj.unregularized_values[r]));
            row.push(fmt_f64(traj.kl_mass[r]));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &rows)
}

pub fn write_decomposition(path: &Path, grid: &Grid, rows: &[Decomposition]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|d| {
            floats(&[
                d.s,
                d.tau,
                grid.nodes[d.probe],
                d.negative_kl_term,
                d.optimization_error,
                d.regularization_bias,
                d.total,
            ])
        })
        .collect();
    write_csv(
        path,
        &["s", "tau", "x", "negative_kl_term", "optimization_error", "regularization_bias", "total"],
        &rows,
    )
}

/// Long format `(scheduler, s, log_I1, log_I2)`.
pub fn write_growth(path: &Path, rows: &[(String, GrowthIntegrals)]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, g)| vec![name.clone(), fmt_f64(g.s), fmt_f64(g.log_i1), fmt_f64(g.log_i2)])
        .collect();
    write_csv(path, &["scheduler", "s", "log_I1", "log_I2"], &rows)
}

/// Long format `(beta, S, bound)`.
pub fn write_figure(path: &Path, curves: &[BoundCurve]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> =
        curves.iter().flat_map(|c| c.points.iter().map(move |(b, v)| floats(&[*b, c.horizon, *v]))).collect();
    write_csv(path, &["beta", "S", "bound"], &rows)
}

pub fn write_mc_estimates(path: &Path, est: &[McEstimate]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = est
        .iter()
        .map(|e| {
            vec![
                fmt_f64(e.x0),
                fmt_f64(e.tau),
                fmt_f64(e.mean),
                fmt_f64(e.stderr),
                e.n_paths.to_string(),
                fmt_f64(e.mean_exit_time),
                e.seed.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["x0", "tau", "mean", "stderr", "n_paths", "mean_exit_time", "seed"], &rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCheckRow {
    pub x: f64,
    pub pde_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub z_score: f64,
}

pub fn write_mc_check(path: &Path, rows: &[McCheckRow]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> =
        rows.iter().map(|r| floats(&[r.x, r.pde_value, r.mc_mean, r.mc_stderr, r.z_score])).collect();
    write_csv(path, &["x", "pde_value", "mc_mean", "mc_stderr", "z_score"], &rows)
}

pub fn write_bias_sweep(path: &Path, rows: &[BiasRow]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> =
        rows.iter().map(|r| floats(&[r.tau, r.p, r.soft, r.hard, r.gap, r.gap_over_tau_log])).collect();
    write_csv(path, &["tau", "p", "soft", "hard", "gap", "gap_over_tau_log"], &rows)
}

/// Row per interior node, column per action node.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> std::io::Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|k| format!("a{k}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = m.rows().into_iter().map(|r| r.iter().map(|x| fmt_f64(*x)).collect()).collect();
    write_csv(path, &header, &rows)
}

pub fn write_feature(path: &Path, z: &FeatureField) -> std::io::Result<()> {
    write_matrix(path, &z.values)
}

pub fn write_policy(path: &Path, p: &Policy) -> std::io::Result<()> {
    write_matrix(path, &p.weights)
}

pub fn read_matrix(path: &Path) -> std::io::Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let ncols = r.headers()?.len();
    let mut data = Vec::new();
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != ncols {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("row {} has {} columns", nrows + 1, rec.len())));
        }
        for field in rec.iter() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("row {}: {e}", nrows + 1)))?;
            data.push(x);
        }
        nrows += 1;
    }
    Array2::from_shape_vec((nrows, ncols), data).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time: f64,
    pub resolved_config: String,
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(std::io::Error::other)?;
    write_text(path, &(text + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn floats_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let m = array![[0.1, -2.5e-300], [1.0 / 3.0, 7.0]];
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("a0,a1\n"));
    }

    #[test]
    fn atomic_write_leaves_single_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.csv");
        write_csv(&path, &["a"], &[vec!["1".into()]]).unwrap();
        write_csv(&path, &["a"], &[vec!["2".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a\n2\n");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn value_field_csv() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(0.0, 1.0, 3).unwrap();
        let v: Vec<f64> = grid.nodes.iter().map(|x| x * (1.0 - x)).collect();
        let dv = crate::elliptic::central_gradient(&v, grid.spacing);
        let field = ValueField { v, dv, tau: 0.0 };
        let path = dir.path().join("v.csv");
        write_value_field(&path, &grid, &field).unwrap();
        let rows = read_matrix(&path).unwrap();
        assert_eq!(rows.dim(), (5, 3));
        // quadratic, so the one-sided ends are exact
        for i in 0..5 {
            assert!((rows[[i, 2]] - (1.0 - 2.0 * grid.nodes[i])).abs() < 1e-14);
        }
    }
}
