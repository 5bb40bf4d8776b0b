//! Manifold CSV files and run manifests.
//!
//! CSV layout: one header row, then one row per grid node `(t, s, xi)` with columns
//! `t, s, xi_1..xi_k, x_1..x_k, phi_plus_1..phi_plus_p, phi_minus_1..phi_minus_m`.
//! Numbers use scientific notation with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::hypotheses::HypothesisReport;
use crate::solver::{CenterField, Discretization, GraphField, GridSpec, SolverState, SolverSettings, SolverSummary};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

pub fn csv_header(k: usize, p: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "s".to_string()];
    h.extend((1..=k).map(|i| format!("xi_{i}")));
    h.extend((1..=k).map(|i| format!("x_{i}")));
    h.extend((1..=p).map(|i| format!("phi_plus_{i}")));
    h.extend((1..=m).map(|i| format!("phi_minus_{i}")));
    h
}

/// Renders the converged fields as CSV text.
pub fn manifold_csv(disc: &Discretization, state: &SolverState) -> String {
    let g = &disc.grid;
    let mut out = csv_header(g.k, g.p, g.m).join(",");
    out.push('\n');
    for j in 0..g.t.n {
        let t = g.t.node(j);
        for i in 0..g.s.n {
            let s = g.s.node(i);
            for l in 0..g.n_xi_total {
                let mut row = vec![t, s];
                row.extend(g.xi_point(l));
                row.extend_from_slice(state.x.get(j, i, l));
                row.extend_from_slice(state.phi.get(i, l));
                for (c, v) in row.iter().enumerate() {
                    if c > 0 {
                        out.push(',');
                    }
                    write!(out, "{v:.16e}").expect("writing to a String");
                }
                out.push('\n');
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisSummary {
    #[serde(with = "crate::nullable")]
    pub sigma: f64,
    #[serde(with = "crate::nullable")]
    pub omega: f64,
    #[serde(rename = "M")]
    #[serde(with = "crate::nullable")]
    pub m: f64,
    #[serde(rename = "N")]
    #[serde(with = "crate::nullable")]
    pub n: f64,
    #[serde(with = "crate::nullable")]
    pub q: f64,
    pub pass: bool,
}

impl From<&HypothesisReport> for HypothesisSummary {
    fn from(r: &HypothesisReport) -> Self {
        Self {
            sigma: r.sigma,
            omega: r.omega,
            m: r.m,
            n: r.n,
            q: r.contraction_factor,
            pass: r.pass,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_sha256: String,
    pub csv_file: String,
    pub csv_sha256: String,
    pub rows: usize,
    pub dims: (usize, usize, usize),
    pub grid: GridSpec,
    pub solver_settings: SolverSettings,
    pub hypotheses: Option<HypothesisSummary>,
    pub solver: SolverSummary,
    pub forced: bool,
    pub notes: Vec<String>,
}

pub const CSV_NAME: &str = "manifold.csv";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `manifold.csv` and `manifest.json` into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    disc: &Discretization,
    state: &SolverState,
    report: Option<&HypothesisReport>,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let csv = manifold_csv(disc, state);
    std::fs::write(dir.join(CSV_NAME), &csv)?;
    let g = &disc.grid;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_sha256: cfg.hash()?,
        csv_file: CSV_NAME.into(),
        csv_sha256: sha256_hex(csv.as_bytes()),
        rows: g.t.n * g.s.n * g.n_xi_total,
        dims: (g.k, g.p, g.m),
        grid: g.spec,
        solver_settings: cfg.solver,
        hypotheses: report.map(HypothesisSummary::from),
        solver: state.summary(),
        forced: report.is_none_or(|r| !r.pass),
        notes: vec![
            "sup metrics are maxima over the grid box and bound the true sup from below".into(),
            "invariance is certified on the grid box only".into(),
        ],
    };
    std::fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a manifest and checks it against `cfg` and the CSV next to it.
pub fn verify_run(manifest_path: &Path, cfg: &RunConfig) -> Result<(Manifest, String)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let hash = cfg.hash()?;
    if manifest.config_sha256 != hash {
        return Err(Error::ArtifactMismatch(format!(
            "manifest was produced by config {} but the given config hashes to {hash}",
            manifest.config_sha256
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let csv = std::fs::read_to_string(dir.join(&manifest.csv_file))?;
    let got = sha256_hex(csv.as_bytes());
    if got != manifest.csv_sha256 {
        return Err(Error::ArtifactMismatch(format!(
            "{} hashes to {got}, manifest records {}",
            manifest.csv_file, manifest.csv_sha256
        )));
    }
    Ok((manifest, csv))
}

/// Rebuilds the solver state stored in a manifold CSV on the grid of `disc`.
pub fn load_state(disc: &Discretization, manifest: &Manifest, csv: &str) -> Result<SolverState> {
    let g = &disc.grid;
    if manifest.grid != g.spec || manifest.dims != (g.k, g.p, g.m) {
        return Err(Error::ArtifactMismatch("manifest grid differs from the configured grid".into()));
    }
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let expected = csv_header(g.k, g.p, g.m);
    if header != expected {
        return Err(Error::ArtifactMismatch(format!("unexpected CSV header {header:?}")));
    }
    let mut x = CenterField::zeros(g);
    let mut phi = GraphField::zeros(g);
    let (k, w) = (g.k, g.p + g.m);
    let mut rows = 0usize;
    for (idx, line) in lines.enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::ArtifactMismatch(format!("row {}: {e}", idx + 1)))?;
        if vals.len() != expected.len() {
            return Err(Error::ArtifactMismatch(format!("row {} has {} columns", idx + 1, vals.len())));
        }
        let bad = || Error::ArtifactMismatch(format!("row {} is not on the grid", idx + 1));
        let j = g.t.index_of(vals[0]).ok_or_else(bad)?;
        let i = g.s.index_of(vals[1]).ok_or_else(bad)?;
        let l = g.xi_index(&vals[2..2 + k]).ok_or_else(bad)?;
        let o = x.offset(j, i, l);
        x.values[o..o + k].copy_from_slice(&vals[2 + k..2 + 2 * k]);
        let o = phi.offset(i, l);
        phi.values[o..o + w].copy_from_slice(&vals[2 + 2 * k..]);
        rows += 1;
    }
    if rows != manifest.rows {
        return Err(Error::ArtifactMismatch(format!("{rows} rows, manifest records {}", manifest.rows)));
    }
    let s = &manifest.solver;
    Ok(SolverState {
        x,
        phi,
        iterations: s.iterations,
        history: s.history.clone(),
        q: s.q,
        m: s.m,
        n: s.n,
        error_bound: s.error_bound,
        converged: s.converged,
        extrapolations: s.extrapolations,
        truncation_bound: s.truncation_bound,
        warnings: s.warnings.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::iterate_to_fixed_point;

    fn small_config() -> RunConfig {
        RunConfig::from_json(
            r#"{
            "family": {"kind": "exponential", "a": 0, "b": -1, "c": 0, "d": -1, "D": 1, "eps": 0},
            "perturbation": {"budget": "rho", "delta": 0.05, "gamma": 1},
            "grid": {"t_half": 10, "n_t": 21, "s_half": 2, "n_s": 5, "xi_half": 1, "n_xi": 3},
            "hypotheses": {"sigma": {"grid_points": 21}, "omega": {"grid_points": 21}}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let cfg = small_config();
        let mut settings = cfg.solver;
        settings.force = true;
        let (disc, state) = iterate_to_fixed_point(cfg.problem().unwrap(), cfg.grid, None, &settings).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_run(dir.path(), &cfg, &disc, &state, None).unwrap();
        assert_eq!(m.rows, 21 * 5 * 9);
        let (m2, csv) = verify_run(&dir.path().join(MANIFEST_NAME), &cfg).unwrap();
        let back = load_state(&disc, &m2, &csv).unwrap();
        assert_eq!(back.x.values, state.x.values);
        assert_eq!(back.phi.values, state.phi.values);

        let mut other = cfg.clone();
        other.seed += 1;
        assert!(matches!(
            verify_run(&dir.path().join(MANIFEST_NAME), &other),
            Err(Error::ArtifactMismatch(_))
        ));
        let tampered = csv.replacen("e-", "e+", 1);
        std::fs::write(dir.path().join(CSV_NAME), tampered).unwrap();
        assert!(matches!(
            verify_run(&dir.path().join(MANIFEST_NAME), &cfg),
            Err(Error::ArtifactMismatch(_))
        ));
    }
}
