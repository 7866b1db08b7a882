//! Result directory: `summary.json`, measure and bucket files, value-field CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EquilibriumResult, Exploitability, Mode};
use crate::error::Result;
use crate::model::MeasureSummary;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFlags {
    pub martingale_ok: bool,
    pub supermartingale_ok: bool,
    pub m_martingale_pvalue_proxy: f64,
    pub y0_vs_value_gap: f64,
    pub rollout_value: f64,
    pub rollout_se: f64,
    /// Per test law: largest `mean dU / se` and share of strictly negative steps.
    pub test_laws: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub schema_version: u32,
    pub mode: Mode,
    pub y0: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub noise_floor: Option<f64>,
    pub exploitability: Option<Exploitability>,
    pub certificate: Option<CertificateFlags>,
    pub times: Vec<f64>,
    pub mean_path: Vec<Vec<f64>>,
    pub bucket_counts: BTreeMap<String, usize>,
}

impl ResultSummary {
    pub fn of(r: &EquilibriumResult) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: r.mode,
            y0: r.y0,
            converged: r.converged,
            iterations: r.residual_history.len(),
            residual_history: r.residual_history.clone(),
            noise_floor: r.noise_floor,
            exploitability: r.exploitability.clone(),
            certificate: r.certificate.as_ref().map(|c| CertificateFlags {
                martingale_ok: c.martingale_ok,
                supermartingale_ok: c.supermartingale_ok,
                m_martingale_pvalue_proxy: c.m_martingale_pvalue_proxy,
                y0_vs_value_gap: c.y0_vs_value_gap,
                rollout_value: c.rollout_value,
                rollout_se: c.rollout_se,
                test_laws: c.u_increment_means.iter().map(|l| (l.label.clone(), l.max_z, l.strict_fraction)).collect(),
            }),
            times: r.measure.times.clone(),
            mean_path: r.measure.means.clone(),
            bucket_counts: r.buckets.iter().map(|(k, b)| (k.to_string(), b.count)).collect(),
        }
    }
}

fn write_moments<W: Write>(out: &mut W, m: &MeasureSummary, prefix: &str) -> Result<()> {
    for (j, t) in m.times.iter().enumerate() {
        let mut row = format!("{prefix}{t:?}");
        for v in m.means[j].iter().chain(&m.covs[j]) {
            row.push_str(&format!(",{v:?}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn moments_header(d: usize) -> String {
    let mut h = String::from("time");
    for k in 0..d {
        h.push_str(&format!(",mean_{k}"));
    }
    for r in 0..d {
        for c in 0..d {
            h.push_str(&format!(",cov_{r}_{c}"));
        }
    }
    h
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes the result directory, creating it if needed.
pub fn write_result(r: &EquilibriumResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = serde_json::to_string_pretty(&ResultSummary::of(r))?;
    s.push('\n');
    fs::write(dir.join("summary.json"), s)?;
    fs::write(dir.join("measure.json"), serde_json::to_string(&r.measure)?)?;

    let d = r.measure.dim;
    let mut out = create(dir, "measure_moments.csv")?;
    writeln!(out, "{}", moments_header(d))?;
    write_moments(&mut out, &r.measure, "")?;
    out.flush()?;

    let mut out = create(dir, "measure_histograms.csv")?;
    writeln!(out, "time,coord,lo,hi,mass")?;
    for (j, t) in r.measure.times.iter().enumerate() {
        for (k, h) in r.measure.histograms[j].iter().enumerate() {
            for (b, mass) in h.masses.iter().enumerate() {
                writeln!(out, "{t:?},{k},{:?},{:?},{mass:?}", h.edges[b], h.edges[b + 1])?;
            }
        }
    }
    out.flush()?;

    if !r.buckets.is_empty() {
        let mut out = create(dir, "buckets.csv")?;
        writeln!(out, "code,count,law,{}", moments_header(d))?;
        for (code, b) in &r.buckets {
            write_moments(&mut out, &b.interpolated, &format!("{code},{},interpolated,", b.count))?;
            write_moments(&mut out, &b.state, &format!("{code},{},state,", b.count))?;
        }
        out.flush()?;
        let json: BTreeMap<String, &super::BucketSummary> = r.buckets.iter().map(|(k, v)| (k.to_string(), v)).collect();
        fs::write(dir.join("buckets.json"), serde_json::to_string(&json)?)?;
    }

    if let Some(vf) = &r.value_field {
        let mut out = create(dir, "value_field.csv")?;
        writeln!(out, "time,x,value,gradient,drift_action,diffusion_action")?;
        for (j, t) in vf.times.iter().enumerate() {
            for i in 0..vf.grid.points {
                let (a, b) = vf.argmax[j][i];
                writeln!(out, "{t:?},{:?},{:?},{:?},{a},{b}", vf.grid.x(i), vf.values[j][i], vf.gradients[j][i])?;
            }
        }
        out.flush()?;
    }
    Ok(())
}

pub fn load_summary(dir: &Path) -> Result<ResultSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?)
}

pub fn load_measure(dir: &Path) -> Result<MeasureSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("measure.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bestresponse::{Scheme, SpaceGrid};
    use crate::equilibrium::{solve_mfg_no_common, BestResponseMethod, Coupling, SolverParams};
    use crate::testing::quadratic_terminal;

    #[test]
    fn written_results_load_back() {
        let spec = quadratic_terminal(&[-1.0, 0.0, 1.0], &[1.0]);
        let p = SolverParams {
            time_steps: 20,
            particles: 200,
            seed: 1,
            best_response: BestResponseMethod::Hjb { grid: SpaceGrid::new(-4.0, 4.0, 21).unwrap(), scheme: Scheme::Explicit },
            beta: 1.0,
            max_iter: 5,
            tol: 5e-2,
            bins: 10,
            min_bucket: 50,
            coupling: Coupling::Conditional,
            exploitability_particles: None,
            certificate: None,
        };
        let r = solve_mfg_no_common(&spec, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_result(&r, dir.path()).unwrap();
        let s = load_summary(dir.path()).unwrap();
        assert_eq!(s, ResultSummary::of(&r));
        assert_eq!(load_measure(dir.path()).unwrap(), r.measure);
        let raw = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(raw.ends_with("}\n"));
        let csv = std::fs::read_to_string(dir.path().join("measure_moments.csv")).unwrap();
        assert_eq!(csv.lines().count(), 22);
    }
}
