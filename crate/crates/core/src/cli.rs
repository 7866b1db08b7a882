//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bench;
use crate::bestresponse::{
    solve_hjb_grid, DiffusionSelection, RegressionBasis, Scheme, SpaceGrid,
};
use crate::builtin::{self, TableModel};
use crate::equilibrium::{
    best_response, solve_mfg_common, solve_mfg_no_common, write_result, BestResponseMethod, CertificateParams,
    Coupling, EquilibriumResult, SolverParams, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::hamiltonian::driver_f;
use crate::model::{probe_model, MeasureSummary, ModelSpec};

/// Number of probe points used by `validate` and before every solve.
pub const VALIDATION_PROBES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Builtin {
        name: String,
        #[serde(default = "empty_object")]
        params: serde_json::Value,
    },
    Table(TableModel),
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        match self {
            ModelConfig::Builtin { name, params } => builtin::from_name(name, params.clone()),
            ModelConfig::Table(t) => t.build(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub time_steps: usize,
    pub particles: usize,
    #[serde(default)]
    pub common_noise_level: Option<u32>,
    #[serde(default)]
    pub space_grid: Option<SpaceGrid>,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Hjb,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub method: MethodName,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub tol: f64,
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default)]
    pub family: Vec<DiffusionSelection>,
    #[serde(default = "default_min_bucket")]
    pub min_bucket: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub exploitability_particles: Option<usize>,
    #[serde(default)]
    pub certificate: Option<CertificateParams>,
}

fn default_beta() -> f64 {
    0.5
}
fn default_max_iter() -> usize {
    30
}
fn default_min_bucket() -> usize {
    50
}
fn default_bins() -> usize {
    50
}

/// Scenario file, version 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub discretization: Discretization,
    pub solver: SolverConfig,
    pub seed: u64,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::ConfigParse { line: e.line(), message: e.to_string() })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::ConfigParse {
                line: 1,
                message: format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version),
            });
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        let bad = |message: String| Err(Error::ConfigParse { line: 0, message });
        if self.discretization.time_steps == 0 || self.discretization.time_steps > 100_000 {
            return bad("discretization.time_steps must be in 1..=100000".into());
        }
        if self.discretization.particles == 0 || self.discretization.particles > 10_000_000 {
            return bad("discretization.particles must be in 1..=10000000".into());
        }
        if self.solver.method == MethodName::Hjb && self.discretization.space_grid.is_none() {
            return bad("discretization.space_grid is required by the hjb method".into());
        }
        if self.solver.method == MethodName::Regression && self.solver.family.is_empty() {
            return bad("solver.family is required by the regression method".into());
        }
        Ok(())
    }

    pub fn solver_params(&self, seed: u64) -> SolverParams {
        let best_response = match self.solver.method {
            MethodName::Hjb => BestResponseMethod::Hjb {
                grid: self.discretization.space_grid.clone().expect("checked at load"),
                scheme: self.discretization.scheme,
            },
            MethodName::Regression => {
                BestResponseMethod::Regression { basis: self.solver.basis.clone(), family: self.solver.family.clone() }
            }
        };
        SolverParams {
            time_steps: self.discretization.time_steps,
            particles: self.discretization.particles,
            seed,
            best_response,
            beta: self.solver.beta,
            max_iter: self.solver.max_iter,
            tol: self.solver.tol,
            bins: self.solver.bins,
            min_bucket: self.solver.min_bucket,
            coupling: self.solver.coupling,
            exploitability_particles: self.solver.exploitability_particles,
            certificate: self.solver.certificate.clone(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Mean field games with controlled drift and volatility")]
struct Cli {
    /// Worker threads, 0 for one per core (also read from MFG_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the equilibrium and write the result directory.
    SolveMfg(RunArgs),
    /// Best response to a frozen measure (the zero-drift law unless --measure is given).
    BestResponse {
        #[command(flatten)]
        run: RunArgs,
        /// `measure.json` written by solve-mfg.
        #[arg(long)]
        measure: Option<PathBuf>,
    },
    /// Evaluate the constrained driver at one point.
    HamiltonianCheck {
        #[arg(long)]
        config: PathBuf,
        /// Gradient, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        z: Vec<f64>,
        /// Target covariance, row-major and comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// State, comma separated; defaults to the initial state.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reference-oracle suite and print a pass/fail table.
    Benchmark {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Probe the model's coefficients against their declared bounds.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = VALIDATION_PROBES)]
        probes: usize,
    },
}

/// Parses `argv` (program name first), dispatches and returns the exit code:
/// 0 on success, 2 when the fixed point was not reached, 1 on any other error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand => {
                    let name = e
                        .get(clap::error::ContextKind::InvalidSubcommand)
                        .map(|v| v.to_string())
                        .unwrap_or_default();
                    eprintln!("error: {}", Error::UnknownSubcommand(name));
                    1
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    let threads = cli.threads.or_else(|| std::env::var("MFG_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Error::NotConverged { best_residual, .. }) => {
            error!("fixed point not reached, best residual {best_residual:.4e}; partial results written");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn out_dir(arg: Option<PathBuf>, cfg: Option<&ScenarioConfig>) -> PathBuf {
    arg.or_else(|| cfg.and_then(|c| c.outputs.clone())).unwrap_or_else(|| PathBuf::from("mfg-out"))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(dir.join(name), s)?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SolveMfg(args) => {
            let cfg = ScenarioConfig::load(&args.config)?;
            let seed = args.seed.unwrap_or(cfg.seed);
            let spec = cfg.model.build()?;
            crate::model::validate_model(&spec, VALIDATION_PROBES, seed)?;
            let params = cfg.solver_params(seed);
            let dir = out_dir(args.out, Some(&cfg));
            let outcome = match cfg.discretization.common_noise_level {
                None => solve_mfg_no_common(&spec, &params),
                Some(n) => solve_mfg_common(&spec, n, &params),
            };
            match outcome {
                Ok(r) => {
                    write_result(&r, &dir)?;
                    report(&r, &dir);
                    Ok(())
                }
                Err(Error::NotConverged { best_residual, partial }) => {
                    write_result(&partial, &dir)?;
                    Err(Error::NotConverged { best_residual, partial })
                }
                Err(e) => Err(e),
            }
        }
        Command::BestResponse { run, measure } => {
            let cfg = ScenarioConfig::load(&run.config)?;
            let seed = run.seed.unwrap_or(cfg.seed);
            let spec = cfg.model.build()?;
            let params = cfg.solver_params(seed);
            let m = match measure {
                Some(p) => serde_json::from_str::<MeasureSummary>(&fs::read_to_string(p)?)?,
                None => MeasureSummary::dirac(&params.times(spec.horizon), &spec.x0),
            };
            let dir = out_dir(run.out, Some(&cfg));
            let br = best_response(&spec, &m, &params)?;
            write_json(&dir, "best_response.json", &serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "y0": br.y0,
                "method": cfg.solver.method,
            }))?;
            if let BestResponseMethod::Hjb { grid, scheme } = &params.best_response {
                let vf = solve_hjb_grid(&spec, &m, grid, *scheme)?;
                let mut csv = String::from("x,value,gradient,drift_action,diffusion_action\n");
                for i in 0..vf.grid.points {
                    let (a, b) = vf.argmax[0][i];
                    csv.push_str(&format!(
                        "{:?},{:?},{:?},{a},{b}\n",
                        vf.grid.x(i),
                        vf.values[0][i],
                        vf.gradients[0][i]
                    ));
                }
                fs::write(dir.join("value_slice.csv"), csv)?;
            }
            info!("Y0 = {:.6}", br.y0);
            println!("{}", serde_json::json!({ "y0": br.y0 }));
            Ok(())
        }
        Command::HamiltonianCheck { config, z, sigma, t, x, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let spec = cfg.model.build()?;
            let d = spec.dim_state;
            if z.len() != d || sigma.len() != d * d {
                return Err(Error::InvalidModel(format!("--z needs {d} values and --sigma {} values", d * d)));
            }
            let x = x.unwrap_or_else(|| spec.x0.clone());
            let m = MeasureSummary::dirac(&cfg.solver_params(cfg.seed).times(spec.horizon), &spec.x0);
            let target = DMatrix::from_row_slice(d, d, &sigma);
            let ev = driver_f(&spec, t, &x, &z, &target, &m)?;
            let json = serde_json::json!({
                "F": ev.value,
                "qa": ev.strategy.qa,
                "qb": ev.strategy.qb,
                "gap": ev.feasibility_gap,
            });
            if let Some(dir) = out {
                write_json(&dir, "hamiltonian.json", &json)?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Benchmark { out, seed } => {
            let rows = bench::suite(seed)?;
            println!("{:<34} {:>14} {:>14} {:>10}  result", "check", "value", "reference", "tolerance");
            for r in &rows {
                println!(
                    "{:<34} {:>14.6e} {:>14.6e} {:>10.1e}  {}",
                    r.name,
                    r.value,
                    r.reference,
                    r.tolerance,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                write_json(&dir, "benchmark.json", &rows)?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Error::InvalidModel(format!("{failed} benchmark checks failed")));
            }
            Ok(())
        }
        Command::Validate { config, out, probes } => {
            let cfg = ScenarioConfig::load(&config)?;
            let spec = cfg.model.build()?;
            let report = probe_model(&spec, probes, cfg.seed)?;
            if let Some(dir) = out {
                write_json(&dir, "validation.json", &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            crate::model::validate_model(&spec, probes, cfg.seed)?;
            Ok(())
        }
    }
}

fn report(r: &EquilibriumResult, dir: &Path) {
    info!(
        "done: {} iterations, Y0 {:.6}, converged {}, results in {}",
        r.residual_history.len(),
        r.y0,
        r.converged,
        dir.display()
    );
    if let Some(e) = &r.exploitability {
        info!("exploitability {:.3e} (se {:.1e})", e.value, e.se);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "schema_version": 1,
  "model": { "builtin": { "name": "twovol", "params": { "sigma": [1.0, 2.0], "x0": 0.0, "horizon": 1.0 } } },
  "discretization": { "time_steps": 200, "particles": 100, "space_grid": { "lo": -10.0, "hi": 10.0, "points": 101 } },
  "solver": {},
  "seed": 1
}"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.solver.beta, 0.5);
        assert_eq!(cfg.solver.method, MethodName::Hjb);
        let p = cfg.solver_params(9);
        assert_eq!(p.seed, 9);
        assert!(matches!(p.best_response, BestResponseMethod::Hjb { .. }));
        cfg.model.build().unwrap();
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let bad = MINIMAL.replace("\"seed\": 1", "\"seed\": 1,\n  \"sede\": 2");
        match ScenarioConfig::parse(&bad) {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let bad = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(ScenarioConfig::parse(&bad), Err(Error::ConfigParse { .. })));
    }

    #[test]
    fn hjb_needs_a_space_grid() {
        let bad = MINIMAL.replace(", \"space_grid\": { \"lo\": -10.0, \"hi\": 10.0, \"points\": 101 }", "");
        assert!(matches!(ScenarioConfig::parse(&bad), Err(Error::ConfigParse { .. })));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["mfg", "frobnicate"]), 1);
        assert_eq!(run(["mfg", "validate", "--config", "/nonexistent/x.json"]), 1);
        assert_eq!(run(["mfg", "--help"]), 0);
    }

    #[test]
    fn hamiltonian_check_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, MINIMAL).unwrap();
        let out = dir.path().join("o");
        let code = run([
            "mfg",
            "--quiet",
            "hamiltonian-check",
            "--config",
            cfg.to_str().unwrap(),
            "--z",
            "0.7",
            "--sigma",
            "2.5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("hamiltonian.json")).unwrap()).unwrap();
        // drift actions default to {0}
        assert_eq!(v["F"], 0.0);
        assert_eq!(run(["mfg", "hamiltonian-check", "--config", cfg.to_str().unwrap(), "--z", "1", "--sigma", "9"]), 1);
    }
}
