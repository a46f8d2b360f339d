//! Command-line front end: problem files in, CSV artifacts and verdict
//! summaries out.
//!
//! Exit codes: 0 when every verdict passes, 1 when a verdict fails or a
//! solve hits a numeric error, 2 on input errors (bad flags, unreadable
//! files, malformed problems). Outputs are buffered and land only after a
//! command's computation has succeeded, so nothing is written on exit 2 and
//! reruns overwrite artifacts with bit-identical bytes (nothing in the
//! outputs depends on wall-clock time or scheduling).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate_assumptions, ProblemData};
use crate::montecarlo::{
    closed_loop_moments, cross_validate, simulate_closed_loop, CrossValidationReport,
};
use crate::numerics::{DecayFit, Trajectory, PSD_TOL};
use crate::periodic_lq::solve_periodic_law;
use crate::riccati::{solve_finite_horizon, solve_stationary, stability_report, Method, Route};
use crate::stability::DetectabilityVerdict;
use crate::turnpike::{analyze_horizons, GapFitReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT_FAILURE: i32 = 1;
pub const EXIT_INPUT_ERROR: i32 = 2;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "mflq",
    version,
    about = "Periodic mean-field linear-quadratic control: stationary solvers, turnpike diagnostics, and a particle cross-check"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check the weight conditions and coefficient bounds of a problem file
    Validate {
        /// problem description (JSON)
        problem: PathBuf,
    },
    /// Mean-square stability, stabilizability and detectability verdicts
    Stability {
        problem: PathBuf,
    },
    /// Solve the coupled backward system on [0, T], write trajectories to CSV
    Riccati {
        problem: PathBuf,
        /// horizon in whole periods
        #[arg(long = "T", value_name = "PERIODS")]
        horizon: usize,
        #[arg(short, long, default_value = ".", value_name = "DIR")]
        output_dir: PathBuf,
    },
    /// Periodic Riccati equations plus the periodic law; one period of every
    /// quantity to CSV with a JSON summary
    Periodic {
        problem: PathBuf,
        #[arg(long, value_enum, default_value_t = RouteArg::Shifted)]
        route: RouteArg,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// acceptance threshold for equation residuals
        #[arg(long, default_value_t = 1e-6)]
        residual_tol: f64,
        #[arg(short, long, default_value = ".", value_name = "DIR")]
        output_dir: PathBuf,
    },
    /// Gap curves and exponential turnpike fits for one or more horizons
    Turnpike {
        problem: PathBuf,
        /// horizons in whole periods, comma-separated (e.g. --T 10,20)
        #[arg(long = "T", value_name = "PERIODS", value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
        /// initial state components, comma-separated (defaults to all ones)
        #[arg(long, value_delimiter = ',', value_name = "X", allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(short, long, default_value = ".", value_name = "DIR")]
        output_dir: PathBuf,
    },
    /// Monte Carlo cross-check of the closed-loop means against the
    /// deterministic propagation
    Simulate {
        problem: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// horizon in whole periods
        #[arg(long = "T", value_name = "PERIODS", default_value_t = 5)]
        horizon: usize,
        /// Euler sub-steps per grid step
        #[arg(long, default_value_t = 1)]
        substeps: usize,
        /// initial state components, comma-separated (defaults to all ones)
        #[arg(long, value_delimiter = ',', value_name = "X", allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(short, long, default_value = ".", value_name = "DIR")]
        output_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RouteArg {
    Shifted,
    Direct,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Route {
        match r {
            RouteArg::Shifted => Route::Shifted,
            RouteArg::Direct => Route::Direct,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Kleinman,
    HorizonExtension,
    Both,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Kleinman => Method::Kleinman,
            MethodArg::HorizonExtension => Method::Horizon,
            MethodArg::Both => Method::Both,
        }
    }
}

/// Normalized configuration a subcommand executes against.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem_path: PathBuf,
    pub output_dir: PathBuf,
    /// horizons in whole periods; every entry at least 1
    pub horizons: Vec<usize>,
    pub route: Route,
    pub method: Method,
    pub residual_tol: f64,
    pub particles: usize,
    pub seed: u64,
    pub substeps: usize,
    pub x0: Option<Vec<f64>>,
}

impl RunConfig {
    fn new(problem_path: PathBuf) -> Self {
        RunConfig {
            problem_path,
            output_dir: PathBuf::from("."),
            horizons: Vec::new(),
            route: Route::Shifted,
            method: Method::Kleinman,
            residual_tol: 1e-6,
            particles: 10_000,
            seed: 0,
            substeps: 1,
            x0: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.horizons.iter().any(|&k| k == 0) {
            return Err(Error::Input(
                "horizons are whole periods and must be at least 1".into(),
            ));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::Input(format!(
                "residual tolerance must be positive, got {}",
                self.residual_tol
            )));
        }
        Ok(())
    }

    fn load_problem(&self) -> Result<ProblemData> {
        ProblemData::from_file(&self.problem_path)
    }

    fn initial_state(&self, n: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            None => Ok(DVector::from_element(n, 1.0)),
            Some(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(Error::Input(format!(
                "initial state has {} components, the problem has n = {n}",
                v.len()
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Buffered artifacts; the filesystem is untouched until a command's
/// computation has fully succeeded.
struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn write(&self) -> Result<()> {
        if self.files.is_empty() {
            return Ok(());
        }
        fs::create_dir_all(&self.dir)?;
        for (name, bytes) in &self.files {
            fs::write(self.dir.join(name), bytes)?;
        }
        for (name, _) in &self.files {
            println!("wrote {}", self.dir.join(name).display());
        }
        Ok(())
    }
}

/// 17 significant digits; enough to round-trip every f64
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn entry_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    if cols == 1 {
        (1..=rows).map(|i| format!("{prefix}_{i}")).collect()
    } else {
        (1..=rows)
            .flat_map(|i| (1..=cols).map(move |j| format!("{prefix}_{i}_{j}")))
            .collect()
    }
}

/// CSV with a time column followed by the row-major entries of each series.
fn series_csv(series: &[(&str, &Trajectory)]) -> String {
    let mut header = vec!["t".to_string()];
    for (prefix, tr) in series {
        let m0 = tr.at(0);
        header.extend(entry_names(prefix, m0.nrows(), m0.ncols()));
    }
    let mut out = header.join(",");
    out.push('\n');
    for j in 0..series[0].1.len() {
        let mut row = vec![fmt17(series[0].1.time(j))];
        for (_, tr) in series {
            let m = tr.at(j);
            for i in 0..m.nrows() {
                for c in 0..m.ncols() {
                    row.push(fmt17(m[(i, c)]));
                }
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn detectability_text(v: &DetectabilityVerdict) -> String {
    let status = match v.detectable {
        Some(true) => "proved",
        Some(false) => "disproved",
        None => "inconclusive",
    };
    format!("{status} ({})", v.evidence)
}

fn pass_mark(ok: bool) -> &'static str {
    if ok {
        "[pass]"
    } else {
        "[FAIL]"
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_validate(cfg: &RunConfig) -> Result<i32> {
    let pr = cfg.load_problem()?;
    let report = validate_assumptions(&pr, PSD_TOL);
    println!("problem: {}", cfg.problem_path.display());
    println!(
        "dimensions: n = {}, m = {}, tau = {}, {} grid steps per period",
        pr.n, pr.m, pr.tau, pr.steps
    );
    println!(
        "control weight uniform positivity: delta = {:.6e} (aggregate {:.6e})",
        report.delta_r, report.delta_r_hat
    );
    println!(
        "state weight Schur complement: min eigenvalue {:.6e} (aggregate {:.6e})",
        report.min_schur, report.min_schur_hat
    );
    println!(
        "coefficients bounded: {}",
        if report.coefficients_bounded { "yes" } else { "no" }
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    if report.a2_ok() {
        println!("PASS: weight positivity and Schur conditions hold");
        Ok(EXIT_PASS)
    } else {
        for failure in &report.failures {
            println!("FAIL: {failure}");
        }
        Ok(EXIT_VERDICT_FAILURE)
    }
}

fn cmd_stability(cfg: &RunConfig) -> Result<i32> {
    let pr = cfg.load_problem()?;
    let report = stability_report(&pr)?;
    for (name, diag) in [("state", &report.state), ("mean", &report.mean)] {
        println!(
            "{name} loop: open-loop spectral radius {:.6e} ({})",
            diag.open_loop.spectral_radius,
            if diag.open_loop.stable { "stable" } else { "not stable" }
        );
        println!(
            "  stabilizer: {} gain iterations, closed-loop spectral radius {:.6e}",
            diag.kleinman_iterations, diag.closed_loop.spectral_radius
        );
        println!(
            "  detectability of the shifted pair: {}",
            detectability_text(&diag.detectability)
        );
    }
    if report.ok() {
        println!("PASS: both loops admit stabilizing periodic gains");
        Ok(EXIT_PASS)
    } else {
        println!("FAIL: a synthesized gain does not stabilize its loop");
        Ok(EXIT_VERDICT_FAILURE)
    }
}

fn cmd_riccati(cfg: &RunConfig) -> Result<i32> {
    cfg.check()?;
    let pr = cfg.load_problem()?;
    let k = cfg.horizons[0];
    let fin = solve_finite_horizon(&pr, k as f64 * pr.tau)?;
    let csv = series_csv(&[
        ("P", &fin.p),
        ("Pi", &fin.pi),
        ("Theta", &fin.theta),
        ("Theta_hat", &fin.theta_hat),
        ("varphi", &fin.varphi),
        ("phi", &fin.phi),
    ]);
    let mut artifacts = Artifacts::new(&cfg.output_dir);
    artifacts.add(format!("riccati_T{k}.csv"), csv);
    println!(
        "solved the coupled backward system on [0, {}] ({} nodes)",
        fin.horizon,
        fin.p.len()
    );
    println!(
        "P(0) norm {:.6e}, Pi(0) norm {:.6e}, Theta(0) norm {:.6e}",
        fin.p.at(0).norm(),
        fin.pi.at(0).norm(),
        fin.theta.at(0).norm()
    );
    artifacts.write()?;
    Ok(EXIT_PASS)
}

#[derive(Serialize)]
struct PeriodicSummaryJson {
    route: Route,
    method: Method,
    residual_state: f64,
    residual_mean: f64,
    method_agreement_state: Option<f64>,
    method_agreement_mean: Option<f64>,
    detectability_state: DetectabilityVerdict,
    detectability_mean: DetectabilityVerdict,
    aggregate_weight_identity_min: f64,
    adjoint_boundary_mismatch: f64,
    adjoint_condition: f64,
    optimality_residual: f64,
    covariance_contraction_factor: f64,
    covariance_sweeps: usize,
    mean_fixed_point_condition: f64,
    residual_tol: f64,
    pass: bool,
}

fn cmd_periodic(cfg: &RunConfig) -> Result<i32> {
    cfg.check()?;
    let pr = cfg.load_problem()?;
    let sol = solve_stationary(&pr, cfg.route, cfg.method)?;
    let law = solve_periodic_law(&pr, &sol)?;
    let tol = cfg.residual_tol;

    let mut checks: Vec<(&str, f64, bool)> = vec![
        ("stationary residual (state equation)", sol.residual_p, sol.residual_p <= tol),
        ("stationary residual (mean equation)", sol.residual_pi, sol.residual_pi <= tol),
        (
            "optimality residual of the periodic law",
            law.optimality_residual,
            law.optimality_residual <= tol,
        ),
        (
            "periodic adjoint boundary closure",
            law.eta_boundary_mismatch,
            law.eta_boundary_mismatch <= tol,
        ),
        (
            "aggregate weight identity min eigenvalue",
            law.psd_identity_min,
            law.psd_identity_min >= -PSD_TOL,
        ),
    ];
    if let Some(agree) = sol.method_agreement_p {
        checks.push(("gain iteration vs horizon extension (state)", agree, agree <= tol));
    }
    if let Some(agree) = sol.method_agreement_pi {
        checks.push(("gain iteration vs horizon extension (mean)", agree, agree <= tol));
    }
    let pass = checks.iter().all(|&(_, _, ok)| ok);

    for (name, value, ok) in &checks {
        println!("{name}: {value:.6e} {}", pass_mark(*ok));
    }
    println!(
        "detectability (state): {}",
        detectability_text(&sol.detectability_p)
    );
    println!(
        "detectability (mean): {}",
        detectability_text(&sol.detectability_pi)
    );

    let p_tr = sol.p.trajectory(1);
    let pi_tr = sol.pi.trajectory(1);
    let th_tr = sol.theta.trajectory(1);
    let thh_tr = sol.theta_hat.trajectory(1);
    let eta_tr = law.eta.trajectory(1);
    let v_tr = law.v_star.trajectory(1);
    let mu_tr = law.moments.mu.trajectory(1);
    let sg_tr = law.moments.sigma.trajectory(1);
    let csv = series_csv(&[
        ("P", &p_tr),
        ("Pi", &pi_tr),
        ("Theta", &th_tr),
        ("Theta_hat", &thh_tr),
        ("eta", &eta_tr),
        ("v_star", &v_tr),
        ("mu_star", &mu_tr),
        ("Sigma_star", &sg_tr),
    ]);
    let summary = PeriodicSummaryJson {
        route: cfg.route,
        method: cfg.method,
        residual_state: sol.residual_p,
        residual_mean: sol.residual_pi,
        method_agreement_state: sol.method_agreement_p,
        method_agreement_mean: sol.method_agreement_pi,
        detectability_state: sol.detectability_p.clone(),
        detectability_mean: sol.detectability_pi.clone(),
        aggregate_weight_identity_min: law.psd_identity_min,
        adjoint_boundary_mismatch: law.eta_boundary_mismatch,
        adjoint_condition: law.eta_condition,
        optimality_residual: law.optimality_residual,
        covariance_contraction_factor: law.moments.contraction_factor,
        covariance_sweeps: law.moments.sweeps,
        mean_fixed_point_condition: law.moments.mu_condition,
        residual_tol: tol,
        pass,
    };
    let mut artifacts = Artifacts::new(&cfg.output_dir);
    artifacts.add("periodic.csv", csv);
    artifacts.add(
        "periodic_summary.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    );
    artifacts.write()?;
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { EXIT_PASS } else { EXIT_VERDICT_FAILURE })
}

/// binding fit behind a verdict line: the single backward fit, or the
/// branch with the smaller rate when the curve was fitted two-sided
fn binding_fit(fit: &GapFitReport) -> Option<&DecayFit> {
    if fit.two_sided {
        match (&fit.left, &fit.right) {
            (Some(l), Some(r)) => Some(if l.lambda <= r.lambda { l } else { r }),
            (Some(l), None) => Some(l),
            (None, r) => r.as_ref(),
        }
    } else {
        fit.fit.as_ref()
    }
}

fn summary_line(periods: usize, fit: &GapFitReport) -> String {
    let (k, lambda, r2) = match binding_fit(fit) {
        Some(f) => (f.k, f.lambda, f.r_squared),
        None => (0.0, 0.0, 1.0),
    };
    format!(
        "T={periods} {name}: K={k:.6e} lambda={lambda:.6e} r2={r2:.6} {verdict}",
        name = fit.name,
        verdict = fit.verdict
    )
}

#[derive(Serialize)]
struct TurnpikeHorizonJson<'a> {
    horizon_periods: usize,
    horizon: f64,
    all_passed: bool,
    fits: &'a [GapFitReport],
}

#[derive(Serialize)]
struct TurnpikeSummaryJson<'a> {
    horizons: Vec<TurnpikeHorizonJson<'a>>,
}

fn cmd_turnpike(cfg: &RunConfig) -> Result<i32> {
    cfg.check()?;
    let pr = cfg.load_problem()?;
    let x = cfg.initial_state(pr.n)?;
    let sol = solve_stationary(&pr, cfg.route, Method::Kleinman)?;
    let law = solve_periodic_law(&pr, &sol)?;
    let reports = analyze_horizons(&pr, &sol, &law, &cfg.horizons, &x)?;

    let mut artifacts = Artifacts::new(&cfg.output_dir);
    let mut summary_txt = String::new();
    let mut horizons_json = Vec::new();
    for (k, report) in cfg.horizons.iter().zip(&reports) {
        artifacts.add(format!("turnpike_T{k}.csv"), report.curves.to_csv());
        for fit in &report.fits {
            let line = summary_line(*k, fit);
            println!("{line}");
            summary_txt.push_str(&line);
            summary_txt.push('\n');
        }
        horizons_json.push(TurnpikeHorizonJson {
            horizon_periods: *k,
            horizon: report.horizon,
            all_passed: report.all_passed(),
            fits: &report.fits,
        });
    }
    let pass = reports.iter().all(|r| r.all_passed());
    let overall = format!("overall: {}", if pass { "pass" } else { "fail" });
    summary_txt.push_str(&overall);
    summary_txt.push('\n');
    artifacts.add("turnpike_summary.txt", summary_txt);
    artifacts.add(
        "turnpike_summary.json",
        serde_json::to_string_pretty(&TurnpikeSummaryJson {
            horizons: horizons_json,
        })? + "\n",
    );
    artifacts.write()?;
    println!("{overall}");
    Ok(if pass { EXIT_PASS } else { EXIT_VERDICT_FAILURE })
}

#[derive(Serialize)]
struct SimulateSummaryJson {
    particles: usize,
    seed: u64,
    substeps: usize,
    horizon_periods: usize,
    report: CrossValidationReport,
}

fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    cfg.check()?;
    let pr = cfg.load_problem()?;
    let x = cfg.initial_state(pr.n)?;
    let k = cfg.horizons[0];
    let fin = solve_finite_horizon(&pr, k as f64 * pr.tau)?;
    let mc = simulate_closed_loop(
        &pr,
        &fin.theta,
        &fin.theta_hat,
        &fin.phi,
        &x,
        cfg.particles,
        cfg.seed,
        cfg.substeps,
    )?;
    let (ode_mean, _) = closed_loop_moments(&pr, &fin.theta, &fin.theta_hat, &fin.phi, &x)?;
    let report = cross_validate(&mc, &ode_mean)?;

    println!(
        "{} particles, seed {}, {} sub-steps, horizon {} periods",
        cfg.particles, cfg.seed, cfg.substeps, k
    );
    println!(
        "max |z| = {:.4}, fraction of nodes with |z| > 3 = {:.6} ({} of {})",
        report.max_abs_z, report.exceed_fraction, report.exceed_count, report.nodes
    );
    let pass = report.pass;
    let csv = series_csv(&[("empirical_mean", &mc.mean), ("deterministic_mean", &ode_mean)]);
    let summary = SimulateSummaryJson {
        particles: cfg.particles,
        seed: cfg.seed,
        substeps: cfg.substeps,
        horizon_periods: k,
        report,
    };
    let mut artifacts = Artifacts::new(&cfg.output_dir);
    artifacts.add("simulate_means.csv", csv);
    artifacts.add(
        "simulate_summary.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    );
    artifacts.write()?;
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { EXIT_PASS } else { EXIT_VERDICT_FAILURE })
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Cmd::Validate { problem } => cmd_validate(&RunConfig::new(problem)),
        Cmd::Stability { problem } => cmd_stability(&RunConfig::new(problem)),
        Cmd::Riccati {
            problem,
            horizon,
            output_dir,
        } => {
            let mut cfg = RunConfig::new(problem);
            cfg.horizons = vec![horizon];
            cfg.output_dir = output_dir;
            cmd_riccati(&cfg)
        }
        Cmd::Periodic {
            problem,
            route,
            method,
            residual_tol,
            output_dir,
        } => {
            let mut cfg = RunConfig::new(problem);
            cfg.route = route.into();
            cfg.method = method.into();
            cfg.residual_tol = residual_tol;
            cfg.output_dir = output_dir;
            cmd_periodic(&cfg)
        }
        Cmd::Turnpike {
            problem,
            horizons,
            x0,
            output_dir,
        } => {
            let mut cfg = RunConfig::new(problem);
            cfg.horizons = horizons;
            cfg.x0 = x0;
            cfg.output_dir = output_dir;
            cmd_turnpike(&cfg)
        }
        Cmd::Simulate {
            problem,
            particles,
            seed,
            horizon,
            substeps,
            x0,
            output_dir,
        } => {
            let mut cfg = RunConfig::new(problem);
            cfg.particles = particles;
            cfg.seed = seed;
            cfg.horizons = vec![horizon];
            cfg.substeps = substeps;
            cfg.x0 = x0;
            cfg.output_dir = output_dir;
            cmd_simulate(&cfg)
        }
    }
}

/// Parse and run; returns the process exit code instead of exiting, so
/// tests can drive the full surface in process.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_PASS,
                _ => EXIT_INPUT_ERROR,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT_ERROR
            } else {
                EXIT_VERDICT_FAILURE
            }
        }
    }
}

pub fn main_entry() -> ExitCode {
    ExitCode::from(run_from(std::env::args()) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn csv_formatting_has_17_significant_digits() {
        assert_eq!(fmt17(1.0), "1.0000000000000000e0");
        assert_eq!(fmt17(-0.5), "-5.0000000000000000e-1");
        let v = 0.123_456_789_012_345_67;
        assert_eq!(fmt17(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn entry_names_follow_shape() {
        assert_eq!(entry_names("phi", 2, 1), vec!["phi_1", "phi_2"]);
        assert_eq!(
            entry_names("P", 2, 2),
            vec!["P_1_1", "P_1_2", "P_2_1", "P_2_2"]
        );
    }

    #[test]
    fn series_csv_rows_match_grid() {
        let tr = Trajectory::new(
            0.0,
            0.5,
            vec![
                DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
                DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            ],
        );
        let csv = series_csv(&[("G", &tr)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,G_1_1,G_1_2");
        assert!(lines[1].starts_with("0.0000000000000000e0,1.0000000000000000e0"));
        assert!(lines[2].starts_with("5.0000000000000000e-1,3.0000000000000000e0"));
    }

    #[test]
    fn unknown_flags_exit_with_input_code() {
        assert_eq!(run_from(["mflq", "no-such-command"]), EXIT_INPUT_ERROR);
        assert_eq!(
            run_from(["mflq", "riccati", "missing.json"]),
            EXIT_INPUT_ERROR
        );
        assert_eq!(run_from(["mflq", "--help"]), EXIT_PASS);
    }

    #[test]
    fn missing_problem_file_is_an_input_error() {
        assert_eq!(
            run_from(["mflq", "validate", "/nonexistent/problem.json"]),
            EXIT_INPUT_ERROR
        );
    }
}
