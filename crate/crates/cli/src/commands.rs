//! The four subcommands. Each returns a summary value so that callers other
//! than `main` (tests, scripts) can inspect the outcome.

use crate::archive::{fmt17, ArchiveError, MatrixArchive};
use crate::config::{ConfigError, RunConfig};
use mmlqg::model::{build_major_closed_loop, build_major_extended, build_minor_extended};
use mmlqg::riccati::{care_residual, filter_gain};
use mmlqg::sim::{
    deviation_family, estimate_nash_gap, evaluate_cost, filter_consistency, generate_population, simulate,
    stability_monte_carlo, AgentId, FilterConsistencyPoint, NashGapReport, StabilityReport,
};
use mmlqg::{
    solve_fixed_point, stationary_covariances, validate, validate_solution, AssumptionReport, DiscountedCareProblem,
    Equilibrium64, GameParameters64, MeanFieldSolution64, MfgError, SimulationRun64,
};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const SOLUTION_FILE: &str = "solution.txt";
pub const ASSUMPTIONS_FILE: &str = "assumptions.txt";

/// CSV files written by `simulate`, in the order of the six figure roles.
pub const TRAJECTORY_FILES: [&str; 6] = [
    "major_trajectory.csv",
    "minor_trajectories.csv",
    "meanfield.csv",
    "major_errors.csv",
    "meanfield_errors.csv",
    "errors.csv",
];

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(1, e.0)
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        CliError::new(1, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, format!("i/o error: {e}"))
    }
}

impl From<MfgError> for CliError {
    fn from(e: MfgError) -> Self {
        let code = match &e {
            MfgError::NotConverged { .. }
            | MfgError::DivergenceDetected { .. }
            | MfgError::NumericalBlowup { .. }
            | MfgError::StepTooLarge { .. }
            | MfgError::NonPsdDrift { .. } => 2,
            MfgError::NonStabilizable(_) => 3,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn assumption_failure(rep: &AssumptionReport) -> Option<CliError> {
    let failed = rep.blocking_failures();
    if failed.is_empty() {
        return None;
    }
    let names: Vec<String> = failed.iter().map(|c| c.name.clone()).collect();
    Some(CliError::new(3, format!("assumption check failed: {}", names.join("; "))))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new(1, format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::new(1, format!("cannot write {}: {e}", path.display())))
}

/// Checks that need the solved equilibrium: stationary filter covariances
/// and gains feed the detectability and error-stack tests.
pub fn solution_report(params: &GameParameters64, sol: &MeanFieldSolution64) -> CliResult<AssumptionReport> {
    let st = stationary_covariances(params, sol, 1e-13, 500)?;
    let major = build_major_extended(params, &sol.coefficients)?;
    let k0 = filter_gain(&st.v0, &major.observation, &major.measurement_noise_cov);
    let cl = build_major_closed_loop(params, &sol.coefficients, &sol.pi0, &sol.s0, &k0)?;
    let mut gains = Vec::with_capacity(params.num_types());
    for (k, vk) in st.vk.iter().enumerate() {
        let minor = build_minor_extended(params, k, &sol.coefficients, &cl)?;
        gains.push(filter_gain(vk, &minor.observation, &minor.measurement_noise_cov));
    }
    Ok(validate_solution(params, sol, &k0, &gains, &st.v0)?)
}

/// Frobenius residuals of the major and every minor control Riccati
/// equation at a solution.
pub fn riccati_residuals(params: &GameParameters64, sol: &MeanFieldSolution64) -> CliResult<Vec<f64>> {
    let major = build_major_extended(params, &sol.coefficients)?;
    let prob0 =
        DiscountedCareProblem::new(major.drift.clone(), major.control.clone(), params.r0.clone(), params.major_state_weight(), params.rho)?;
    let mut out = vec![care_residual(&prob0, &sol.pi0)?];
    let k0 = mmlqg::Mat64::zeros(major.dim(), params.p0());
    let cl = build_major_closed_loop(params, &sol.coefficients, &sol.pi0, &sol.s0, &k0)?;
    for k in 0..params.num_types() {
        let sys = build_minor_extended(params, k, &sol.coefficients, &cl)?;
        let prob =
            DiscountedCareProblem::new(sys.drift.clone(), sys.control.clone(), params.r.clone(), params.minor_state_weight(), params.rho)?;
        out.push(care_residual(&prob, &sol.pik[k])?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: MeanFieldSolution64,
    pub report: AssumptionReport,
    pub archive_path: PathBuf,
}

/// Validates the game, solves the fixed point and writes the solution
/// archive and the assumption report into `out`.
pub fn cmd_solve(config: &RunConfig, out: &Path) -> CliResult<SolveOutcome> {
    let params = config.params()?;
    let mut report = validate(&params)?;
    create_dir(out)?;
    if let Some(err) = assumption_failure(&report) {
        write_file(&out.join(ASSUMPTIONS_FILE), &report.to_string())?;
        return Err(err);
    }
    let solution = solve_fixed_point(&params, &config.solver.options(), None)?;
    let archive_path = out.join(SOLUTION_FILE);
    write_file(&archive_path, &MatrixArchive::from_solution(&solution).write())?;
    solution.ensure_converged()?;
    let post = solution_report(&params, &solution)?;
    report.checks.extend(post.checks);
    write_file(&out.join(ASSUMPTIONS_FILE), &report.to_string())?;
    if let Some(err) = assumption_failure(&report) {
        return Err(err);
    }
    Ok(SolveOutcome { solution, report, archive_path })
}

/// Reads a solution archive and checks it against the configured game.
pub fn load_solution(params: &GameParameters64, path: &Path) -> CliResult<MeanFieldSolution64> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(1, format!("cannot read {}: {e}", path.display())))?;
    let sol = MatrixArchive::read(&text)?.to_solution(params.n(), params.num_types())?;
    sol.ensure_converged()?;
    Ok(sol)
}

fn solution_for(config: &RunConfig, params: &GameParameters64, solution: Option<&Path>) -> CliResult<MeanFieldSolution64> {
    match solution {
        Some(path) => load_solution(params, path),
        None => {
            if let Some(err) = assumption_failure(&validate(params)?) {
                return Err(err);
            }
            let sol = solve_fixed_point(params, &config.solver.options(), None)?;
            sol.ensure_converged()?;
            Ok(sol)
        }
    }
}

fn prepare(config: &RunConfig, params: &GameParameters64, sol: &MeanFieldSolution64) -> CliResult<Equilibrium64> {
    let s = &config.simulation;
    Ok(Equilibrium64::prepare(params, sol, s.dt, s.horizon, s.stationary_gains)?)
}

/// Comma-separated writer with fixed 17-significant-digit numbers.
struct Csv {
    buf: String,
}

impl Csv {
    fn new(header: &[String]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Csv { buf }
    }

    fn row(&mut self, leading: &[String], values: impl IntoIterator<Item = f64>) {
        let mut first = true;
        for s in leading {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(s);
            first = false;
        }
        for v in values {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&fmt17(v));
            first = false;
        }
        self.buf.push('\n');
    }

    fn save(&self, path: &Path) -> CliResult<()> {
        write_file(path, &self.buf)
    }
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

fn header(lead: &[&str], groups: &[(&str, usize)]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    for (p, c) in groups {
        h.extend(names(p, *c));
    }
    h
}

/// Writes the six trajectory CSVs of one run. Minor agent series cover the
/// first `record` agents.
pub fn write_trajectories(run: &SimulationRun64, params: &GameParameters64, record: usize, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    let n = params.n();
    let nk = n * params.num_types();
    let d = params.minor_dim();
    let agents = record.min(run.population.size());
    let t = |s: usize| fmt17(run.grid[s]);

    let mut major = Csv::new(&header(&["t"], &[("x0", n), ("x0hat", n)]));
    let mut minors = Csv::new(&header(&["t", "agent", "type"], &[("x", n), ("xhat", n)]));
    let mut mf = Csv::new(&header(&["t"], &[("xbar", nk), ("xN", nk), ("xbarhat", nk)]));
    let mut major_err = Csv::new(&header(&["t"], &[("e0", n)]));
    let mut mf_err = Csv::new(&header(&["t"], &[("e", nk)]));
    let mut errs = Csv::new(&header(&["t", "agent", "type"], &[("e", d)]));
    for s in 0..run.len() {
        let ts = t(s);
        let lead = [ts.clone()];
        major.row(&lead, run.x0[s].iter().chain(run.z0[s].rows(0, n).iter()).copied());
        mf.row(&lead, run.xbar[s].iter().chain(run.xn_types[s].iter()).chain(run.z0[s].rows(n, nk).iter()).copied());
        let e0 = &run.major_errors[s];
        major_err.row(&lead, e0.rows(0, n).iter().copied());
        mf_err.row(&lead, e0.rows(n, nk).iter().copied());
        for i in 0..agents {
            let who = [ts.clone(), i.to_string(), run.population.type_of[i].to_string()];
            minors.row(&who, run.x[s].column(i).iter().chain(run.z[s].column(i).rows(0, n).iter()).copied());
            errs.row(&who, run.minor_errors[s].column(i).iter().copied());
        }
    }
    for (csv, name) in [&major, &minors, &mf, &major_err, &mf_err, &errs].into_iter().zip(TRAJECTORY_FILES) {
        csv.save(&dir.join(name))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub directories: Vec<PathBuf>,
    /// Per path: major cost, then every minor agent's cost.
    pub costs: Vec<(f64, Vec<f64>)>,
}

/// Simulates `config.simulation.paths` realizations and writes trajectory
/// CSVs plus a cost summary for each.
pub fn cmd_simulate(config: &RunConfig, solution: Option<&Path>, out: &Path, record: usize) -> CliResult<SimulateOutcome> {
    let params = config.params()?;
    let sol = solution_for(config, &params, solution)?;
    let eq = prepare(config, &params, &sol)?;
    let s = &config.simulation;
    let pop = generate_population(&params, s.n, s.population.into(), config.seed)?;
    let mut outcome = SimulateOutcome { directories: Vec::new(), costs: Vec::new() };
    for path in 0..s.paths.max(1) as u64 {
        let dir = if s.paths > 1 { out.join(format!("path_{path}")) } else { out.to_path_buf() };
        let run = simulate(&eq, &pop, config.seed, path, None)?;
        write_trajectories(&run, &params, record, &dir)?;
        let major = evaluate_cost(&run, AgentId::Major, &params)?.value;
        let minors = (0..pop.size())
            .map(|i| evaluate_cost(&run, AgentId::Minor(i), &params).map(|c| c.value))
            .collect::<mmlqg::Result<Vec<f64>>>()?;
        let mut costs = Csv::new(&["agent".into(), "type".into(), "cost".into()]);
        costs.row(&["major".into(), String::new()], [major]);
        for (i, c) in minors.iter().enumerate() {
            costs.row(&[i.to_string(), pop.type_of[i].to_string()], [*c]);
        }
        costs.save(&dir.join("costs.csv"))?;
        let mean = minors.iter().sum::<f64>() / minors.len().max(1) as f64;
        let mut summary = String::new();
        let _ = writeln!(summary, "seed {} path {path}", config.seed);
        let _ = writeln!(summary, "minor agents {} steps {} dt {}", pop.size(), eq.steps, eq.dt);
        let _ = writeln!(summary, "major cost {}", fmt17(major));
        let _ = writeln!(summary, "mean minor cost {}", fmt17(mean));
        write_file(&dir.join("summary.txt"), &summary)?;
        outcome.directories.push(dir);
        outcome.costs.push((major, minors));
    }
    Ok(outcome)
}

/// Renders gap reports as an aligned table.
pub fn gap_table(reports: &[NashGapReport]) -> String {
    let mut s = format!(
        "{:>6} {:>7} {:>14} {:>12} {:>14} {:>14}  {}\n",
        "N", "paths", "eps_hat", "se", "ci95_low", "ci95_high", "worst deviation"
    );
    for r in reports {
        let (lo, hi) = r.epsilon_ci95();
        let worst = r
            .gaps
            .iter()
            .min_by(|a, b| a.gap.mean.total_cmp(&b.gap.mean))
            .map_or("", |g| g.description.as_str());
        let _ = writeln!(s, "{:>6} {:>7} {:>14.6e} {:>12.3e} {:>14.6e} {:>14.6e}  {}", r.n, r.paths, r.epsilon_hat, r.epsilon_se, lo, hi, worst);
    }
    s
}

/// Paired-path Nash gap estimates over the configured population sizes.
pub fn cmd_nash_gap(config: &RunConfig, solution: Option<&Path>, out: &Path) -> CliResult<Vec<NashGapReport>> {
    let params = config.params()?;
    let sol = solution_for(config, &params, solution)?;
    let eq = prepare(config, &params, &sol)?;
    let g = &config.nash_gap;
    let family = deviation_family::<f64>(g.agent, &g.gain_scales, &g.offset_shifts);
    let mut reports = Vec::with_capacity(g.n_schedule.len());
    for &n in &g.n_schedule {
        let pop = generate_population(&params, n, config.simulation.population.into(), config.seed)?;
        reports.push(estimate_nash_gap(&eq, &pop, &family, g.paths, config.seed)?);
    }
    create_dir(out)?;
    let mut summary = Csv::new(&header(&["n", "paths"], &[]).into_iter().chain(
        ["epsilon_hat", "epsilon_se", "ci95_low", "ci95_high", "equilibrium_cost", "equilibrium_cost_se"].map(String::from),
    ).collect::<Vec<_>>());
    let mut rows = Csv::new(&["n", "deviation", "gap", "gap_se"].map(String::from));
    for r in &reports {
        let (lo, hi) = r.epsilon_ci95();
        summary.row(&[r.n.to_string(), r.paths.to_string()], [r.epsilon_hat, r.epsilon_se, lo, hi, r.equilibrium_cost.mean, r.equilibrium_cost.se]);
        for gap in &r.gaps {
            rows.row(&[r.n.to_string(), gap.description.clone()], [gap.gap.mean, gap.gap.se]);
        }
    }
    summary.save(&out.join("nash_gap.csv"))?;
    rows.save(&out.join("nash_gap_deviations.csv"))?;
    write_file(&out.join("nash_gap.txt"), &gap_table(&reports))?;
    Ok(reports)
}

/// One line of the reproduction summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOutcome {
    pub out: PathBuf,
    pub solution: MeanFieldSolution64,
    pub filter: Vec<FilterConsistencyPoint>,
    pub stability: StabilityReport,
    pub checks: Vec<CheckLine>,
}

impl ReproduceOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Overrides accepted by `reproduce-paper`.
#[derive(Debug, Clone, Default)]
pub struct ReproduceOptions {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Monte Carlo paths of both statistical checks; 1000 for the filter
    /// check and 200 for the stability check by default.
    pub paths: Option<usize>,
    pub stationary_gains: Option<bool>,
}

pub const FILTER_CHECK_TIMES: [f64; 3] = [5.0, 15.0, 25.0];
pub const FILTER_REL_TOL: f64 = 0.15;
pub const LAG1_SE_BOUND: f64 = 4.0;
pub const STABILITY_TAIL_START: f64 = 20.0;

/// Filter-consistency verdict: every checkpoint within the relative
/// Frobenius bound and every lag-one innovation correlation within the
/// stated number of standard errors of zero.
pub fn filter_check(points: &[FilterConsistencyPoint]) -> CheckLine {
    let cov_ok = points.iter().all(|p| p.relative_frobenius <= FILTER_REL_TOL);
    let lag_ok = points.iter().all(|p| p.lag1.iter().all(|(r, se)| r.abs() <= LAG1_SE_BOUND * se));
    let worst_lag = points
        .iter()
        .flat_map(|p| p.lag1.iter().map(|(r, se)| r.abs() / se))
        .fold(0.0, f64::max);
    let rel: Vec<String> = points.iter().map(|p| format!("t={}: {:.3}", p.t, p.relative_frobenius)).collect();
    CheckLine {
        name: "filter consistency".into(),
        passed: cov_ok && lag_ok,
        detail: format!(
            "relative Frobenius error {} (bound {FILTER_REL_TOL}); max |lag-1|/se {:.2} (bound {LAG1_SE_BOUND})",
            rel.join(", "),
            worst_lag
        ),
    }
}

pub fn stability_check(st: &StabilityReport) -> CheckLine {
    CheckLine {
        name: "discounted second-order stability".into(),
        passed: st.finite && st.non_growing_tail,
        detail: format!(
            "sup envelope {:.4e} at t={:.2}; tail max over [{}, {}] {:.4e}; non-growing tail {}",
            st.supremum,
            st.argmax_t,
            st.tail_start,
            st.grid.last().copied().unwrap_or(0.0),
            st.tail_max,
            st.non_growing_tail
        ),
    }
}

/// Runs the built-in scenario end to end: solve, archive, one recorded
/// realization, and the filter-consistency and stability checks.
pub fn cmd_reproduce_paper(out: &Path, opts: &ReproduceOptions) -> CliResult<ReproduceOutcome> {
    let mut config = RunConfig::reference_scenario();
    if let Some(n) = opts.n {
        config.simulation.n = n;
    }
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(sg) = opts.stationary_gains {
        config.simulation.stationary_gains = sg;
    }
    create_dir(out)?;
    write_file(&out.join("config.toml"), &config.to_toml())?;
    let solved = cmd_solve(&config, out)?;
    let params = config.params()?;
    let sol = solved.solution;
    let mut checks = Vec::new();

    let residuals = riccati_residuals(&params, &sol)?;
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    checks.push(CheckLine {
        name: "Riccati residuals".into(),
        passed: worst <= 1e-9,
        detail: format!("max Frobenius residual {worst:.3e} (bound 1e-9)"),
    });
    checks.push(CheckLine {
        name: "consistency fixed point".into(),
        passed: sol.converged && sol.residual < 1e-8,
        detail: format!("residual {:.3e} after {} iterations (bound 1e-8)", sol.residual, sol.iterations),
    });

    let eq = prepare(&config, &params, &sol)?;
    let pop = generate_population(&params, config.simulation.n, config.simulation.population.into(), config.seed)?;
    let run = simulate(&eq, &pop, config.seed, 0, None)?;
    write_trajectories(&run, &params, 10, out)?;
    let rows = run.len();
    checks.push(CheckLine {
        name: "trajectory files".into(),
        passed: TRAJECTORY_FILES.iter().all(|f| out.join(f).is_file()) && rows == eq.steps + 1,
        detail: format!("{} CSV roles, {rows} grid points per series", TRAJECTORY_FILES.len()),
    });

    let checkpoints: Vec<usize> = FILTER_CHECK_TIMES.iter().map(|t| (t / config.simulation.dt).round() as usize).collect();
    let filter = filter_consistency(&eq, &pop, opts.paths.unwrap_or(1000), config.seed, &checkpoints)?;
    checks.push(filter_check(&filter));
    let stability = stability_monte_carlo(&eq, &pop, opts.paths.unwrap_or(200), config.seed, STABILITY_TAIL_START)?;
    checks.push(stability_check(&stability));

    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{c}");
    }
    write_file(&out.join("checks.txt"), &text)?;
    let mut env = Csv::new(&["t", "envelope"].map(String::from));
    for (t, e) in stability.grid.iter().zip(&stability.envelope) {
        env.row(&[fmt17(*t)], [*e]);
    }
    env.save(&out.join("stability.csv"))?;
    let mut fc = Csv::new(&["t", "relative_frobenius", "sample_trace", "predicted_trace"].map(String::from));
    for p in &filter {
        fc.row(&[fmt17(p.t)], [p.relative_frobenius, p.sample.trace(), p.predicted.trace()]);
    }
    fc.save(&out.join("filter_consistency.csv"))?;
    let _ = std::io::stdout().flush();
    Ok(ReproduceOutcome { out: out.to_path_buf(), solution: sol, filter, stability, checks })
}
