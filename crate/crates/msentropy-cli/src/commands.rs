use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use msentropy_core::analysis::{self, AnalysisError, FiniteDimProblem, Production};
use msentropy_core::equilibrium::{self, EquilibriumError};
use msentropy_core::presets::{self, Scenario, SetupError};
use msentropy_core::simulator::{self, Problem, SimError, StepRecord};
use msentropy_core::{ReactionNetwork, StateField};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::{self, ConfigError, Setup};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Margin tolerances of the verification checks.
pub const ELEMENTARY_TOLERANCE: f64 = -1e-12;
pub const CKP_TOLERANCE: f64 = -1e-12;
pub const BOUND_TOLERANCE: f64 = -1e-10;
pub const EXAMPLE4_TOLERANCE: f64 = -1e-10;
pub const DELTA_TOLERANCE: f64 = 0.2;
/// Finite-dimensional ratios below this flag a degenerate network.
pub const DEGENERATE_RATIO: f64 = 1e-6;

const ELEMENTARY_CHUNK: usize = 10_000;
const FIELD_CHUNK: usize = 100;
// generator streams; the finite-dimensional sampler owns 0.. and u64::MAX
const ELEMENTARY_STREAMS: u64 = 1 << 40;
const FIELD_STREAMS: u64 = 2 << 40;
const RESTART_STREAM: u64 = 3 << 40;
const EXAMPLE4_SEED_OFFSET: u64 = 0x5eed_0004;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Equilibrium,
    Simulate,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Equilibrium => "equilibrium",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub force: bool,
    /// Overrides the configured output directory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no detailed balance: {0}")]
    NoDetailedBalance(String),
    #[error("equilibrium: {0}")]
    Equilibrium(EquilibriumError),
    #[error("simulation failed: {0}")]
    Simulation(SimError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NoDetailedBalance(_) => 3,
            CliError::Equilibrium(_) => 4,
            CliError::Simulation(_) => 5,
            CliError::Io { .. } | CliError::Pool(_) => 1,
        }
    }
}

fn setup_error(e: SetupError) -> CliError {
    match e {
        SetupError::Equilibrium(e @ (EquilibriumError::NoDetailedBalance { .. } | EquilibriumError::NotReversible)) => {
            CliError::NoDetailedBalance(e.to_string())
        }
        SetupError::Equilibrium(e) => CliError::Equilibrium(e),
        SetupError::Simulation(e @ (SimError::ConservationDrift { .. } | SimError::NewtonDiverged { .. })) => CliError::Simulation(e),
        other => CliError::Config(ConfigError::Invalid(other.to_string())),
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub status: String,
    /// Main report, as written to `report_path`.
    pub report: Value,
    pub report_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Loads `config_path` and runs `cmd`.
pub fn execute(cmd: Command, config_path: &Path, opts: &Options) -> Result<Outcome, CliError> {
    let (cfg, hash) = config::load(config_path)?;
    let setup = config::resolve(&cfg, &hash, opts.seed, opts.out_dir.as_deref())?;
    run_setup(cmd, &setup, opts)
}

pub fn run_setup(cmd: Command, setup: &Setup, opts: &Options) -> Result<Outcome, CliError> {
    fs::create_dir_all(&setup.output_dir).map_err(io_error(&setup.output_dir))?;
    match cmd {
        Command::Analyze => analyze(setup, opts),
        Command::Equilibrium => equilibrium_cmd(setup),
        Command::Simulate => simulate(setup),
        Command::Verify => verify(setup, opts),
    }
}

fn vector(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn matrix(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

/// `NaN` and infinities become `null`.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn header(setup: &Setup, cmd: Command) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("tool".into(), json!("msentropy"));
    m.insert("version".into(), json!(VERSION));
    m.insert("command".into(), json!(cmd.name()));
    m.insert("config_sha256".into(), json!(setup.config_sha256));
    m.insert("seed".into(), json!(setup.analysis.seed));
    m.insert("scenario".into(), json!(setup.name));
    m.insert("species".into(), json!(setup.network.species().iter().map(|s| s.name.clone()).collect::<Vec<_>>()));
    m.insert("molar_masses".into(), vector(&setup.network.masses()));
    m.insert(
        "rescaling".into(),
        json!({"length": setup.length, "diffusivity_factor": 1.0 / (setup.length * setup.length)}),
    );
    m
}

fn write_json(path: &Path, doc: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(doc).expect("documents serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn finish(setup: &Setup, file: &str, mut doc: Map<String, Value>, status: &str, exit_code: i32, warnings: Vec<String>) -> Result<Outcome, CliError> {
    doc.insert("status".into(), json!(status));
    doc.insert("warnings".into(), json!(warnings));
    let report = Value::Object(doc);
    let report_path = setup.output_dir.join(file);
    write_json(&report_path, &report)?;
    Ok(Outcome { exit_code, status: status.into(), report, report_path, warnings })
}

fn conservation(setup: &Setup) -> Result<msentropy_core::ConservationStructure, CliError> {
    let (_, _, cons) =
        presets::conservation(&setup.network, &setup.grid(), &setup.initial, &setup.rho_mean, setup.mass_vector.clone())
            .map_err(setup_error)?;
    Ok(cons)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStatus {
    pub reversible: bool,
    pub detailed: bool,
    pub complex: bool,
    /// Wegscheider residual for reversible networks.
    pub wegscheider_residual: Option<f64>,
}

pub fn balance_status(network: &ReactionNetwork) -> BalanceStatus {
    let reversible = network.is_reversible();
    let (detailed, wegscheider_residual) = if reversible {
        match network.detailed_balance_witness() {
            Ok(_) => (true, Some(0.0)),
            Err(r) => (false, Some(r.amax())),
        }
    } else {
        (false, None)
    };
    let complex = detailed || equilibrium::complex_balanced_reference(network).is_ok();
    BalanceStatus { reversible, detailed, complex, wegscheider_residual }
}

fn balance_json(b: &BalanceStatus) -> Value {
    json!({
        "reversible": b.reversible,
        "detailed_balanced": b.detailed,
        "complex_balanced": b.complex,
        "wegscheider_residual": b.wegscheider_residual.map(num),
    })
}

fn boundary_json(network: &ReactionNetwork, scan: &Result<Vec<equilibrium::BoundaryEquilibrium>, EquilibriumError>) -> Value {
    match scan {
        Ok(found) => json!({
            "status": "done",
            "equilibria": found.iter().map(|b| json!({
                "support": b.support.iter().map(|&i| network.species()[i].name.clone()).collect::<Vec<_>>(),
                "omega": vector(&b.omega),
            })).collect::<Vec<_>>(),
        }),
        Err(e) => json!({"status": "skipped", "reason": e.to_string()}),
    }
}

// ---------------------------------------------------------------------------
// analyze

fn analyze(setup: &Setup, opts: &Options) -> Result<Outcome, CliError> {
    let net = &setup.network;
    let cons = conservation(setup)?;
    let balance = balance_status(net);
    let scan = equilibrium::boundary_equilibria_scan(net, &cons, opts.force);
    let mut warnings = Vec::new();
    if let Ok(found) = &scan {
        if !found.is_empty() {
            warnings.push(format!("{} boundary equilibria compatible with the conservation laws", found.len()));
        }
    }
    let mut doc = header(setup, Command::Analyze);
    doc.insert("wegscheider".into(), matrix(&cons.w));
    doc.insert("q".into(), matrix(&cons.q));
    doc.insert("m".into(), json!(cons.m()));
    doc.insert("zeta".into(), vector(&cons.zeta));
    doc.insert("m0".into(), vector(&cons.m0));
    doc.insert("integer_basis".into(), json!(cons.integer_basis));
    doc.insert("balance".into(), balance_json(&balance));
    doc.insert("boundary_scan".into(), boundary_json(net, &scan));
    if setup.analysis.require_detailed_balance && !balance.detailed {
        warnings.push("detailed balance was requested but the network admits none".into());
        return finish(setup, "analysis.json", doc, "no_detailed_balance", 3, warnings);
    }
    finish(setup, "analysis.json", doc, "ok", 0, warnings)
}

// ---------------------------------------------------------------------------
// equilibrium

/// Largest deviation of `x_inf` over Newton runs from random starting points.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartCheck {
    pub restarts: usize,
    pub max_deviation: f64,
    pub failures: usize,
}

pub fn restart_check(
    network: &ReactionNetwork,
    cons: &msentropy_core::ConservationStructure,
    reference: &DVector<f64>,
    restarts: usize,
    seed: u64,
) -> RestartCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RESTART_STREAM);
    let mut out = RestartCheck { restarts, max_deviation: 0.0, failures: 0 };
    for _ in 0..restarts {
        let z0 = DVector::from_fn(cons.m() + 1, |_, _| rng.gen_range(-3.0..3.0));
        match equilibrium::solve_from(network, cons, &z0) {
            Ok(eq) => out.max_deviation = out.max_deviation.max((&eq.x_inf - reference).amax()),
            Err(_) => out.failures += 1,
        }
    }
    out
}

fn equilibrium_cmd(setup: &Setup) -> Result<Outcome, CliError> {
    let net = &setup.network;
    let cons = conservation(setup)?;
    let balance = balance_status(net);
    if setup.analysis.require_detailed_balance && !balance.detailed {
        return Err(CliError::NoDetailedBalance(match balance.wegscheider_residual {
            Some(r) => format!("Wegscheider residual {r:e}"),
            None => "the network has no reversible reactions".into(),
        }));
    }
    let eq = equilibrium::solve(net, &cons).map_err(|e| setup_error(SetupError::Equilibrium(e)))?;
    let restarts = restart_check(net, &cons, &eq.x_inf, setup.analysis.restarts, setup.analysis.seed);
    let n = net.n();
    let mut warnings = Vec::new();
    if restarts.failures > 0 {
        warnings.push(format!("{} of {} restarts did not converge", restarts.failures, restarts.restarts));
    }
    let mut doc = header(setup, Command::Equilibrium);
    doc.insert("kind".into(), json!(if net.is_reversible() { "detailed_balanced" } else { "complex_balanced" }));
    doc.insert("x_inf".into(), vector(&eq.x_inf));
    doc.insert("c_inf".into(), vector(&eq.omega_inf.rows(0, n).into_owned()));
    doc.insert("c_total_inf".into(), json!(eq.c_inf()));
    doc.insert("m0".into(), vector(&cons.m0));
    doc.insert("residual_balance".into(), json!(eq.residual_balance));
    doc.insert("residual_conservation".into(), json!(eq.residual_conservation));
    doc.insert("iterations".into(), json!(eq.iterations));
    doc.insert("used_fallback".into(), json!(eq.used_fallback));
    doc.insert(
        "restarts".into(),
        json!({"count": restarts.restarts, "max_deviation": restarts.max_deviation, "failures": restarts.failures}),
    );
    finish(setup, "equilibrium.json", doc, "ok", 0, warnings)
}

// ---------------------------------------------------------------------------
// simulate

pub const DIAGNOSTICS_HEADER: &str = "t,E,D,ratio,mass_residual,l1_dist,l2_dist,newton_iters,entropy_margin";

fn diagnostics_row(r: &StepRecord) -> String {
    format!(
        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}",
        r.t,
        r.entropy,
        r.production,
        r.ratio,
        r.mass_residual,
        r.l1_dist(),
        r.l2_dist(),
        r.newton_iters,
        r.entropy_margin
    )
}

fn snapshot_header(n: usize) -> String {
    let mut h = String::from("t,cell,z");
    for i in 1..=n {
        h.push_str(&format!(",rho_{i}"));
    }
    for i in 1..=n {
        h.push_str(&format!(",x_{i}"));
    }
    h
}

fn snapshot_rows(p: &Problem, state: &StateField, out: &mut impl Write) -> std::io::Result<()> {
    let x = state.fractions(p.masses());
    for k in 0..state.cells() {
        write!(out, "{:.16e},{},{:.16e}", state.time, k, p.grid.center(k))?;
        for v in state.rho.row(k).iter().chain(x.row(k).iter()) {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Constants fitted over the states of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedConstants {
    /// `min D[x] / D~[omega]`.
    pub augmented: Option<f64>,
    /// `min D~[omega] / sum_a (...)^2` at the spatial means.
    pub tech: Option<f64>,
    /// `max int (f - avg f)^2 / int |f'|^2`.
    pub poincare: f64,
    pub homogeneity_margin: Option<f64>,
    pub e_bound_slack: f64,
    pub d_bound_slack: f64,
}

impl Default for FittedConstants {
    fn default() -> Self {
        Self {
            augmented: None,
            tech: None,
            poincare: 0.0,
            homogeneity_margin: None,
            e_bound_slack: f64::INFINITY,
            d_bound_slack: f64::INFINITY,
        }
    }
}

fn min_opt(acc: &mut Option<f64>, v: f64) {
    *acc = Some(acc.map_or(v, |a| a.min(v)));
}

impl FittedConstants {
    pub fn observe(&mut self, p: &Problem, record: &StepRecord, state: &StateField) {
        if let Some(aug) = augmented(p, state) {
            let dt = aug.total();
            if dt > 1e-300 && record.production > 0.0 {
                min_opt(&mut self.augmented, record.production / dt);
            }
            let defect = analysis::mean_reaction_defect(&p.network, analysis::mean_augmented(p, state).as_slice());
            if defect > 1e-300 {
                min_opt(&mut self.tech, dt / defect);
            }
        }
        self.poincare = self.poincare.max(analysis::poincare_ratio(p, state));
        if let Some(h) = analysis::homogeneity_check(p, state) {
            if h.is_finite() {
                min_opt(&mut self.homogeneity_margin, h);
            }
        }
        if let Ok(e) = analysis::verify_e_upper_bound(p, state) {
            self.e_bound_slack = self.e_bound_slack.min(e.slack);
        }
        if let Ok(d) = analysis::verify_d_lower_bound(p, state) {
            self.d_bound_slack = self.d_bound_slack.min(d.slack);
        }
    }

    fn to_json(&self) -> Value {
        json!({
            "augmented_production_constant": self.augmented,
            "tech_constant": self.tech,
            "poincare_ratio_max": self.poincare,
            "poincare_reference": 1.0 / analysis::POINCARE_EIGENVALUE,
            "homogeneity_margin": self.homogeneity_margin,
            "e_bound_min_slack": num(self.e_bound_slack),
            "d_bound_min_slack": num(self.d_bound_slack),
        })
    }
}

fn augmented(p: &Problem, state: &StateField) -> Option<Production> {
    analysis::augmented_production(p, state)
}

fn simulate(setup: &Setup) -> Result<Outcome, CliError> {
    let scenario = setup.scenario().map_err(setup_error)?;
    let p = &scenario.problem;
    let diag_path = setup.output_dir.join("diagnostics.csv");
    let snap_path = setup.output_dir.join("snapshots.csv");
    let mut diag = BufWriter::new(File::create(&diag_path).map_err(io_error(&diag_path))?);
    writeln!(diag, "{DIAGNOSTICS_HEADER}").map_err(io_error(&diag_path))?;
    let mut snaps = if setup.snapshot_every > 0 {
        let mut w = BufWriter::new(File::create(&snap_path).map_err(io_error(&snap_path))?);
        writeln!(w, "{}", snapshot_header(p.n())).map_err(io_error(&snap_path))?;
        Some(w)
    } else {
        None
    };
    let mut fitted = FittedConstants::default();
    let mut write_err: Option<(PathBuf, std::io::Error)> = None;
    let result = simulator::run_with(p, &scenario.initial, &setup.stepper, |rec, state| {
        fitted.observe(p, rec, state);
        if write_err.is_some() {
            return;
        }
        if let Err(e) = writeln!(diag, "{}", diagnostics_row(rec)) {
            write_err = Some((diag_path.clone(), e));
        }
        if let Some(w) = snaps.as_mut() {
            if rec.step % setup.snapshot_every == 0 {
                if let Err(e) = snapshot_rows(p, state, w) {
                    write_err = Some((snap_path.clone(), e));
                }
            }
        }
    });
    if let Some((path, source)) = write_err {
        return Err(CliError::Io { path, source });
    }
    diag.flush().map_err(io_error(&diag_path))?;
    if let Some(w) = snaps.as_mut() {
        w.flush().map_err(io_error(&snap_path))?;
    }
    let report = result.map_err(CliError::Simulation)?;
    let doc = simulation_summary(setup, &scenario, &report, &fitted);
    let mut warnings = Vec::new();
    if scenario.clamps > 0 {
        warnings.push(format!("{} initial densities were raised to the clamp floor", scenario.clamps));
    }
    if !report.margin_violations.is_empty() {
        warnings.push(format!("entropy margin violated at {} steps", report.margin_violations.len()));
    }
    finish(setup, "summary.json", doc, "ok", 0, warnings)
}

fn simulation_summary(setup: &Setup, scenario: &Scenario, report: &simulator::RunReport, fitted: &FittedConstants) -> Map<String, Value> {
    let recs = &report.records;
    let max_of = |f: &dyn Fn(&StepRecord) -> f64| recs.iter().map(f).fold(0.0, f64::max);
    let fit = analysis::fit_decay_rate(&report.times(), &report.entropies());
    let m_max = scenario.problem.mixture.m_max();
    let mut doc = header(setup, Command::Simulate);
    doc.insert("cells".into(), json!(setup.cells));
    doc.insert("tau".into(), json!(setup.stepper.tau));
    doc.insert("t_end".into(), json!(setup.stepper.t_end));
    doc.insert("epsilon".into(), json!(setup.stepper.epsilon));
    doc.insert("steps".into(), json!(recs.len().saturating_sub(1)));
    doc.insert("x_inf".into(), vector(&scenario.problem.x_inf));
    doc.insert("initial_entropy".into(), json!(recs.first().map(|r| r.entropy)));
    doc.insert("final_entropy".into(), json!(recs.last().map(|r| r.entropy)));
    doc.insert("entropy_monotone".into(), json!(recs.windows(2).all(|w| w[1].entropy <= w[0].entropy)));
    match &fit {
        Ok(f) => {
            doc.insert("lambda_fit".into(), json!(f.lambda));
            doc.insert("r_squared".into(), json!(f.r_squared));
            doc.insert("fit".into(), json!({"intercept": f.intercept, "points": f.points, "t_start": f.t_start}));
            doc.insert(
                "lp_decay".into(),
                match analysis::lp_decay_check(recs, f, scenario.problem.n(), m_max) {
                    Ok(c) => json!({
                        "entropy_constant": c.entropy_constant,
                        "bound_constant": c.bound_constant,
                        "fitted_constant": num(c.fitted_constant),
                        "worst_margin": num(c.worst_margin),
                    }),
                    Err(e) => json!({"error": e.to_string()}),
                },
            );
        }
        Err(e) => {
            doc.insert("lambda_fit".into(), Value::Null);
            doc.insert("r_squared".into(), Value::Null);
            doc.insert("fit".into(), json!({"error": e.to_string()}));
        }
    }
    doc.insert("worst_entropy_margin".into(), json!(report.worst_margin));
    doc.insert("margin_violations".into(), json!(report.margin_violations.len()));
    doc.insert("min_ckp_margin".into(), num(recs.iter().map(|r| r.ckp_margin).fold(f64::INFINITY, f64::min)));
    doc.insert("max_mass_residual".into(), json!(max_of(&|r| r.mass_residual)));
    doc.insert("max_simplex_residual".into(), json!(max_of(&|r| r.simplex_residual)));
    doc.insert("max_newton_iters".into(), json!(recs.iter().map(|r| r.newton_iters).max().unwrap_or(0)));
    doc.insert("clamps".into(), json!(scenario.clamps));
    doc.insert("fitted_constants".into(), fitted.to_json());
    doc
}

// ---------------------------------------------------------------------------
// verify

/// One verification check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub skipped: bool,
    pub worst_margin: Option<f64>,
    pub tolerance: Option<f64>,
    pub details: Value,
}

impl Check {
    fn skipped(name: &'static str, reason: String) -> Self {
        Self { name, passed: true, skipped: true, worst_margin: None, tolerance: None, details: json!({"reason": reason}) }
    }

    fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "passed": self.passed,
            "skipped": self.skipped,
            "worst_margin": self.worst_margin.map(num),
            "tolerance": self.tolerance,
            "details": self.details,
        })
    }
}

fn chunked(total: usize, size: usize) -> Vec<(u64, usize)> {
    let mut out: Vec<(u64, usize)> = (0..total / size).map(|i| (i as u64, size)).collect();
    if !total.is_multiple_of(size) {
        out.push(((total / size) as u64, total % size));
    }
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn elementary_check(samples: usize, seed: u64) -> Check {
    let worst = chunked(samples, ELEMENTARY_CHUNK)
        .into_par_iter()
        .map(|(i, count)| analysis::elementary_sweep(&mut stream_rng(seed, ELEMENTARY_STREAMS + i), count))
        .reduce(|| f64::INFINITY, f64::min);
    Check {
        name: "elementary_inequality",
        passed: worst >= ELEMENTARY_TOLERANCE,
        skipped: false,
        worst_margin: Some(worst),
        tolerance: Some(ELEMENTARY_TOLERANCE),
        details: json!({"samples": samples, "range": [1e-4, 1e4]}),
    }
}

/// A random interior field with the conservation data of `p`: the mean
/// moves along reaction directions, the cells get a zero-mean perturbation.
pub fn random_field<R: Rng>(p: &Problem, c_inf: &DVector<f64>, rng: &mut R) -> StateField {
    let n = p.n();
    let k = p.grid.cells();
    let masses = p.masses();
    let w = &p.cons.w;
    let mut cbar = c_inf.clone();
    if w.ncols() > 0 {
        let s = DVector::from_fn(w.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        let dir = w * s;
        let t_max = (0..n).filter(|&i| dir[i] < 0.0).map(|i| -c_inf[i] / dir[i]).fold(f64::INFINITY, f64::min);
        let t = rng.gen_range(0.0..0.95) * if t_max.is_finite() { t_max } else { 1.0 };
        cbar += dir * t;
    }
    let rho_bar = cbar.component_mul(masses);
    let mut delta = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
    for c in 0..k {
        let mean = delta.row(c).sum() / n as f64;
        delta.row_mut(c).add_scalar_mut(-mean);
    }
    for i in 0..n {
        let mean = delta.column(i).sum() / k as f64;
        delta.column_mut(i).add_scalar_mut(-mean);
    }
    let mut g_max = f64::INFINITY;
    for c in 0..k {
        for i in 0..n {
            if delta[(c, i)] < 0.0 {
                g_max = g_max.min(-rho_bar[i] / delta[(c, i)]);
            }
        }
    }
    let g = rng.gen_range(0.0..0.95) * if g_max.is_finite() { g_max } else { 0.0 };
    let rho = DMatrix::from_fn(k, n, |c, i| rho_bar[i] + g * delta[(c, i)]);
    StateField::new(rho, 0.0).expect("interior field")
}

#[derive(Debug, Clone, Copy)]
struct FieldMargins {
    ckp: f64,
    e_bound: f64,
    d_bound: f64,
    evaluated: usize,
}

fn field_sweep(p: &Problem, c_inf: &DVector<f64>, fields: usize, seed: u64) -> FieldMargins {
    let m_max = p.mixture.m_max();
    let per_chunk = |(i, count): (u64, usize)| {
        let mut rng = stream_rng(seed, FIELD_STREAMS + i);
        let mut m = FieldMargins { ckp: f64::INFINITY, e_bound: f64::INFINITY, d_bound: f64::INFINITY, evaluated: 0 };
        for _ in 0..count {
            let f = random_field(p, c_inf, &mut rng);
            let (Ok(e), Ok(eb), Ok(db)) =
                (analysis::relative_entropy(p, &f), analysis::verify_e_upper_bound(p, &f), analysis::verify_d_lower_bound(p, &f))
            else {
                continue;
            };
            let (l1, _) = analysis::lp_distances(p, &f);
            m.ckp = m.ckp.min(analysis::ckp_margin(e, &l1, m_max));
            m.e_bound = m.e_bound.min(eb.slack);
            m.d_bound = m.d_bound.min(db.slack);
            m.evaluated += 1;
        }
        m
    };
    chunked(fields, FIELD_CHUNK).into_par_iter().map(per_chunk).reduce(
        || FieldMargins { ckp: f64::INFINITY, e_bound: f64::INFINITY, d_bound: f64::INFINITY, evaluated: 0 },
        |a, b| FieldMargins {
            ckp: a.ckp.min(b.ckp),
            e_bound: a.e_bound.min(b.e_bound),
            d_bound: a.d_bound.min(b.d_bound),
            evaluated: a.evaluated + b.evaluated,
        },
    )
}

fn field_checks(p: &Problem, c_inf: &DVector<f64>, fields: usize, seed: u64) -> Vec<Check> {
    let m = field_sweep(p, c_inf, fields, seed);
    let details = json!({"fields": fields, "evaluated": m.evaluated, "cells": p.grid.cells()});
    let check = |name, worst: f64, tol: f64| Check {
        name,
        passed: m.evaluated == fields && worst >= tol,
        skipped: false,
        worst_margin: Some(worst),
        tolerance: Some(tol),
        details: details.clone(),
    };
    vec![
        check("ckp_inequality", m.ckp, CKP_TOLERANCE),
        check("entropy_upper_bound", m.e_bound, BOUND_TOLERANCE),
        check("production_lower_bound", m.d_bound, BOUND_TOLERANCE),
    ]
}

/// Finite-dimensional sampling, with chunks run in parallel.
pub fn finite_dim_report(fd: &FiniteDimProblem, samples: usize, seed: u64) -> Result<analysis::FiniteDimReport, AnalysisError> {
    let chunks = analysis::chunk_sizes(samples)
        .into_par_iter()
        .enumerate()
        .map(|(i, count)| fd.sample_chunk(seed, i as u64, count))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = analysis::merge_chunks(&chunks);
    if rep.accepted == 0 {
        return Err(AnalysisError::EmptyPolytope);
    }
    Ok(rep)
}

struct FiniteDimOutcome {
    check: Check,
    /// Smallest ratio with the right-hand side restricted to the species.
    min_species_ratio: Option<f64>,
}

fn finite_dim_check(scenario: &Scenario, samples: usize, seed: u64, degenerate: bool) -> FiniteDimOutcome {
    let p = &scenario.problem;
    let fd = match FiniteDimProblem::new(&p.network, &p.cons, &scenario.equilibrium) {
        Ok(fd) => fd,
        Err(e @ AnalysisError::NotReversible) => {
            return FiniteDimOutcome { check: Check::skipped("finite_dim_inequality", e.to_string()), min_species_ratio: None }
        }
        Err(e) => return FiniteDimOutcome { check: failed("finite_dim_inequality", e.to_string()), min_species_ratio: None },
    };
    let rep = match finite_dim_report(&fd, samples, seed) {
        Ok(r) => r,
        Err(e) => return FiniteDimOutcome { check: failed("finite_dim_inequality", e.to_string()), min_species_ratio: None },
    };
    let delta = fd.delta(seed, 1000);
    let positive = rep.inf_ratio > 0.0;
    let delta_ok = delta.max_relative_deviation <= DELTA_TOLERANCE;
    let passed = if degenerate { true } else { positive && delta_ok };
    let details = json!({
        "samples": rep.samples,
        "accepted": rep.accepted,
        "skipped_boundary": rep.skipped_boundary,
        "excluded_center": rep.excluded_center,
        "inf_ratio": num(rep.inf_ratio),
        "worst_point": rep.worst.as_ref().map(|w| vector(&w.omega_bar)),
        "min_species_ratio": num(rep.min_species_ratio),
        "max_manifold_residual": rep.max_manifold_residual,
        "delta": num(delta.delta),
        "delta_directions": delta.directions,
        "delta_max_relative_deviation": num(delta.max_relative_deviation),
        "delta_tolerance": DELTA_TOLERANCE,
        "degenerate": degenerate,
    });
    FiniteDimOutcome {
        check: Check {
            name: "finite_dim_inequality",
            passed,
            skipped: false,
            worst_margin: Some(rep.inf_ratio),
            tolerance: Some(0.0),
            details,
        },
        min_species_ratio: Some(rep.min_species_ratio),
    }
}

fn failed(name: &'static str, reason: String) -> Check {
    Check { name, passed: false, skipped: false, worst_margin: None, tolerance: None, details: json!({"error": reason}) }
}

/// `A1 + A2 <-> A3` with unit rate constants, the network of the worked
/// example.
pub fn is_example4_network(network: &ReactionNetwork) -> bool {
    let r = network.reversible();
    network.n() == 3
        && network.oneway().is_empty()
        && r.len() == 1
        && r[0].alpha == [1.0, 1.0, 0.0]
        && r[0].beta == [0.0, 0.0, 1.0]
        && r[0].kf == r[0].kb
}

fn example4_checks(scenario: &Scenario, samples: usize, seed: u64, min_species_ratio: Option<f64>) -> Vec<Check> {
    let p = &scenario.problem;
    if !is_example4_network(&p.network) {
        let reason = "network is not A1 + A2 <-> A3 with kf = kb".to_string();
        return vec![Check::skipped("example4_constant", reason.clone()), Check::skipped("example4_sampled_constant", reason)];
    }
    let om = &scenario.equilibrium.omega_inf;
    let c_inf = [om[0], om[1], om[2], om[3]];
    let sweep = match analysis::example4_sweep(&c_inf, samples, seed.wrapping_add(EXAMPLE4_SEED_OFFSET)) {
        Ok(s) => s,
        Err(e) => return vec![failed("example4_constant", e.to_string()), failed("example4_sampled_constant", e.to_string())],
    };
    let worst = sweep.case1_min_margin.min(sweep.case2_min_margin);
    let constant = Check {
        name: "example4_constant",
        passed: worst >= EXAMPLE4_TOLERANCE,
        skipped: false,
        worst_margin: Some(worst),
        tolerance: Some(EXAMPLE4_TOLERANCE),
        details: json!({
            "samples": samples,
            "case1_points": sweep.case1_points,
            "case2_points": sweep.case2_points,
            "case1_constant": 0.5,
            "case1_min_margin": num(sweep.case1_min_margin),
            "case2_min_margin": num(sweep.case2_min_margin),
            "mu_max": sweep.mu_max,
            "case2_constant": sweep.case2_constant,
            "case2_chain_constant": sweep.case2_chain_constant,
            "case2_min_ratio": num(sweep.case2_min_ratio),
        }),
    };
    // lhs = c1 c2 (...)^2 >= c1 c2 C* sum mu_i^2 and rhs <= max c_i sum mu_i^2
    let c_star = sweep.case2_constant.min(0.5);
    let c0 = c_inf[0] * c_inf[1] * c_star / c_inf[0].max(c_inf[1]).max(c_inf[2]);
    let sampled = match min_species_ratio {
        Some(r) => Check {
            name: "example4_sampled_constant",
            passed: r >= c0 * (1.0 - 1e-9),
            skipped: false,
            worst_margin: Some(r - c0),
            tolerance: Some(0.0),
            details: json!({"sampled": num(r), "bound": c0, "c_star": c_star}),
        },
        None => Check::skipped("example4_sampled_constant", "finite-dimensional sampling unavailable".into()),
    };
    vec![constant, sampled]
}

fn verify(setup: &Setup, opts: &Options) -> Result<Outcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))?;
    let scenario = setup.scenario().map_err(setup_error)?;
    let p = &scenario.problem;
    let a = &setup.analysis;
    let seed = a.seed;
    let scan = equilibrium::boundary_equilibria_scan(&p.network, &p.cons, opts.force);
    let degenerate = matches!(&scan, Ok(found) if !found.is_empty());
    let c_inf = scenario.equilibrium.omega_inf.rows(0, p.n()).into_owned();

    let checks = pool.install(|| {
        let mut checks = vec![elementary_check(a.elementary_samples, seed)];
        checks.extend(field_checks(p, &c_inf, a.fields, seed));
        let fd = finite_dim_check(&scenario, a.samples, seed, degenerate);
        checks.push(fd.check);
        checks.extend(example4_checks(&scenario, a.example4_samples, seed, fd.min_species_ratio));
        checks
    });

    let mut warnings = Vec::new();
    if degenerate {
        warnings.push("boundary equilibria are compatible with the conservation laws; finite-dimensional ratios degenerate near them".into());
    }
    if let Some(fd) = checks.iter().find(|c| c.name == "finite_dim_inequality" && !c.skipped) {
        if fd.worst_margin.is_some_and(|r| r < DEGENERATE_RATIO) {
            warnings.push(format!("finite-dimensional inf ratio {:e} is near zero", fd.worst_margin.unwrap_or(0.0)));
        }
    }
    let all_passed = checks.iter().all(|c| c.passed);
    let (status, code) = match (all_passed, degenerate) {
        (false, _) => ("fail", 6),
        (true, true) => ("degenerate", 0),
        (true, false) => ("pass", 0),
    };
    let mut doc = header(setup, Command::Verify);
    doc.insert("x_inf".into(), vector(&scenario.equilibrium.x_inf));
    doc.insert("boundary_scan".into(), boundary_json(&p.network, &scan));
    doc.insert("checks".into(), json!(checks.iter().map(Check::to_json).collect::<Vec<_>>()));
    finish(setup, "verify.json", doc, status, code, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use msentropy_core::presets::preset;

    #[test]
    fn chunking_covers_everything() {
        assert_eq!(chunked(25, 10), vec![(0, 10), (1, 10), (2, 5)]);
        assert_eq!(chunked(20, 10), vec![(0, 10), (1, 10)]);
        assert!(chunked(0, 10).is_empty());
    }

    #[test]
    fn random_fields_keep_the_mass_vector() {
        let s = preset("example4").unwrap().scenario_with(12, &presets::InitialData::Uniform).unwrap();
        let p = &s.problem;
        let c_inf = s.equilibrium.omega_inf.rows(0, 3).into_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let f = random_field(p, &c_inf, &mut rng);
            assert!(p.mass_residual(&f).1 < 1e-12);
            assert!(f.simplex_residual() < 1e-12);
            assert!(f.rho.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn balance_of_presets() {
        let b = balance_status(&preset("cycle").unwrap().network);
        assert!(b.complex && !b.detailed && !b.reversible);
        let b = balance_status(&preset("example4").unwrap().network);
        assert!(b.complex && b.detailed);
    }

    #[test]
    fn example4_detection() {
        assert!(is_example4_network(&preset("example4").unwrap().network));
        assert!(!is_example4_network(&preset("binary").unwrap().network));
    }

    #[test]
    fn diagnostics_rows_have_every_column() {
        let s = preset("binary").unwrap().scenario_with(6, &presets::InitialData::Uniform).unwrap();
        let cfg = msentropy_core::StepperConfig { tau: 0.1, t_end: 0.1, ..Default::default() };
        let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
        let row = diagnostics_row(&rep.records[1]);
        assert_eq!(row.split(',').count(), DIAGNOSTICS_HEADER.split(',').count());
        assert_eq!(snapshot_header(2), "t,cell,z,rho_1,rho_2,x_1,x_2");
    }
}
