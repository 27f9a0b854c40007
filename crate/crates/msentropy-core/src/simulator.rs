//! Implicit Euler finite-volume scheme in entropy variables on `[0, L]`.
//!
//! Unknowns are the entropy variables `w` in every cell. Each step solves
//!
//! ```text
//! (rho'(w_k) - rho'_prev)/tau + (J_{k+1/2} - J_{k-1/2})/dz + eps w_k = r'(x(w_k))
//! J_{k+1/2} = -B(wbar) (w_{k+1} - w_k)/dz,   wbar = (w_k + w_{k+1})/2
//! ```
//!
//! with zero flux through both boundary faces, by damped Newton with a
//! block-tridiagonal Jacobian.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::analysis;
use crate::linalg;
use crate::mstransport::{self, LocalState, Mixture, TransportError};
use crate::network::{ConservationStructure, ReactionNetwork};

/// Densities below this are raised before the first step.
pub const CLAMP_FLOOR: f64 = 1e-10;
/// Entropy margins below this count as violations.
pub const MARGIN_TOLERANCE: f64 = -1e-9;
/// Mass drift that aborts a run.
pub const DRIFT_LIMIT: f64 = 1e-6;
/// Tolerance for the initial mass check.
pub const INITIAL_MASS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("Newton did not converge at t = {time} after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { time: f64, iterations: usize, residual: f64, last: Box<StateField> },
    #[error("conservation law {row} violated: |(Q cbar - M0)_{row}| = {residual:e}")]
    ConservationDrift { row: usize, residual: f64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Uniform grid of `cells` cells on `[0, length]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    cells: usize,
    length: f64,
}

impl Grid1D {
    pub fn new(cells: usize, length: f64) -> Result<Self, SimError> {
        if cells < 2 {
            return Err(SimError::InvalidConfig("at least two cells are required".into()));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(SimError::InvalidConfig("domain length must be positive".into()));
        }
        Ok(Self { cells, length })
    }

    pub fn unit(cells: usize) -> Result<Self, SimError> {
        Self::new(cells, 1.0)
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dz(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dz()
    }
}

/// Mass densities per cell (rows) and species (columns) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub rho: DMatrix<f64>,
    pub time: f64,
}

impl StateField {
    /// Requires nonnegative rows summing to one within `1e-12`.
    pub fn new(rho: DMatrix<f64>, time: f64) -> Result<Self, SimError> {
        if rho.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::InvalidState("densities must be finite and nonnegative".into()));
        }
        let field = Self { rho, time };
        let res = field.simplex_residual();
        if res > 1e-12 {
            return Err(SimError::InvalidState(format!("rows do not sum to one (residual {res:e})")));
        }
        Ok(field)
    }

    /// Clamps every density to at least [`CLAMP_FLOOR`] and renormalises each
    /// row. Returns the field and the number of clamped entries.
    pub fn projected(mut rho: DMatrix<f64>, time: f64) -> Result<(Self, usize), SimError> {
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidState("densities must be finite".into()));
        }
        let mut clamps = 0;
        for k in 0..rho.nrows() {
            let mut row: Vec<f64> = rho.row(k).iter().copied().collect();
            clamps += mstransport::clamp_densities(&mut row, CLAMP_FLOOR);
            for (j, v) in row.into_iter().enumerate() {
                rho[(k, j)] = v;
            }
        }
        Ok((Self { rho, time }, clamps))
    }

    /// Every cell carries the densities `rho`.
    pub fn uniform(cells: usize, rho: &[f64]) -> Result<Self, SimError> {
        Self::new(DMatrix::from_fn(cells, rho.len(), |_, j| rho[j]), 0.0)
    }

    pub fn cells(&self) -> usize {
        self.rho.nrows()
    }

    pub fn n(&self) -> usize {
        self.rho.ncols()
    }

    pub fn cell(&self, k: usize) -> Vec<f64> {
        self.rho.row(k).iter().copied().collect()
    }

    pub fn local_state(&self, k: usize, masses: &DVector<f64>) -> Result<LocalState, SimError> {
        Ok(LocalState::from_rho(&self.cell(k), masses)?)
    }

    /// Largest `|sum_i rho_ki - 1|` over cells.
    pub fn simplex_residual(&self) -> f64 {
        (0..self.cells()).map(|k| (self.rho.row(k).sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Spatial mean of the partial concentrations `rho_i / M_i`.
    pub fn mean_concentrations(&self, masses: &DVector<f64>) -> DVector<f64> {
        let k = self.cells() as f64;
        DVector::from_fn(self.n(), |i, _| self.rho.column(i).sum() / masses[i] / k)
    }

    /// Molar fractions per cell.
    pub fn fractions(&self, masses: &DVector<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.cells(), self.n());
        for k in 0..self.cells() {
            let c: Vec<f64> = (0..self.n()).map(|i| self.rho[(k, i)] / masses[i]).collect();
            let total: f64 = c.iter().sum();
            for i in 0..self.n() {
                x[(k, i)] = c[i] / total;
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub t_end: f64,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self { tau: 1e-3, epsilon: 0.0, newton_tol: 1e-10, newton_max: 50, t_end: 1.0 }
    }
}

impl StepperConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SimError::InvalidConfig("tau must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(SimError::InvalidConfig("epsilon must be nonnegative".into()));
        }
        if !(self.newton_tol > 0.0) || self.newton_max == 0 {
            return Err(SimError::InvalidConfig("Newton tolerance and iteration limit must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SimError::InvalidConfig("t_end must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps `round(t_end / tau)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.tau).round().max(1.0) as usize
    }
}

/// Everything a run needs besides the state and the stepper settings.
#[derive(Debug, Clone)]
pub struct Problem {
    pub network: ReactionNetwork,
    pub mixture: Mixture,
    pub cons: ConservationStructure,
    pub x_inf: DVector<f64>,
    pub grid: Grid1D,
}

impl Problem {
    pub fn new(
        network: ReactionNetwork,
        mixture: Mixture,
        cons: ConservationStructure,
        x_inf: DVector<f64>,
        grid: Grid1D,
    ) -> Result<Self, SimError> {
        if mixture.masses() != &network.masses() {
            return Err(SimError::InvalidConfig("mixture and network molar masses differ".into()));
        }
        if x_inf.len() != network.n() || x_inf.iter().any(|&v| !(v > 0.0)) {
            return Err(SimError::InvalidConfig("x_inf must be a positive vector of length n".into()));
        }
        Ok(Self { network, mixture, cons, x_inf, grid })
    }

    pub fn n(&self) -> usize {
        self.network.n()
    }

    pub fn masses(&self) -> &DVector<f64> {
        self.mixture.masses()
    }

    /// Entropy variables of every cell.
    pub fn entropy_variables(&self, field: &StateField) -> Result<Vec<DVector<f64>>, SimError> {
        let masses = self.masses();
        (0..field.cells())
            .map(|k| {
                let st = field.local_state(k, masses)?;
                Ok(mstransport::entropy_variables_fractions(&st.x, &self.x_inf, masses))
            })
            .collect()
    }

    /// Mobility at the state with entropy variables `w`.
    pub fn mobility_at(&self, w: &DVector<f64>) -> Result<DMatrix<f64>, SimError> {
        let x = mstransport::fractions_from_entropy_variables(w.as_slice(), &self.x_inf, self.masses());
        let st = LocalState::from_fractions(x.as_slice(), self.masses())?;
        mstransport::mobility_exact(&self.mixture, &st)
            .ok_or(SimError::Transport(TransportError::SingularSystem { condition: f64::INFINITY }))
    }

    /// Largest entry of `|Q cbar - M0|` and the row where it occurs.
    pub fn mass_residual(&self, field: &StateField) -> (usize, f64) {
        let res = self.cons.mass_residual(&field.mean_concentrations(self.masses()));
        res.iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
    }
}

/// Cell quantities at the current iterate.
struct CellEval {
    rho: DVector<f64>,
    r_prime: DVector<f64>,
    /// `(d rho'/dw, d r'/dw)`.
    jac: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn eval_cell(p: &Problem, w: &DVector<f64>, with_jac: bool) -> Result<CellEval, SimError> {
    let n = p.n();
    let masses = p.masses();
    let x = mstransport::fractions_from_entropy_variables(w.as_slice(), &p.x_inf, masses);
    if x.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(SimError::InvalidState("entropy variables left the representable range".into()));
    }
    let s: f64 = x.iter().zip(masses.iter()).map(|(a, m)| a * m).sum();
    let rho = x.component_mul(masses) / s;
    let r = p.network.reaction_rates(x.as_slice());
    let r_prime = r.rows(0, n - 1).into_owned();
    let jac = if with_jac {
        let g = mstransport::entropy_jacobian_fractions(masses, &x);
        let g_inv = g
            .cholesky()
            .ok_or_else(|| SimError::InvalidState("entropy Hessian not positive definite".into()))?
            .inverse();
        let drho_dx = mstransport::density_jacobian(masses, &x);
        let rj = p.network.reaction_rates_jacobian(x.as_slice());
        // x_n = 1 - sum x'
        let dr_dx = DMatrix::from_fn(n - 1, n - 1, |i, j| rj[(i, j)] - rj[(i, n - 1)]);
        Some((drho_dx * &g_inv, dr_dx * g_inv))
    } else {
        None
    };
    Ok(CellEval { rho, r_prime, jac })
}

/// Face flux `J` and, if requested, its derivatives with respect to the
/// left and right cell values.
struct FaceEval {
    flux: DVector<f64>,
    d_left: Option<DMatrix<f64>>,
    d_right: Option<DMatrix<f64>>,
}

fn eval_face(p: &Problem, wl: &DVector<f64>, wr: &DVector<f64>, with_jac: bool) -> Result<FaceEval, SimError> {
    let dz = p.grid.dz();
    let wbar = (wl + wr) * 0.5;
    let dw = wr - wl;
    let b = p.mobility_at(&wbar)?;
    let flux = -(&b * &dw) / dz;
    if !with_jac {
        return Ok(FaceEval { flux, d_left: None, d_right: None });
    }
    let m = wl.len();
    // C[:, j] = (dB/dwbar_j) dw by central differences
    let mut c = DMatrix::zeros(m, m);
    for j in 0..m {
        let h = 1e-6 * wbar[j].abs().max(1.0);
        let mut plus = wbar.clone();
        let mut minus = wbar.clone();
        plus[j] += h;
        minus[j] -= h;
        let db = (p.mobility_at(&plus)? - p.mobility_at(&minus)?) / (2.0 * h);
        c.set_column(j, &(db * &dw));
    }
    let d_left = (&b - &c * 0.5) / dz;
    let d_right = -(&b + &c * 0.5) / dz;
    Ok(FaceEval { flux, d_left: Some(d_left), d_right: Some(d_right) })
}

struct Assembly {
    residual: Vec<DVector<f64>>,
    cells: Vec<CellEval>,
    lower: Vec<DMatrix<f64>>,
    diag: Vec<DMatrix<f64>>,
    upper: Vec<DMatrix<f64>>,
}

fn assemble(
    p: &Problem,
    cfg: &StepperConfig,
    prev: &[DVector<f64>],
    w: &[DVector<f64>],
    with_jac: bool,
) -> Result<Assembly, SimError> {
    let kcells = w.len();
    let m = p.n() - 1;
    let dz = p.grid.dz();
    let tau = cfg.tau;
    let cells = w.iter().map(|wk| eval_cell(p, wk, with_jac)).collect::<Result<Vec<_>, _>>()?;
    let faces = (0..kcells - 1)
        .map(|k| eval_face(p, &w[k], &w[k + 1], with_jac))
        .collect::<Result<Vec<_>, _>>()?;

    let mut residual = Vec::with_capacity(kcells);
    for k in 0..kcells {
        let mut f = (cells[k].rho.rows(0, m) - &prev[k]) / tau + &w[k] * cfg.epsilon - &cells[k].r_prime;
        if k + 1 < kcells {
            f += &faces[k].flux / dz;
        }
        if k > 0 {
            f -= &faces[k - 1].flux / dz;
        }
        residual.push(f);
    }

    let (mut lower, mut diag, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    if with_jac {
        let eye = DMatrix::<f64>::identity(m, m);
        for k in 0..kcells {
            let (drho, dr) = cells[k].jac.as_ref().expect("requested");
            let mut d = drho / tau - dr + &eye * cfg.epsilon;
            let mut lo = DMatrix::zeros(m, m);
            let mut up = DMatrix::zeros(m, m);
            if k + 1 < kcells {
                d += faces[k].d_left.as_ref().expect("requested") / dz;
                up = faces[k].d_right.as_ref().expect("requested") / dz;
            }
            if k > 0 {
                d -= faces[k - 1].d_right.as_ref().expect("requested") / dz;
                lo = -(faces[k - 1].d_left.as_ref().expect("requested") / dz);
            }
            lower.push(lo);
            diag.push(d);
            upper.push(up);
        }
    }
    Ok(Assembly { residual, cells, lower, diag, upper })
}

fn residual_norms(res: &[DVector<f64>]) -> (f64, f64) {
    let max = res.iter().map(linalg::max_abs).fold(0.0, f64::max);
    let two = res.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
    (max, two)
}

/// Result of one implicit step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: StateField,
    /// Entropy variables of the new state, one vector per cell.
    pub w: Vec<DVector<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

/// One implicit Euler step from `prev`.
pub fn implicit_step(p: &Problem, prev: &StateField, cfg: &StepperConfig) -> Result<StepOutcome, SimError> {
    let w_prev = p.entropy_variables(prev)?;
    implicit_step_from(p, prev, &w_prev, cfg)
}

fn implicit_step_from(
    p: &Problem,
    prev: &StateField,
    w_prev: &[DVector<f64>],
    cfg: &StepperConfig,
) -> Result<StepOutcome, SimError> {
    let m = p.n() - 1;
    if prev.cells() != p.grid.cells() || prev.n() != p.n() {
        return Err(SimError::InvalidState("field does not match the grid or network".into()));
    }
    let rho_prev: Vec<DVector<f64>> = (0..prev.cells()).map(|k| prev.rho.row(k).columns(0, m).transpose()).collect();
    let time = prev.time + cfg.tau;
    let mut w = w_prev.to_vec();
    let mut asm = assemble(p, cfg, &rho_prev, &w, true)?;
    let (mut rmax, mut r2) = residual_norms(&asm.residual);
    let mut iterations = 0;
    if rmax <= cfg.newton_tol {
        // already a solution: keep the densities untouched
        return Ok(StepOutcome { state: StateField { rho: prev.rho.clone(), time }, w, iterations, residual: rmax });
    }
    while iterations < cfg.newton_max {
        iterations += 1;
        let rhs: Vec<DVector<f64>> = asm.residual.iter().map(|r| -r).collect();
        let delta = linalg::solve_block_tridiagonal(&asm.lower, &asm.diag, &asm.upper, &rhs);
        let Some(delta) = delta else { break };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<DVector<f64>> = w.iter().zip(&delta).map(|(a, d)| a + d * t).collect();
            if let Ok(a) = assemble(p, cfg, &rho_prev, &trial, false) {
                let (tmax, t2) = residual_norms(&a.residual);
                if t2.is_finite() && (t2 <= (1.0 - 1e-4 * t) * r2 || tmax <= cfg.newton_tol) {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else { break };
        w = next;
        asm = assemble(p, cfg, &rho_prev, &w, true)?;
        (rmax, r2) = residual_norms(&asm.residual);
        if rmax <= cfg.newton_tol {
            let mut rho = DMatrix::zeros(prev.cells(), p.n());
            for (k, cell) in asm.cells.iter().enumerate() {
                rho.set_row(k, &cell.rho.transpose());
            }
            return Ok(StepOutcome { state: StateField { rho, time }, w, iterations, residual: rmax });
        }
    }
    let mut rho = DMatrix::zeros(prev.cells(), p.n());
    for (k, cell) in asm.cells.iter().enumerate() {
        rho.set_row(k, &cell.rho.transpose());
    }
    Err(SimError::NewtonDiverged { time, iterations, residual: rmax, last: Box::new(StateField { rho, time }) })
}

/// `E^{k-1} - E^k - tau D^k`.
pub fn discrete_entropy_check(e_prev: f64, e_curr: f64, d_curr: f64, tau: f64) -> f64 {
    e_prev - e_curr - tau * d_curr
}

/// Diagnostics recorded after every step (and for the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub entropy: f64,
    pub production: f64,
    pub production_gradient: f64,
    pub production_reaction: f64,
    /// `D / E`, zero when `E` vanishes.
    pub ratio: f64,
    pub mass_residual: f64,
    pub simplex_residual: f64,
    /// Per-species `||x_i - x_inf_i||_{L^1}`.
    pub l1: Vec<f64>,
    /// Per-species `||x_i - x_inf_i||_{L^2}`.
    pub l2: Vec<f64>,
    pub newton_iters: usize,
    pub entropy_margin: f64,
    pub ckp_margin: f64,
}

impl StepRecord {
    pub fn l1_dist(&self) -> f64 {
        self.l1.iter().sum()
    }

    pub fn l2_dist(&self) -> f64 {
        self.l2.iter().sum()
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<StepRecord>,
    pub final_state: StateField,
    /// Steps whose entropy margin fell below [`MARGIN_TOLERANCE`].
    pub margin_violations: Vec<usize>,
    pub worst_margin: f64,
}

impl RunReport {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.entropy).collect()
    }
}

fn record(
    p: &Problem,
    field: &StateField,
    w: &[DVector<f64>],
    step: usize,
    newton_iters: usize,
    prev_entropy: Option<f64>,
    tau: f64,
) -> Result<StepRecord, SimError> {
    let entropy = analysis::relative_entropy(p, field)?;
    let prod = analysis::entropy_production_w(p, field, w)?;
    let (_, mass_residual) = p.mass_residual(field);
    let (l1, l2) = analysis::lp_distances(p, field);
    let entropy_margin = prev_entropy.map_or(0.0, |e0| discrete_entropy_check(e0, entropy, prod.total(), tau));
    let ckp_margin = analysis::ckp_margin(entropy, &l1, p.mixture.m_max());
    Ok(StepRecord {
        step,
        t: field.time,
        entropy,
        production: prod.total(),
        production_gradient: prod.gradient,
        production_reaction: prod.reaction,
        ratio: if entropy > 0.0 { prod.total() / entropy } else { 0.0 },
        mass_residual,
        simplex_residual: field.simplex_residual(),
        l1,
        l2,
        newton_iters,
        entropy_margin,
        ckp_margin,
    })
}

/// Checks `Q cbar = M0` for the initial field.
pub fn check_initial_mass(p: &Problem, field: &StateField) -> Result<(), SimError> {
    let (row, residual) = p.mass_residual(field);
    if residual > INITIAL_MASS_TOLERANCE {
        return Err(SimError::ConservationDrift { row, residual });
    }
    Ok(())
}

/// [`run_with`] without an observer.
pub fn run(p: &Problem, initial: &StateField, cfg: &StepperConfig) -> Result<RunReport, SimError> {
    run_with(p, initial, cfg, |_, _| {})
}

/// Steps from `initial` to `t_end`, calling `observe` after each recorded
/// state (including the initial one).
pub fn run_with<F>(p: &Problem, initial: &StateField, cfg: &StepperConfig, mut observe: F) -> Result<RunReport, SimError>
where
    F: FnMut(&StepRecord, &StateField),
{
    cfg.validate()?;
    if initial.cells() != p.grid.cells() || initial.n() != p.n() {
        return Err(SimError::InvalidState("initial field does not match the grid or network".into()));
    }
    check_initial_mass(p, initial)?;
    let mut state = initial.clone();
    let mut w = p.entropy_variables(&state)?;
    let first = record(p, &state, &w, 0, 0, None, cfg.tau)?;
    observe(&first, &state);
    let mut records = vec![first];
    let mut margin_violations = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for step in 1..=cfg.steps() {
        let mut out = implicit_step_from(p, &state, &w, cfg)?;
        out.state.time = step as f64 * cfg.tau;
        let rec = record(p, &out.state, &out.w, step, out.iterations, Some(records[step - 1].entropy), cfg.tau)?;
        if rec.mass_residual > DRIFT_LIMIT {
            let (row, residual) = p.mass_residual(&out.state);
            return Err(SimError::ConservationDrift { row, residual });
        }
        if rec.entropy_margin < MARGIN_TOLERANCE {
            margin_violations.push(step);
        }
        worst_margin = worst_margin.min(rec.entropy_margin);
        observe(&rec, &out.state);
        records.push(rec);
        state = out.state;
        w = out.w;
    }
    Ok(RunReport { records, final_state: state, margin_violations, worst_margin })
}
