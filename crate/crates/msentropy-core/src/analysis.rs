//! Entropy functionals, decay-rate fits and numerical checks of the
//! entropy inequalities and their constants.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::equilibrium::EquilibriumResult;
use crate::linalg;
use crate::mstransport::{self, LocalState, TransportError};
use crate::network::{ConservationStructure, ReactionNetwork};
use crate::simulator::{Problem, StateField, StepRecord};

/// Entropy values below this end the tail-fit window.
pub const ENTROPY_FLOOR: f64 = 1e-14;
/// Minimum number of points in the tail-fit window.
pub const MIN_FIT_POINTS: usize = 10;
/// Samples per chunk of the finite-dimensional sweep; chunks are the unit of
/// parallel work and each owns one generator stream.
pub const CHUNK_SIZE: usize = 1000;
/// Points closer than this to the orthant boundary are skipped.
pub const BOUNDARY_SKIP: f64 = 1e-8;
/// Points closer than this to the equilibrium are excluded (0/0).
pub const CENTER_EXCLUSION: f64 = 1e-10;
/// First Neumann eigenvalue of `-d^2/dz^2` on the unit interval.
pub const POINCARE_EIGENVALUE: f64 = std::f64::consts::PI * std::f64::consts::PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("only {points} usable points in the fit window (need {MIN_FIT_POINTS})")]
    InsufficientData { points: usize },
    #[error("relative entropy underflows in the fit window")]
    NonPositiveEntropy,
    #[error("no feasible point found in the polytope")]
    EmptyPolytope,
    #[error("the polytope is unbounded")]
    UnboundedPolytope,
    #[error("the check needs a reversible network")]
    NotReversible,
    #[error("infeasible parameters: {0}")]
    InfeasibleParameters(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

// ---------------------------------------------------------------------------
// entropy and entropy production

/// `E = int h(rho') dz` by the midpoint rule.
pub fn relative_entropy(p: &Problem, field: &StateField) -> Result<f64, TransportError> {
    let dz = p.grid.dz();
    let masses = p.masses();
    let mut e = 0.0;
    for k in 0..field.cells() {
        let st = LocalState::from_rho(&field.cell(k), masses)?;
        e += dz * mstransport::entropy_density_fractions(st.c_total, &st.x, &p.x_inf);
    }
    Ok(e)
}

/// Gradient and reaction parts of the entropy production.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Production {
    pub gradient: f64,
    pub reaction: f64,
}

impl Production {
    pub fn total(&self) -> f64 {
        self.gradient + self.reaction
    }
}

/// Pointwise reaction dissipation.
///
/// Reversible networks use `sum (kf x^a - kb x^b) ln(kf x^a / kb x^b)`;
/// one-way networks use `-sum_i (r_i/M_i) ln(x_i/x_inf_i)`, which reduces to
/// the former under detailed balance.
pub fn reaction_production(network: &ReactionNetwork, x: &[f64], x_inf: &DVector<f64>) -> f64 {
    if network.is_reversible() {
        network
            .reversible_rates(x)
            .into_iter()
            .map(|(f, b)| if f == b { 0.0 } else { (f - b) * (f / b).ln() })
            .sum()
    } else {
        let r = network.reaction_rates(x);
        let masses = network.masses();
        -(0..x.len()).map(|i| r[i] / masses[i] * (x[i] / x_inf[i]).ln()).sum::<f64>()
    }
}

/// `4 sum ((kf x^a)^{1/2} - (kb x^b)^{1/2})^2`, a lower bound of the
/// reversible reaction dissipation. `None` for one-way networks.
pub fn reaction_production_lower_bound(network: &ReactionNetwork, x: &[f64]) -> Option<f64> {
    if !network.is_reversible() {
        return None;
    }
    Some(network.reversible_rates(x).into_iter().map(|(f, b)| 4.0 * (f.sqrt() - b.sqrt()).powi(2)).sum())
}

/// `(x - y) ln(x/y) - 4 (sqrt x - sqrt y)^2`, evaluated without cancellation.
pub fn elementary_margin(x: f64, y: f64) -> f64 {
    let d = x - y;
    let s = x.sqrt() + y.sqrt();
    d * ((d / y).ln_1p() - 4.0 * d / (s * s))
}

/// Smallest [`elementary_margin`] over `samples` log-uniform pairs in
/// `[1e-4, 1e4]^2`.
pub fn elementary_sweep<R: Rng>(rng: &mut R, samples: usize) -> f64 {
    let ln_range = 4.0 * std::f64::consts::LN_10;
    (0..samples)
        .map(|_| {
            let x = rng.gen_range(-ln_range..ln_range).exp();
            let y = rng.gen_range(-ln_range..ln_range).exp();
            elementary_margin(x, y)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Entropy production with the scheme's stencil: `sum_faces dw^T B(wbar) dw / dz`
/// plus the midpoint reaction term.
pub fn entropy_production(p: &Problem, field: &StateField) -> Result<Production, TransportError> {
    let w = p.entropy_variables(field).map_err(to_transport)?;
    entropy_production_w(p, field, &w)
}

/// As [`entropy_production`] with the entropy variables supplied.
pub fn entropy_production_w(p: &Problem, field: &StateField, w: &[DVector<f64>]) -> Result<Production, TransportError> {
    let dz = p.grid.dz();
    let mut gradient = 0.0;
    for k in 0..field.cells().saturating_sub(1) {
        let dw = &w[k + 1] - &w[k];
        if dw.iter().all(|v| *v == 0.0) {
            continue;
        }
        let b = p.mobility_at(&((&w[k] + &w[k + 1]) * 0.5)).map_err(to_transport)?;
        gradient += dw.dot(&(b * &dw)) / dz;
    }
    let x = field.fractions(p.masses());
    let mut reaction = 0.0;
    for k in 0..field.cells() {
        let xk: Vec<f64> = x.row(k).iter().copied().collect();
        reaction += dz * reaction_production(&p.network, &xk, &p.x_inf);
    }
    Ok(Production { gradient, reaction })
}

fn to_transport(e: crate::simulator::SimError) -> TransportError {
    match e {
        crate::simulator::SimError::Transport(t) => t,
        other => TransportError::DomainError(other.to_string()),
    }
}

/// Per-species `L^1` and `L^2` distances of the fractions to `x_inf`.
pub fn lp_distances(p: &Problem, field: &StateField) -> (Vec<f64>, Vec<f64>) {
    let dz = p.grid.dz();
    let x = field.fractions(p.masses());
    let n = p.n();
    let mut l1 = vec![0.0; n];
    let mut l2 = vec![0.0; n];
    for k in 0..field.cells() {
        for i in 0..n {
            let d = (x[(k, i)] - p.x_inf[i]).abs();
            l1[i] += dz * d;
            l2[i] += dz * d * d;
        }
    }
    (l1, l2.into_iter().map(f64::sqrt).collect())
}

pub fn ckp_constant(m_max: f64) -> f64 {
    1.0 / (4.0 * m_max)
}

/// `E - C_CKP sum_i ||x_i - x_inf_i||_{L^1}^2`.
pub fn ckp_margin(entropy: f64, l1: &[f64], m_max: f64) -> f64 {
    entropy - ckp_constant(m_max) * l1.iter().map(|v| v * v).sum::<f64>()
}

// ---------------------------------------------------------------------------
// decay fits

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Minus the slope of `ln E` against `t`.
    pub lambda: f64,
    pub r_squared: f64,
    /// Fitted `ln E` at `t = 0`.
    pub intercept: f64,
    pub points: usize,
    pub t_start: f64,
}

/// Indices of the fit window `[t_end/2, t_end]`, cut at the first entropy
/// below [`ENTROPY_FLOOR`].
fn fit_window(times: &[f64], entropies: &[f64]) -> Result<Vec<usize>, AnalysisError> {
    let Some(&t_end) = times.last() else {
        return Err(AnalysisError::InsufficientData { points: 0 });
    };
    let mut idx = Vec::new();
    let mut any = false;
    for (i, (&t, &e)) in times.iter().zip(entropies).enumerate() {
        if t < 0.5 * t_end {
            continue;
        }
        any = true;
        if !(e >= ENTROPY_FLOOR) {
            break;
        }
        idx.push(i);
    }
    if any && idx.is_empty() {
        return Err(AnalysisError::NonPositiveEntropy);
    }
    if idx.len() < MIN_FIT_POINTS {
        return Err(AnalysisError::InsufficientData { points: idx.len() });
    }
    Ok(idx)
}

/// Least-squares fit of `ln E` against `t` on `[t_end/2, t_end]`.
pub fn fit_decay_rate(times: &[f64], entropies: &[f64]) -> Result<DecayFit, AnalysisError> {
    let idx = fit_window(times, entropies)?;
    let m = idx.len() as f64;
    let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| entropies[i].ln()).collect();
    let tm = ts.iter().sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let sxx: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ym - slope * tm;
    let ss_tot: f64 = ys.iter().map(|y| (y - ym).powi(2)).sum();
    let ss_res: f64 = ts.iter().zip(&ys).map(|(t, y)| (y - intercept - slope * t).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(DecayFit { lambda: -slope, r_squared, intercept, points: idx.len(), t_start: ts[0] })
}

/// `L^2` decay bound on the tail window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpDecayCheck {
    /// `C_E = max E(t) e^{lambda t}` over the window.
    pub entropy_constant: f64,
    /// `C` in `sum_i ||x_i - x_inf_i||_{L^2} <= C e^{-lambda t / 4}` from
    /// `C_E`, the CKP constant and `||f||_2^2 <= ||f||_inf ||f||_1`.
    pub bound_constant: f64,
    /// Smallest constant that fits the observed distances.
    pub fitted_constant: f64,
    /// `min_t (bound - observed)`.
    pub worst_margin: f64,
}

/// Checks `sum ||x_i - x_inf_i||_{L^2} <= n^{3/4} (C_E / C_CKP)^{1/4} e^{-lambda t/4}`
/// on the fit window of `records`.
pub fn lp_decay_check(records: &[StepRecord], fit: &DecayFit, n: usize, m_max: f64) -> Result<LpDecayCheck, AnalysisError> {
    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let entropies: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    let idx = fit_window(&times, &entropies)?;
    let lambda = fit.lambda;
    let entropy_constant = idx.iter().map(|&i| entropies[i] * (lambda * times[i]).exp()).fold(0.0, f64::max);
    let bound_constant = (n as f64).powf(0.75) * (entropy_constant / ckp_constant(m_max)).powf(0.25);
    let mut fitted_constant = 0.0_f64;
    let mut worst_margin = f64::INFINITY;
    for &i in &idx {
        let decay = (-lambda * times[i] / 4.0).exp();
        let observed = records[i].l2_dist();
        fitted_constant = fitted_constant.max(observed / decay);
        worst_margin = worst_margin.min(bound_constant * decay - observed);
    }
    Ok(LpDecayCheck { entropy_constant, bound_constant, fitted_constant, worst_margin })
}

// ---------------------------------------------------------------------------
// constant chains

/// `Phi(y) = (y ln y - y + 1)/(sqrt y - 1)^2`, continuous at `y = 1`.
pub fn phi(y: f64) -> f64 {
    let u = y - 1.0;
    if u.abs() < 1e-3 {
        // (sqrt(y) - 1)^2 = u^2 / (sqrt(y) + 1)^2 and psi(u)/u^2 by its series
        let u2 = u * u;
        let psi_over_u2 = 0.5 - u / 6.0 + u2 / 12.0 - u2 * u / 20.0 + u2 * u2 / 30.0;
        return psi_over_u2 * (y.sqrt() + 1.0).powi(2);
    }
    let s = y.sqrt() - 1.0;
    (y * y.ln() - y + 1.0) / (s * s)
}

/// Both sides of the relative-entropy upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyUpperBound {
    pub entropy: f64,
    /// `sum_i int (c_i^{1/2} - avg(c_i^{1/2}))^2`.
    pub spatial: f64,
    /// `sum_i (avg(c_i)^{1/2} - c_inf_i^{1/2})^2`.
    pub mean: f64,
    /// `C` with `E <= 2C (3 spatial + 2 mean)`.
    pub constant: f64,
    pub slack: f64,
}

/// Explicit constant of the upper bound: `C = C_1 n (n M_max^2)(4/M_min)` with
/// `C_1 = max_i Phi(1/x_inf_i)/(M_min x_inf_i)`.
///
/// One factor `n` comes from summing over species and one from
/// Cauchy–Schwarz on the mean-value expansion of `x_i - x_inf_i`.
pub fn entropy_bound_constant(masses: &DVector<f64>, x_inf: &DVector<f64>) -> f64 {
    let n = masses.len() as f64;
    let m_min = masses.min();
    let m_max = masses.max();
    let c1 = x_inf.iter().map(|&x| phi(1.0 / x) / x).fold(0.0, f64::max) / m_min;
    c1 * n * (n * m_max * m_max) * (4.0 / m_min)
}

pub fn verify_e_upper_bound(p: &Problem, field: &StateField) -> Result<EntropyUpperBound, TransportError> {
    let entropy = relative_entropy(p, field)?;
    let masses = p.masses();
    let n = p.n();
    let length = p.grid.length();
    let dz = p.grid.dz();
    let c_inf = 1.0 / masses.dot(&p.x_inf);
    let mut spatial = 0.0;
    let mut mean = 0.0;
    for i in 0..n {
        let roots: Vec<f64> = (0..field.cells()).map(|k| (field.rho[(k, i)] / masses[i]).sqrt()).collect();
        let avg_root = roots.iter().sum::<f64>() * dz / length;
        spatial += roots.iter().map(|r| dz * (r - avg_root).powi(2)).sum::<f64>();
        let avg_c = roots.iter().map(|r| r * r).sum::<f64>() * dz / length;
        mean += (avg_c.sqrt() - (c_inf * p.x_inf[i]).sqrt()).powi(2);
    }
    let constant = entropy_bound_constant(masses, &p.x_inf);
    let slack = 2.0 * constant * (3.0 * spatial + 2.0 * mean) - entropy;
    Ok(EntropyUpperBound { entropy, spatial, mean, constant, slack })
}

/// Pointwise terms of the gradient chain at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientChain {
    /// `sum_i |grad x_i^{1/2}|^2`.
    pub fractions: f64,
    /// `|grad c^{1/2}|^2`.
    pub total: f64,
    /// `sum_i |grad c_i^{1/2}|^2`.
    pub partial: f64,
}

/// Evaluates the chain-rule gradients of `x_i^{1/2}`, `c^{1/2}` and
/// `c_i^{1/2}` for fractions `x` with gradient `grad_x` (summing to zero).
pub fn gradient_chain(masses: &DVector<f64>, x: &DVector<f64>, grad_x: &DVector<f64>) -> GradientChain {
    let n = x.len();
    let c = 1.0 / masses.dot(x);
    let grad_c = -c * c * masses.dot(grad_x);
    let fractions = (0..n).map(|i| (grad_x[i] / (2.0 * x[i].sqrt())).powi(2)).sum();
    let total = (grad_c / (2.0 * c.sqrt())).powi(2);
    let partial = (0..n)
        .map(|i| {
            let ci = c * x[i];
            let g = x[i] * grad_c + c * grad_x[i];
            (g / (2.0 * ci.sqrt())).powi(2)
        })
        .sum();
    GradientChain { fractions, total, partial }
}

/// Constants of the gradient chain: `|grad c^{1/2}|^2 <= K3 S` and
/// `sum |grad c_i^{1/2}|^2 <= K4 S` with `S = sum |grad x_i^{1/2}|^2`.
pub fn gradient_chain_constants(masses: &DVector<f64>) -> (f64, f64) {
    let n = masses.len() as f64;
    let m_min = masses.min();
    let m_max = masses.max();
    let k3 = n * m_max * m_max / m_min.powi(3);
    (k3, 2.0 * k3 + 2.0 / m_min)
}

/// Minimum slacks of the gradient chain over the faces of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductionLowerBound {
    /// `C = 1/(K3 + K4)`.
    pub constant: f64,
    /// `min (S - C(|grad c^{1/2}|^2 + sum |grad c_i^{1/2}|^2))`.
    pub slack: f64,
    pub total_slack: f64,
    pub partial_slack: f64,
}

pub fn verify_d_lower_bound(p: &Problem, field: &StateField) -> Result<ProductionLowerBound, TransportError> {
    let w = p.entropy_variables(field).map_err(to_transport)?;
    let masses = p.masses();
    let (k3, k4) = gradient_chain_constants(masses);
    let constant = 1.0 / (k3 + k4);
    let dz = p.grid.dz();
    let n = p.n();
    let mut out = ProductionLowerBound { constant, slack: 0.0, total_slack: 0.0, partial_slack: 0.0 };
    for k in 0..field.cells().saturating_sub(1) {
        let wbar = (&w[k] + &w[k + 1]) * 0.5;
        let grad_w = (&w[k + 1] - &w[k]) / dz;
        let x = mstransport::fractions_from_entropy_variables(wbar.as_slice(), &p.x_inf, masses);
        let g = mstransport::entropy_jacobian_fractions(masses, &x);
        let gx_prime = g
            .cholesky()
            .ok_or_else(|| TransportError::DomainError("entropy Hessian not positive definite".into()))?
            .solve(&grad_w);
        let mut grad_x = DVector::zeros(n);
        grad_x.rows_mut(0, n - 1).copy_from(&gx_prime);
        grad_x[n - 1] = -gx_prime.sum();
        let ch = gradient_chain(masses, &x, &grad_x);
        out.slack = out.slack.min(ch.fractions - constant * (ch.total + ch.partial));
        out.total_slack = out.total_slack.min(k3 * ch.fractions - ch.total);
        out.partial_slack = out.partial_slack.min(k4 * ch.fractions - ch.partial);
    }
    Ok(out)
}

/// For networks with equal homogeneities `|alpha| = |beta|`, the ratio of the
/// reaction dissipation in fractions to that in concentrations is
/// `c^{-|alpha|}` and must lie in `[M_min^s, M_max^s]`. Returns the smallest
/// relative margin to that interval, or `None` if the hypothesis fails.
pub fn homogeneity_check(p: &Problem, field: &StateField) -> Option<f64> {
    let net = &p.network;
    if !net.is_reversible() || net.reversible().is_empty() {
        return None;
    }
    let homs: Vec<f64> = net.reversible().iter().map(|r| r.alpha.iter().sum::<f64>()).collect();
    if net.reversible().iter().zip(&homs).any(|(r, s)| (r.beta.iter().sum::<f64>() - s).abs() > 1e-12) {
        return None;
    }
    let masses = p.masses();
    let (m_min, m_max) = (masses.min(), masses.max());
    let mut worst = f64::INFINITY;
    for k in 0..field.cells() {
        let c: Vec<f64> = (0..p.n()).map(|i| field.rho[(k, i)] / masses[i]).collect();
        let total: f64 = c.iter().sum();
        let x: Vec<f64> = c.iter().map(|v| v / total).collect();
        let rx = net.reversible_rates(&x);
        let rc = net.reversible_rates(&c);
        for ((&(fx, bx), &(fc, bc)), s) in rx.iter().zip(&rc).zip(&homs) {
            let prod_c = if fc == bc { 0.0 } else { (fc - bc) * (fc / bc).ln() };
            if !(prod_c > 1e-300) {
                continue;
            }
            let prod_x = if fx == bx { 0.0 } else { (fx - bx) * (fx / bx).ln() };
            let factor = prod_x / prod_c;
            let lo = m_min.powf(*s);
            let hi = m_max.powf(*s);
            worst = worst.min((factor - lo) / lo).min((hi - factor) / hi);
        }
    }
    Some(worst)
}

/// `omega = (c_1, .., c_n, c)` per cell.
fn augmented_field(p: &Problem, field: &StateField) -> DMatrix<f64> {
    let masses = p.masses();
    let n = p.n();
    let mut om = DMatrix::zeros(field.cells(), n + 1);
    for k in 0..field.cells() {
        let mut total = 0.0;
        for i in 0..n {
            let c = field.rho[(k, i)] / masses[i];
            om[(k, i)] = c;
            total += c;
        }
        om[(k, n)] = total;
    }
    om
}

fn monomial(x: &[f64], e: &DVector<f64>) -> f64 {
    x.iter().zip(e.iter()).filter(|(_, &a)| a != 0.0).map(|(&v, &a)| v.powf(a)).product()
}

/// Augmented production `D~[omega]` with unit constant: gradient and
/// reaction parts. `None` for one-way networks.
pub fn augmented_production(p: &Problem, field: &StateField) -> Option<Production> {
    if !p.network.is_reversible() {
        return None;
    }
    let ex = p.network.augmented_exponents();
    let om = augmented_field(p, field);
    let dz = p.grid.dz();
    let mut gradient = 0.0;
    for k in 0..field.cells().saturating_sub(1) {
        for i in 0..om.ncols() {
            gradient += (om[(k + 1, i)].sqrt() - om[(k, i)].sqrt()).powi(2) / dz;
        }
    }
    let mut reaction = 0.0;
    for k in 0..field.cells() {
        let row: Vec<f64> = om.row(k).iter().copied().collect();
        for (a, r) in p.network.reversible().iter().enumerate() {
            let f = r.kf * monomial(&row, &ex.mu[a]);
            let b = r.kb * monomial(&row, &ex.nu[a]);
            if f != b {
                reaction += dz * (f - b) * (f / b).ln();
            }
        }
    }
    Some(Production { gradient, reaction })
}

/// `sum_a ((kf)^{1/2} sqrt(omega)^mu - (kb)^{1/2} sqrt(omega)^nu)^2`.
pub fn mean_reaction_defect(network: &ReactionNetwork, omega: &[f64]) -> f64 {
    let ex = network.augmented_exponents();
    let roots: Vec<f64> = omega.iter().map(|v| v.sqrt()).collect();
    network
        .reversible()
        .iter()
        .enumerate()
        .map(|(a, r)| (r.kf.sqrt() * monomial(&roots, &ex.mu[a]) - r.kb.sqrt() * monomial(&roots, &ex.nu[a])).powi(2))
        .sum()
}

/// Spatial means of `omega`.
pub fn mean_augmented(p: &Problem, field: &StateField) -> DVector<f64> {
    let om = augmented_field(p, field);
    let k = field.cells() as f64;
    DVector::from_fn(om.ncols(), |i, _| om.column(i).sum() / k)
}

/// Largest `int (f - avg f)^2 / int |f'|^2` over `f = c_i^{1/2}`, to compare
/// with the Poincaré constant `1/pi^2` of the unit interval.
pub fn poincare_ratio(p: &Problem, field: &StateField) -> f64 {
    let masses = p.masses();
    let dz = p.grid.dz();
    let mut worst = 0.0_f64;
    for i in 0..p.n() {
        let f: Vec<f64> = (0..field.cells()).map(|k| (field.rho[(k, i)] / masses[i]).sqrt()).collect();
        let avg = f.iter().sum::<f64>() / f.len() as f64;
        let var: f64 = f.iter().map(|v| dz * (v - avg).powi(2)).sum();
        let grad: f64 = f.windows(2).map(|w| (w[1] - w[0]).powi(2) / dz).sum();
        if grad > 0.0 {
            worst = worst.max(var / grad);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// finite-dimensional inequality

/// One point of the sampled manifold with both sides of the inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalitySample {
    pub omega_bar: DVector<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Sampling domain `{omega >= 0, Qhat omega = M0hat}` and the two sides of
/// the finite-dimensional inequality.
#[derive(Debug, Clone)]
pub struct FiniteDimProblem {
    network: ReactionNetwork,
    omega_inf: DVector<f64>,
    qhat: DMatrix<f64>,
    m0hat: DVector<f64>,
    /// Orthonormal basis of `ker Qhat`, as columns.
    basis: DMatrix<f64>,
    mu: Vec<DVector<f64>>,
    nu: Vec<DVector<f64>>,
}

/// Result of one chunk of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleChunk {
    pub accepted: usize,
    pub skipped_boundary: usize,
    pub excluded_center: usize,
    pub worst: Option<InequalitySample>,
    /// Smallest ratio with the right-hand side restricted to the `n` species.
    pub min_species_ratio: f64,
    pub max_manifold_residual: f64,
}

/// Merged sweep result.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDimReport {
    pub samples: usize,
    pub accepted: usize,
    pub skipped_boundary: usize,
    pub excluded_center: usize,
    /// Infimum of the sampled ratios (the estimated constant).
    pub inf_ratio: f64,
    pub worst: Option<InequalitySample>,
    pub min_species_ratio: f64,
    pub max_manifold_residual: f64,
}

/// Linearisation at the equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaEstimate {
    /// `min_eta` of the half quadratic-form ratio.
    pub delta: f64,
    /// Largest `|ratio(omega_inf + s eta) / (2 delta(eta)) - 1|`.
    pub max_relative_deviation: f64,
    pub directions: usize,
}

impl FiniteDimProblem {
    pub fn new(network: &ReactionNetwork, cons: &ConservationStructure, eq: &EquilibriumResult) -> Result<Self, AnalysisError> {
        if !network.is_reversible() || network.reversible().is_empty() {
            return Err(AnalysisError::NotReversible);
        }
        if eq.omega_inf.iter().any(|&v| !(v > 0.0)) {
            return Err(AnalysisError::EmptyPolytope);
        }
        let basis = linalg::null_space(&cons.qhat, 1e-10).ok_or(AnalysisError::EmptyPolytope)?;
        if basis.ncols() == 0 {
            return Err(AnalysisError::EmptyPolytope);
        }
        let ex = network.augmented_exponents();
        Ok(Self {
            network: network.clone(),
            omega_inf: eq.omega_inf.clone(),
            qhat: cons.qhat.clone(),
            m0hat: cons.m0hat.clone(),
            basis,
            mu: ex.mu,
            nu: ex.nu,
        })
    }

    pub fn dimension(&self) -> usize {
        self.basis.ncols()
    }

    pub fn omega_inf(&self) -> &DVector<f64> {
        &self.omega_inf
    }

    pub fn lhs(&self, omega: &DVector<f64>) -> f64 {
        mean_reaction_defect(&self.network, omega.as_slice())
    }

    pub fn rhs(&self, omega: &DVector<f64>) -> f64 {
        omega.iter().zip(self.omega_inf.iter()).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum()
    }

    fn rhs_species(&self, omega: &DVector<f64>) -> f64 {
        let n = omega.len() - 1;
        (0..n).map(|i| (omega[i].sqrt() - self.omega_inf[i].sqrt()).powi(2)).sum()
    }

    pub fn manifold_residual(&self, omega: &DVector<f64>) -> f64 {
        linalg::max_abs(&(&self.qhat * omega - &self.m0hat))
    }

    fn random_direction<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        loop {
            let g = DVector::from_fn(self.basis.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let d = &self.basis * g;
            let norm = d.norm();
            if norm > 1e-12 {
                return d / norm;
            }
        }
    }

    fn hit_and_run_step<R: Rng>(&self, omega: &mut DVector<f64>, rng: &mut R) -> Result<(), AnalysisError> {
        let d = self.random_direction(rng);
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (o, di) in omega.iter().zip(d.iter()) {
            if *di > 1e-15 {
                lo = lo.max(-o / di);
            } else if *di < -1e-15 {
                hi = hi.min(-o / di);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(AnalysisError::UnboundedPolytope);
        }
        let t = if hi > lo { rng.gen_range(lo..=hi) } else { 0.0 };
        *omega += d * t;
        for v in omega.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(())
    }

    /// `count` draws of one chain started at the equilibrium, with generator
    /// stream `stream` of `seed`.
    pub fn sample_chunk(&self, seed: u64, stream: u64, count: usize) -> Result<SampleChunk, AnalysisError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let burn = 10 * self.omega_inf.len();
        let mut omega = self.omega_inf.clone();
        let mut out = SampleChunk {
            accepted: 0,
            skipped_boundary: 0,
            excluded_center: 0,
            worst: None,
            min_species_ratio: f64::INFINITY,
            max_manifold_residual: 0.0,
        };
        for _ in 0..count {
            for _ in 0..burn {
                self.hit_and_run_step(&mut omega, &mut rng)?;
            }
            if omega.min() < BOUNDARY_SKIP {
                out.skipped_boundary += 1;
                continue;
            }
            if linalg::max_abs(&(&omega - &self.omega_inf)) < CENTER_EXCLUSION {
                out.excluded_center += 1;
                continue;
            }
            let lhs = self.lhs(&omega);
            let rhs = self.rhs(&omega);
            let ratio = lhs / rhs;
            out.accepted += 1;
            out.max_manifold_residual = out.max_manifold_residual.max(self.manifold_residual(&omega));
            let species = self.rhs_species(&omega);
            if species > 0.0 {
                out.min_species_ratio = out.min_species_ratio.min(lhs / species);
            }
            if out.worst.as_ref().is_none_or(|w| ratio < w.ratio) {
                out.worst = Some(InequalitySample { omega_bar: omega.clone(), lhs, rhs, ratio });
            }
        }
        Ok(out)
    }

    /// Linearised constant on `directions` random unit tangent vectors, and
    /// the agreement of `ratio(omega_inf + s eta)` with `2 delta(eta)`.
    pub fn delta(&self, seed: u64, directions: usize) -> DeltaEstimate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let step = 1e-4 * self.omega_inf.min();
        let mut delta = f64::INFINITY;
        let mut dev = 0.0_f64;
        for _ in 0..directions {
            let eta = self.random_direction(&mut rng);
            let q = self.quadratic_ratio(&eta);
            delta = delta.min(0.5 * q);
            let om = &self.omega_inf + &eta * step;
            let ratio = self.lhs(&om) / self.rhs(&om);
            if q > 0.0 {
                dev = dev.max((ratio / q - 1.0).abs());
            }
        }
        DeltaEstimate { delta, max_relative_deviation: dev, directions }
    }

    /// `sum_a kf omega_inf^mu (sum_i (mu_i - nu_i) eta_i/omega_inf_i)^2 / sum eta_i^2/omega_inf_i`.
    pub fn quadratic_ratio(&self, eta: &DVector<f64>) -> f64 {
        let w = &self.omega_inf;
        let num: f64 = self
            .network
            .reversible()
            .iter()
            .enumerate()
            .map(|(a, r)| {
                let s: f64 = (0..w.len()).map(|i| (self.mu[a][i] - self.nu[a][i]) * eta[i] / w[i]).sum();
                r.kf * monomial(w.as_slice(), &self.mu[a]) * s * s
            })
            .sum();
        let den: f64 = (0..w.len()).map(|i| eta[i] * eta[i] / w[i]).sum();
        num / den
    }
}

/// Sizes of the chunks for `samples` draws.
pub fn chunk_sizes(samples: usize) -> Vec<usize> {
    let mut out = vec![CHUNK_SIZE; samples / CHUNK_SIZE];
    if !samples.is_multiple_of(CHUNK_SIZE) {
        out.push(samples % CHUNK_SIZE);
    }
    out
}

/// Combines chunks in order; ties keep the earlier chunk.
pub fn merge_chunks(chunks: &[SampleChunk]) -> FiniteDimReport {
    let mut rep = FiniteDimReport {
        samples: 0,
        accepted: 0,
        skipped_boundary: 0,
        excluded_center: 0,
        inf_ratio: f64::INFINITY,
        worst: None,
        min_species_ratio: f64::INFINITY,
        max_manifold_residual: 0.0,
    };
    for c in chunks {
        rep.samples += c.accepted + c.skipped_boundary + c.excluded_center;
        rep.accepted += c.accepted;
        rep.skipped_boundary += c.skipped_boundary;
        rep.excluded_center += c.excluded_center;
        rep.min_species_ratio = rep.min_species_ratio.min(c.min_species_ratio);
        rep.max_manifold_residual = rep.max_manifold_residual.max(c.max_manifold_residual);
        if let Some(w) = &c.worst {
            if rep.worst.as_ref().is_none_or(|cur| w.ratio < cur.ratio) {
                rep.worst = Some(w.clone());
            }
        }
    }
    rep.inf_ratio = rep.worst.as_ref().map_or(f64::INFINITY, |w| w.ratio);
    rep
}

/// Sequential sweep over all chunks.
pub fn sample_finite_dim_inequality(
    network: &ReactionNetwork,
    cons: &ConservationStructure,
    eq: &EquilibriumResult,
    samples: usize,
    seed: u64,
) -> Result<FiniteDimReport, AnalysisError> {
    let fd = FiniteDimProblem::new(network, cons, eq)?;
    let chunks = chunk_sizes(samples)
        .into_iter()
        .enumerate()
        .map(|(i, count)| fd.sample_chunk(seed, i as u64, count))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = merge_chunks(&chunks);
    if rep.accepted == 0 {
        return Err(AnalysisError::EmptyPolytope);
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// the A1 + A2 <-> A3 example

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignCase {
    /// `mu_1, mu_2, eta >= 0 >= mu_3`.
    One,
    /// `mu_1, mu_2, eta <= 0 <= mu_3`.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example4Eval {
    pub lhs: f64,
    pub rhs: f64,
    pub c_star: f64,
    pub case: SignCase,
    /// `lhs - C* rhs`.
    pub margin: f64,
}

/// Equilibrium concentrations `(c1, c2, c3, c)` for the example.
pub type ExampleEquilibrium = [f64; 4];

/// Case-2 constant as printed:
/// `(1/3) min{(c2+c3)/c, c1^2/(c3^2 (mu_max+2)^2), c2^2/(c3^2 (mu_max+2)^2)}`.
pub fn case2_constant(c_inf: &ExampleEquilibrium, mu_max: f64) -> f64 {
    let [c1, c2, c3, c] = *c_inf;
    let s = (mu_max + 2.0).powi(2);
    ((c2 + c3) / c).min(c1 * c1 / (c3 * c3 * s)).min(c2 * c2 / (c3 * c3 * s)) / 3.0
}

/// Case-2 constant that the proof's chain of estimates actually yields:
/// `lhs >= a mu_3^2 >= (a/3)(mu_3^2 + b_1 mu_1^2 + b_2 mu_2^2)`.
pub fn case2_chain_constant(c_inf: &ExampleEquilibrium, mu_max: f64) -> f64 {
    let [c1, c2, c3, c] = *c_inf;
    let s = (mu_max + 2.0).powi(2);
    let a = (c2 + c3) / c;
    a / 3.0 * 1.0_f64.min(c1 * c1 / (c3 * c3 * s)).min(c2 * c2 / (c3 * c3 * s))
}

/// Feasible parameters from the conservation laws: `c3bar` in
/// `[0, min(c1+c3, c2+c3)]` fixes `c1bar`, `c2bar` and `cbar`.
pub fn example4_feasible(c_inf: &ExampleEquilibrium, c3bar: f64) -> ([f64; 3], f64) {
    let [c1, c2, c3, c] = *c_inf;
    let c1bar = c1 + c3 - c3bar;
    let c2bar = c2 + c3 - c3bar;
    let cbar = c1bar + c2bar + c3bar;
    let mu = [(c1bar / c1).sqrt() - 1.0, (c2bar / c2).sqrt() - 1.0, (c3bar / c3).sqrt() - 1.0];
    (mu, (cbar / c).sqrt() - 1.0)
}

/// Both sides of `((1+mu1)(1+mu2) - (1+mu3)(1+eta))^2 >= C* sum mu_i^2` and
/// the constant for the sign case of `(mu, eta)`.
pub fn example4_constant(mu: [f64; 3], eta: f64, c_inf: &ExampleEquilibrium, mu_max: f64) -> Result<Example4Eval, AnalysisError> {
    let [c1, c2, c3, c] = *c_inf;
    if mu.iter().chain(std::iter::once(&eta)).any(|&v| !(v >= -1.0)) {
        return Err(AnalysisError::InfeasibleParameters("mu and eta must be at least -1".into()));
    }
    let q = |v: f64| v * v + 2.0 * v;
    let scale = c.max(1.0);
    let id1 = (c1 * q(mu[0]) + c3 * q(mu[2])).abs().max((c2 * q(mu[1]) + c3 * q(mu[2])).abs());
    let id2 = (c1 * q(mu[0]) - c * q(eta)).abs().max((c2 * q(mu[1]) - c * q(eta)).abs());
    if id1.max(id2) > 1e-10 * scale {
        return Err(AnalysisError::InfeasibleParameters(format!(
            "conservation identities violated by {:e}",
            id1.max(id2)
        )));
    }
    let tol = 1e-12;
    let case = if mu[0] >= -tol && mu[1] >= -tol && eta >= -tol && mu[2] <= tol {
        SignCase::One
    } else if mu[0] <= tol && mu[1] <= tol && eta <= tol && mu[2] >= -tol {
        SignCase::Two
    } else {
        return Err(AnalysisError::InfeasibleParameters("sign pattern of mu and eta".into()));
    };
    let lhs = ((1.0 + mu[0]) * (1.0 + mu[1]) - (1.0 + mu[2]) * (1.0 + eta)).powi(2);
    let rhs = mu.iter().map(|v| v * v).sum::<f64>();
    let c_star = match case {
        SignCase::One => 0.5,
        SignCase::Two => case2_constant(c_inf, mu_max),
    };
    Ok(Example4Eval { lhs, rhs, c_star, case, margin: lhs - c_star * rhs })
}

/// Sweep over feasible parameters of the example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example4Sweep {
    pub case1_points: usize,
    pub case2_points: usize,
    pub case1_min_margin: f64,
    pub case2_min_margin: f64,
    /// Largest `|mu_i|` over the case-2 batch.
    pub mu_max: f64,
    pub case2_constant: f64,
    pub case2_chain_constant: f64,
    /// Smallest `lhs/rhs` seen in case 2.
    pub case2_min_ratio: f64,
}

/// Draws `samples` values of `c3bar` uniformly from the feasible interval.
pub fn example4_sweep(c_inf: &ExampleEquilibrium, samples: usize, seed: u64) -> Result<Example4Sweep, AnalysisError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = (c_inf[0] + c_inf[2]).min(c_inf[1] + c_inf[2]);
    let points: Vec<([f64; 3], f64)> =
        (0..samples).map(|_| example4_feasible(c_inf, rng.gen_range(0.0..=upper))).collect();
    let mu_max = points
        .iter()
        .filter(|(mu, _)| mu[2] > 0.0)
        .flat_map(|(mu, _)| mu.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let mut out = Example4Sweep {
        case1_points: 0,
        case2_points: 0,
        case1_min_margin: f64::INFINITY,
        case2_min_margin: f64::INFINITY,
        mu_max,
        case2_constant: case2_constant(c_inf, mu_max),
        case2_chain_constant: case2_chain_constant(c_inf, mu_max),
        case2_min_ratio: f64::INFINITY,
    };
    for (mu, eta) in points {
        let ev = example4_constant(mu, eta, c_inf, mu_max)?;
        match ev.case {
            SignCase::One => {
                out.case1_points += 1;
                out.case1_min_margin = out.case1_min_margin.min(ev.margin);
            }
            SignCase::Two => {
                out.case2_points += 1;
                out.case2_min_margin = out.case2_min_margin.min(ev.margin);
                if ev.rhs > 0.0 {
                    out.case2_min_ratio = out.case2_min_ratio.min(ev.lhs / ev.rhs);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium;
    use crate::network::{conservation_basis, ReversibleReaction, Species};
    use crate::simulator::Grid1D;
    use crate::Mixture;
    use proptest::prelude::{prop_assert, proptest};

    fn binary(cells: usize) -> Problem {
        let net = ReactionNetwork::new(
            vec![Species::new("A1", 1.0), Species::new("A2", 1.0)],
            vec![ReversibleReaction { alpha: vec![1.0, 0.0], beta: vec![0.0, 1.0], kf: 2.0, kb: 1.0 }],
            vec![],
        )
        .unwrap();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let eq = equilibrium::solve(&net, &cons).unwrap();
        let mix = Mixture::uniform(net.masses(), 1.0).unwrap();
        Problem::new(net, mix, cons, eq.x_inf, Grid1D::unit(cells).unwrap()).unwrap()
    }

    fn example4() -> (ReactionNetwork, ConservationStructure, EquilibriumResult) {
        let net = ReactionNetwork::new(
            vec![Species::new("A1", 1.0), Species::new("A2", 2.0), Species::new("A3", 3.0)],
            vec![ReversibleReaction { alpha: vec![1.0, 1.0, 0.0], beta: vec![0.0, 0.0, 1.0], kf: 1.0, kb: 1.0 }],
            vec![],
        )
        .unwrap();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let eq = equilibrium::solve(&net, &cons).unwrap();
        (net, cons, eq)
    }

    fn example4_c_inf() -> ExampleEquilibrium {
        let (_, _, eq) = example4();
        let c = eq.c_inf();
        [c * eq.x_inf[0], c * eq.x_inf[1], c * eq.x_inf[2], c]
    }

    #[test]
    fn entropy_of_equilibrium_and_uniform_fields() {
        let p = binary(4);
        let eq = StateField::uniform(4, p.x_inf.as_slice()).unwrap();
        assert!(relative_entropy(&p, &eq).unwrap().abs() < 1e-24);
        let prod = entropy_production(&p, &eq).unwrap();
        assert_eq!(prod.gradient, 0.0);
        assert!(prod.reaction.abs() < 1e-24);
        let off = StateField::uniform(4, &[0.5, 0.5]).unwrap();
        let h = mstransport::entropy_density(&[0.5], &p.x_inf, p.masses()).unwrap();
        assert!((relative_entropy(&p, &off).unwrap() - h).abs() < 1e-15);
        let prod = entropy_production(&p, &off).unwrap();
        assert_eq!(prod.gradient, 0.0);
        assert!(prod.reaction > 0.0);
    }

    #[test]
    fn two_cell_entropy_is_the_mean() {
        let p = binary(2);
        let rho = DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.6, 0.4]);
        let f = StateField::new(rho, 0.0).unwrap();
        let h1 = mstransport::entropy_density(&[0.2], &p.x_inf, p.masses()).unwrap();
        let h2 = mstransport::entropy_density(&[0.6], &p.x_inf, p.masses()).unwrap();
        assert!((relative_entropy(&p, &f).unwrap() - 0.5 * (h1 + h2)).abs() < 1e-15);
    }

    #[test]
    fn fit_exact_exponential() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let e: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let fit = fit_decay_rate(&t, &e).unwrap();
        assert!((fit.lambda - 2.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_noisy_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let e: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp() * (1.0 + 0.01 * rng.gen_range(-1.0..1.0))).collect();
        let fit = fit_decay_rate(&t, &e).unwrap();
        assert!((fit.lambda - 2.0).abs() < 0.05);
    }

    #[test]
    fn fit_constant_and_short_series() {
        let t: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let fit = fit_decay_rate(&t, &vec![0.3; 40]).unwrap();
        assert_eq!(fit.lambda, 0.0);
        assert_eq!(fit.r_squared, 1.0);
        assert_eq!(fit_decay_rate(&t[..10], &[0.3; 10]), Err(AnalysisError::InsufficientData { points: 5 }));
        assert_eq!(fit_decay_rate(&t, &vec![1e-20; 40]), Err(AnalysisError::NonPositiveEntropy));
    }

    #[test]
    fn elementary_inequality_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(elementary_sweep(&mut rng, 100_000) >= -1e-12);
        assert_eq!(elementary_margin(2.0, 2.0), 0.0);
    }

    #[test]
    fn phi_is_continuous_at_one() {
        assert!((phi(1.0) - 2.0).abs() < 1e-12);
        assert!((phi(1.0 + 2e-3) - phi(1.0 + 5e-4)).abs() < 1e-3);
        assert!(phi(4.0) > phi(2.0));
    }

    #[test]
    fn entropy_bound_on_uniform_and_equilibrium_fields() {
        let p = binary(3);
        let eq = StateField::uniform(3, p.x_inf.as_slice()).unwrap();
        let b = verify_e_upper_bound(&p, &eq).unwrap();
        assert!(b.slack.abs() < 1e-14);
        let off = StateField::uniform(3, &[0.9, 0.1]).unwrap();
        let b = verify_e_upper_bound(&p, &off).unwrap();
        assert!(b.spatial < 1e-15);
        assert!(b.slack >= 0.0);
    }

    #[test]
    fn gradient_chain_for_two_equal_masses() {
        // c = 1 is constant, so c_i = x_i and only the partial term survives
        let m = DVector::from_vec(vec![1.0, 1.0]);
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let g = DVector::from_vec(vec![0.5, -0.5]);
        let ch = gradient_chain(&m, &x, &g);
        let expected = 0.25 / (4.0 * 0.3) + 0.25 / (4.0 * 0.7);
        assert!((ch.fractions - expected).abs() < 1e-15);
        assert!(ch.total.abs() < 1e-30);
        assert!((ch.partial - expected).abs() < 1e-15);
        let (k3, k4) = gradient_chain_constants(&m);
        assert_eq!((k3, k4), (2.0, 6.0));
    }

    #[test]
    fn production_bound_on_linear_profile() {
        let p = binary(10);
        let rho = DMatrix::from_fn(10, 2, |k, j| {
            let a = 0.2 + 0.06 * k as f64;
            if j == 0 { a } else { 1.0 - a }
        });
        let f = StateField::new(rho, 0.0).unwrap();
        let b = verify_d_lower_bound(&p, &f).unwrap();
        assert!(b.slack >= -1e-12 && b.total_slack >= -1e-12 && b.partial_slack >= -1e-12);
        assert_eq!(b.constant, 1.0 / 8.0);
    }

    #[test]
    fn homogeneity_factor_for_binary() {
        let p = binary(3);
        let f = StateField::uniform(3, &[0.8, 0.2]).unwrap();
        assert!(homogeneity_check(&p, &f).unwrap() >= -1e-12);
    }

    #[test]
    fn finite_dim_sampling_binary() {
        let p = binary(2);
        let eq = equilibrium::solve(&p.network, &p.cons).unwrap();
        let rep = sample_finite_dim_inequality(&p.network, &p.cons, &eq, 2_000, 1).unwrap();
        assert!(rep.inf_ratio > 0.0);
        assert!(rep.max_manifold_residual < 1e-10);
        let fd = FiniteDimProblem::new(&p.network, &p.cons, &eq).unwrap();
        // brute-force scan of the one-parameter segment c1 + c2 = 1
        let mut brute = f64::INFINITY;
        for k in 1..10_000 {
            let c1 = k as f64 / 10_000.0;
            let om = DVector::from_vec(vec![c1, 1.0 - c1, 1.0]);
            if linalg::max_abs(&(&om - fd.omega_inf())) > 1e-6 {
                brute = brute.min(fd.lhs(&om) / fd.rhs(&om));
            }
        }
        assert!(rep.inf_ratio >= brute * (1.0 - 1e-6));
    }

    #[test]
    fn delta_matches_nearby_ratios() {
        let (net, cons, eq) = example4();
        let fd = FiniteDimProblem::new(&net, &cons, &eq).unwrap();
        let d = fd.delta(0, 1000);
        assert!(d.delta > 0.0);
        assert!(d.max_relative_deviation < 0.2);
    }

    #[test]
    fn sampling_is_chunk_deterministic() {
        let (net, cons, eq) = example4();
        let a = sample_finite_dim_inequality(&net, &cons, &eq, 2_500, 9).unwrap();
        let b = sample_finite_dim_inequality(&net, &cons, &eq, 2_500, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 2_500);
        assert!(a.inf_ratio >= 1e-4);
    }

    #[test]
    fn example4_equilibrium_point() {
        let ci = example4_c_inf();
        let ev = example4_constant([0.0; 3], 0.0, &ci, 1.0).unwrap();
        assert_eq!((ev.lhs, ev.rhs), (0.0, 0.0));
    }

    #[test]
    fn example4_cases() {
        let ci = example4_c_inf();
        // c1bar = c1inf 1.1^2 lies on the case-1 branch
        let c1bar = ci[0] * 1.21;
        let (mu, eta) = example4_feasible(&ci, ci[0] + ci[2] - c1bar);
        let ev = example4_constant(mu, eta, &ci, 1.0).unwrap();
        assert_eq!(ev.case, SignCase::One);
        assert!(ev.lhs >= 0.5 * ev.rhs);
        let (mu, eta) = example4_feasible(&ci, ci[2] * 1.5);
        let ev = example4_constant(mu, eta, &ci, 1.0).unwrap();
        assert_eq!(ev.case, SignCase::Two);
        assert!(ev.margin >= 0.0);
    }

    #[test]
    fn example4_rejects_infeasible_signs() {
        let ci = example4_c_inf();
        assert!(matches!(
            example4_constant([0.1, -0.1, 0.0], 0.0, &ci, 1.0),
            Err(AnalysisError::InfeasibleParameters(_))
        ));
    }

    proptest! {
        #[test]
        fn reaction_dissipation_dominates_square_root_form(x1 in 1e-6f64..1.0) {
            let p = binary(2);
            let x = [x1, 1.0 - x1];
            let d = reaction_production(&p.network, &x, &p.x_inf);
            let lb = reaction_production_lower_bound(&p.network, &x).unwrap();
            prop_assert!(d - lb >= -1e-12 * d.abs().max(1.0));
        }

        #[test]
        fn ckp_holds_for_random_fields(a in proptest::collection::vec(0.01f64..0.99, 6)) {
            let p = binary(6);
            let rho = DMatrix::from_fn(6, 2, |k, j| if j == 0 { a[k] } else { 1.0 - a[k] });
            let f = StateField::new(rho, 0.0).unwrap();
            let e = relative_entropy(&p, &f).unwrap();
            let (l1, _) = lp_distances(&p, &f);
            prop_assert!(ckp_margin(e, &l1, 1.0) >= -1e-10);
        }

        #[test]
        fn entropy_bound_for_random_fields(a in proptest::collection::vec(0.01f64..0.99, 5)) {
            let p = binary(5);
            let rho = DMatrix::from_fn(5, 2, |k, j| if j == 0 { a[k] } else { 1.0 - a[k] });
            let f = StateField::new(rho, 0.0).unwrap();
            prop_assert!(verify_e_upper_bound(&p, &f).unwrap().slack >= -1e-10);
            prop_assert!(verify_d_lower_bound(&p, &f).unwrap().slack >= -1e-10);
        }
    }
}
