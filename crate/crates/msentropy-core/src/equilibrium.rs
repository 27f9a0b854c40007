//! Detailed- and complex-balanced equilibria in the augmented space
//! `omega = (c_1, .., c_n, c)`.
//!
//! Balanced points form the set `log omega = log omega_ref + P z` with
//! `P = [[Q^T, 1], [0, 1]]`, so only the `m + 1` conservation equations
//! `Qhat omega = M0hat` remain to be solved.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;
use crate::network::{ConservationStructure, ReactionNetwork};

const TOL: f64 = 1e-10;
const OUTER_MAX: usize = 200;
const INNER_MAX: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub omega_inf: DVector<f64>,
    pub x_inf: DVector<f64>,
    /// Largest relative balance residual (per reaction or per complex).
    pub residual_balance: f64,
    /// Max-norm of `Qhat omega - M0hat`.
    pub residual_conservation: f64,
    pub iterations: usize,
    /// Whether the bisection fallback produced the result.
    pub used_fallback: bool,
}

impl EquilibriumResult {
    pub fn c_inf(&self) -> f64 {
        self.omega_inf[self.omega_inf.len() - 1]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("no detailed-balanced equilibrium: Wegscheider residual {residual:e}")]
    NoDetailedBalance { residual: f64 },
    #[error("no positive complex-balanced point found")]
    NoComplexBalance,
    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("mass vector must be componentwise positive")]
    NonPositiveMass,
    #[error("detailed balance requires reversible reactions")]
    NotReversible,
    #[error("boundary scan enumerates 2^n supports; n = {n} exceeds 16")]
    TooManySpecies { n: usize },
}

fn check_mass(cons: &ConservationStructure) -> Result<(), EquilibriumError> {
    if cons.m0.iter().all(|&v| v > 0.0) {
        Ok(())
    } else {
        Err(EquilibriumError::NonPositiveMass)
    }
}

fn witness(network: &ReactionNetwork) -> Result<DVector<f64>, EquilibriumError> {
    if !network.is_reversible() {
        return Err(EquilibriumError::NotReversible);
    }
    network
        .detailed_balance_witness()
        .map_err(|r| EquilibriumError::NoDetailedBalance { residual: linalg::max_abs(&r) })
}

/// Unique positive detailed-balanced equilibrium, Newton started at `z = 0`.
pub fn solve_detailed_balanced(network: &ReactionNetwork, cons: &ConservationStructure) -> Result<EquilibriumResult, EquilibriumError> {
    let z0 = DVector::zeros(cons.m() + 1);
    solve_detailed_balanced_from(network, cons, &z0)
}

/// As [`solve_detailed_balanced`] with an explicit Newton starting point.
pub fn solve_detailed_balanced_from(
    network: &ReactionNetwork,
    cons: &ConservationStructure,
    z0: &DVector<f64>,
) -> Result<EquilibriumResult, EquilibriumError> {
    let x_ref = witness(network)?;
    check_mass(cons)?;
    let omega_ref = augmented_reference(&x_ref);
    let (omega, iterations, used_fallback) = solve_augmented(&omega_ref, cons, z0)?;
    finish(network, cons, omega, iterations, used_fallback)
}

/// Unique positive complex-balanced equilibrium. Reversible networks are
/// treated as pairs of one-way reactions.
pub fn solve_complex_balanced(network: &ReactionNetwork, cons: &ConservationStructure) -> Result<EquilibriumResult, EquilibriumError> {
    let z0 = DVector::zeros(cons.m() + 1);
    solve_complex_balanced_from(network, cons, &z0)
}

pub fn solve_complex_balanced_from(
    network: &ReactionNetwork,
    cons: &ConservationStructure,
    z0: &DVector<f64>,
) -> Result<EquilibriumResult, EquilibriumError> {
    let oneway = network.to_oneway_network();
    check_mass(cons)?;
    let x_ref = complex_balanced_reference(&oneway)?;
    let omega_ref = augmented_reference(&x_ref);
    let (omega, iterations, used_fallback) = solve_augmented(&omega_ref, cons, z0)?;
    finish(&oneway, cons, omega, iterations, used_fallback)
}

/// Detailed balance for reversible networks, complex balance otherwise.
pub fn solve(network: &ReactionNetwork, cons: &ConservationStructure) -> Result<EquilibriumResult, EquilibriumError> {
    if network.is_reversible() {
        solve_detailed_balanced(network, cons)
    } else {
        solve_complex_balanced(network, cons)
    }
}

/// [`solve`] with an explicit Newton starting point.
pub fn solve_from(network: &ReactionNetwork, cons: &ConservationStructure, z0: &DVector<f64>) -> Result<EquilibriumResult, EquilibriumError> {
    if network.is_reversible() {
        solve_detailed_balanced_from(network, cons, z0)
    } else {
        solve_complex_balanced_from(network, cons, z0)
    }
}

fn augmented_reference(x_ref: &DVector<f64>) -> DVector<f64> {
    let n = x_ref.len();
    let mut w = DVector::from_element(n + 1, 1.0);
    w.rows_mut(0, n).copy_from(x_ref);
    w
}

fn finish(
    network: &ReactionNetwork,
    cons: &ConservationStructure,
    omega: DVector<f64>,
    iterations: usize,
    used_fallback: bool,
) -> Result<EquilibriumResult, EquilibriumError> {
    let n = network.n();
    let c = omega[n];
    let x_inf = omega.rows(0, n) / c;
    let residual_conservation = linalg::max_abs(&(&cons.qhat * &omega - &cons.m0hat));
    let residual_balance = balance_residual(network, &omega);
    let result = EquilibriumResult { omega_inf: omega, x_inf, residual_balance, residual_conservation, iterations, used_fallback };
    if residual_conservation > TOL || residual_balance > TOL || (result.x_inf.sum() - 1.0).abs() > TOL {
        return Err(EquilibriumError::NonConvergence { iterations, residual: residual_conservation.max(residual_balance) });
    }
    Ok(result)
}

fn monomial(v: &[f64], e: &[f64]) -> f64 {
    v.iter().zip(e).filter(|(_, &a)| a != 0.0).map(|(&b, &a)| b.powf(a)).product()
}

/// Relative balance residual at `omega`: per reaction in the augmented
/// variables for reversible networks, per complex for one-way networks.
pub fn balance_residual(network: &ReactionNetwork, omega: &DVector<f64>) -> f64 {
    let n = network.n();
    if network.is_reversible() {
        let ex = network.augmented_exponents();
        network
            .reversible()
            .iter()
            .zip(ex.mu.iter().zip(&ex.nu))
            .map(|(r, (mu, nu))| {
                let f = r.kf * monomial(omega.as_slice(), mu.as_slice());
                let b = r.kb * monomial(omega.as_slice(), nu.as_slice());
                ((f - b) / f).abs()
            })
            .fold(0.0, f64::max)
    } else {
        let x: Vec<f64> = (0..n).map(|i| omega[i] / omega[n]).collect();
        let res = network.complex_balance_residual(&x);
        let scale = network.oneway().iter().map(|r| r.k * monomial(&x, &r.y)).fold(0.0, f64::max);
        if scale == 0.0 {
            0.0
        } else {
            linalg::max_abs(&res) / scale
        }
    }
}

/// Positive point with zero complex-balance residual, by Gauss–Newton in
/// `log x` from the barycentre and then from 20 seeded random starts.
pub fn complex_balanced_reference(network: &ReactionNetwork) -> Result<DVector<f64>, EquilibriumError> {
    let n = network.n();
    let oneway = network.as_oneway();
    if oneway.is_empty() {
        return Ok(DVector::from_element(n, 1.0 / n as f64));
    }
    let complexes = network.complexes();
    let keys: Vec<Vec<String>> = complexes.iter().map(|c| c.iter().map(|v| format!("{v:.11e}")).collect()).collect();
    let index = |c: &[f64]| {
        let key: Vec<String> = c.iter().map(|v| format!("{v:.11e}")).collect();
        keys.iter().position(|k| *k == key).expect("collected")
    };
    let edges: Vec<(usize, usize)> = oneway.iter().map(|r| (index(&r.y), index(&r.yprime))).collect();
    let system = |u: &DVector<f64>| {
        let x: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let mut r = DVector::zeros(complexes.len());
        let mut j = DMatrix::zeros(complexes.len(), n);
        for (rx, &(src, dst)) in oneway.iter().zip(&edges) {
            let flux = rx.k * monomial(&x, &rx.y);
            r[src] += flux;
            r[dst] -= flux;
            for l in 0..n {
                let d = flux * rx.y[l];
                j[(src, l)] += d;
                j[(dst, l)] -= d;
            }
        }
        (r, j)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for attempt in 0..21 {
        let u0 = if attempt == 0 {
            DVector::from_element(n, -(n as f64).ln())
        } else {
            DVector::from_fn(n, |_, _| rng.gen_range(-3.0..1.0))
        };
        let (u, _) = linalg::gauss_newton(u0, 200, 0.0, system);
        let x = u.map(f64::exp);
        if x.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            continue;
        }
        let res = network.complex_balance_residual(x.as_slice());
        let scale = oneway.iter().map(|r| r.k * monomial(x.as_slice(), &r.y)).fold(0.0, f64::max);
        if scale > 0.0 && linalg::max_abs(&res) <= 1e-13 * scale {
            return Ok(x);
        }
    }
    Err(EquilibriumError::NoComplexBalance)
}

struct Augmented<'a> {
    omega_ref: &'a DVector<f64>,
    cons: &'a ConservationStructure,
    p: DMatrix<f64>,
}

impl<'a> Augmented<'a> {
    fn new(omega_ref: &'a DVector<f64>, cons: &'a ConservationStructure) -> Self {
        let n = omega_ref.len() - 1;
        let m = cons.m();
        let mut p = DMatrix::zeros(n + 1, m + 1);
        p.view_mut((0, 0), (n, m)).copy_from(&cons.q.transpose());
        for i in 0..=n {
            p[(i, m)] = 1.0;
        }
        Self { omega_ref, cons, p }
    }

    fn omega(&self, z: &DVector<f64>) -> DVector<f64> {
        (&self.p * z).map(f64::exp).component_mul(self.omega_ref)
    }

    fn residual(&self, omega: &DVector<f64>) -> DVector<f64> {
        &self.cons.qhat * omega - &self.cons.m0hat
    }
}

/// Returns `(omega, iterations, used_fallback)`.
fn solve_augmented(
    omega_ref: &DVector<f64>,
    cons: &ConservationStructure,
    z0: &DVector<f64>,
) -> Result<(DVector<f64>, usize, bool), EquilibriumError> {
    let aug = Augmented::new(omega_ref, cons);
    let target = 1e-3 * TOL;
    let mut z = z0.clone();
    let mut omega = aug.omega(&z);
    let mut f = aug.residual(&omega);
    let mut iterations = 0;
    let mut stalled = f.iter().any(|v| !v.is_finite());
    while !stalled && linalg::max_abs(&f) > target && iterations < OUTER_MAX {
        iterations += 1;
        let jac = &cons.qhat * DMatrix::from_diagonal(&omega) * &aug.p;
        let Some(step) = jac.lu().solve(&(-&f)) else {
            stalled = true;
            break;
        };
        let norm0 = f.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let zt = &z + &step * t;
            let ot = aug.omega(&zt);
            let ft = aug.residual(&ot);
            if ft.iter().all(|v| v.is_finite()) && ft.norm() < norm0 {
                z = zt;
                omega = ot;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            stalled = true;
        }
    }
    if !stalled && linalg::max_abs(&f) <= TOL {
        return Ok((omega, iterations, false));
    }
    let (omega, more) = bisection_fallback(&aug)?;
    Ok((omega, iterations + more, true))
}

/// Outer bisection on `s = z_{m+1}` with an inner convex Newton solve for
/// the remaining coordinates.
///
/// For fixed `s` the inner problem `Q (a e^{Q^T y}) = e^{-s} M0` with
/// `a = omega'_ref` is the gradient of a strictly convex function of `y`.
/// Its solution gives `g(s) = <a e^{Q^T y}, 1>`, which lies between
/// `e^{-s}/M_max` and `e^{-s}/M_min` and is strictly decreasing; the
/// equilibrium is at `g(s) = omega_{n+1,ref}`.
fn bisection_fallback(aug: &Augmented) -> Result<(DVector<f64>, usize), EquilibriumError> {
    let cons = aug.cons;
    let n = aug.omega_ref.len() - 1;
    let m = cons.m();
    let a = aug.omega_ref.rows(0, n).into_owned();
    let last_ref = aug.omega_ref[n];
    let q = &cons.q;
    let masses = q.transpose() * &cons.zeta;
    let (m_min, m_max) = (masses.min(), masses.max());
    let mut y = DVector::zeros(m);
    let mut total = 0;

    let inner = |s: f64, y: &mut DVector<f64>, total: &mut usize| -> Result<f64, EquilibriumError> {
        let b = &cons.m0 * (-s).exp();
        let value = |y: &DVector<f64>| -> (f64, DVector<f64>) {
            let e = (q.transpose() * y).map(f64::exp).component_mul(&a);
            (e.sum() - b.dot(y), e)
        };
        let (mut phi, mut e) = value(y);
        for _ in 0..INNER_MAX {
            *total += 1;
            let grad = q * &e - &b;
            if linalg::max_abs(&grad) <= 1e-15 * linalg::max_abs(&b) {
                return Ok(e.sum());
            }
            let hess = q * DMatrix::from_diagonal(&e) * q.transpose();
            let Some(chol) = hess.cholesky() else {
                break;
            };
            let step = -chol.solve(&grad);
            let slope = grad.dot(&step);
            let gnorm = grad.norm();
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let yt = &*y + &step * t;
                let (pt, et) = value(&yt);
                // Near the optimum phi stalls at rounding level; a decrease of
                // the gradient is then the meaningful test.
                let sufficient = pt < phi + 1e-4 * t * slope;
                let closer = t == 1.0 && (q * &et - &b).norm() < gnorm;
                if pt.is_finite() && (sufficient || closer) {
                    *y = yt;
                    phi = pt;
                    e = et;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                // at the limit of floating point resolution
                return Ok(e.sum());
            }
        }
        let grad = q * &e - &b;
        if linalg::max_abs(&grad) <= 1e-12 * linalg::max_abs(&b) {
            Ok(e.sum())
        } else {
            Err(EquilibriumError::NonConvergence { iterations: *total, residual: linalg::max_abs(&grad) })
        }
    };

    let mut lo = (1.0 / (m_max * last_ref)).ln() - 1e-3;
    let mut hi = (1.0 / (m_min * last_ref)).ln() + 1e-3;
    let mut g_lo = inner(lo, &mut y, &mut total)?;
    let mut g_hi = inner(hi, &mut y, &mut total)?;
    let mut expansions = 0;
    while !(g_lo >= last_ref && g_hi <= last_ref) {
        expansions += 1;
        if expansions > OUTER_MAX || g_lo < g_hi {
            return Err(EquilibriumError::NonConvergence { iterations: total, residual: f64::NAN });
        }
        if g_lo < last_ref {
            lo -= 1.0;
            g_lo = inner(lo, &mut y, &mut total)?;
        }
        if g_hi > last_ref {
            hi += 1.0;
            g_hi = inner(hi, &mut y, &mut total)?;
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..OUTER_MAX {
        s = 0.5 * (lo + hi);
        if hi - lo <= 1e-15 * s.abs().max(1.0) {
            break;
        }
        let g = inner(s, &mut y, &mut total)?;
        if !(g <= g_lo && g >= g_hi) {
            return Err(EquilibriumError::NonConvergence { iterations: total, residual: f64::NAN });
        }
        if g > last_ref {
            lo = s;
            g_lo = g;
        } else {
            hi = s;
            g_hi = g;
        }
    }
    inner(s, &mut y, &mut total)?;
    let scale = s.exp();
    let mut omega = DVector::zeros(n + 1);
    let e = (q.transpose() * &y).map(f64::exp).component_mul(&a);
    for i in 0..n {
        omega[i] = scale * e[i];
    }
    omega[n] = scale * last_ref;
    Ok((omega, total))
}

/// A balanced point with some species extinct.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEquilibrium {
    /// Indices of the species that are present.
    pub support: Vec<usize>,
    pub omega: DVector<f64>,
}

/// Enumerates proper supports and searches each for a balanced point
/// compatible with the conservation laws.
///
/// An empty result is a heuristic certificate that no boundary equilibria
/// exist. `force` lifts the `n <= 16` limit.
pub fn boundary_equilibria_scan(
    network: &ReactionNetwork,
    cons: &ConservationStructure,
    force: bool,
) -> Result<Vec<BoundaryEquilibrium>, EquilibriumError> {
    let n = network.n();
    if n > 16 && !force {
        return Err(EquilibriumError::TooManySpecies { n });
    }
    let mut found = Vec::new();
    for mask in 1u64..((1u64 << n) - 1) {
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        if let Some(omega) = scan_support(network, cons, &support) {
            found.push(BoundaryEquilibrium { support, omega });
        }
    }
    Ok(found)
}

fn scan_support(network: &ReactionNetwork, cons: &ConservationStructure, support: &[usize]) -> Option<DVector<f64>> {
    let n = network.n();
    let inside = |e: &[f64]| e.iter().enumerate().all(|(i, &v)| v == 0.0 || support.contains(&i));
    // (reactant exponent, product exponent, log rate ratio) in augmented form
    let mut balance: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();
    let mut cb_reactions = Vec::new();
    if network.is_reversible() {
        let ex = network.augmented_exponents();
        for (r, (mu, nu)) in network.reversible().iter().zip(ex.mu.iter().zip(&ex.nu)) {
            match (inside(&r.alpha), inside(&r.beta)) {
                (true, true) => balance.push((mu.clone(), nu.clone(), (r.kf / r.kb).ln())),
                (false, false) => {}
                _ => return None,
            }
        }
    } else {
        for r in network.oneway() {
            match (inside(&r.y), inside(&r.yprime)) {
                (true, true) => cb_reactions.push(r.clone()),
                (true, false) => return None,
                _ => {}
            }
        }
    }
    let k = support.len();
    let m = cons.m();
    let cb_keys: Vec<Vec<String>> = {
        let mut keys: Vec<Vec<String>> = Vec::new();
        for r in &cb_reactions {
            for c in [&r.y, &r.yprime] {
                let key: Vec<String> = c.iter().map(|v| format!("{v:.11e}")).collect();
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        keys
    };
    let residual = |v: &DVector<f64>| -> DVector<f64> {
        let mut omega = DVector::zeros(n + 1);
        for (a, &i) in support.iter().enumerate() {
            omega[i] = v[a].exp();
        }
        omega[n] = v[k].exp();
        let mut out = Vec::new();
        for (mu, nu, lr) in &balance {
            let mut s = *lr;
            for (a, &i) in support.iter().enumerate() {
                s += (mu[i] - nu[i]) * v[a];
            }
            s += (mu[n] - nu[n]) * v[k];
            out.push(s);
        }
        if !cb_reactions.is_empty() {
            let x: Vec<f64> = (0..n).map(|i| omega[i] / omega[n]).collect();
            let mut net = vec![0.0; cb_keys.len()];
            let mut tot = vec![0.0; cb_keys.len()];
            for r in &cb_reactions {
                let flux = r.k * monomial(&x, &r.y);
                let key = |c: &[f64]| -> usize {
                    let kk: Vec<String> = c.iter().map(|v| format!("{v:.11e}")).collect();
                    cb_keys.iter().position(|q| *q == kk).expect("collected")
                };
                let (s, d) = (key(&r.y), key(&r.yprime));
                net[s] += flux;
                net[d] -= flux;
                tot[s] += flux;
                tot[d] += flux;
            }
            for (a, b) in net.iter().zip(&tot) {
                out.push(if *b > 0.0 { a / b } else { 0.0 });
            }
        }
        let cons_res = &cons.qhat * &omega - &cons.m0hat;
        for j in 0..m {
            out.push(cons_res[j]);
        }
        out.push(cons_res[m] / omega[n]);
        DVector::from_vec(out)
    };
    let jacobian = |v: &DVector<f64>, r0: &DVector<f64>| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(r0.len(), k + 1);
        for c in 0..=k {
            let h = 1e-7;
            let mut vp = v.clone();
            vp[c] += h;
            j.set_column(c, &((residual(&vp) - r0) / h));
        }
        j
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed(support));
    let scale = cons.m0.iter().fold(0.0_f64, |a, b| a.max(b.abs())).max(1e-3);
    for attempt in 0..6 {
        let v0 = DVector::from_fn(k + 1, |i, _| {
            let base = (scale / k as f64).ln();
            let jitter = if attempt == 0 { 0.0 } else { rng.gen_range(-2.0..2.0) };
            if i == k {
                scale.ln() + jitter
            } else {
                base + jitter
            }
        });
        let (v, res) = linalg::gauss_newton(v0, 200, 1e-13, |v| {
            let r = residual(v);
            let j = jacobian(v, &r);
            (r, j)
        });
        if res <= TOL && v.iter().all(|a| a.is_finite() && *a > -600.0) {
            let mut omega = DVector::zeros(n + 1);
            for (a, &i) in support.iter().enumerate() {
                omega[i] = v[a].exp();
            }
            omega[n] = v[k].exp();
            return Some(omega);
        }
    }
    None
}

fn mask_seed(support: &[usize]) -> u64 {
    support.iter().fold(0x5eed_u64, |h, &i| h.wrapping_mul(31).wrapping_add(i as u64 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{conservation_basis, OneWayReaction, ReversibleReaction, Species};

    fn species(m: &[f64]) -> Vec<Species> {
        m.iter().enumerate().map(|(i, &v)| Species::new(format!("A{}", i + 1), v)).collect()
    }

    fn binary() -> ReactionNetwork {
        let r = ReversibleReaction { alpha: vec![1.0, 0.0], beta: vec![0.0, 1.0], kf: 2.0, kb: 1.0 };
        ReactionNetwork::new(species(&[1.0, 1.0]), vec![r], vec![]).unwrap()
    }

    fn example4(masses: &[f64]) -> ReactionNetwork {
        let r = ReversibleReaction { alpha: vec![1.0, 1.0, 0.0], beta: vec![0.0, 0.0, 1.0], kf: 1.0, kb: 1.0 };
        ReactionNetwork::new(species(masses), vec![r], vec![]).unwrap()
    }

    fn cycle(k: [f64; 3]) -> ReactionNetwork {
        let e = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let rx = (0..3).map(|i| OneWayReaction { y: e(i), yprime: e((i + 1) % 3), k: k[i] }).collect();
        ReactionNetwork::new(species(&[1.0; 3]), vec![], rx).unwrap()
    }

    #[test]
    fn binary_equilibrium() {
        let net = binary();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let eq = solve_detailed_balanced(&net, &cons).unwrap();
        assert!((eq.x_inf[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((eq.omega_inf[2] - 1.0).abs() < 1e-12);
    }

    /// Reduces the two conservation laws and detailed balance to one
    /// scalar equation in `c3` and bisects it.
    fn example4_oracle(m13: f64, m23: f64) -> [f64; 3] {
        let f = |c3: f64| {
            let (c1, c2) = (m13 - c3, m23 - c3);
            c1 * c2 - c3 * (c1 + c2 + c3)
        };
        let (mut lo, mut hi) = (0.0, m13.min(m23));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c3 = 0.5 * (lo + hi);
        [m13 - c3, m23 - c3, c3]
    }

    #[test]
    fn example4_equilibrium_matches_oracle() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let eq = solve_detailed_balanced(&net, &cons).unwrap();
        let c = example4_oracle(0.5, 0.25);
        let ct: f64 = c.iter().sum();
        for i in 0..3 {
            assert!((eq.x_inf[i] - c[i] / ct).abs() < 1e-12);
        }
        let s5 = 5f64.sqrt();
        assert!((eq.x_inf[0] - (s5 - 1.0) / 2.0).abs() < 1e-12);
        assert!((eq.x_inf[1] - (s5 - 2.0)).abs() < 1e-12);
        assert!((eq.c_inf() - 0.6545084971874737).abs() < 1e-12);
        assert!(eq.residual_balance <= 1e-10 && eq.residual_conservation <= 1e-10);
        assert!(eq.c_inf() >= 1.0 / 3.0 && eq.c_inf() <= 1.0);
    }

    #[test]
    fn restarts_agree() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let base = solve_detailed_balanced(&net, &cons).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let z0 = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
            let eq = solve_detailed_balanced_from(&net, &cons, &z0).unwrap();
            assert!((&eq.omega_inf - &base.omega_inf).amax() < 1e-12);
        }
    }

    #[test]
    fn fallback_alone_converges() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let omega_ref = augmented_reference(&net.detailed_balance_witness().unwrap());
        let aug = Augmented::new(&omega_ref, &cons);
        let (omega, _) = bisection_fallback(&aug).unwrap();
        let eq = solve_detailed_balanced(&net, &cons).unwrap();
        assert!((&omega - &eq.omega_inf).amax() < 1e-12);
    }

    #[test]
    fn cycle_equilibrium() {
        let net = cycle([1.0, 2.0, 4.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.2, 0.3, 0.5])).unwrap();
        let eq = solve_complex_balanced(&net, &cons).unwrap();
        for (a, b) in eq.x_inf.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let eq = solve_complex_balanced(&cycle([1.0; 3]), &cons).unwrap();
        assert!(eq.x_inf.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn reversible_as_oneway_pairs_agrees() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let db = solve_detailed_balanced(&net, &cons).unwrap();
        let cb = solve_complex_balanced(&net, &cons).unwrap();
        assert!((&db.x_inf - &cb.x_inf).amax() < 1e-9);
    }

    #[test]
    fn uniqueness_under_perturbed_data() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let a = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        let b = conservation_basis(&net, &DVector::from_vec(vec![0.3, 0.05, 0.2])).unwrap();
        assert!((&a.m0 - &b.m0).amax() < 1e-15);
        let ea = solve_detailed_balanced(&net, &a).unwrap();
        let eb = solve_detailed_balanced(&net, &b).unwrap();
        assert!((&ea.omega_inf - &eb.omega_inf).amax() < 1e-13);
    }

    #[test]
    fn missing_detailed_balance() {
        let r1 = ReversibleReaction { alpha: vec![1.0, 0.0], beta: vec![0.0, 1.0], kf: 2.0, kb: 1.0 };
        let r2 = ReversibleReaction { alpha: vec![2.0, 0.0], beta: vec![0.0, 2.0], kf: 1.0, kb: 1.0 };
        let net = ReactionNetwork::new(species(&[1.0, 1.0]), vec![r1, r2], vec![]).unwrap();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert!(matches!(solve_detailed_balanced(&net, &cons), Err(EquilibriumError::NoDetailedBalance { .. })));
    }

    #[test]
    fn boundary_scan_examples() {
        let net = example4(&[1.0, 2.0, 3.0]);
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.4, 0.15, 0.1])).unwrap();
        assert!(boundary_equilibria_scan(&net, &cons, false).unwrap().is_empty());
        let net = binary();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert!(boundary_equilibria_scan(&net, &cons, false).unwrap().is_empty());
        // masses (2,1,3) give zeta = (2,1), so M0 = (0.5, 0) is normalised
        let net = example4(&[2.0, 1.0, 3.0]);
        let cons = ConservationStructure::with_mass_vector(&net, DVector::from_vec(vec![0.5, 0.0])).unwrap();
        let found = boundary_equilibria_scan(&net, &cons, false).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].support, vec![0]);
        assert!((found[0].omega[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn autocatalytic_boundary_point() {
        let r = ReversibleReaction { alpha: vec![1.0, 1.0], beta: vec![0.0, 2.0], kf: 2.0, kb: 1.0 };
        let net = ReactionNetwork::new(species(&[1.0, 1.0]), vec![r], vec![]).unwrap();
        let cons = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let eq = solve_detailed_balanced(&net, &cons).unwrap();
        assert!((eq.x_inf[0] - 1.0 / 3.0).abs() < 1e-12);
        let found = boundary_equilibria_scan(&net, &cons, false).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].support, vec![0]);
    }

    #[test]
    fn too_many_species() {
        let n = 17;
        let net = ReactionNetwork::new(species(&vec![1.0; n]), vec![], vec![]).unwrap();
        let cons = conservation_basis(&net, &DVector::from_element(n, 1.0 / n as f64)).unwrap();
        assert_eq!(boundary_equilibria_scan(&net, &cons, false).unwrap_err(), EquilibriumError::TooManySpecies { n });
    }
}
