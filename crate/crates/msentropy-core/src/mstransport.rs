//! Pointwise Maxwell–Stefan algebra: flux inversion, entropy density and
//! entropy variables, and the mobility matrix.
//!
//! Conventions: `rho` holds all `n` mass densities (summing to one) and
//! `rho'` the first `n - 1`. Fluxes satisfy `j = -A grad x'` on the first
//! `n - 1` species and `sum j = 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("state outside the simplex interior: {0}")]
    DomainError(String),
    #[error("Maxwell-Stefan system is singular (condition number {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
}

/// Molar masses and the symmetric Maxwell–Stefan diffusivities.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    masses: DVector<f64>,
    diffusivities: DMatrix<f64>,
}

impl Mixture {
    /// Only off-diagonal entries of `diffusivities` are used.
    pub fn new(masses: DVector<f64>, diffusivities: DMatrix<f64>) -> Result<Self, TransportError> {
        let n = masses.len();
        if n < 2 {
            return Err(TransportError::InvalidMixture("need at least two species".into()));
        }
        if diffusivities.nrows() != n || diffusivities.ncols() != n {
            return Err(TransportError::InvalidMixture(format!("diffusivity matrix must be {n}x{n}")));
        }
        if masses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(TransportError::InvalidMixture("molar masses must be positive".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = diffusivities[(i, j)];
                if !(d > 0.0 && d.is_finite()) {
                    return Err(TransportError::InvalidMixture(format!("D[{i}][{j}] must be positive")));
                }
                if (d - diffusivities[(j, i)]).abs() > 1e-14 * d {
                    return Err(TransportError::InvalidMixture(format!("D[{i}][{j}] != D[{j}][{i}]")));
                }
            }
        }
        Ok(Self { masses, diffusivities })
    }

    /// All pairs share the diffusivity `d`.
    pub fn uniform(masses: DVector<f64>, d: f64) -> Result<Self, TransportError> {
        let n = masses.len();
        Self::new(masses, DMatrix::from_element(n, n, d))
    }

    pub fn n(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &DVector<f64> {
        &self.masses
    }

    pub fn diffusivities(&self) -> &DMatrix<f64> {
        &self.diffusivities
    }

    pub fn m_min(&self) -> f64 {
        self.masses.min()
    }

    pub fn m_max(&self) -> f64 {
        self.masses.max()
    }

    /// Same mixture with every diffusivity multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { masses: self.masses.clone(), diffusivities: &self.diffusivities * factor }
    }
}

/// Densities and the quantities derived from them at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub rho: DVector<f64>,
    pub c_parts: DVector<f64>,
    pub c_total: f64,
    pub x: DVector<f64>,
}

impl LocalState {
    pub fn from_rho(rho: &[f64], masses: &DVector<f64>) -> Result<Self, TransportError> {
        if rho.len() != masses.len() {
            return Err(TransportError::DomainError(format!("expected {} densities", masses.len())));
        }
        if rho.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(TransportError::DomainError("densities must be positive".into()));
        }
        let rho = DVector::from_column_slice(rho);
        let c_parts = rho.component_div(masses);
        let c_total = c_parts.sum();
        let x = &c_parts / c_total;
        Ok(Self { rho, c_parts, c_total, x })
    }

    /// From the first `n - 1` densities; the last one is `1 - sum`.
    pub fn from_rho_prime(rho_prime: &[f64], masses: &DVector<f64>) -> Result<Self, TransportError> {
        let mut rho = rho_prime.to_vec();
        rho.push(1.0 - rho_prime.iter().sum::<f64>());
        Self::from_rho(&rho, masses)
    }

    pub fn from_fractions(x: &[f64], masses: &DVector<f64>) -> Result<Self, TransportError> {
        if x.iter().any(|&v| !(v > 0.0)) {
            return Err(TransportError::DomainError("fractions must be positive".into()));
        }
        let s: f64 = x.iter().zip(masses.iter()).map(|(a, m)| a * m).sum();
        let rho: Vec<f64> = x.iter().zip(masses.iter()).map(|(a, m)| a * m / s).collect();
        Self::from_rho(&rho, masses)
    }

    pub fn rho_prime(&self) -> DVector<f64> {
        self.rho.rows(0, self.rho.len() - 1).into_owned()
    }
}

/// Clamps densities to at least `floor` and renormalises the sum to one.
/// Returns the number of clamped entries.
pub fn clamp_densities(rho: &mut [f64], floor: f64) -> usize {
    let mut count = 0;
    for r in rho.iter_mut() {
        if !(*r >= floor) {
            *r = floor;
            count += 1;
        }
    }
    let s: f64 = rho.iter().sum();
    for r in rho.iter_mut() {
        *r /= s;
    }
    count
}

/// The `n x n` matrix `K` with `K j = -grad x` encoding the MS relations.
pub fn ms_matrix(mix: &Mixture, state: &LocalState) -> DMatrix<f64> {
    let n = mix.n();
    let m = &mix.masses;
    let c2 = state.c_total * state.c_total;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let denom = c2 * m[i] * m[j] * mix.diffusivities[(i, j)];
            k[(i, i)] += state.rho[j] / denom;
            k[(i, j)] = -state.rho[i] / denom;
        }
    }
    k
}

/// Mass fluxes for given molar-fraction gradients via the augmented
/// `(n+1) x n` least-squares system.
pub fn solve_fluxes(mix: &Mixture, state: &LocalState, grad_x: &[f64]) -> Result<DVector<f64>, TransportError> {
    let n = mix.n();
    if grad_x.len() != n {
        return Err(TransportError::DomainError(format!("expected {n} gradients")));
    }
    let scale = grad_x.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
    if grad_x.iter().sum::<f64>().abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(TransportError::DomainError("fraction gradients must sum to zero".into()));
    }
    let k = ms_matrix(mix, state);
    let mut aug = DMatrix::zeros(n + 1, n);
    aug.view_mut((0, 0), (n, n)).copy_from(&k);
    for j in 0..n {
        aug[(n, j)] = 1.0;
    }
    let condition = linalg::condition_number(&aug);
    if !(condition <= 1e12) {
        return Err(TransportError::SingularSystem { condition });
    }
    let mut rhs = DVector::zeros(n + 1);
    for i in 0..n {
        rhs[i] = -grad_x[i];
    }
    let mut j = linalg::lstsq(&aug, &rhs, 1e-14);
    // close the constraint exactly; the MS rows move only at rounding level
    j[n - 1] = -j.rows(0, n - 1).sum();
    Ok(j)
}

/// `A` with `j' = -A grad x'`, built column by column from flux solves.
pub fn diffusion_matrix(mix: &Mixture, state: &LocalState) -> Result<DMatrix<f64>, TransportError> {
    let n = mix.n();
    let mut a = DMatrix::zeros(n - 1, n - 1);
    for k in 0..n - 1 {
        let mut g = vec![0.0; n];
        g[k] = 1.0;
        g[n - 1] = -1.0;
        let j = solve_fluxes(mix, state, &g)?;
        for i in 0..n - 1 {
            a[(i, k)] = -j[i];
        }
    }
    Ok(a)
}

/// Same as [`diffusion_matrix`] through one LU factorisation of `K` with
/// its last row replaced by the constraint `sum j = 0`.
pub fn diffusion_matrix_bordered(mix: &Mixture, state: &LocalState) -> Option<DMatrix<f64>> {
    let n = mix.n();
    let mut k = ms_matrix(mix, state);
    for j in 0..n {
        k[(n - 1, j)] = 1.0;
    }
    let inv = k.try_inverse()?;
    Some(inv.view((0, 0), (n - 1, n - 1)).into_owned())
}

/// `dw/dx'`: symmetric positive definite.
pub fn entropy_jacobian_fractions(masses: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let n = masses.len();
    let tail = 1.0 / (masses[n - 1] * x[n - 1]);
    let mut g = DMatrix::from_element(n - 1, n - 1, tail);
    for i in 0..n - 1 {
        g[(i, i)] += 1.0 / (masses[i] * x[i]);
    }
    g
}

/// `dx'/drho'`.
pub fn fraction_jacobian(masses: &DVector<f64>, state: &LocalState) -> DMatrix<f64> {
    let n = masses.len();
    let c = state.c_total;
    let mn = masses[n - 1];
    DMatrix::from_fn(n - 1, n - 1, |i, k| {
        let d = if i == k { 1.0 / (masses[i] * c) } else { 0.0 };
        d - state.c_parts[i] / (c * c) * (1.0 / masses[k] - 1.0 / mn)
    })
}

/// `drho'/dx'`.
pub fn density_jacobian(masses: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let n = masses.len();
    let s: f64 = x.iter().zip(masses.iter()).map(|(a, m)| a * m).sum();
    let mn = masses[n - 1];
    DMatrix::from_fn(n - 1, n - 1, |i, k| {
        let d = if i == k { masses[i] / s } else { 0.0 };
        d - masses[i] * x[i] * (masses[k] - mn) / (s * s)
    })
}

/// Mobility `B` with `j' = -B grad w`, computed in closed form as
/// `A (dw/dx')^{-1}`.
pub fn mobility_exact(mix: &Mixture, state: &LocalState) -> Option<DMatrix<f64>> {
    let a = diffusion_matrix_bordered(mix, state)?;
    let g = entropy_jacobian_fractions(&mix.masses, &state.x);
    let g_inv = g.cholesky()?.inverse();
    Some(a * g_inv)
}

fn check_rho_prime(rho_prime: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> Result<LocalState, TransportError> {
    if rho_prime.len() + 1 != masses.len() || x_inf.len() != masses.len() {
        return Err(TransportError::DomainError("dimension mismatch".into()));
    }
    LocalState::from_rho_prime(rho_prime, masses)
}

/// `psi(u) = (1+u) ln(1+u) - u`, accurate for small `|u|`.
pub(crate) fn psi(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        let u2 = u * u;
        u2 * (0.5 - u / 6.0 + u2 / 12.0 - u2 * u / 20.0 + u2 * u2 / 30.0)
    } else {
        (1.0 + u) * u.ln_1p() - u
    }
}

/// `c sum x_i ln(x_i/x_inf_i)` for fractions `x` and total concentration `c`.
///
/// Evaluated as `c sum x_inf_i psi(x_i/x_inf_i - 1)`, which agrees because both
/// fraction vectors sum to one and keeps full relative precision near `x_inf`.
pub fn entropy_density_fractions(c: f64, x: &DVector<f64>, x_inf: &DVector<f64>) -> f64 {
    c * x.iter().zip(x_inf.iter()).map(|(&xi, &xe)| xe * psi(xi / xe - 1.0)).sum::<f64>()
}

/// Relative entropy density `h(rho')`.
pub fn entropy_density(rho_prime: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> Result<f64, TransportError> {
    let st = check_rho_prime(rho_prime, x_inf, masses)?;
    Ok(entropy_density_fractions(st.c_total, &st.x, x_inf))
}

/// Entropy variables from fractions.
pub fn entropy_variables_fractions(x: &DVector<f64>, x_inf: &DVector<f64>, masses: &DVector<f64>) -> DVector<f64> {
    let n = masses.len();
    let last = (x[n - 1] / x_inf[n - 1]).ln() / masses[n - 1];
    DVector::from_fn(n - 1, |i, _| (x[i] / x_inf[i]).ln() / masses[i] - last)
}

/// `w_i = ln(x_i/x_inf_i)/M_i - ln(x_n/x_inf_n)/M_n`.
pub fn entropy_variables(rho_prime: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> Result<DVector<f64>, TransportError> {
    let st = check_rho_prime(rho_prime, x_inf, masses)?;
    Ok(entropy_variables_fractions(&st.x, x_inf, masses))
}

/// Molar fractions belonging to entropy variables `w`.
///
/// With `t = x_n` the fractions are `x_i = z_i t^{M_i/M_n} e^{M_i w_i}`
/// where `z_i = x_inf_i / x_inf_n^{M_i/M_n}`, and `t` is the root of
/// `sum_i x_i(t) + t - 1`. That function is increasing and convex in
/// `u = ln t`, so Newton in `u` started right of the root converges
/// monotonically.
pub fn fractions_from_entropy_variables(w: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> DVector<f64> {
    let n = masses.len();
    let mn = masses[n - 1];
    let ln_xn = x_inf[n - 1].ln();
    let p: Vec<f64> = (0..n - 1).map(|i| masses[i] / mn).collect();
    let a: Vec<f64> = (0..n - 1).map(|i| x_inf[i].ln() - p[i] * ln_xn + masses[i] * w[i]).collect();
    // Every term is at most 1 at the start, and the function is positive.
    let mut u = (0..n - 1).map(|i| -a[i] / p[i]).fold(0.0_f64, f64::min);
    for _ in 0..200 {
        let mut f = u.exp() - 1.0;
        let mut df = u.exp();
        for i in 0..n - 1 {
            let t = (a[i] + p[i] * u).exp();
            f += t;
            df += p[i] * t;
        }
        if !(f > 0.0) {
            break;
        }
        let step = f / df;
        u -= step;
        if step <= 1e-16 * u.abs().max(1.0) {
            break;
        }
    }
    let mut x = DVector::zeros(n);
    for i in 0..n - 1 {
        x[i] = (a[i] + p[i] * u).exp();
    }
    x[n - 1] = u.exp();
    x
}

/// Inverse of [`entropy_variables`]: returns `rho'`.
pub fn invert_entropy_variables(w: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> DVector<f64> {
    let rho = invert_entropy_variables_full(w, x_inf, masses);
    rho.rows(0, rho.len() - 1).into_owned()
}

/// All `n` densities for entropy variables `w`.
///
/// Unlike `1 - sum rho'`, the last density keeps full relative precision
/// when it is tiny.
pub fn invert_entropy_variables_full(w: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> DVector<f64> {
    let x = fractions_from_entropy_variables(w, x_inf, masses);
    let s: f64 = x.iter().zip(masses.iter()).map(|(a, m)| a * m).sum();
    x.component_mul(masses) / s
}

/// `h''(rho')` by central differences of the entropy variables, symmetrised.
pub fn hessian(rho_prime: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> Result<DMatrix<f64>, TransportError> {
    let h = hessian_unsymmetrized(rho_prime, x_inf, masses)?;
    Ok((&h + h.transpose()) * 0.5)
}

pub(crate) fn hessian_unsymmetrized(rho_prime: &[f64], x_inf: &DVector<f64>, masses: &DVector<f64>) -> Result<DMatrix<f64>, TransportError> {
    let st = check_rho_prime(rho_prime, x_inf, masses)?;
    let min_rho = st.rho.min();
    if min_rho < 1e-8 {
        return Err(TransportError::DomainError(format!("density {min_rho:e} below 1e-8")));
    }
    let m = rho_prime.len();
    let step = 1e-6 * min_rho;
    let mut h = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut plus = rho_prime.to_vec();
        let mut minus = rho_prime.to_vec();
        plus[j] += step;
        minus[j] -= step;
        let d = (entropy_variables(&plus, x_inf, masses)? - entropy_variables(&minus, x_inf, masses)?) / (2.0 * step);
        h.set_column(j, &d);
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct Mobility {
    pub b: DMatrix<f64>,
    /// `|B - B^T| / |B|` in the Frobenius norm.
    pub asymmetry: f64,
}

/// Mobility `B` built from its components: the flux-solve `A`, the
/// fraction Jacobian `dx'/drho'` and the finite-difference `h''`.
///
/// `A` acts on fraction gradients, so `dx'/drho'` converts it to the
/// density-gradient form before dividing by `h''`.
pub fn mobility_matrix(mix: &Mixture, rho_prime: &[f64], x_inf: &DVector<f64>) -> Result<Mobility, TransportError> {
    let st = check_rho_prime(rho_prime, x_inf, mix.masses())?;
    let a = diffusion_matrix(mix, &st)?;
    let x_jac = fraction_jacobian(mix.masses(), &st);
    let h = hessian(rho_prime, x_inf, mix.masses())?;
    let h_inv = h.try_inverse().ok_or_else(|| TransportError::DomainError("singular Hessian".into()))?;
    let b = a * x_jac * h_inv;
    let asymmetry = (&b - b.transpose()).norm() / b.norm();
    Ok(Mobility { b, asymmetry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn mix3() -> Mixture {
        let d = DMatrix::from_row_slice(3, 3, &[0.0, 0.7, 1.3, 0.7, 0.0, 0.4, 1.3, 0.4, 0.0]);
        Mixture::new(v(&[1.0, 2.0, 3.0]), d).unwrap()
    }

    #[test]
    fn binary_flux_example() {
        let mix = Mixture::uniform(v(&[1.0, 1.0]), 2.0).unwrap();
        let st = LocalState::from_rho(&[0.4, 0.6], mix.masses()).unwrap();
        let j = solve_fluxes(&mix, &st, &[0.1, -0.1]).unwrap();
        assert!((j[0] + 0.2).abs() < 1e-14 && (j[1] - 0.2).abs() < 1e-14);
        let j = solve_fluxes(&mix, &st, &[0.0, 0.0]).unwrap();
        assert_eq!(j.norm(), 0.0);
    }

    #[test]
    fn flux_matches_pseudoinverse_oracle() {
        let mix = mix3();
        let st = LocalState::from_rho(&[0.2, 0.5, 0.3], mix.masses()).unwrap();
        let g = [0.3, -0.1, -0.2];
        let j = solve_fluxes(&mix, &st, &g).unwrap();
        // normal equations of the stacked system, written out independently
        let (m, d, rho, c) = (mix.masses(), mix.diffusivities(), &st.rho, st.c_total);
        let mut rows = Vec::new();
        for i in 0..3 {
            let mut row = [0.0; 3];
            for k in 0..3 {
                if k == i {
                    continue;
                }
                let s = 1.0 / (c * c * m[i] * m[k] * d[(i, k)]);
                row[i] -= rho[k] * s;
                row[k] += rho[i] * s;
            }
            rows.push(row);
        }
        rows.push([1.0, 1.0, 1.0]);
        let a = DMatrix::from_fn(4, 3, |i, k| rows[i][k]);
        let b = v(&[g[0], g[1], g[2], 0.0]);
        let oracle = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * b;
        assert!((&j - &oracle).amax() < 1e-12);
        assert!(j.sum().abs() < 1e-13);
    }

    #[test]
    fn bordered_diffusion_matrix_agrees() {
        let mix = mix3();
        let st = LocalState::from_rho(&[0.25, 0.35, 0.4], mix.masses()).unwrap();
        let a1 = diffusion_matrix(&mix, &st).unwrap();
        let a2 = diffusion_matrix_bordered(&mix, &st).unwrap();
        assert!((&a1 - &a2).amax() < 1e-12 * a1.amax());
        assert!((&a1 - a1.transpose()).amax() > 1e-6);
    }

    #[test]
    fn binary_diffusion_matrix_is_fick() {
        let mix = Mixture::uniform(v(&[1.0, 3.0]), 0.8).unwrap();
        let st = LocalState::from_rho(&[0.3, 0.7], mix.masses()).unwrap();
        let a = diffusion_matrix(&mix, &st).unwrap();
        let c = st.c_total;
        assert!((a[(0, 0)] - c * c * 3.0 * 0.8).abs() < 1e-13);
    }

    #[test]
    fn entropy_examples() {
        let m = v(&[1.0, 1.0]);
        let xi = v(&[0.5, 0.5]);
        let h = entropy_density(&[0.25], &xi, &m).unwrap();
        assert!((h - (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln())).abs() < 1e-15);
        let w = entropy_variables(&[0.25], &xi, &m).unwrap();
        assert!((w[0] + 3f64.ln()).abs() < 1e-15);
        assert!(entropy_density(&[0.5], &xi, &m).unwrap().abs() < 1e-300);
        assert!(matches!(entropy_density(&[1.2], &xi, &m), Err(TransportError::DomainError(_))));
    }

    #[test]
    fn inverse_examples() {
        let m = v(&[1.0, 2.0, 3.0]);
        let xi = v(&[0.618034, 0.236068, 0.145898]);
        let x = fractions_from_entropy_variables(&[0.0, 0.0], &xi, &m);
        assert!((&x - &xi).amax() < 1e-15);
        let mm = v(&[2.0, 2.0]);
        let half = v(&[0.5, 0.5]);
        for w in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            let r = invert_entropy_variables(&[w], &half, &mm);
            let e = (2.0 * w).exp();
            assert!((r[0] - e / (1.0 + e)).abs() < 1e-14);
        }
        // 1 - sum(rho') rounds to zero here, so check the full density vector
        for w in [[50.0, -50.0], [50.0, 50.0], [-50.0, 50.0]] {
            let r = invert_entropy_variables_full(&w, &xi, &m);
            assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!((r.sum() - 1.0).abs() < 1e-15);
            assert!(r[0] + r[1] <= 1.0);
        }
    }

    #[test]
    fn binary_hessian_is_analytic() {
        let m = v(&[1.0, 1.0]);
        let xi = v(&[0.3, 0.7]);
        for r in [0.1, 0.4, 0.85] {
            let h = hessian(&[r], &xi, &m).unwrap();
            let exact = 1.0 / (r * (1.0 - r));
            assert!((h[(0, 0)] - exact).abs() < 1e-6 * exact);
        }
    }

    #[test]
    fn binary_mobility() {
        let mix = Mixture::uniform(v(&[1.0, 1.0]), 1.5).unwrap();
        let xi = v(&[0.5, 0.5]);
        let b = mobility_matrix(&mix, &[0.3], &xi).unwrap();
        assert!((b.b[(0, 0)] - 1.5 * 0.3 * 0.7).abs() < 1e-7);
    }

    #[test]
    fn mobility_routes_agree() {
        let mix = mix3();
        let xi = v(&[0.5, 0.3, 0.2]);
        let rp = [0.2, 0.45];
        let st = LocalState::from_rho_prime(&rp, mix.masses()).unwrap();
        let b1 = mobility_matrix(&mix, &rp, &xi).unwrap();
        let b2 = mobility_exact(&mix, &st).unwrap();
        assert!((&b1.b - &b2).amax() < 1e-6 * b2.amax());
        assert!(b1.asymmetry < 1e-6);
    }

    #[test]
    fn jacobians_are_inverse() {
        let m = v(&[1.0, 2.0, 3.0]);
        let st = LocalState::from_rho(&[0.2, 0.3, 0.5], &m).unwrap();
        let prod = fraction_jacobian(&m, &st) * density_jacobian(&m, &st.x);
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-13);
    }

    #[test]
    fn psi_series_matches_direct() {
        for u in [-9e-4f64, -1e-5, 3e-7, 8e-4] {
            let direct = (1.0 + u) * u.ln_1p() - u;
            assert!((psi(u) - direct).abs() < 1e-15 * u.abs());
        }
    }

    fn simplex3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.02f64..1.0, 3).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.iter().map(|a| a / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fluxes_sum_to_zero_and_reproduce_gradients(rho in simplex3(), g0 in -1.0f64..1.0, g1 in -1.0f64..1.0) {
            let mix = mix3();
            let st = LocalState::from_rho(&rho, mix.masses()).unwrap();
            let g = [g0, g1, -g0 - g1];
            let j = solve_fluxes(&mix, &st, &g).unwrap();
            prop_assert!(j.sum().abs() < 1e-13);
            let back = -(ms_matrix(&mix, &st) * &j);
            let scale = g.iter().fold(1e-300f64, |a, b| a.max(b.abs()));
            for i in 0..3 {
                prop_assert!((back[i] - g[i]).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn entropy_variables_round_trip(w0 in -3.0f64..3.0, w1 in -3.0f64..3.0) {
            let m = v(&[1.0, 2.0, 3.0]);
            let xi = v(&[0.5, 0.3, 0.2]);
            let rp = invert_entropy_variables(&[w0, w1], &xi, &m);
            let w = entropy_variables(rp.as_slice(), &xi, &m).unwrap();
            prop_assert!((w[0] - w0).abs() < 1e-12 && (w[1] - w1).abs() < 1e-12);
        }

        #[test]
        fn densities_round_trip(rho in simplex3()) {
            let m = v(&[1.0, 2.0, 3.0]);
            let xi = v(&[0.2, 0.3, 0.5]);
            let w = entropy_variables(&rho[..2], &xi, &m).unwrap();
            let back = invert_entropy_variables(w.as_slice(), &xi, &m);
            prop_assert!((back[0] - rho[0]).abs() < 1e-12 && (back[1] - rho[1]).abs() < 1e-12);
        }

        #[test]
        fn entropy_density_nonnegative(rho in simplex3()) {
            let m = v(&[1.0, 2.0, 3.0]);
            let xi = v(&[0.2, 0.3, 0.5]);
            prop_assert!(entropy_density(&rho[..2], &xi, &m).unwrap() >= 0.0);
        }

        #[test]
        fn hessian_symmetric_positive(rho in simplex3()) {
            let m = v(&[1.0, 2.0, 3.0]);
            let xi = v(&[0.2, 0.3, 0.5]);
            let h = hessian_unsymmetrized(&rho[..2], &xi, &m).unwrap();
            prop_assert!((&h - h.transpose()).norm() <= 1e-5 * h.norm());
            let hs = (&h + h.transpose()) * 0.5;
            prop_assert!(hs.symmetric_eigenvalues().min() > 0.0);
        }

        #[test]
        fn mobility_symmetric_positive(rho in simplex3()) {
            let mix = mix3();
            let st = LocalState::from_rho(&rho, mix.masses()).unwrap();
            let b = mobility_exact(&mix, &st).unwrap();
            prop_assert!((&b - b.transpose()).norm() <= 1e-10 * b.norm());
            prop_assert!(b.symmetric_eigenvalues().min() > 0.0);
        }
    }
}
