//! Reaction networks and their linear conservation structure.

use nalgebra::{DMatrix, DVector};
use num_integer::Integer;
use num_rational::Ratio;
use std::collections::HashSet;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub molar_mass: f64,
}

impl Species {
    pub fn new(name: impl Into<String>, molar_mass: f64) -> Self {
        Self { name: name.into(), molar_mass }
    }
}

/// `alpha -> beta` with forward rate `kf` and backward rate `kb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversibleReaction {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kf: f64,
    pub kb: f64,
}

/// `y -> yprime` with rate constant `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWayReaction {
    pub y: Vec<f64>,
    pub yprime: Vec<f64>,
    pub k: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("network has no species")]
    NoSpecies,
    #[error("species {0:?}: molar mass must be positive and finite")]
    InvalidMass(String),
    #[error("duplicate species name {0:?}")]
    DuplicateName(String),
    #[error("reaction {reaction}: expected {expected} coefficients, got {got}")]
    DimensionMismatch { reaction: usize, expected: usize, got: usize },
    #[error("reaction {reaction}: coefficient {value} is neither 0 nor >= 1")]
    InvalidCoefficient { reaction: usize, value: f64 },
    #[error("reaction {reaction}: rate constants must be positive and finite")]
    InvalidRate { reaction: usize },
    #[error("reaction {reaction}: reactant and product complexes coincide")]
    TrivialReaction { reaction: usize },
    #[error("reaction {reaction} does not conserve total mass (defect {defect:e})")]
    MassNotConserved { reaction: usize, defect: f64 },
    #[error("a network holds either reversible or one-way reactions, not both")]
    MixedReactionKinds,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConservationError {
    #[error("zeta M0 = {value} differs from 1 (initial data not normalised)")]
    NotNormalized { value: f64 },
    #[error("numerical rank of the Wegscheider matrix is ambiguous at tolerance 1e-10")]
    RankDeficiency,
    #[error("mean concentrations must be positive and finite")]
    NonPositiveData,
    #[error("mass vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("molar masses are not in the row space of Q (residual {residual:e})")]
    InconsistentMasses { residual: f64 },
}

#[derive(Debug, Clone)]
pub struct ReactionNetwork {
    species: Vec<Species>,
    reversible: Vec<ReversibleReaction>,
    oneway: Vec<OneWayReaction>,
}

/// Exponent vectors in the augmented space `(c_1, .., c_n, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExponents {
    pub mu: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
}

fn check_coefficients(reaction: usize, n: usize, v: &[f64]) -> Result<(), NetworkError> {
    if v.len() != n {
        return Err(NetworkError::DimensionMismatch { reaction, expected: n, got: v.len() });
    }
    for &value in v {
        if !value.is_finite() || !(value == 0.0 || value >= 1.0) {
            return Err(NetworkError::InvalidCoefficient { reaction, value });
        }
    }
    Ok(())
}

fn monomial(x: &[f64], e: &[f64]) -> f64 {
    x.iter().zip(e).filter(|(_, &a)| a != 0.0).map(|(&xi, &a)| xi.powf(a)).product()
}

fn complex_key(v: &[f64]) -> Vec<String> {
    v.iter().map(|c| format!("{:.11e}", c)).collect()
}

impl ReactionNetwork {
    /// Validates and builds a network. At most one of the two reaction lists
    /// may be nonempty; both empty gives a pure diffusion mixture.
    pub fn new(
        species: Vec<Species>,
        reversible: Vec<ReversibleReaction>,
        oneway: Vec<OneWayReaction>,
    ) -> Result<Self, NetworkError> {
        if species.is_empty() {
            return Err(NetworkError::NoSpecies);
        }
        let mut names = HashSet::new();
        for s in &species {
            if !(s.molar_mass > 0.0 && s.molar_mass.is_finite()) {
                return Err(NetworkError::InvalidMass(s.name.clone()));
            }
            if !names.insert(s.name.clone()) {
                return Err(NetworkError::DuplicateName(s.name.clone()));
            }
        }
        if !reversible.is_empty() && !oneway.is_empty() {
            return Err(NetworkError::MixedReactionKinds);
        }
        let n = species.len();
        for (a, r) in reversible.iter().enumerate() {
            check_coefficients(a, n, &r.alpha)?;
            check_coefficients(a, n, &r.beta)?;
            if !(r.kf > 0.0 && r.kb > 0.0 && r.kf.is_finite() && r.kb.is_finite()) {
                return Err(NetworkError::InvalidRate { reaction: a });
            }
            if r.alpha == r.beta {
                return Err(NetworkError::TrivialReaction { reaction: a });
            }
        }
        for (a, r) in oneway.iter().enumerate() {
            check_coefficients(a, n, &r.y)?;
            check_coefficients(a, n, &r.yprime)?;
            if !(r.k > 0.0 && r.k.is_finite()) {
                return Err(NetworkError::InvalidRate { reaction: a });
            }
            if r.y == r.yprime {
                return Err(NetworkError::TrivialReaction { reaction: a });
            }
        }
        let net = Self { species, reversible, oneway };
        let w = net.wegscheider();
        let m = net.masses();
        for a in 0..w.ncols() {
            let col = w.column(a);
            let defect: f64 = col.iter().zip(m.iter()).map(|(wi, mi)| wi * mi).sum();
            let scale: f64 = col.iter().zip(m.iter()).map(|(wi, mi)| (wi * mi).abs()).sum();
            if defect.abs() > 1e-12 * scale {
                return Err(NetworkError::MassNotConserved { reaction: a, defect });
            }
        }
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.species.len()
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn reversible(&self) -> &[ReversibleReaction] {
        &self.reversible
    }

    pub fn oneway(&self) -> &[OneWayReaction] {
        &self.oneway
    }

    /// True unless the network is given by one-way reactions.
    pub fn is_reversible(&self) -> bool {
        self.oneway.is_empty()
    }

    pub fn num_reactions(&self) -> usize {
        self.reversible.len() + self.oneway.len()
    }

    pub fn masses(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.species.iter().map(|s| s.molar_mass))
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// Column `a` is `beta^a - alpha^a` (or `y'_a - y_a`).
    pub fn wegscheider(&self) -> DMatrix<f64> {
        let n = self.n();
        let cols: Vec<DVector<f64>> = if self.is_reversible() {
            self.reversible
                .iter()
                .map(|r| DVector::from_iterator(n, r.beta.iter().zip(&r.alpha).map(|(b, a)| b - a)))
                .collect()
        } else {
            self.oneway
                .iter()
                .map(|r| DVector::from_iterator(n, r.yprime.iter().zip(&r.y).map(|(b, a)| b - a)))
                .collect()
        };
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    /// The network as a list of one-way reactions; each reversible reaction
    /// becomes a forward and a backward reaction.
    pub fn as_oneway(&self) -> Vec<OneWayReaction> {
        if !self.is_reversible() {
            return self.oneway.clone();
        }
        self.reversible
            .iter()
            .flat_map(|r| {
                [
                    OneWayReaction { y: r.alpha.clone(), yprime: r.beta.clone(), k: r.kf },
                    OneWayReaction { y: r.beta.clone(), yprime: r.alpha.clone(), k: r.kb },
                ]
            })
            .collect()
    }

    /// The same network with every reversible reaction split into two
    /// one-way reactions.
    pub fn to_oneway_network(&self) -> Self {
        Self { species: self.species.clone(), reversible: Vec::new(), oneway: self.as_oneway() }
    }

    pub fn augmented_exponents(&self) -> AugmentedExponents {
        let pairs: Vec<(&[f64], &[f64])> = if self.is_reversible() {
            self.reversible.iter().map(|r| (r.alpha.as_slice(), r.beta.as_slice())).collect()
        } else {
            self.oneway.iter().map(|r| (r.y.as_slice(), r.yprime.as_slice())).collect()
        };
        let n = self.n();
        let mut mu = Vec::with_capacity(pairs.len());
        let mut nu = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let mut m = DVector::zeros(n + 1);
            let mut v = DVector::zeros(n + 1);
            for i in 0..n {
                m[i] = a[i];
                v[i] = b[i];
            }
            m[n] = (sb - sa).max(0.0);
            v[n] = (sa - sb).max(0.0);
            mu.push(m);
            nu.push(v);
        }
        AugmentedExponents { mu, nu }
    }

    /// Mass production terms `r_i` (they sum to zero).
    pub fn reaction_rates(&self, x: &[f64]) -> DVector<f64> {
        let n = self.n();
        let mut r = DVector::zeros(n);
        if self.is_reversible() {
            for rx in &self.reversible {
                let rate = rx.kf * monomial(x, &rx.alpha) - rx.kb * monomial(x, &rx.beta);
                for i in 0..n {
                    r[i] += (rx.beta[i] - rx.alpha[i]) * rate;
                }
            }
        } else {
            for rx in &self.oneway {
                let rate = rx.k * monomial(x, &rx.y);
                for i in 0..n {
                    r[i] += (rx.yprime[i] - rx.y[i]) * rate;
                }
            }
        }
        for (ri, s) in r.iter_mut().zip(&self.species) {
            *ri *= s.molar_mass;
        }
        r
    }

    /// Jacobian of [`Self::reaction_rates`] with respect to all `n` fractions
    /// treated as independent.
    pub fn reaction_rates_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut jac = DMatrix::zeros(n, n);
        let mut add = |e: &[f64], k: f64, sign: f64, stoich: &dyn Fn(usize) -> f64| {
            for j in 0..n {
                if e[j] == 0.0 {
                    continue;
                }
                // d/dx_j of x^e, written without dividing by x_j
                let mut d = k * e[j] * x[j].powf(e[j] - 1.0);
                for l in 0..n {
                    if l != j && e[l] != 0.0 {
                        d *= x[l].powf(e[l]);
                    }
                }
                for i in 0..n {
                    jac[(i, j)] += sign * stoich(i) * d;
                }
            }
        };
        if self.is_reversible() {
            for rx in &self.reversible {
                let st = |i: usize| rx.beta[i] - rx.alpha[i];
                add(&rx.alpha, rx.kf, 1.0, &st);
                add(&rx.beta, rx.kb, -1.0, &st);
            }
        } else {
            for rx in &self.oneway {
                let st = |i: usize| rx.yprime[i] - rx.y[i];
                add(&rx.y, rx.k, 1.0, &st);
            }
        }
        for i in 0..n {
            let m = self.species[i].molar_mass;
            for j in 0..n {
                jac[(i, j)] *= m;
            }
        }
        jac
    }

    /// Forward and backward rates `(kf x^alpha, kb x^beta)` per reversible reaction.
    pub fn reversible_rates(&self, x: &[f64]) -> Vec<(f64, f64)> {
        self.reversible
            .iter()
            .map(|r| (r.kf * monomial(x, &r.alpha), r.kb * monomial(x, &r.beta)))
            .collect()
    }

    /// Distinct complexes in order of first appearance.
    pub fn complexes(&self) -> Vec<Vec<f64>> {
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut out = Vec::new();
        for r in self.as_oneway() {
            for c in [&r.y, &r.yprime] {
                let key = complex_key(c);
                if !seen.contains(&key) {
                    seen.push(key);
                    out.push(c.clone());
                }
            }
        }
        out
    }

    /// Outflow minus inflow at each complex, ordered as [`Self::complexes`].
    pub fn complex_balance_residual(&self, x: &[f64]) -> DVector<f64> {
        let keys: Vec<Vec<String>> = self.complexes().iter().map(|c| complex_key(c)).collect();
        let mut res = DVector::zeros(keys.len());
        for r in self.as_oneway() {
            let flux = r.k * monomial(x, &r.y);
            let src = keys.iter().position(|k| *k == complex_key(&r.y)).expect("collected");
            let dst = keys.iter().position(|k| *k == complex_key(&r.yprime)).expect("collected");
            res[src] += flux;
            res[dst] -= flux;
        }
        res
    }

    /// Solves `W^T log x = log(kf/kb)` in least squares.
    ///
    /// Returns a positive point of the detailed-balance set, or the residual
    /// vector when the Wegscheider conditions fail.
    pub fn detailed_balance_witness(&self) -> Result<DVector<f64>, DVector<f64>> {
        let n = self.n();
        if self.reversible.is_empty() {
            return Ok(DVector::from_element(n, 1.0));
        }
        let wt = self.wegscheider().transpose();
        let rhs = DVector::from_iterator(self.reversible.len(), self.reversible.iter().map(|r| (r.kf / r.kb).ln()));
        let sol = linalg::lstsq(&wt, &rhs, 1e-12);
        let residual = &wt * &sol - &rhs;
        if linalg::max_abs(&residual) <= 1e-10 {
            Ok(sol.map(f64::exp))
        } else {
            Err(residual)
        }
    }
}

/// Wegscheider matrix of `network`.
pub fn build_wegscheider(network: &ReactionNetwork) -> DMatrix<f64> {
    network.wegscheider()
}

/// Conservation laws `Q`, mass vector `M0 = Q c0bar`, `zeta` and the
/// augmented system `Qhat omega = M0hat`.
#[derive(Debug, Clone)]
pub struct ConservationStructure {
    pub w: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub zeta: DVector<f64>,
    pub m0: DVector<f64>,
    pub qhat: DMatrix<f64>,
    pub m0hat: DVector<f64>,
    /// Whether `Q` came out of exact rational elimination.
    pub integer_basis: bool,
}

impl ConservationStructure {
    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    /// Builds the structure for an explicitly given mass vector. Row signs of
    /// `Q` are left as computed; entries of `m0` may be zero.
    pub fn with_mass_vector(network: &ReactionNetwork, m0: DVector<f64>) -> Result<Self, ConservationError> {
        let w = network.wegscheider();
        let (q, integer_basis) = left_null_basis(&w)?;
        if m0.len() != q.nrows() {
            return Err(ConservationError::DimensionMismatch { expected: q.nrows(), got: m0.len() });
        }
        Self::assemble(network, w, q, m0, integer_basis)
    }

    fn assemble(
        network: &ReactionNetwork,
        w: DMatrix<f64>,
        q: DMatrix<f64>,
        m0: DVector<f64>,
        integer_basis: bool,
    ) -> Result<Self, ConservationError> {
        let n = network.n();
        let m = q.nrows();
        let masses = network.masses();
        let qt = q.transpose();
        let zeta = linalg::lstsq(&qt, &masses, 1e-12);
        let residual = linalg::max_abs(&(&qt * &zeta - &masses));
        if residual > 1e-10 * linalg::max_abs(&masses) {
            return Err(ConservationError::InconsistentMasses { residual });
        }
        let value = zeta.dot(&m0);
        if (value - 1.0).abs() > 1e-10 {
            return Err(ConservationError::NotNormalized { value });
        }
        let mut qhat = DMatrix::zeros(m + 1, n + 1);
        qhat.view_mut((0, 0), (m, n)).copy_from(&q);
        for j in 0..n {
            qhat[(m, j)] = 1.0;
        }
        qhat[(m, n)] = -1.0;
        let mut m0hat = DVector::zeros(m + 1);
        m0hat.rows_mut(0, m).copy_from(&m0);
        Ok(Self { w, q, zeta, m0, qhat, m0hat, integer_basis })
    }

    /// `Q c - M0` for mean concentrations `c`.
    pub fn mass_residual(&self, cbar: &DVector<f64>) -> DVector<f64> {
        &self.q * cbar - &self.m0
    }
}

/// Conservation structure for the mean initial concentrations `c0bar`.
pub fn conservation_basis(network: &ReactionNetwork, c0bar: &DVector<f64>) -> Result<ConservationStructure, ConservationError> {
    if c0bar.len() != network.n() {
        return Err(ConservationError::DimensionMismatch { expected: network.n(), got: c0bar.len() });
    }
    if c0bar.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(ConservationError::NonPositiveData);
    }
    let w = network.wegscheider();
    let (mut q, integer_basis) = left_null_basis(&w)?;
    let mut m0 = &q * c0bar;
    for i in 0..q.nrows() {
        if m0[i] < 0.0 {
            m0[i] = -m0[i];
            let flipped = -q.row(i);
            q.set_row(i, &flipped);
        }
    }
    ConservationStructure::assemble(network, w, q, m0, integer_basis)
}

type Rat = Ratio<i128>;

fn is_small_integer_matrix(w: &DMatrix<f64>) -> bool {
    w.iter().all(|&v| v.abs() < 1e6 && (v - v.round()).abs() < 1e-12)
}

/// Reduced row echelon form in place; returns pivot columns.
fn rref(a: &mut [Vec<Rat>]) -> Vec<usize> {
    let rows = a.len();
    let cols = if rows == 0 { 0 } else { a[0].len() };
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let Some(p) = (r..rows).find(|&i| a[i][c] != Rat::from_integer(0)) else {
            continue;
        };
        a.swap(r, p);
        let piv = a[r][c];
        for v in a[r].iter_mut() {
            *v /= piv;
        }
        for i in 0..rows {
            if i != r && a[i][c] != Rat::from_integer(0) {
                let f = a[i][c];
                for j in 0..cols {
                    let t = a[r][j] * f;
                    a[i][j] -= t;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    pivots
}

/// Rows spanning `ker(W^T)`, integer-valued when possible.
fn left_null_basis(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool), ConservationError> {
    let n = w.nrows();
    if is_small_integer_matrix(w) {
        let mut a: Vec<Vec<Rat>> = (0..w.ncols())
            .map(|c| (0..n).map(|i| Rat::from_integer(w[(i, c)].round() as i128)).collect())
            .collect();
        let pivots = rref(&mut a);
        let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        let mut basis: Vec<Vec<Rat>> = free
            .iter()
            .map(|&f| {
                let mut v = vec![Rat::from_integer(0); n];
                v[f] = Rat::from_integer(1);
                for (row, &pc) in pivots.iter().enumerate() {
                    v[pc] = -a[row][f];
                }
                v
            })
            .collect();
        rref(&mut basis);
        let q = DMatrix::from_fn(basis.len(), n, |i, j| {
            let row = &basis[i];
            let lcm = row.iter().fold(1i128, |l, v| l.lcm(v.denom()));
            let ints: Vec<i128> = row.iter().map(|v| (v * Rat::from_integer(lcm)).to_integer()).collect();
            let g = ints.iter().fold(0i128, |g, v| g.gcd(v)).max(1);
            (ints[j] / g) as f64
        });
        return Ok((q, true));
    }
    let ns = linalg::null_space(&w.transpose(), 1e-10).ok_or(ConservationError::RankDeficiency)?;
    Ok((ns.transpose(), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rev(alpha: &[f64], beta: &[f64], kf: f64, kb: f64) -> ReversibleReaction {
        ReversibleReaction { alpha: alpha.to_vec(), beta: beta.to_vec(), kf, kb }
    }

    fn species(masses: &[f64]) -> Vec<Species> {
        masses.iter().enumerate().map(|(i, &m)| Species::new(format!("A{}", i + 1), m)).collect()
    }

    fn example4() -> ReactionNetwork {
        ReactionNetwork::new(species(&[1.0, 2.0, 3.0]), vec![rev(&[1., 1., 0.], &[0., 0., 1.], 1.0, 1.0)], vec![]).unwrap()
    }

    fn cycle(k: [f64; 3]) -> ReactionNetwork {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let rx = (0..3).map(|i| OneWayReaction { y: e(i), yprime: e((i + 1) % 3), k: k[i] }).collect();
        ReactionNetwork::new(species(&[1.0, 1.0, 1.0]), vec![], rx).unwrap()
    }

    #[test]
    fn wegscheider_columns() {
        let bin = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[1., 0.], &[0., 1.], 2.0, 1.0)], vec![]).unwrap();
        assert_eq!(build_wegscheider(&bin), DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]));
        assert_eq!(build_wegscheider(&example4()), DMatrix::from_column_slice(3, 1, &[-1.0, -1.0, 1.0]));
        let w = build_wegscheider(&cycle([1.0, 2.0, 4.0]));
        let expected = DMatrix::from_column_slice(3, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, -1.0]);
        assert_eq!(w, expected);
    }

    #[test]
    fn example4_conservation() {
        let net = example4();
        let c0 = DVector::from_vec(vec![0.4, 0.15, 0.1]);
        let cs = conservation_basis(&net, &c0).unwrap();
        assert!(cs.integer_basis);
        assert_eq!(cs.q, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]));
        assert!((cs.zeta[0] - 1.0).abs() < 1e-12 && (cs.zeta[1] - 2.0).abs() < 1e-12);
        assert!((cs.m0[0] - 0.5).abs() < 1e-15 && (cs.m0[1] - 0.25).abs() < 1e-15);
        assert!((&cs.q * &cs.w).norm() < 1e-12);
        let expected_qhat = DMatrix::from_row_slice(3, 4, &[1., 0., 1., 0., 0., 1., 1., 0., 1., 1., 1., -1.]);
        assert_eq!(cs.qhat, expected_qhat);
    }

    #[test]
    fn binary_and_cycle_conservation() {
        let bin = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[1., 0.], &[0., 1.], 2.0, 1.0)], vec![]).unwrap();
        let cs = conservation_basis(&bin, &DVector::from_vec(vec![0.3, 0.7])).unwrap();
        assert_eq!(cs.q, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert!((cs.m0[0] - 1.0).abs() < 1e-15 && (cs.zeta[0] - 1.0).abs() < 1e-12);
        let cs = conservation_basis(&cycle([1.0, 2.0, 4.0]), &DVector::from_vec(vec![0.2, 0.3, 0.5])).unwrap();
        assert_eq!(cs.q, DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]));
        assert!((cs.m0[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unnormalised_data_is_rejected() {
        let net = example4();
        let err = conservation_basis(&net, &DVector::from_vec(vec![0.8, 0.3, 0.2])).unwrap_err();
        assert!(matches!(err, ConservationError::NotNormalized { .. }));
    }

    #[test]
    fn mass_violating_network_is_rejected() {
        let err = ReactionNetwork::new(species(&[1.0, 2.0]), vec![rev(&[1., 0.], &[0., 1.], 1.0, 1.0)], vec![]).unwrap_err();
        assert!(matches!(err, NetworkError::MassNotConserved { .. }));
    }

    #[test]
    fn coefficient_validation() {
        let err = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[0.5, 0.], &[0., 0.5], 1.0, 1.0)], vec![]).unwrap_err();
        assert!(matches!(err, NetworkError::InvalidCoefficient { .. }));
        let err = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[1., 0.], &[1., 0.], 1.0, 1.0)], vec![]).unwrap_err();
        assert_eq!(err, NetworkError::TrivialReaction { reaction: 0 });
    }

    #[test]
    fn witness_examples() {
        let bin = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[1., 0.], &[0., 1.], 2.0, 1.0)], vec![]).unwrap();
        let x = bin.detailed_balance_witness().unwrap();
        assert!((x[1] / x[0] - 2.0).abs() < 1e-12);
        let x = example4().detailed_balance_witness().unwrap();
        assert!((x[2] - x[0] * x[1]).abs() < 1e-12);
        let bad = ReactionNetwork::new(
            species(&[1.0, 1.0]),
            vec![rev(&[1., 0.], &[0., 1.], 2.0, 1.0), rev(&[2., 0.], &[0., 2.], 1.0, 1.0)],
            vec![],
        )
        .unwrap();
        let cert = bad.detailed_balance_witness().unwrap_err();
        assert!(linalg::max_abs(&cert) > 1e-3);
    }

    #[test]
    fn complex_balance_examples() {
        let net = cycle([1.0, 2.0, 4.0]);
        let r = net.complex_balance_residual(&[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
        assert!(linalg::max_abs(&r) < 1e-15);
        let r = cycle([1.0, 1.0, 1.0]).complex_balance_residual(&[1.0 / 3.0; 3]);
        assert!(linalg::max_abs(&r) < 1e-15);
        // outflow 1/3 minus inflow 4/3 at complex A1
        let r = net.complex_balance_residual(&[1.0 / 3.0; 3]);
        assert!((r[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rate_examples() {
        let r = example4().reaction_rates(&[0.5, 0.4, 0.1]);
        for (a, b) in r.iter().zip([-0.1, -0.2, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
        let bin = ReactionNetwork::new(species(&[1.0, 1.0]), vec![rev(&[1., 0.], &[0., 1.], 2.0, 1.0)], vec![]).unwrap();
        let r = bin.reaction_rates(&[0.5, 0.5]);
        assert_eq!((r[0], r[1]), (-0.5, 0.5));
        let x = example4().detailed_balance_witness().unwrap();
        assert!(linalg::max_abs(&example4().reaction_rates(x.as_slice())) < 1e-14);
    }

    #[test]
    fn augmented_exponents_last_entries() {
        let ex = example4().augmented_exponents();
        assert_eq!(ex.mu[0].as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ex.nu[0].as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        let ex = cycle([1.0; 3]).augmented_exponents();
        assert!(ex.mu.iter().chain(&ex.nu).all(|v| v[3] == 0.0));
    }

    #[test]
    fn rate_jacobian_matches_finite_differences() {
        let net = example4();
        let x = [0.3, 0.5, 0.2];
        let jac = net.reaction_rates_jacobian(&x);
        for j in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (net.reaction_rates(&xp) - net.reaction_rates(&xm)) / (2.0 * h);
            for i in 0..3 {
                assert!((fd[i] - jac[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn empty_network_conserves_every_species() {
        let net = ReactionNetwork::new(species(&[1.0, 2.0]), vec![], vec![]).unwrap();
        let cs = conservation_basis(&net, &DVector::from_vec(vec![0.5, 0.25])).unwrap();
        assert_eq!(cs.q, DMatrix::identity(2, 2));
    }
}
