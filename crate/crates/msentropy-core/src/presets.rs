//! Built-in scenarios and the glue that turns a network, a mixture and
//! initial data into a [`Problem`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::equilibrium::{self, EquilibriumError, EquilibriumResult};
use crate::mstransport::{Mixture, TransportError};
use crate::network::{self, ConservationError, ConservationStructure, OneWayReaction, ReactionNetwork, ReversibleReaction, Species};
use crate::simulator::{Grid1D, Problem, SimError, StateField, StepperConfig};

pub const PRESET_NAMES: [&str; 4] = ["binary", "example4", "cycle", "degenerate-boundary"];

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Conservation(#[from] ConservationError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid initial data: {0}")]
    InvalidInitial(String),
}

/// Initial densities.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    /// `rho_mean` everywhere.
    Uniform,
    /// `rho_mean + a (e_i - e_j)` on the left half and `- a (e_i - e_j)` on
    /// the right half.
    Step { enrich: (usize, usize), amplitude: f64 },
    /// `rho_mean + a cos(pi z / L) (e_i - e_j)`.
    Cosine { enrich: (usize, usize), amplitude: f64 },
    /// The equilibrium for the mass vector of `rho_mean`.
    Equilibrium,
    /// Per-cell densities (rows).
    Explicit(DMatrix<f64>),
}

impl InitialData {
    /// Densities on `grid`, before projection. `Equilibrium` is resolved by
    /// the caller.
    pub fn densities(&self, grid: &Grid1D, rho_mean: &[f64]) -> Result<DMatrix<f64>, SetupError> {
        let k = grid.cells();
        let n = rho_mean.len();
        let profile = |shape: &dyn Fn(usize) -> f64, (i, j): (usize, usize), a: f64| -> Result<DMatrix<f64>, SetupError> {
            if i >= n || j >= n || i == j {
                return Err(SetupError::InvalidInitial(format!("enrich pair ({i}, {j}) is invalid for {n} species")));
            }
            let mut rho = DMatrix::from_fn(k, n, |_, s| rho_mean[s]);
            for cell in 0..k {
                let d = a * shape(cell);
                rho[(cell, i)] += d;
                rho[(cell, j)] -= d;
            }
            Ok(rho)
        };
        match self {
            InitialData::Uniform | InitialData::Equilibrium => Ok(DMatrix::from_fn(k, n, |_, s| rho_mean[s])),
            InitialData::Step { enrich, amplitude } => {
                profile(&|c| if 2 * c < k { 1.0 } else if 2 * c + 1 == k { 0.0 } else { -1.0 }, *enrich, *amplitude)
            }
            InitialData::Cosine { enrich, amplitude } => profile(
                &|c| (std::f64::consts::PI * grid.center(c) / grid.length()).cos(),
                *enrich,
                *amplitude,
            ),
            InitialData::Explicit(rho) => {
                if rho.nrows() != k || rho.ncols() != n {
                    return Err(SetupError::InvalidInitial(format!(
                        "explicit densities are {}x{}, expected {k}x{n}",
                        rho.nrows(),
                        rho.ncols()
                    )));
                }
                Ok(rho.clone())
            }
        }
    }
}

/// A fully specified run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: Problem,
    pub initial: StateField,
    pub equilibrium: EquilibriumResult,
    /// Entries raised to the clamp floor during projection.
    pub clamps: usize,
}

/// Projected initial field, its clamp count and the conservation structure,
/// without solving for the equilibrium.
pub fn conservation(
    network: &ReactionNetwork,
    grid: &Grid1D,
    initial: &InitialData,
    rho_mean: &[f64],
    mass_vector: Option<DVector<f64>>,
) -> Result<(StateField, usize, ConservationStructure), SetupError> {
    let n = network.n();
    if rho_mean.len() != n {
        return Err(SetupError::InvalidInitial(format!("rho_mean needs {n} entries")));
    }
    let raw = initial.densities(grid, rho_mean)?;
    let (field, clamps) = StateField::projected(raw, 0.0)?;
    let cons = match mass_vector {
        Some(m0) => ConservationStructure::with_mass_vector(network, m0)?,
        None => network::conservation_basis(network, &field.mean_concentrations(&network.masses()))?,
    };
    Ok((field, clamps, cons))
}

/// Builds the conservation structure, the equilibrium and the projected
/// initial field.
///
/// Without `mass_vector`, `M0 = Q cbar` is taken from the initial field.
/// With it, the structure uses the given vector and the simulator's initial
/// mass check decides consistency.
pub fn assemble(
    network: ReactionNetwork,
    mixture: Mixture,
    grid: Grid1D,
    initial: &InitialData,
    rho_mean: &[f64],
    mass_vector: Option<DVector<f64>>,
) -> Result<Scenario, SetupError> {
    let (field, clamps, cons) = conservation(&network, &grid, initial, rho_mean, mass_vector)?;
    let masses = network.masses();
    let eq = equilibrium::solve(&network, &cons)?;
    let field = if *initial == InitialData::Equilibrium {
        let rho_inf = eq.x_inf.component_mul(&masses) * eq.c_inf();
        StateField::uniform(grid.cells(), rho_inf.as_slice())?
    } else {
        field
    };
    let problem = Problem::new(network, mixture, cons, eq.x_inf.clone(), grid)?;
    Ok(Scenario { problem, initial: field, equilibrium: eq, clamps })
}

/// A named built-in scenario.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub network: ReactionNetwork,
    pub mixture: Mixture,
    pub rho_mean: Vec<f64>,
    pub initial: InitialData,
    pub cells: usize,
    pub stepper: StepperConfig,
}

impl Preset {
    pub fn scenario(&self) -> Result<Scenario, SetupError> {
        self.scenario_with(self.cells, &self.initial)
    }

    pub fn scenario_with(&self, cells: usize, initial: &InitialData) -> Result<Scenario, SetupError> {
        let grid = Grid1D::unit(cells)?;
        assemble(self.network.clone(), self.mixture.clone(), grid, initial, &self.rho_mean, None)
    }
}

fn species(masses: &[f64]) -> Vec<Species> {
    masses.iter().enumerate().map(|(i, &m)| Species::new(format!("A{}", i + 1), m)).collect()
}

fn stepper(tau: f64, t_end: f64) -> StepperConfig {
    StepperConfig { tau, t_end, ..StepperConfig::default() }
}

/// Looks up a built-in scenario by name.
pub fn preset(name: &str) -> Option<Preset> {
    let v = |x: &[f64]| DVector::from_column_slice(x);
    let p = match name {
        "binary" => Preset {
            name: "binary",
            network: ReactionNetwork::new(
                species(&[1.0, 1.0]),
                vec![ReversibleReaction { alpha: vec![1.0, 0.0], beta: vec![0.0, 1.0], kf: 2.0, kb: 1.0 }],
                vec![],
            )
            .ok()?,
            mixture: Mixture::uniform(v(&[1.0, 1.0]), 0.1).ok()?,
            rho_mean: vec![0.5, 0.5],
            initial: InitialData::Step { enrich: (0, 1), amplitude: 0.2 },
            cells: 50,
            stepper: stepper(1e-3, 2.0),
        },
        "example4" => Preset {
            name: "example4",
            network: ReactionNetwork::new(
                species(&[1.0, 2.0, 3.0]),
                vec![ReversibleReaction { alpha: vec![1.0, 1.0, 0.0], beta: vec![0.0, 0.0, 1.0], kf: 1.0, kb: 1.0 }],
                vec![],
            )
            .ok()?,
            mixture: Mixture::uniform(v(&[1.0, 2.0, 3.0]), 0.05).ok()?,
            rho_mean: vec![0.4, 0.3, 0.3],
            initial: InitialData::Step { enrich: (0, 1), amplitude: 0.1 },
            cells: 100,
            stepper: stepper(1e-3, 5.0),
        },
        "cycle" => {
            let e = |i: usize| {
                let mut c = vec![0.0; 3];
                c[i] = 1.0;
                c
            };
            Preset {
                name: "cycle",
                network: ReactionNetwork::new(
                    species(&[1.0, 1.0, 1.0]),
                    vec![],
                    vec![
                        OneWayReaction { y: e(0), yprime: e(1), k: 1.0 },
                        OneWayReaction { y: e(1), yprime: e(2), k: 2.0 },
                        OneWayReaction { y: e(2), yprime: e(0), k: 4.0 },
                    ],
                )
                .ok()?,
                mixture: Mixture::uniform(v(&[1.0, 1.0, 1.0]), 0.1).ok()?,
                rho_mean: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                initial: InitialData::Step { enrich: (0, 1), amplitude: 0.15 },
                cells: 50,
                stepper: stepper(1e-3, 2.0),
            }
        }
        "degenerate-boundary" => Preset {
            name: "degenerate-boundary",
            network: ReactionNetwork::new(
                species(&[1.0, 1.0]),
                vec![ReversibleReaction { alpha: vec![1.0, 1.0], beta: vec![0.0, 2.0], kf: 2.0, kb: 1.0 }],
                vec![],
            )
            .ok()?,
            mixture: Mixture::uniform(v(&[1.0, 1.0]), 0.1).ok()?,
            rho_mean: vec![0.5, 0.5],
            initial: InitialData::Step { enrich: (0, 1), amplitude: 0.2 },
            cells: 50,
            stepper: stepper(1e-3, 2.0),
        },
        _ => return None,
    };
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_assembles() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            let s = p.scenario().unwrap();
            assert_eq!(s.clamps, 0, "{name}");
            assert!(s.problem.mass_residual(&s.initial).1 < 1e-12, "{name}");
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn example4_mass_vector() {
        let s = preset("example4").unwrap().scenario().unwrap();
        let m0 = &s.problem.cons.m0;
        assert!((m0[0] - 0.5).abs() < 1e-12 && (m0[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn step_profile_keeps_the_mean() {
        let g = Grid1D::unit(6).unwrap();
        let rho = InitialData::Step { enrich: (0, 1), amplitude: 0.1 }.densities(&g, &[0.4, 0.3, 0.3]).unwrap();
        assert!((rho.column(0).sum() / 6.0 - 0.4).abs() < 1e-15);
        assert!((rho[(0, 0)] - 0.5).abs() < 1e-15 && (rho[(5, 1)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_initial_data() {
        let p = preset("cycle").unwrap();
        let s = p.scenario_with(8, &InitialData::Equilibrium).unwrap();
        let x = s.initial.fractions(s.problem.masses());
        assert!((x[(3, 0)] - 4.0 / 7.0).abs() < 1e-9);
    }
}
