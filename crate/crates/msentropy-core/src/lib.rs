//! Numerics for Maxwell–Stefan reaction-cross-diffusion systems with
//! mass-action kinetics.
//!
//! The crate is organised bottom-up:
//!
//! * [`network`]: reaction networks, Wegscheider matrix, conservation laws.
//! * [`equilibrium`]: detailed- and complex-balanced equilibria in the
//!   augmented space `(c_1, .., c_n, c)`.
//! * [`mstransport`]: pointwise Maxwell–Stefan algebra, entropy variables and
//!   the mobility matrix.
//! * [`simulator`]: implicit finite-volume time stepper in entropy variables.
//! * [`analysis`]: entropy functionals, decay fits and inequality checks.
//! * [`presets`]: the built-in scenarios.

pub mod analysis;
pub mod equilibrium;
mod linalg;
pub mod mstransport;
pub mod network;
pub mod presets;
pub mod simulator;

pub use equilibrium::EquilibriumResult;
pub use mstransport::Mixture;
pub use network::{ConservationStructure, ReactionNetwork};
pub use simulator::{Grid1D, StateField, StepperConfig};

