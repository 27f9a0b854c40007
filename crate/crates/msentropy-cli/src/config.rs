//! JSON scenario configuration.
//!
//! Every field is optional when `preset` is given; the preset supplies the
//! rest. Without a preset, `network`, `diffusivities` and `initial.rho_mean`
//! are required.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use msentropy_core::network::{OneWayReaction, ReversibleReaction, Species};
use msentropy_core::presets::{self, InitialData};
use msentropy_core::{Mixture, ReactionNetwork, StepperConfig};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_OUTPUT_DIR: &str = "msentropy-out";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: at `{field}`: {message}")]
    Parse { file: PathBuf, field: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Option<String>,
    pub network: Option<NetworkSpec>,
    pub diffusivities: Option<DiffusivitySpec>,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    pub mass_vector: Option<Vec<f64>>,
    #[serde(default)]
    pub stepper: StepperSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub species: Vec<SpeciesSpec>,
    #[serde(default)]
    pub reversible: Vec<ReversibleSpec>,
    #[serde(default)]
    pub oneway: Vec<OneWaySpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub name: String,
    pub molar_mass: f64,
}

/// Complexes are maps from species name to stoichiometric coefficient.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReversibleSpec {
    pub reactants: BTreeMap<String, f64>,
    pub products: BTreeMap<String, f64>,
    pub kf: f64,
    pub kb: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneWaySpec {
    pub reactants: BTreeMap<String, f64>,
    pub products: BTreeMap<String, f64>,
    pub k: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusivitySpec {
    pub default: f64,
    #[serde(default)]
    pub pairs: Vec<PairSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub cells: Option<usize>,
    pub length: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    Uniform,
    Step,
    Cosine,
    Equilibrium,
    Explicit,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub kind: Option<InitialKind>,
    pub rho_mean: Option<Vec<f64>>,
    /// Species enriched on the left and depleted on the right.
    pub enrich: Option<[String; 2]>,
    pub amplitude: Option<f64>,
    /// Per-cell densities for `explicit`.
    pub densities: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperSpec {
    pub tau: Option<f64>,
    pub t_end: Option<f64>,
    pub epsilon: Option<f64>,
    pub newton_tol: Option<f64>,
    pub newton_max: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub seed: Option<u64>,
    /// Draws for the finite-dimensional inequality.
    pub samples: Option<usize>,
    pub elementary_samples: Option<usize>,
    pub example4_samples: Option<usize>,
    /// Random fields for the CKP and bound sweeps.
    pub fields: Option<usize>,
    pub restarts: Option<usize>,
    #[serde(default)]
    pub require_detailed_balance: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub directory: Option<PathBuf>,
    /// Write a field snapshot every this many steps; 0 disables snapshots.
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings {
    pub seed: u64,
    pub samples: usize,
    pub elementary_samples: usize,
    pub example4_samples: usize,
    pub fields: usize,
    pub restarts: usize,
    pub require_detailed_balance: bool,
}

/// A configuration resolved against its preset.
#[derive(Debug, Clone)]
pub struct Setup {
    pub name: String,
    pub network: ReactionNetwork,
    /// Diffusivities already rescaled to the unit interval.
    pub mixture: Mixture,
    pub cells: usize,
    pub length: f64,
    pub rho_mean: Vec<f64>,
    pub initial: InitialData,
    pub mass_vector: Option<DVector<f64>>,
    pub stepper: StepperConfig,
    pub analysis: AnalysisSettings,
    pub output_dir: PathBuf,
    pub snapshot_every: usize,
    pub config_sha256: String,
}

impl Setup {
    pub fn grid(&self) -> msentropy_core::Grid1D {
        msentropy_core::Grid1D::unit(self.cells).expect("cells validated")
    }

    pub fn scenario(&self) -> Result<presets::Scenario, presets::SetupError> {
        presets::assemble(
            self.network.clone(),
            self.mixture.clone(),
            self.grid(),
            &self.initial,
            &self.rho_mean,
            self.mass_vector.clone(),
        )
    }
}

/// Reads and parses `path`; returns the configuration and the SHA-256 of
/// its bytes.
pub fn load(path: &Path) -> Result<(Config, String), ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let cfg = parse(&bytes).map_err(|(field, message)| ConfigError::Parse { file: path.to_path_buf(), field, message })?;
    Ok((cfg, hash))
}

/// Parses a configuration document; errors carry the offending field path.
pub fn parse(bytes: &[u8]) -> Result<Config, (String, String)> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| (e.path().to_string(), e.inner().to_string()))
}

fn complex(map: &BTreeMap<String, f64>, names: &[String], what: &str) -> Result<Vec<f64>, ConfigError> {
    let mut v = vec![0.0; names.len()];
    for (name, &coef) in map {
        let i = names.iter().position(|s| s == name).ok_or_else(|| invalid(format!("{what}: unknown species {name:?}")))?;
        v[i] = coef;
    }
    Ok(v)
}

fn build_network(spec: &NetworkSpec) -> Result<ReactionNetwork, ConfigError> {
    let names: Vec<String> = spec.species.iter().map(|s| s.name.clone()).collect();
    let species = spec.species.iter().map(|s| Species::new(s.name.clone(), s.molar_mass)).collect();
    let reversible = spec
        .reversible
        .iter()
        .enumerate()
        .map(|(a, r)| {
            let what = format!("network.reversible[{a}]");
            Ok(ReversibleReaction {
                alpha: complex(&r.reactants, &names, &what)?,
                beta: complex(&r.products, &names, &what)?,
                kf: r.kf,
                kb: r.kb,
            })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let oneway = spec
        .oneway
        .iter()
        .enumerate()
        .map(|(a, r)| {
            let what = format!("network.oneway[{a}]");
            Ok(OneWayReaction { y: complex(&r.reactants, &names, &what)?, yprime: complex(&r.products, &names, &what)?, k: r.k })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    ReactionNetwork::new(species, reversible, oneway).map_err(|e| invalid(format!("network: {e}")))
}

fn build_mixture(network: &ReactionNetwork, spec: &DiffusivitySpec) -> Result<Mixture, ConfigError> {
    let n = network.n();
    let mut d = DMatrix::from_element(n, n, spec.default);
    for p in &spec.pairs {
        let idx = |s: &str| network.species_index(s).ok_or_else(|| invalid(format!("diffusivities: unknown species {s:?}")));
        let (i, j) = (idx(&p.a)?, idx(&p.b)?);
        d[(i, j)] = p.value;
        d[(j, i)] = p.value;
    }
    Mixture::new(network.masses(), d).map_err(|e| invalid(format!("diffusivities: {e}")))
}

fn positive(v: f64, what: &str) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{what} must be positive and finite")))
    }
}

/// Resolves `cfg` against its preset. `seed` and `out_dir` override the
/// corresponding configuration entries.
pub fn resolve(cfg: &Config, hash: &str, seed: Option<u64>, out_dir: Option<&Path>) -> Result<Setup, ConfigError> {
    let preset = match &cfg.preset {
        Some(name) => Some(presets::preset(name).ok_or_else(|| {
            invalid(format!("unknown preset {name:?}; known presets: {}", presets::PRESET_NAMES.join(", ")))
        })?),
        None => None,
    };
    let network = match (&cfg.network, &preset) {
        (Some(spec), _) => build_network(spec)?,
        (None, Some(p)) => p.network.clone(),
        (None, None) => return Err(invalid("either `preset` or `network` is required")),
    };
    let n = network.n();
    // preset entries that depend on the species list only apply to the preset network
    let compatible = preset.as_ref().filter(|p| cfg.network.is_none() || p.network.n() == n);

    let mixture = match (&cfg.diffusivities, compatible) {
        (Some(spec), _) => build_mixture(&network, spec)?,
        (None, Some(p)) if p.mixture.masses() == &network.masses() => p.mixture.clone(),
        _ => return Err(invalid("`diffusivities` is required for this network")),
    };
    let length = positive(cfg.domain.length.unwrap_or(1.0), "domain.length")?;
    // z -> z / L maps the domain onto the unit interval; D picks up 1 / L^2
    let mixture = mixture.scaled(1.0 / (length * length));

    let rho_mean = match (&cfg.initial.rho_mean, compatible) {
        (Some(r), _) => r.clone(),
        (None, Some(p)) => p.rho_mean.clone(),
        (None, None) => return Err(invalid("`initial.rho_mean` is required for this network")),
    };
    if rho_mean.len() != n {
        return Err(invalid(format!("initial.rho_mean has {} entries, expected {n}", rho_mean.len())));
    }

    let explicit = cfg.initial.densities.as_ref();
    let cells = match (cfg.domain.cells, explicit, compatible) {
        (Some(k), _, _) => k,
        (None, Some(rows), _) => rows.len(),
        (None, None, Some(p)) => p.cells,
        (None, None, None) => return Err(invalid("`domain.cells` is required")),
    };
    if cells < 2 {
        return Err(invalid("domain.cells must be at least 2"));
    }

    let (preset_enrich, preset_amplitude) = match compatible.map(|p| &p.initial) {
        Some(InitialData::Step { enrich, amplitude } | InitialData::Cosine { enrich, amplitude }) => (Some(*enrich), Some(*amplitude)),
        _ => (None, None),
    };
    let enrich = match &cfg.initial.enrich {
        Some([a, b]) => {
            let idx = |s: &str| network.species_index(s).ok_or_else(|| invalid(format!("initial.enrich: unknown species {s:?}")));
            Some((idx(a)?, idx(b)?))
        }
        None => preset_enrich,
    };
    let kind = match (cfg.initial.kind, compatible.map(|p| &p.initial)) {
        (Some(k), _) => k,
        (None, _) if explicit.is_some() => InitialKind::Explicit,
        (None, Some(InitialData::Step { .. })) => InitialKind::Step,
        (None, Some(InitialData::Cosine { .. })) => InitialKind::Cosine,
        (None, Some(InitialData::Equilibrium)) => InitialKind::Equilibrium,
        _ => InitialKind::Uniform,
    };
    let profile = || -> Result<((usize, usize), f64), ConfigError> {
        let enrich = enrich.ok_or_else(|| invalid("initial.enrich is required for step and cosine data"))?;
        let amplitude = cfg.initial.amplitude.or(preset_amplitude).ok_or_else(|| invalid("initial.amplitude is required"))?;
        Ok((enrich, amplitude))
    };
    let initial = match kind {
        InitialKind::Uniform => InitialData::Uniform,
        InitialKind::Equilibrium => InitialData::Equilibrium,
        InitialKind::Step => {
            let (enrich, amplitude) = profile()?;
            InitialData::Step { enrich, amplitude }
        }
        InitialKind::Cosine => {
            let (enrich, amplitude) = profile()?;
            InitialData::Cosine { enrich, amplitude }
        }
        InitialKind::Explicit => {
            let rows = explicit.ok_or_else(|| invalid("initial.densities is required for explicit data"))?;
            if rows.len() != cells || rows.iter().any(|r| r.len() != n) {
                return Err(invalid(format!("initial.densities must be {cells} rows of {n} entries")));
            }
            InitialData::Explicit(DMatrix::from_fn(cells, n, |k, i| rows[k][i]))
        }
    };

    let base = compatible.map(|p| p.stepper).unwrap_or_default();
    let stepper = StepperConfig {
        tau: cfg.stepper.tau.unwrap_or(base.tau),
        t_end: cfg.stepper.t_end.unwrap_or(base.t_end),
        epsilon: cfg.stepper.epsilon.unwrap_or(base.epsilon),
        newton_tol: cfg.stepper.newton_tol.unwrap_or(base.newton_tol),
        newton_max: cfg.stepper.newton_max.unwrap_or(base.newton_max),
    };
    stepper.validate().map_err(|e| invalid(format!("stepper: {e}")))?;

    let a = &cfg.analysis;
    let analysis = AnalysisSettings {
        seed: seed.or(a.seed).unwrap_or(0),
        samples: a.samples.unwrap_or(10_000),
        elementary_samples: a.elementary_samples.unwrap_or(100_000),
        example4_samples: a.example4_samples.unwrap_or(100_000),
        fields: a.fields.unwrap_or(1000),
        restarts: a.restarts.unwrap_or(10),
        require_detailed_balance: a.require_detailed_balance,
    };

    let output_dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));

    Ok(Setup {
        name: cfg.preset.clone().filter(|_| cfg.network.is_none()).unwrap_or_else(|| "custom".into()),
        network,
        mixture,
        cells,
        length,
        rho_mean,
        initial,
        mass_vector: cfg.mass_vector.as_ref().map(|v| DVector::from_column_slice(v)),
        stepper,
        analysis,
        output_dir,
        snapshot_every: cfg.output.snapshot_every.unwrap_or(0),
        config_sha256: hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(json: &str) -> Result<Setup, ConfigError> {
        let cfg = parse(json.as_bytes()).map_err(|(f, m)| invalid(format!("{f}: {m}")))?;
        resolve(&cfg, "hash", None, None)
    }

    #[test]
    fn preset_only() {
        let s = setup(r#"{"preset": "example4"}"#).unwrap();
        assert_eq!(s.name, "example4");
        assert_eq!(s.cells, 100);
        assert_eq!(s.stepper.t_end, 5.0);
        assert_eq!(s.initial, InitialData::Step { enrich: (0, 1), amplitude: 0.1 });
        assert_eq!(s.analysis.seed, 0);
    }

    #[test]
    fn overrides_apply() {
        let s = setup(
            r#"{"preset": "binary", "domain": {"cells": 10, "length": 2.0},
                "initial": {"kind": "cosine", "enrich": ["A2", "A1"], "amplitude": 0.05},
                "stepper": {"tau": 0.01}, "analysis": {"seed": 7}}"#,
        )
        .unwrap();
        assert_eq!(s.cells, 10);
        assert_eq!(s.initial, InitialData::Cosine { enrich: (1, 0), amplitude: 0.05 });
        assert!((s.mixture.diffusivities()[(0, 1)] - 0.025).abs() < 1e-15);
        assert_eq!(s.stepper.tau, 0.01);
        assert_eq!(s.analysis.seed, 7);
    }

    #[test]
    fn custom_network() {
        let s = setup(
            r#"{"network": {"species": [{"name": "X", "molar_mass": 1}, {"name": "Y", "molar_mass": 1}],
                            "oneway": [{"reactants": {"X": 1}, "products": {"Y": 1}, "k": 1},
                                       {"reactants": {"Y": 1}, "products": {"X": 1}, "k": 3}]},
                "diffusivities": {"default": 0.2},
                "domain": {"cells": 8}, "initial": {"rho_mean": [0.5, 0.5]}}"#,
        )
        .unwrap();
        assert_eq!(s.name, "custom");
        assert_eq!(s.initial, InitialData::Uniform);
        assert_eq!(s.network.oneway().len(), 2);
        s.scenario().unwrap();
    }

    #[test]
    fn parse_errors_name_the_field() {
        let (field, msg) = parse(br#"{"preset": "binary", "domain": {"cells": "ten"}}"#).unwrap_err();
        assert_eq!(field, "domain.cells");
        assert!(msg.contains("line 1"), "{msg}");
        let (field, _) = parse(br#"{"stepper": {"tua": 1}}"#).unwrap_err();
        assert_eq!(field, "stepper.tua");
    }

    #[test]
    fn semantic_errors() {
        assert!(setup(r#"{"preset": "nope"}"#).is_err());
        assert!(setup(r#"{}"#).is_err());
        assert!(setup(r#"{"preset": "binary", "initial": {"rho_mean": [1.0]}}"#).is_err());
        assert!(setup(r#"{"preset": "binary", "initial": {"enrich": ["A1", "Z"]}}"#).is_err());
        assert!(setup(r#"{"preset": "binary", "stepper": {"tau": -1}}"#).is_err());
    }
}
