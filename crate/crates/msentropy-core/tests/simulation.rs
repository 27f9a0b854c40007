use msentropy_core::analysis;
use msentropy_core::network::Species;
use msentropy_core::presets::{self, InitialData};
use msentropy_core::simulator::{self, Grid1D, StepperConfig};
use msentropy_core::{Mixture, ReactionNetwork};

/// Amplitude of the first cosine mode of `rho_1 - mean`.
fn first_mode(field: &simulator::StateField, grid: &Grid1D) -> f64 {
    let k = field.cells();
    let mean = field.rho.column(0).sum() / k as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..k {
        let phi = (std::f64::consts::PI * grid.center(c)).cos();
        num += (field.rho[(c, 0)] - mean) * phi;
        den += phi * phi;
    }
    num / den
}

#[test]
fn pure_diffusion_matches_linearised_heat_equation() {
    // For two species the density flux is exactly -D12 grad rho_1, whatever
    // the molar masses, so the first mode decays like exp(-pi^2 D12 t).
    let d12 = 0.5;
    let net = ReactionNetwork::new(vec![Species::new("A", 1.0), Species::new("B", 2.0)], vec![], vec![]).unwrap();
    let mix = Mixture::uniform(net.masses(), d12).unwrap();
    let grid = Grid1D::unit(200).unwrap();
    let init = InitialData::Cosine { enrich: (0, 1), amplitude: 1e-3 };
    let s = presets::assemble(net, mix, grid, &init, &[0.4, 0.6], None).unwrap();
    let cfg = StepperConfig { tau: 1e-4, t_end: 0.1, ..Default::default() };
    let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
    let a0 = first_mode(&s.initial, &grid);
    let a1 = first_mode(&rep.final_state, &grid);
    let measured = -(a1 / a0).ln() / cfg.t_end;
    let expected = std::f64::consts::PI.powi(2) * d12;
    assert!((measured / expected - 1.0).abs() < 0.05, "measured {measured}, expected {expected}");
}

#[test]
fn equilibrium_initial_data_stays_put() {
    for name in presets::PRESET_NAMES {
        let p = presets::preset(name).unwrap();
        let s = p.scenario_with(16, &InitialData::Equilibrium).unwrap();
        let cfg = StepperConfig { tau: 1e-2, t_end: 0.2, ..Default::default() };
        let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
        for r in &rep.records {
            assert!(r.entropy.abs() <= 1e-14, "{name}: E = {}", r.entropy);
            assert!(r.production.abs() <= 1e-12, "{name}");
            assert!(r.mass_residual <= 1e-12, "{name}");
            assert!(r.entropy_margin.abs() <= 1e-12, "{name}");
        }
    }
}

#[test]
fn example4_coarse_run_keeps_invariants() {
    let p = presets::preset("example4").unwrap();
    let s = p.scenario_with(40, &p.initial).unwrap();
    let cfg = StepperConfig { tau: 2e-3, t_end: 1.0, ..Default::default() };
    let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
    assert!(rep.margin_violations.is_empty());
    for w in rep.records.windows(2) {
        assert!(w[1].entropy <= w[0].entropy + 1e-9);
        assert!(w[1].mass_residual <= 1e-10);
        assert!(w[1].simplex_residual <= 1e-11);
        assert!(w[1].ckp_margin >= -1e-10);
    }
}

#[test]
fn cycle_entropy_decreases() {
    let p = presets::preset("cycle").unwrap();
    let s = p.scenario_with(30, &p.initial).unwrap();
    let cfg = StepperConfig { tau: 2e-3, t_end: 1.0, ..Default::default() };
    let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
    assert!(rep.records.windows(2).all(|w| w[1].entropy <= w[0].entropy + 1e-9));
    assert!(rep.worst_margin >= -1e-9);
    let fit = analysis::fit_decay_rate(&rep.times(), &rep.entropies()).unwrap();
    assert!(fit.lambda > 0.0);
}

#[test]
fn uniform_reaction_only_margin() {
    let p = presets::preset("example4").unwrap();
    let s = p.scenario_with(4, &InitialData::Uniform).unwrap();
    let cfg = StepperConfig { tau: 0.05, t_end: 2.0, ..Default::default() };
    let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
    for r in &rep.records {
        assert!(r.production_gradient.abs() <= 1e-30);
        assert!(r.entropy_margin >= -1e-9);
    }
}

#[test]
fn regularised_scheme_keeps_the_margin() {
    let p = presets::preset("binary").unwrap();
    let s = p.scenario_with(20, &p.initial).unwrap();
    let cfg = StepperConfig { tau: 5e-3, t_end: 0.5, epsilon: 1e-3, ..Default::default() };
    let rep = simulator::run(&s.problem, &s.initial, &cfg).unwrap();
    assert!(rep.worst_margin >= -1e-9);
    // the eps term damps w and so breaks exact mass conservation, but only slightly
    assert!(rep.records.last().unwrap().mass_residual < 1e-3);
}

#[test]
fn explicit_initial_data_is_projected() {
    let p = presets::preset("binary").unwrap();
    let mut rho = nalgebra::DMatrix::from_element(4, 2, 0.5);
    rho[(0, 0)] = 1.0;
    rho[(0, 1)] = 0.0;
    let s = p.scenario_with(4, &InitialData::Explicit(rho)).unwrap();
    assert_eq!(s.clamps, 1);
    assert!(s.initial.rho.iter().all(|&v| v > 0.0));
    assert!(s.initial.simplex_residual() < 1e-15);
}
