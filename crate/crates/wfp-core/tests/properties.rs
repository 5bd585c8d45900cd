//! Randomized invariants across modules.

use proptest::prelude::*;
use wfp_core::cli_io::ConfigFile;
use wfp_core::density_matrix::{trace_of, wigner_to_rho};
use wfp_core::phase_grid::{random_smooth_field, GridSpec, WignerField};
use wfp_core::potential_theta::{apply_theta, PotentialSpec};
use wfp_core::propagator::{displaced_gaussian, step_unperturbed};
use wfp_core::wfp_operator::apply_l;

fn grid() -> GridSpec {
    GridSpec::new(1, 64, 64, 12.0, 8.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unperturbed_flow_conserves_mass_and_contracts_h_distance(sx in -1.5f64..1.5, sxi in -1.5f64..1.5, dt in 0.05f64..1.0) {
        let g = grid();
        let w0 = displaced_gaussian(&g, sx, sxi).unwrap();
        let w1 = step_unperturbed(&w0, dt).unwrap();
        prop_assert!((w1.mass() - w0.mass()).abs() <= 1e-10);
        let mu = WignerField::mu(g);
        let before = w0.sub(&mu).unwrap().norm_h_truncated(30.0).unwrap();
        let after = w1.sub(&mu).unwrap().norm_h_truncated(30.0).unwrap();
        prop_assert!(after <= before * (1.0 + 1e-8), "{} -> {}", before, after);
    }

    #[test]
    fn generator_and_theta_annihilate_mass(seed in 0u64..10_000, k in 0.5f64..2.0) {
        let w = random_smooth_field(grid(), seed, 3);
        prop_assert!(apply_l(&w).mass().abs() <= 1e-10 * w.norm_l2().max(1.0));
        let spec = PotentialSpec::new(1.0, wfp_core::potential_theta::PotentialKind::Sinusoidal { k0: vec![k], amp: 1.0 }).unwrap();
        prop_assert!(apply_theta(&w, &spec).unwrap().mass().abs() <= 1e-10 * w.norm_l2().max(1.0));
    }

    #[test]
    fn kernel_trace_is_the_mass(seed in 0u64..10_000, scale in -3.0f64..3.0) {
        let w = random_smooth_field(grid(), seed, 3).scaled(scale);
        let rho = wigner_to_rho(&w).unwrap();
        prop_assert!((trace_of(&rho) - w.mass()).abs() <= 1e-10 * w.mass().abs().max(1.0));
    }

    #[test]
    fn config_parser_never_panics(text in "[a-z_.=\\[\\] #0-9\n\"]{0,200}") {
        let _ = ConfigFile::parse(&text);
    }
}
