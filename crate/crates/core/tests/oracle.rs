use heraldkey_core::fock::{oracle_behavior_table, BellKind, BellStateSpec};
use heraldkey_core::protocols::{protocol_behavior, MeasurementSettings, Protocol, ProtocolParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (ProtocolParams, MeasurementSettings) {
    let params = ProtocolParams {
        nbar_a: rng.random_range(0.0..0.3),
        nbar_b: rng.random_range(0.0..0.3),
        eta_a: rng.random_range(0.05..1.0),
        eta_b: rng.random_range(0.05..1.0),
        eta_d: rng.random_range(0.5..1.0),
        eta_e: rng.random_range(0.5..1.0),
        p_d: rng.random_range(0.0..1e-2),
        p_d_e: rng.random_range(0.0..1e-2),
        tau: rng.random_range(0.05..0.95),
    };
    let mut amp = || rng.random_range(-0.8..0.8);
    let settings = MeasurementSettings::real([amp(), amp()], [amp(), amp(), amp()]);
    (params, settings)
}

#[test]
fn gaussian_and_fock_tables_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..6 {
        let (params, settings) = random_case(&mut rng);
        for protocol in [Protocol::A, Protocol::B, Protocol::Direct] {
            let g = protocol_behavior(protocol, &params, &settings).unwrap();
            let (f, report) = oracle_behavior_table(&params, &settings, protocol, None).unwrap();
            let diff = g.max_abs_difference(&f);
            assert!(
                diff <= 1e-6,
                "case {case} {protocol}: diff {diff:e} (cutoff {})",
                report.cutoff
            );
            assert!((g.success_prob - f.success_prob).abs() <= 1e-6 * g.success_prob.max(1e-12));
        }
    }
}

#[test]
fn complex_displacements_agree() {
    let params = ProtocolParams {
        nbar_a: 0.1,
        nbar_b: 0.05,
        eta_a: 0.7,
        eta_b: 0.4,
        ..Default::default()
    };
    let c = |re, im| nalgebra::Complex::new(re, im);
    let settings = MeasurementSettings {
        alice: [c(0.3, -0.2), c(-0.1, 0.5)],
        bob: [c(0.0, 0.4), c(0.6, 0.1), c(-0.3, -0.3)],
    };
    for protocol in [Protocol::A, Protocol::B, Protocol::Direct] {
        let g = protocol_behavior(protocol, &params, &settings).unwrap();
        let (f, _) = oracle_behavior_table(&params, &settings, protocol, None).unwrap();
        assert!(g.max_abs_difference(&f) <= 1e-6, "{protocol}");
    }
}

#[test]
fn bell_tables_are_consistent() {
    let settings = MeasurementSettings::real([0.2, -0.4], [0.1, 0.5, -0.3]);
    for kind in [BellKind::PhotonNumber, BellKind::VacuumPhoton] {
        let t = heraldkey_core::fock::bell_state_behavior(
            &BellStateSpec { kind, r: 0.8 },
            0.9,
            1e-4,
            &settings,
        )
        .unwrap();
        assert!(t.normalization_error() < 1e-12);
        assert!(t.signaling_error() < 1e-12);
        assert!(t.min_entry() >= 0.0);
    }
}
