use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use heraldkey_core::entropy::{entropy_bound, key_rate, EntropyConfig};
use heraldkey_core::protocols::{
    conditional_entropy_ab, direct_transmission_behavior, BehaviorTable, MeasurementSettings,
    Protocol, ProtocolParams,
};

fn deterministic() -> BehaviorTable {
    BehaviorTable::from_no_click([[1.0; 3]; 2], [1.0; 2], [1.0; 3], 1.0, Protocol::Direct).unwrap()
}

/// Singlet statistics with Alice at angles (0, π/2) and Bob at (π/4, -π/4, 0).
fn tsirelson() -> BehaviorTable {
    let alice = [0.0, FRAC_PI_2];
    let bob = [FRAC_PI_4, -FRAC_PI_4, 0.0];
    let mut p00 = [[0.0; 3]; 2];
    for x in 0..2 {
        for y in 0..3 {
            p00[x][y] = (1.0 + (alice[x] - bob[y]).cos()) / 4.0;
        }
    }
    BehaviorTable::from_no_click(p00, [0.5; 2], [0.5; 3], 1.0, Protocol::Direct).unwrap()
}

fn lossy_direct() -> BehaviorTable {
    let params = ProtocolParams {
        nbar_a: 0.2,
        nbar_b: 0.2,
        eta_a: 0.95,
        eta_b: 0.95,
        eta_d: 1.0,
        eta_e: 1.0,
        p_d: 0.0,
        p_d_e: 0.0,
        tau: 0.5,
    };
    let settings = MeasurementSettings::real([-0.3, 0.6], [0.4, -0.5, -0.2]);
    direct_transmission_behavior(&params, &settings).unwrap()
}

#[test]
fn deterministic_behavior_has_no_secrecy() {
    let r = entropy_bound(&deterministic(), 0.0, &EntropyConfig::new(2, 2)).unwrap();
    assert!((0.0..=1e-3).contains(&r.bound), "bound {}", r.bound);
    // Z_0 = -1, Z_1 = 0 reproduces the behavior with node value exactly -1.
    for node in &r.nodes {
        assert!(node.infimum <= -1.0 + 1e-6, "node {} infimum {}", node.t, node.infimum);
        assert!(node.certified_infimum <= node.infimum + 1e-9);
    }
    assert!(r.max_residual() <= 1e-7);
}

#[test]
fn tsirelson_behavior_is_nearly_random_to_eve() {
    let r = entropy_bound(&tsirelson(), 0.0, &EntropyConfig::new(4, 2)).unwrap();
    assert!(r.bound >= 0.95 && r.bound <= 1.0 + 1e-4, "bound {}", r.bound);
    assert_eq!((r.m, r.level), (4, 2));
    assert!(r.max_residual() <= 1e-7);
}

#[test]
fn noise_never_helps_eve() {
    let b = lossy_direct();
    let config = EntropyConfig::new(2, 2);
    let mut last = f64::NEG_INFINITY;
    for p_n in [0.0, 0.1, 0.3] {
        let r = entropy_bound(&b, p_n, &config).unwrap();
        assert!(r.bound >= -1e-4 && r.bound <= 1.0 + 1e-4, "p_n {p_n}: {}", r.bound);
        assert!(r.bound >= last - 1e-5, "p_n {p_n}: {} after {last}", r.bound);
        last = r.bound;
    }
    assert!(last > 0.0);
}

#[test]
fn half_noise_kills_the_key() {
    let b = lossy_direct();
    let r = key_rate(&b, 0.5, &EntropyConfig::new(2, 2)).unwrap();
    assert!((r.h_ab - 1.0).abs() < 1e-12);
    assert_eq!(r.key_rate, 0.0);
    assert!(r.raw_key_rate <= 1e-6);
}

#[test]
fn direct_key_rate_has_no_heralding_factor() {
    let b = tsirelson();
    let r = key_rate(&b, 0.0, &EntropyConfig::new(2, 2)).unwrap();
    assert_eq!(r.success_prob, 1.0);
    assert!((r.h_ab - conditional_entropy_ab(&b)).abs() < 1e-15);
    assert!((r.raw_key_rate - (r.entropy.bound - r.h_ab)).abs() < 1e-15);
    assert_eq!((r.m(), r.level()), (2, 2));
}

#[test]
fn level_one_is_weaker() {
    let b = lossy_direct();
    let one = entropy_bound(&b, 0.0, &EntropyConfig::new(2, 1)).unwrap();
    let two = entropy_bound(&b, 0.0, &EntropyConfig::new(2, 2)).unwrap();
    assert!(one.bound <= two.bound + 1e-6, "{} vs {}", one.bound, two.bound);
}
