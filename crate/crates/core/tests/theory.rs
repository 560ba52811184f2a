use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versionguard::theory::{
    analytic_probability, lower_bound_t, monte_carlo_verify, transfer_case, transfer_fraction,
    verify_grid, GridInput, GridSpec, LinearPair, TransferCase, VerificationReport,
};

/// Share of F's attack interval that lands within G's tolerance. With
/// `u = a·x′ + b_F − y_t` uniform on `[−√γ, √γ]`, the attack transfers when
/// `|u + D| ≤ √γ′`.
fn overlap_fraction(d: f64, gamma: f64, gamma_prime: f64) -> f64 {
    let (r, rp) = (gamma.sqrt(), gamma_prime.sqrt());
    let lo = (-rp - d).max(-r);
    let hi = (rp - d).min(r);
    ((hi - lo) / (2.0 * r)).max(0.0)
}

proptest! {
    #[test]
    fn bound_grows_with_gap_where_the_derivative_is_positive(
        gamma in 0.01f64..10.0,
        p in 0.0f64..=1.0,
        a in 0.0f64..20.0,
        b in 0.0f64..20.0,
    ) {
        let floor = (2.0 * gamma.sqrt() * (2.0 * p - 1.0)).max(0.0);
        let (d1, d2) = (floor + a.min(b), floor + a.max(b));
        prop_assume!(d2 - d1 > 1e-6);
        prop_assert!(lower_bound_t(d1, gamma, p) < lower_bound_t(d2, gamma, p));
    }

    #[test]
    fn simulation_inverts_the_bound(
        seed in any::<u64>(),
        gamma in 0.1f64..5.0,
        ratio in 4.0f64..40.0,
        frac in 0.01f64..1.0,
        p in 0.05f64..0.95,
    ) {
        let gp = ratio * gamma;
        let d = frac * (gp.sqrt() - gamma.sqrt());
        let pair = LinearPair::with_gap(d, gamma, gp).unwrap();
        let n = 20_000;
        let emp = monte_carlo_verify(&pair, lower_bound_t(d, gamma, p), n, seed).unwrap();
        let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1.0 / n as f64;
        prop_assert!((emp - p).abs() <= tol, "empirical {emp} vs p {p}");
    }

    #[test]
    fn non_transferring_pairs_match_the_overlap_oracle(
        seed in any::<u64>(),
        gamma in 0.1f64..5.0,
        ratio in 4.0f64..40.0,
        excess in 0.0f64..3.0,
    ) {
        let gp = ratio * gamma;
        let d = gp.sqrt() - gamma.sqrt() + 1e-9 + excess * gamma.sqrt();
        let pair = LinearPair::with_gap(d, gamma, gp).unwrap();
        prop_assert_eq!(transfer_case(&pair), TransferCase::Case1NoTransfer);
        let measured = transfer_fraction(&pair, 20_000, seed);
        let expected = overlap_fraction(d, gamma, gp);
        prop_assert!(expected < 1.0);
        prop_assert!((measured - expected).abs() <= 0.02);
        if d > gp.sqrt() + gamma.sqrt() {
            prop_assert_eq!(measured, 0.0);
        }
    }
}

#[test]
fn closed_form_matches_simulation_on_twenty_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..20 {
        let gamma: f64 = rng.random_range(0.2..4.0);
        let gp: f64 = rng.random_range(9.0..30.0) * gamma;
        let d = rng.random_range(0.05..1.0) * (gp.sqrt() - gamma.sqrt());
        let r = gamma.sqrt();
        // Gap ranges over [D(D − 2√γ), D(D + 2√γ)].
        let t = d * d + rng.random_range(-2.0..2.0) * r * d;
        let pair = LinearPair::with_gap(d, gamma, gp).unwrap();
        let emp = monte_carlo_verify(&pair, t, 200_000, i).unwrap();
        let expected = analytic_probability(d, gamma, t);
        assert!(
            (emp - expected).abs() <= 0.01,
            "D {d} γ {gamma} T {t}: {emp} vs {expected}"
        );
    }
}

#[test]
fn grid_report_round_trips_through_json() {
    let spec = GridSpec {
        points: vec![
            GridInput {
                d: 4.0,
                gamma: 1.0,
                gamma_prime: 25.0,
                p: 0.95,
            },
            GridInput {
                d: 6.0,
                gamma: 1.0,
                gamma_prime: 25.0,
                p: 0.5,
            },
        ],
        n_samples: 10_000,
        seed: 3,
        tolerance: 0.02,
    };
    let report = verify_grid(&spec).unwrap();
    assert!(report.all_pass);
    assert_eq!(report.rows[1].case, TransferCase::Case1NoTransfer);
    let text = serde_json::to_string(&report).unwrap();
    let back: VerificationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}
