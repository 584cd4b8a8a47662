//! Monte-Carlo oracles for the hard-concrete distribution: the closed-form
//! open-gate probability is checked against empirical sampling, and the
//! pathwise gradient against finite differences of the same sample average.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secateur_core::gates::{
    deterministic_gate, prob_nonzero, sample_gate, HardConcreteConfig,
};
use secateur_core::rngutil;

const MC_SAMPLES: usize = 1_000_000;

fn empirical_p_open(log_alpha: f64, cfg: &HardConcreteConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut open = 0usize;
    for _ in 0..MC_SAMPLES {
        let u = rngutil::open_unit(&mut rng);
        if sample_gate(log_alpha, u, cfg).unwrap() > 0.0 {
            open += 1;
        }
    }
    open as f64 / MC_SAMPLES as f64
}

#[test]
fn closed_form_matches_monte_carlo_within_4_sigma() {
    let cfg = HardConcreteConfig::default();
    for (i, &la) in [-3.0, -1.0, 0.0, 1.0, 3.0].iter().enumerate() {
        let p = prob_nonzero(la, &cfg);
        let emp = empirical_p_open(la, &cfg, 1000 + i as u64);
        let sigma = (p * (1.0 - p) / MC_SAMPLES as f64).sqrt();
        assert!(
            (p - emp).abs() < 4.0 * sigma,
            "log_alpha={la}: closed form {p} vs empirical {emp}, 4sigma={}",
            4.0 * sigma
        );
    }
}

#[test]
fn open_probability_at_zero_log_alpha_is_near_0832() {
    let cfg = HardConcreteConfig::default();
    let emp = empirical_p_open(0.0, &cfg, 77);
    assert!((emp - 0.832).abs() < 2e-3, "empirical {emp}");
    assert!((prob_nonzero(0.0, &cfg) - emp).abs() < 1e-3);
}

#[test]
fn pathwise_gradient_matches_fd_of_monte_carlo_average() {
    // common random numbers across the three evaluation points
    let cfg = HardConcreteConfig::default();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let us: Vec<f64> = (0..n).map(|_| rngutil::open_unit(&mut rng)).collect();

    for la in [-1.0, 0.0, 0.8] {
        let eps = 1e-5;
        let avg = |a: f64| -> f64 {
            us.iter().map(|&u| sample_gate(a, u, &cfg).unwrap()).sum::<f64>() / n as f64
        };
        let fd = (avg(la + eps) - avg(la - eps)) / (2.0 * eps);

        // pathwise derivative: d z/d log_alpha = span * s(1-s)/beta inside the clamp
        let span = cfg.stretch_hi - cfg.stretch_lo;
        let path: f64 = us
            .iter()
            .map(|&u| {
                let s = 1.0 / (1.0 + (-((u.ln() - (1.0 - u).ln() + la) / cfg.beta)).exp());
                let stretched = s * span + cfg.stretch_lo;
                if stretched > 0.0 && stretched < 1.0 {
                    span * s * (1.0 - s) / cfg.beta
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / n as f64;

        let rel = (path - fd).abs() / fd.abs().max(1e-8);
        assert!(rel < 1e-2, "log_alpha={la}: pathwise {path} vs fd {fd}, rel {rel}");
    }
}

proptest! {
    #[test]
    fn sampled_gates_stay_in_unit_interval(la in -20.0..20.0f64, u in 1e-9..1.0f64) {
        prop_assume!(u < 1.0);
        let cfg = HardConcreteConfig::default();
        let z = sample_gate(la, u, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&z));
        let d = deterministic_gate(la, &cfg);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn sample_monotone_in_log_alpha_for_fixed_u(a in -10.0..10.0f64, b in -10.0..10.0f64, u in 1e-6..1.0f64) {
        prop_assume!(u < 1.0);
        let cfg = HardConcreteConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sample_gate(lo, u, &cfg).unwrap() <= sample_gate(hi, u, &cfg).unwrap());
        prop_assert!(prob_nonzero(lo, &cfg) <= prob_nonzero(hi, &cfg));
    }
}
