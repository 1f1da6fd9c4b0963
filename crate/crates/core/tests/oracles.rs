//! Likelihood and effect formulas checked against independent brute-force
//! computations.

mod common;

use common::{mc_effects, random_theta, riemann_h, uniform, zipm_enumerate, zipm_records};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zimix::effects::effect_values;
use zimix::em::e_step;
use zimix::likelihood::{h_integral, observed_loglik};
use zimix::{Dataset, MediatorFamily, ModelConfig, ObservedRecord};

#[test]
fn zipm_loglik_and_zero_posteriors_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = ModelConfig::default();
    for _ in 0..5 {
        let theta = random_theta(&mut rng, MediatorFamily::Zipm, 2, 1);
        let records = zipm_records(&mut rng, &theta, 20);
        let data = Dataset::new(records.clone(), vec!["z".into()]).unwrap();

        let mut brute = 0.0;
        let mut zero_post = Vec::new();
        for rec in &records {
            let (lik, post) = zipm_enumerate(&theta, rec, 20);
            brute += lik.ln();
            if rec.m_star == 0.0 {
                zero_post.push(post);
            }
        }
        let ll = observed_loglik(&data, &theta, &config).unwrap();
        assert!((ll - brute).abs() < 1e-10, "loglik {ll} vs enumeration {brute}");

        let tau = e_step(&data, &theta, &config).unwrap();
        assert_eq!(tau.tau2.nrows(), zero_post.len());
        for (i, post) in zero_post.iter().enumerate() {
            for (c, p) in post.iter().enumerate() {
                let t = tau.tau2[(i, c)];
                assert!((t - p).abs() < 1e-10, "tau2[{i},{c}] = {t} vs {p}");
            }
        }
    }
}

#[test]
fn zilonm_h_integral_matches_riemann_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let config = ModelConfig::default();
    for _ in 0..20 {
        let theta = random_theta(&mut rng, MediatorFamily::Zilonm, 2, 0);
        let rec = ObservedRecord::new(uniform(&mut rng, -1.0, 3.0), 0.0, uniform(&mut rng, -1.5, 1.5));
        for k in 1..=2 {
            let h = h_integral(&rec, k, &theta, &config).unwrap();
            let oracle = riemann_h(&theta, &rec, k - 1, config.bound_l, 1_000_000);
            assert!(oracle > 0.0);
            let rel = (h - oracle).abs() / oracle;
            assert!(rel < 1e-6, "h={h} riemann={oracle} rel={rel}");
        }
    }
}

#[test]
fn closed_form_effects_match_counterfactual_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for family in MediatorFamily::ALL {
        for _ in 0..3 {
            let theta = random_theta(&mut rng, family, 2, 0);
            let exact = effect_values(&theta, family, 0.0, 1.0, &[]);
            let mc = mc_effects(&mut rng, family, &theta, 0.0, 1.0, 400_000);
            for (value, est) in [exact.nie1, exact.nie2, exact.nde].iter().zip(mc) {
                assert!(
                    (value - est.mean).abs() < 4.0 * est.se,
                    "{family:?}: closed form {value} vs MC {} (se {})",
                    est.mean,
                    est.se
                );
            }
            assert_eq!(exact.nie, exact.nie1 + exact.nie2);
            assert_eq!(exact.te, exact.nie + exact.nde);
        }
    }
}
