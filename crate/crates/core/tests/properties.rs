use jdlan::density::{dj, exact_merton_density, p_tilde};
use jdlan::inference::fisher_gamma_closed_form;
use jdlan::model::{builtin_merton, builtin_ou_jump, ModelSpec, ParamVector, RateSchedule};
use jdlan::quad::QuadSpec;
use jdlan::quasi_lik::{classify_increments, quasi_loglik, Contrast, ThresholdRule};
use jdlan::sim::Path;
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn path_from_increments(step: f64, inc: &[f64]) -> Path {
    let mut x = vec![0.0];
    for d in inc {
        x.push(x.last().unwrap() + d);
    }
    Path::new(1, step, x).unwrap()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn boundary_increment_is_continuous(step in 1e-4f64..0.1, scale in 0.5f64..4.0, sign in prop::bool::ANY) {
        let rule = ThresholdRule::new(0.4, scale).unwrap();
        let u = rule.threshold(step);
        let s = if sign { 1.0 } else { -1.0 };
        let at = Path::new(1, step, vec![0.0, s * u]).unwrap();
        let above = Path::new(1, step, vec![0.0, s * u * (1.0 + 1e-12)]).unwrap();
        prop_assert!(!classify_increments(&at, &rule).jump_detected[0]);
        prop_assert!(classify_increments(&above, &rule).jump_detected[0]);
    }

    #[test]
    fn one_flag_per_increment(inc in prop::collection::vec(-1.0f64..1.0, 1..200), step in 1e-3f64..0.1) {
        let p = path_from_increments(step, &inc);
        let c = classify_increments(&p, &ThresholdRule::default());
        prop_assert_eq!(c.jump_detected.len(), inc.len());
        prop_assert_eq!(c.jumps + c.continuous, inc.len());
    }

    #[test]
    fn branches_sum_to_total(inc in prop::collection::vec(-1.5f64..1.5, 2..200), sigma in 0.3f64..3.0, rev in 0.2f64..3.0) {
        let model = builtin_ou_jump(rev, sigma, 1.0, 0.0, 0.5).unwrap();
        let p = path_from_increments(0.01, &inc);
        let v = quasi_loglik(&model, &model.nominal_alpha(), &p, &ThresholdRule::default()).unwrap();
        let sum = v.continuous + v.jump + v.compensator;
        prop_assert!((sum - v.total).abs() <= 1e-12 * v.total.abs().max(1.0));
        prop_assert_eq!(v.n_continuous + v.n_jump, inc.len());
    }

    #[test]
    fn closed_form_gamma_is_symmetric_positive_definite(rev in 0.1f64..5.0, sigma in 0.2f64..3.0, lambda in 0.1f64..5.0, mu in -1.0f64..1.0, s in 0.1f64..2.0) {
        let model = builtin_ou_jump(rev, sigma, lambda, mu, s).unwrap();
        let g = fisher_gamma_closed_form(&model, &model.nominal_alpha()).unwrap();
        prop_assert!(g.is_symmetric());
        prop_assert!(g.check_positive_definite().is_ok());
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn analytic_score_matches_differences(sigma in 0.5f64..2.0, rev in 0.3f64..2.0, mu in -0.5f64..0.5, seed in 0u64..1000) {
        let truth = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let mut cfg = jdlan::sim::SimConfig::new(400, 0.01, seed);
        cfg.burn_in = true;
        let p = jdlan::sim::simulate_path(&truth, &truth.nominal_alpha(), &cfg).unwrap();
        let contrast = Contrast::new(&truth, &p, &ThresholdRule::default()).unwrap();
        let a = [sigma, rev, mu];
        let s = contrast.score(&a).unwrap();
        let fd = contrast.score_fd(&a).unwrap();
        let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in s.iter().zip(&fd) {
            prop_assert!((x - y).abs() <= 1e-5 * scale, "{:?} vs {:?}", s, fd);
        }
    }

    #[test]
    fn p_tilde_is_dominated_by_the_merton_density(x_prev in -2.0f64..2.0, dx in -3.0f64..3.0, n in 100usize..4000, sigma in 0.5f64..1.5) {
        let model = builtin_merton(0.0, sigma, 1.0, 0.0, 0.5).unwrap();
        let ModelSpec::Merton(params) = model else { unreachable!() };
        let h = RateSchedule::power_law(n, 0.4, 0.75).unwrap().step;
        let quad = QuadSpec::default();
        let pt = p_tilde(&model, &model.nominal_alpha(), x_prev, x_prev + dx, h, &ThresholdRule::default(), &quad).unwrap();
        let exact = exact_merton_density(&params, x_prev, x_prev + dx, h, 1e-15);
        prop_assert!(pt >= 0.0);
        prop_assert!(pt <= exact + 10.0 * quad.abs_tol, "{} > {}", pt, exact);
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn normalizer_is_a_probability(x_prev in -2.0f64..2.0, sigma in 0.5f64..2.0, h in 1e-3f64..0.05) {
        let model = builtin_ou_jump(1.0, sigma, 1.0, 0.0, 0.5).unwrap();
        let alpha = ParamVector::new(vec![sigma], vec![1.0, 0.0]).unwrap();
        let d = dj(&model, &alpha, x_prev, h, &ThresholdRule::default(), &QuadSpec::default()).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0 + 1e-9, "d_j = {}", d);
    }
}
