use jdlan::density::{dj, p_tilde};
use jdlan::model::builtin_merton;
use jdlan::quad::{integrate_pieces, QuadSpec};
use jdlan::quasi_lik::ThresholdRule;

#[test]
fn p_tilde_integrates_to_the_normalizer() {
    let model = builtin_merton(0.2, 1.0, 1.0, 0.0, 0.5).unwrap();
    let alpha = model.nominal_alpha();
    let rule = ThresholdRule::default();
    let quad = QuadSpec::default();
    for (x_prev, h) in [(0.0, 0.01), (1.0, 0.002)] {
        let u = rule.threshold(h);
        let d = dj(&model, &alpha, x_prev, h, &rule, &quad).unwrap();
        let total =
            integrate_pieces(|x| p_tilde(&model, &alpha, x_prev, x, h, &rule, &quad).unwrap(), x_prev - 6.0, x_prev + 6.0, &[x_prev - u, x_prev + u], &quad)
                .unwrap();
        assert!((total - d).abs() <= 2.0 * quad.abs_tol.max(quad.rel_tol * d), "{total} vs {d}");
        assert!(d > 0.0 && d <= 1.0 + 1e-9);
    }
}
