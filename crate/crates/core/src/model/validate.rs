//! Advisory checks of the regularity assumptions on a finite probe grid.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{JumpDiffusion, JumpSupport, ParamSpace, ParamVector};
use crate::error::Result;
use crate::quad::{integrate_pieces, QuadSpec};

/// Finite grids on which the assumptions are probed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePlan {
    /// State points, each of length `m`.
    pub states: Vec<Vec<f64>>,
    pub alphas: Vec<ParamVector>,
    /// Jump sizes for the zero-set and growth checks (`m = 1`).
    pub jump_grid: Vec<f64>,
    pub quad: QuadSpec,
    /// Declared ellipticity constant: eigenvalues of `b` must lie in `[1/C₂, C₂]`.
    pub c2: f64,
    /// Declared growth constant: `|∂_θ log f_θ(z)| ≤ C₃ (1 + |z|)^{C₃}`.
    pub c3: f64,
    pub normalization_tol: f64,
    pub derivative_tol: f64,
}

impl ProbePlan {
    /// A plan around `alpha`: states on `[-3, 3]`, ten parameter points
    /// obtained by scaling each coordinate by factors in `[0.75, 1.25]`.
    pub fn around(alpha: &ParamVector, space: &ParamSpace, m: usize) -> ProbePlan {
        let states = (0..13).map(|i| vec![-3.0 + 0.5 * i as f64; m]).collect();
        let base = alpha.to_vec();
        let mut alphas = Vec::with_capacity(10);
        for k in 0..10 {
            let f = 0.75 + 0.5 * k as f64 / 9.0;
            let mut v: Vec<f64> = base.iter().map(|&a| if a == 0.0 { f - 1.0 } else { a * f }).collect();
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = vi.clamp(space.lower[i] + 1e-9, space.upper[i] - 1e-9);
            }
            alphas.push(ParamVector::from_slice(alpha.d1(), &v));
        }
        let jump_grid = (0..=80).map(|i| -10.0 + 0.25 * i as f64).filter(|z: &f64| *z != 0.0).collect();
        ProbePlan { states, alphas, jump_grid, quad: QuadSpec::default(), c2: 100.0, c3: 100.0, normalization_tol: 1e-8, derivative_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst value observed over the probe grid.
    pub observed: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs every check on the probe grid. Failures are reported, never raised.
pub fn validate_model(model: &dyn JumpDiffusion, space: &ParamSpace, probe: &ProbePlan) -> ValidationReport {
    let mut checks = vec![check_ellipticity(model, probe), check_parameters(space, probe)];
    if model.state_dim() == 1 {
        checks.push(check_normalization(model, probe));
        checks.push(check_zero_set(model, probe));
        checks.push(check_score_growth(model, probe));
    }
    if model.has_analytic_derivatives() {
        checks.push(check_derivatives(model, probe));
    }
    ValidationReport { checks }
}

fn check_ellipticity(model: &dyn JumpDiffusion, probe: &ProbePlan) -> CheckOutcome {
    let m = model.state_dim();
    let mut b = vec![0.0; m * m];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut asym = 0.0f64;
    for a in &probe.alphas {
        for x in &probe.states {
            model.diffusion(x, &a.sigma, &mut b);
            let mat = DMatrix::from_row_slice(m, m, &b);
            asym = asym.max((&mat - mat.transpose()).amax());
            let eig = SymmetricEigen::new(mat).eigenvalues;
            lo = lo.min(eig.min());
            hi = hi.max(eig.max());
        }
    }
    let passed = asym <= 1e-12 && lo >= 1.0 / probe.c2 && hi <= probe.c2;
    CheckOutcome {
        name: "ellipticity".into(),
        passed,
        observed: if lo > 0.0 { (hi / lo).max(hi).max(1.0 / lo) } else { f64::INFINITY },
        detail: format!("eigenvalues in [{lo:.4e}, {hi:.4e}], asymmetry {asym:.1e}, C2 = {}", probe.c2),
    }
}

fn check_parameters(space: &ParamSpace, probe: &ProbePlan) -> CheckOutcome {
    let inside = probe.alphas.iter().filter(|a| space.contains(&a.to_vec())).count();
    CheckOutcome {
        name: "parameter_box".into(),
        passed: inside == probe.alphas.len(),
        observed: inside as f64,
        detail: format!("{inside}/{} probed parameters inside the open box", probe.alphas.len()),
    }
}

fn normalization_of(model: &dyn JumpDiffusion, theta: &[f64], quad: &QuadSpec) -> Result<f64> {
    let (lo, hi) = match model.jump_range(theta, 1e-15) {
        Ok(r) => r,
        Err(_) => {
            let (s_lo, s_hi) = model.jump_support().bounds();
            (s_lo.max(-1e3), s_hi.min(1e3))
        }
    };
    let f = |z: f64| {
        let v = model.jump_log_density(&[z], theta).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate_pieces(f, lo, hi, &[0.0], quad)
}

fn check_normalization(model: &dyn JumpDiffusion, probe: &ProbePlan) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for a in &probe.alphas {
        match normalization_of(model, &a.theta, &probe.quad) {
            Ok(v) => worst = worst.max((v - 1.0).abs()),
            Err(_) => failures += 1,
        }
    }
    CheckOutcome {
        name: "jump_normalization".into(),
        passed: failures == 0 && worst <= probe.normalization_tol,
        observed: worst,
        detail: format!("max |∫F - 1| = {worst:.2e}, {failures} quadrature failures"),
    }
}

fn check_zero_set(model: &dyn JumpDiffusion, probe: &ProbePlan) -> CheckOutcome {
    let pattern = |theta: &[f64]| -> Vec<bool> { probe.jump_grid.iter().map(|&z| model.jump_log_density(&[z], theta) > f64::NEG_INFINITY).collect() };
    let reference = probe.alphas.first().map(|a| pattern(&a.theta)).unwrap_or_default();
    let mismatched = probe.alphas.iter().filter(|a| pattern(&a.theta) != reference).count();
    CheckOutcome {
        name: "zero_set_invariance".into(),
        passed: mismatched == 0,
        observed: mismatched as f64,
        detail: format!("{mismatched} probed θ with a different zero set"),
    }
}

fn check_score_growth(model: &dyn JumpDiffusion, probe: &ProbePlan) -> CheckOutcome {
    let d2 = model.theta_dim();
    let mut score = vec![0.0; d2];
    let mut worst_ratio = 0.0f64;
    for a in &probe.alphas {
        for &z in &probe.jump_grid {
            if model.jump_log_density(&[z], &a.theta) == f64::NEG_INFINITY {
                continue;
            }
            model.jump_score(&[z], &a.theta, &mut score);
            let mag = score.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
            worst_ratio = worst_ratio.max(mag / (1.0 + z.abs()).powf(probe.c3));
        }
    }
    CheckOutcome {
        name: "score_growth".into(),
        passed: worst_ratio.is_finite() && worst_ratio <= probe.c3,
        observed: worst_ratio,
        detail: format!("max |∂θ log f| / (1+|z|)^C3 = {worst_ratio:.3e}, C3 = {}", probe.c3),
    }
}

/// Hides a model's analytic derivative hooks so the trait's finite
/// differences are used.
struct FiniteDifferences<'a>(&'a dyn JumpDiffusion);

impl JumpDiffusion for FiniteDifferences<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn sigma_dim(&self) -> usize {
        self.0.sigma_dim()
    }
    fn theta_dim(&self) -> usize {
        self.0.theta_dim()
    }
    fn param_space(&self) -> &ParamSpace {
        self.0.param_space()
    }
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.0.drift(x, theta, out)
    }
    fn diffusion(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
        self.0.diffusion(x, sigma, out)
    }
    fn intensity(&self, theta: &[f64]) -> f64 {
        self.0.intensity(theta)
    }
    fn jump_log_density(&self, z: &[f64], theta: &[f64]) -> f64 {
        self.0.jump_log_density(z, theta)
    }
    fn sample_jump(&self, theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) {
        self.0.sample_jump(theta, rng, out)
    }
    fn jump_support(&self) -> JumpSupport {
        self.0.jump_support()
    }
    fn gamma_exponent(&self) -> f64 {
        self.0.gamma_exponent()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs() / y.abs().max(1.0)))
}

fn check_derivatives(model: &dyn JumpDiffusion, probe: &ProbePlan) -> CheckOutcome {
    let fd = FiniteDifferences(model);
    let (m, d1, d2) = (model.state_dim(), model.sigma_dim(), model.theta_dim());
    let mut worst = 0.0f64;
    let (mut ja, mut jf) = (vec![0.0; m * d2], vec![0.0; m * d2]);
    let (mut sa, mut sf) = (vec![0.0; d1 * m * m], vec![0.0; d1 * m * m]);
    let (mut ga, mut gf) = (vec![0.0; d2], vec![0.0; d2]);
    for a in &probe.alphas {
        for x in &probe.states {
            model.drift_theta_jacobian(x, &a.theta, &mut ja);
            fd.drift_theta_jacobian(x, &a.theta, &mut jf);
            worst = worst.max(rel_err(&ja, &jf));
            model.diffusion_sigma_jacobian(x, &a.sigma, &mut sa);
            fd.diffusion_sigma_jacobian(x, &a.sigma, &mut sf);
            worst = worst.max(rel_err(&sa, &sf));
        }
        model.intensity_gradient(&a.theta, &mut ga);
        fd.intensity_gradient(&a.theta, &mut gf);
        worst = worst.max(rel_err(&ga, &gf));
        if m == 1 {
            for &z in &probe.jump_grid {
                if model.jump_log_density(&[z], &a.theta) == f64::NEG_INFINITY {
                    continue;
                }
                model.jump_score(&[z], &a.theta, &mut ga);
                fd.jump_score(&[z], &a.theta, &mut gf);
                worst = worst.max(rel_err(&ga, &gf));
            }
        }
    }
    CheckOutcome {
        name: "analytic_derivatives".into(),
        passed: worst < probe.derivative_tol,
        observed: worst,
        detail: format!("max relative error vs central differences {worst:.2e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_gamma_jump, builtin_merton, builtin_ou_jump, ModelSpec};

    fn plan(spec: &ModelSpec) -> ProbePlan {
        ProbePlan::around(&spec.nominal_alpha(), spec.param_space(), 1)
    }

    #[test]
    fn builtins_pass_every_check() {
        for spec in [
            builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5).unwrap(),
            builtin_ou_jump(1.0, 1.0, 1.0, 0.3, 0.5).unwrap(),
            builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 2.0).unwrap(),
            builtin_gamma_jump(2.0, 0.5, 3.0, 0.7, 1.0).unwrap(),
        ] {
            let report = validate_model(&spec, spec.param_space(), &plan(&spec));
            assert!(report.all_passed(), "{}: {:#?}", spec.kind(), report);
            assert_eq!(report.checks.len(), 6);
        }
    }

    struct Multiplicative(ModelSpec);

    impl JumpDiffusion for Multiplicative {
        fn state_dim(&self) -> usize {
            1
        }
        fn sigma_dim(&self) -> usize {
            1
        }
        fn theta_dim(&self) -> usize {
            2
        }
        fn param_space(&self) -> &ParamSpace {
            self.0.param_space()
        }
        fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
            self.0.drift(x, theta, out)
        }
        fn diffusion(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
            out[0] = sigma[0] * x[0];
        }
        fn intensity(&self, theta: &[f64]) -> f64 {
            self.0.intensity(theta)
        }
        fn jump_log_density(&self, z: &[f64], theta: &[f64]) -> f64 {
            self.0.jump_log_density(z, theta)
        }
        fn sample_jump(&self, theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) {
            self.0.sample_jump(theta, rng, out)
        }
        fn gamma_exponent(&self) -> f64 {
            0.0
        }
    }

    #[test]
    fn unbounded_diffusion_fails_ellipticity() {
        let base = builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let model = Multiplicative(base);
        let report = validate_model(&model, base.param_space(), &plan(&base));
        assert!(!report.check("ellipticity").unwrap().passed);
        assert!(report.check("jump_normalization").unwrap().passed);
        assert!(report.check("analytic_derivatives").is_none());
    }

    #[test]
    fn gamma_zero_set_does_not_move_with_scale() {
        let spec = builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 3.0).unwrap();
        let mut probe = plan(&spec);
        for (k, a) in probe.alphas.iter_mut().enumerate() {
            a.theta[1] = 0.2 + 0.4 * k as f64;
        }
        let report = validate_model(&spec, spec.param_space(), &probe);
        let zs = report.check("zero_set_invariance").unwrap();
        assert!(zs.passed);
        assert_eq!(zs.observed, 0.0);
    }
}
