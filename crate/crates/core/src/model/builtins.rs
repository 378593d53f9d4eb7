//! Scalar reference models.
//!
//! | kind         | σ      | θ                          | fixed                 |
//! |--------------|--------|----------------------------|-----------------------|
//! | `merton`     | σ      | (drift level, jump mean)   | λ, jump sd            |
//! | `ou_jump`    | σ      | (mean reversion, jump mean)| λ, jump sd            |
//! | `gamma_jump` | σ      | (mean reversion, scale)    | λ, gamma shape        |

use std::sync::OnceLock;

use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use super::{JumpDiffusion, JumpSupport, ParamSpace, ParamVector};
use crate::error::{Error, Result};
use crate::stats::{normal_log_pdf, normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonParams {
    pub drift_level: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuJumpParams {
    pub mean_rev: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaJumpParams {
    pub mean_rev: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub gamma_scale: f64,
    pub gamma_shape_fixed: f64,
}

/// A built-in model together with the parameter values it was built from.
///
/// Loadable from `{"kind": "merton" | "ou_jump" | "gamma_jump", "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ModelSpec {
    Merton(MertonParams),
    OuJump(OuJumpParams),
    GammaJump(GammaJumpParams),
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be non-negative, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, "must be finite"))
    }
}

/// Constant-coefficient model with Normal jumps: `a = θ₁`, `b = σ`.
pub fn builtin_merton(drift_level: f64, sigma: f64, lambda: f64, jump_mean: f64, jump_sd: f64) -> Result<ModelSpec> {
    let spec = ModelSpec::Merton(MertonParams { drift_level, sigma, lambda, jump_mean, jump_sd });
    spec.validate()?;
    Ok(spec)
}

/// Ergodic OU model with Normal jumps: `a = -θ₁ x`, `b = σ`, jumps `N(θ₂, s²)`.
pub fn builtin_ou_jump(mean_rev: f64, sigma: f64, lambda: f64, jump_mean: f64, jump_sd: f64) -> Result<ModelSpec> {
    let spec = ModelSpec::OuJump(OuJumpParams { mean_rev, sigma, lambda, jump_mean, jump_sd });
    spec.validate()?;
    Ok(spec)
}

/// Ergodic OU model with one-sided Gamma jumps of fixed shape and scale `θ₂`.
pub fn builtin_gamma_jump(mean_rev: f64, sigma: f64, lambda: f64, gamma_scale: f64, gamma_shape_fixed: f64) -> Result<ModelSpec> {
    let spec = ModelSpec::GammaJump(GammaJumpParams { mean_rev, sigma, lambda, gamma_scale, gamma_shape_fixed });
    spec.validate()?;
    Ok(spec)
}

fn merton_space() -> &'static ParamSpace {
    static SPACE: OnceLock<ParamSpace> = OnceLock::new();
    SPACE.get_or_init(|| ParamSpace { lower: vec![1e-6, -1e3, -1e3], upper: vec![1e3, 1e3, 1e3], positive: vec![true, false, false] })
}

fn ou_space() -> &'static ParamSpace {
    static SPACE: OnceLock<ParamSpace> = OnceLock::new();
    SPACE.get_or_init(|| ParamSpace { lower: vec![1e-6, 1e-6, -1e3], upper: vec![1e3, 1e3, 1e3], positive: vec![true, true, false] })
}

fn gamma_space() -> &'static ParamSpace {
    static SPACE: OnceLock<ParamSpace> = OnceLock::new();
    SPACE.get_or_init(|| ParamSpace { lower: vec![1e-6, 1e-6, 1e-6], upper: vec![1e3, 1e3, 1e3], positive: vec![true, true, true] })
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Merton(p) => {
                finite("drift_level", p.drift_level)?;
                positive("sigma", p.sigma)?;
                non_negative("lambda", p.lambda)?;
                finite("jump_mean", p.jump_mean)?;
                positive("jump_sd", p.jump_sd)
            }
            ModelSpec::OuJump(p) => {
                if !(p.mean_rev > 0.0) {
                    return Err(Error::invalid("mean_rev", "must be positive for an ergodic model"));
                }
                positive("sigma", p.sigma)?;
                non_negative("lambda", p.lambda)?;
                finite("jump_mean", p.jump_mean)?;
                positive("jump_sd", p.jump_sd)
            }
            ModelSpec::GammaJump(p) => {
                if !(p.mean_rev > 0.0) {
                    return Err(Error::invalid("mean_rev", "must be positive for an ergodic model"));
                }
                positive("sigma", p.sigma)?;
                non_negative("lambda", p.lambda)?;
                positive("gamma_scale", p.gamma_scale)?;
                if !(p.gamma_shape_fixed >= 1.0) {
                    return Err(Error::invalid("gamma_shape_fixed", "shape must be at least 1"));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Merton(_) => "merton",
            ModelSpec::OuJump(_) => "ou_jump",
            ModelSpec::GammaJump(_) => "gamma_jump",
        }
    }

    /// The parameter vector the model was built with.
    pub fn nominal_alpha(&self) -> ParamVector {
        match *self {
            ModelSpec::Merton(p) => ParamVector { sigma: vec![p.sigma], theta: vec![p.drift_level, p.jump_mean] },
            ModelSpec::OuJump(p) => ParamVector { sigma: vec![p.sigma], theta: vec![p.mean_rev, p.jump_mean] },
            ModelSpec::GammaJump(p) => ParamVector { sigma: vec![p.sigma], theta: vec![p.mean_rev, p.gamma_scale] },
        }
    }

    /// Same structural constants, parameters replaced by `alpha`.
    pub fn with_alpha(&self, alpha: &ParamVector) -> ModelSpec {
        let (s, t) = (alpha.sigma[0], &alpha.theta);
        match *self {
            ModelSpec::Merton(p) => ModelSpec::Merton(MertonParams { sigma: s, drift_level: t[0], jump_mean: t[1], ..p }),
            ModelSpec::OuJump(p) => ModelSpec::OuJump(OuJumpParams { sigma: s, mean_rev: t[0], jump_mean: t[1], ..p }),
            ModelSpec::GammaJump(p) => ModelSpec::GammaJump(GammaJumpParams { sigma: s, mean_rev: t[0], gamma_scale: t[1], ..p }),
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            ModelSpec::Merton(p) => p.lambda,
            ModelSpec::OuJump(p) => p.lambda,
            ModelSpec::GammaJump(p) => p.lambda,
        }
    }

    pub fn has_exact_density(&self) -> bool {
        matches!(self, ModelSpec::Merton(_))
    }

    /// Mean-reversion coordinate `a(x, θ) = -θ₁ x`.
    fn mean_reverting(&self) -> bool {
        !matches!(self, ModelSpec::Merton(_))
    }

    /// `(E Z, E Z²)` of the jump law at `theta`.
    pub fn jump_moments(&self, theta: &[f64]) -> (f64, f64) {
        match *self {
            ModelSpec::Merton(p) => (theta[1], theta[1] * theta[1] + p.jump_sd * p.jump_sd),
            ModelSpec::OuJump(p) => (theta[1], theta[1] * theta[1] + p.jump_sd * p.jump_sd),
            ModelSpec::GammaJump(p) => {
                let k = p.gamma_shape_fixed;
                (k * theta[1], k * (k + 1.0) * theta[1] * theta[1])
            }
        }
    }

    /// Fisher information of the jump law with respect to θ, per unit time:
    /// `∫ (∂_θ f)(∂_θ f)ᵀ / f`. Row-major `d2 × d2`.
    pub fn jump_fisher_closed_form(&self, theta: &[f64]) -> [f64; 4] {
        match *self {
            ModelSpec::Merton(MertonParams { lambda, jump_sd, .. }) | ModelSpec::OuJump(OuJumpParams { lambda, jump_sd, .. }) => {
                [0.0, 0.0, 0.0, lambda / (jump_sd * jump_sd)]
            }
            ModelSpec::GammaJump(p) => [0.0, 0.0, 0.0, p.lambda * p.gamma_shape_fixed / (theta[1] * theta[1])],
        }
    }
}

impl JumpDiffusion for ModelSpec {
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
        match self {
            ModelSpec::Merton(_) => merton_space(),
            ModelSpec::OuJump(_) => ou_space(),
            ModelSpec::GammaJump(_) => gamma_space(),
        }
    }

    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = if self.mean_reverting() { -theta[0] * x[0] } else { theta[0] };
    }

    fn diffusion(&self, _x: &[f64], sigma: &[f64], out: &mut [f64]) {
        out[0] = sigma[0];
    }

    fn intensity(&self, _theta: &[f64]) -> f64 {
        self.lambda()
    }

    fn jump_log_density(&self, z: &[f64], theta: &[f64]) -> f64 {
        let z = z[0];
        match *self {
            ModelSpec::Merton(p) => normal_log_pdf(z, theta[1], p.jump_sd * p.jump_sd),
            ModelSpec::OuJump(p) => normal_log_pdf(z, theta[1], p.jump_sd * p.jump_sd),
            ModelSpec::GammaJump(p) => {
                if z <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let k = p.gamma_shape_fixed;
                let beta = theta[1];
                (k - 1.0) * z.ln() - z / beta - k * beta.ln() - ln_gamma(k)
            }
        }
    }

    fn sample_jump(&self, theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = match *self {
            ModelSpec::Merton(MertonParams { jump_sd, .. }) | ModelSpec::OuJump(OuJumpParams { jump_sd, .. }) => {
                let z: f64 = StandardNormal.sample(rng);
                theta[1] + jump_sd * z
            }
            ModelSpec::GammaJump(p) => Gamma::new(p.gamma_shape_fixed, theta[1]).expect("validated gamma parameters").sample(rng),
        };
    }

    fn jump_support(&self) -> JumpSupport {
        match self {
            ModelSpec::GammaJump(_) => JumpSupport::PositiveHalfLine,
            _ => JumpSupport::Full,
        }
    }

    fn gamma_exponent(&self) -> f64 {
        match *self {
            ModelSpec::GammaJump(p) => p.gamma_shape_fixed - 1.0,
            _ => 0.0,
        }
    }

    fn jump_range(&self, theta: &[f64], tail: f64) -> Result<(f64, f64)> {
        match *self {
            ModelSpec::Merton(MertonParams { jump_sd, .. }) | ModelSpec::OuJump(OuJumpParams { jump_sd, .. }) => {
                let z = normal_quantile(1.0 - 0.5 * tail);
                Ok((theta[1] - z * jump_sd, theta[1] + z * jump_sd))
            }
            ModelSpec::GammaJump(p) => {
                let k = p.gamma_shape_fixed;
                // Bisection on the upper regularized incomplete gamma.
                let (mut lo, mut hi) = (k, k + 10.0);
                while gamma_ur(k, hi) > tail {
                    lo = hi;
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if gamma_ur(k, mid) > tail {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok((0.0, hi * theta[1]))
            }
        }
    }

    fn has_analytic_derivatives(&self) -> bool {
        true
    }

    fn drift_theta_jacobian(&self, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        if self.mean_reverting() {
            out[0] = -x[0];
        } else {
            out[0] = 1.0;
        }
        out[1] = 0.0;
    }

    fn diffusion_sigma_jacobian(&self, _x: &[f64], _sigma: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn intensity_gradient(&self, _theta: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }

    fn jump_score(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let z = z[0];
        out[0] = 0.0;
        out[1] = match *self {
            ModelSpec::Merton(MertonParams { jump_sd, .. }) | ModelSpec::OuJump(OuJumpParams { jump_sd, .. }) => (z - theta[1]) / (jump_sd * jump_sd),
            ModelSpec::GammaJump(p) => {
                if z > 0.0 {
                    z / (theta[1] * theta[1]) - p.gamma_shape_fixed / theta[1]
                } else {
                    0.0
                }
            }
        };
    }

    fn continuous_transition_density(&self, x_prev: f64, x: f64, dt: f64, alpha: &ParamVector) -> Option<f64> {
        let s = alpha.sigma[0];
        let th = alpha.theta[0];
        let (mean, var) = if self.mean_reverting() {
            let decay = (-th * dt).exp();
            (x_prev * decay, s * s * (-(-2.0 * th * dt).exp_m1()) / (2.0 * th))
        } else {
            (x_prev + th * dt, s * s * dt)
        };
        Some(normal_log_pdf(x, mean, var).exp())
    }

    fn exact_transition_density(&self, x_prev: f64, x: f64, dt: f64, alpha: &ParamVector) -> Option<f64> {
        match *self {
            ModelSpec::Merton(p) => {
                let params = MertonParams { sigma: alpha.sigma[0], drift_level: alpha.theta[0], jump_mean: alpha.theta[1], ..p };
                Some(crate::density::exact_merton_density(&params, x_prev, x, dt, 1e-14))
            }
            _ => None,
        }
    }

    fn is_ergodic(&self) -> bool {
        self.mean_reverting()
    }

    fn stationary_moments(&self, alpha: &ParamVector) -> Option<(f64, f64)> {
        if !self.mean_reverting() {
            return None;
        }
        let s = alpha.sigma[0];
        let th = alpha.theta[0];
        let lambda = self.lambda();
        let (ez, ez2) = self.jump_moments(&alpha.theta);
        Some((lambda * ez / th, (s * s + lambda * ez2) / (2.0 * th)))
    }

    fn burn_in_time(&self, alpha: &ParamVector) -> Option<f64> {
        self.mean_reverting().then(|| 10.0 / alpha.theta[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{adaptive_simpson, QuadSpec};

    #[test]
    fn merton_rejects_non_positive_scales() {
        assert!(builtin_merton(0.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(builtin_merton(0.0, 1.0, 1.0, 0.0, -0.5).is_err());
        assert!(builtin_merton(0.0, 1.0, -1.0, 0.0, 0.5).is_err());
        assert!(builtin_merton(0.0, 1.0, 0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn ou_jump_stationary_moments() {
        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let (mean, var) = m.stationary_moments(&m.nominal_alpha()).unwrap();
        assert_eq!(mean, 0.0);
        assert!((var - 0.625).abs() < 1e-15);

        let m = builtin_ou_jump(1.0, 1.0, 0.0, 0.0, 0.5).unwrap();
        assert!((m.stationary_moments(&m.nominal_alpha()).unwrap().1 - 0.5).abs() < 1e-15);

        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.3, 0.5).unwrap();
        assert!((m.stationary_moments(&m.nominal_alpha()).unwrap().0 - 0.3).abs() < 1e-15);
        assert!(builtin_ou_jump(0.0, 1.0, 1.0, 0.0, 0.5).is_err());
        assert!(builtin_ou_jump(-1.0, 1.0, 1.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn gamma_jump_shape_rules() {
        assert!(builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 0.5).is_err());
        let exp = builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(exp.gamma_exponent(), 0.0);
        assert_eq!(exp.jump_support(), JumpSupport::PositiveHalfLine);

        let g2 = builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 2.0).unwrap();
        let theta = g2.nominal_alpha().theta;
        for &z in &[0.1, 1.0, 3.7] {
            let f = g2.jump_log_density(&[z], &theta).exp();
            assert!((f - z * (-z).exp()).abs() < 1e-14);
        }
        let (lo, hi) = g2.jump_range(&theta, 1e-15).unwrap();
        let spec = QuadSpec::default();
        let total = adaptive_simpson(|z| g2.jump_log_density(&[z], &theta).exp(), lo, hi, &spec).unwrap();
        assert!((total - 1.0).abs() < 1e-9);
        // Rate condition exponent 1 + (m + γ)/2 ∧ 1 for m = 1, shape 2.
        let expo = 1.0 + ((1.0 + g2.gamma_exponent()) / 2.0).min(1.0);
        assert_eq!(expo, 2.0);
    }

    #[test]
    fn json_roundtrip_and_unknown_fields() {
        let text = r#"{"kind":"ou_jump","params":{"mean_rev":1,"sigma":1,"lambda":1,"jump_mean":0,"jump_sd":0.5}}"#;
        let spec = ModelSpec::from_json(text).unwrap();
        assert_eq!(spec, builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap());
        let back = serde_json::to_string(&spec).unwrap();
        assert_eq!(ModelSpec::from_json(&back).unwrap(), spec);

        let bad = r#"{"kind":"merton","params":{"drift_level":0,"sigma":1,"lambda":1,"jump_mean":0,"jump_sd":0.5,"extra":1}}"#;
        assert!(ModelSpec::from_json(bad).is_err());
        let neg = r#"{"kind":"ou_jump","params":{"mean_rev":-1,"sigma":1,"lambda":1,"jump_mean":0,"jump_sd":0.5}}"#;
        assert!(ModelSpec::from_json(neg).is_err());
    }

    #[test]
    fn ou_continuous_density_integrates_to_one() {
        let m = builtin_ou_jump(2.0, 0.7, 1.0, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        let spec = QuadSpec::default();
        let v = adaptive_simpson(|x| m.continuous_transition_density(0.4, x, 0.1, &a).unwrap(), -3.0, 3.0, &spec).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }
}
