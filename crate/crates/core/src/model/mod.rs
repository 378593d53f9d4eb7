//! Jump-diffusion model definitions.
//!
//! A model is the SDE `dX = a(X, θ) dt + b(X, σ) dW + ∫ z N_θ(dt, dz)` where the
//! Poisson random measure has finite intensity `λ(θ)` and jump density
//! `F_θ`. Parameters are split into the diffusion block `σ` and the drift and
//! jump block `θ`.

mod builtins;
mod validate;

pub use builtins::{builtin_gamma_jump, builtin_merton, builtin_ou_jump, GammaJumpParams, MertonParams, ModelSpec, OuJumpParams};
pub use validate::{validate_model, CheckOutcome, ProbePlan, ValidationReport};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `α = (σ, θ)` split into the diffusion and drift/jump blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamVector {
    pub sigma: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ParamVector {
    pub fn new(sigma: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() || theta.is_empty() {
            return Err(Error::invalid("alpha", "both sigma and theta blocks need at least one coordinate"));
        }
        Ok(ParamVector { sigma, theta })
    }

    /// Split a concatenated `α` after `d1` coordinates.
    pub fn from_slice(d1: usize, alpha: &[f64]) -> Self {
        ParamVector { sigma: alpha[..d1].to_vec(), theta: alpha[d1..].to_vec() }
    }

    pub fn d1(&self) -> usize {
        self.sigma.len()
    }

    pub fn d2(&self) -> usize {
        self.theta.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma.len() + self.theta.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.sigma.clone();
        v.extend_from_slice(&self.theta);
        v
    }
}

/// Open box approximating `Θ₁ × Θ₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Coordinates optimised on the log scale.
    pub positive: Vec<bool>,
}

impl ParamSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, positive: Vec<bool>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != positive.len() {
            return Err(Error::invalid("space", "bounds and flags must have equal length"));
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) {
                return Err(Error::invalid("space", format!("lower >= upper at coordinate {i}")));
            }
            if positive[i] && lower[i] < 0.0 {
                return Err(Error::invalid("space", format!("positive coordinate {i} has negative lower bound")));
            }
        }
        Ok(ParamSpace { lower, upper, positive })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, alpha: &[f64]) -> bool {
        alpha.len() == self.dim() && alpha.iter().enumerate().all(|(i, &a)| a.is_finite() && a > self.lower[i] && a < self.upper[i])
    }

    pub fn check(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: alpha.len(), context: "parameter vector" });
        }
        for (i, &a) in alpha.iter().enumerate() {
            if !(a.is_finite() && a > self.lower[i] && a < self.upper[i]) {
                return Err(Error::invalid(format!("alpha[{i}]"), format!("{a} outside ({}, {})", self.lower[i], self.upper[i])));
            }
        }
        Ok(())
    }

    /// Smallest distance to a face, relative to the box width.
    pub fn boundary_proximity(&self, alpha: &[f64]) -> f64 {
        alpha
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let w = self.upper[i] - self.lower[i];
                ((a - self.lower[i]) / w).min((self.upper[i] - a) / w)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Where the jump density `F_θ` is supported (for `m = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpSupport {
    Full,
    PositiveHalfLine,
    NegativeHalfLine,
    Interval { lo: f64, hi: f64 },
}

impl JumpSupport {
    /// Closure of the support as an interval.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            JumpSupport::Full => (f64::NEG_INFINITY, f64::INFINITY),
            JumpSupport::PositiveHalfLine => (0.0, f64::INFINITY),
            JumpSupport::NegativeHalfLine => (f64::NEG_INFINITY, 0.0),
            JumpSupport::Interval { lo, hi } => (lo, hi),
        }
    }
}

/// Central-difference step `2^⌈log₂(ε^{1/root}·max(1, |v|))⌉`.
pub fn fd_step(value: f64, root: f64) -> f64 {
    let raw = f64::EPSILON.powf(1.0 / root) * value.abs().max(1.0);
    2f64.powi(raw.log2().ceil() as i32)
}

/// A finite-activity jump-diffusion.
///
/// Coefficients are evaluated on flat slices: `b` and its derivatives are
/// row-major `m × m` blocks. Derivative hooks default to central finite
/// differences of the coefficient functions; `has_analytic_derivatives`
/// reports whether a model overrides them.
pub trait JumpDiffusion: Send + Sync {
    fn state_dim(&self) -> usize;
    fn sigma_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn param_space(&self) -> &ParamSpace;

    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], sigma: &[f64], out: &mut [f64]);
    fn intensity(&self, theta: &[f64]) -> f64;
    /// `log F_θ(z)`, `-inf` outside the support.
    fn jump_log_density(&self, z: &[f64], theta: &[f64]) -> f64;
    fn sample_jump(&self, theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]);
    fn jump_support(&self) -> JumpSupport {
        JumpSupport::Full
    }
    /// Small-jump exponent `γ` in `F_θ(z) ≤ C|z|^γ` near the origin.
    fn gamma_exponent(&self) -> f64;

    /// Interval holding all but `tail` of the jump mass (`m = 1`).
    fn jump_range(&self, theta: &[f64], tail: f64) -> Result<(f64, f64)> {
        let _ = (theta, tail);
        Err(Error::Unsupported("jump_range not provided by this model".into()))
    }

    fn has_analytic_derivatives(&self) -> bool {
        false
    }

    /// `∂_θ a`, row-major `m × d2`.
    fn drift_theta_jacobian(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let m = self.state_dim();
        let d2 = theta.len();
        let mut tp = theta.to_vec();
        let mut up = vec![0.0; m];
        let mut dn = vec![0.0; m];
        for k in 0..d2 {
            let step = fd_step(theta[k], 3.0);
            tp[k] = theta[k] + step;
            self.drift(x, &tp, &mut up);
            tp[k] = theta[k] - step;
            self.drift(x, &tp, &mut dn);
            tp[k] = theta[k];
            for i in 0..m {
                out[i * d2 + k] = (up[i] - dn[i]) / (2.0 * step);
            }
        }
    }

    /// `∂_σ b`, `d1` consecutive row-major `m × m` blocks.
    fn diffusion_sigma_jacobian(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
        let mm = self.state_dim() * self.state_dim();
        let mut sp = sigma.to_vec();
        let mut up = vec![0.0; mm];
        let mut dn = vec![0.0; mm];
        for k in 0..sigma.len() {
            let step = fd_step(sigma[k], 3.0);
            sp[k] = sigma[k] + step;
            self.diffusion(x, &sp, &mut up);
            sp[k] = sigma[k] - step;
            self.diffusion(x, &sp, &mut dn);
            sp[k] = sigma[k];
            for i in 0..mm {
                out[k * mm + i] = (up[i] - dn[i]) / (2.0 * step);
            }
        }
    }

    /// `∂_θ λ`.
    fn intensity_gradient(&self, theta: &[f64], out: &mut [f64]) {
        let mut tp = theta.to_vec();
        for k in 0..theta.len() {
            let step = fd_step(theta[k], 3.0);
            tp[k] = theta[k] + step;
            let up = self.intensity(&tp);
            tp[k] = theta[k] - step;
            let dn = self.intensity(&tp);
            tp[k] = theta[k];
            out[k] = (up - dn) / (2.0 * step);
        }
    }

    /// `∂_θ log f_θ(z)` where `f_θ = λ(θ) F_θ`; zero outside the support.
    fn jump_score(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let mut tp = theta.to_vec();
        for k in 0..theta.len() {
            let step = fd_step(theta[k], 3.0);
            tp[k] = theta[k] + step;
            let up = self.intensity(&tp).ln() + self.jump_log_density(z, &tp);
            tp[k] = theta[k] - step;
            let dn = self.intensity(&tp).ln() + self.jump_log_density(z, &tp);
            tp[k] = theta[k];
            let d = (up - dn) / (2.0 * step);
            out[k] = if d.is_finite() { d } else { 0.0 };
        }
    }

    /// Exact transition density of the continuous part over `dt` (`m = 1`).
    fn continuous_transition_density(&self, x_prev: f64, x: f64, dt: f64, alpha: &ParamVector) -> Option<f64> {
        let _ = (x_prev, x, dt, alpha);
        None
    }

    /// Exact transition density of the full process (`m = 1`).
    fn exact_transition_density(&self, x_prev: f64, x: f64, dt: f64, alpha: &ParamVector) -> Option<f64> {
        let _ = (x_prev, x, dt, alpha);
        None
    }

    fn is_ergodic(&self) -> bool {
        false
    }

    /// Mean and variance of the stationary law (`m = 1` ergodic built-ins).
    fn stationary_moments(&self, alpha: &ParamVector) -> Option<(f64, f64)> {
        let _ = alpha;
        None
    }

    /// Default initial state: the stationary mean where known, else zero.
    fn default_initial_state(&self, alpha: &ParamVector) -> Vec<f64> {
        match self.stationary_moments(alpha) {
            Some((mean, _)) if self.state_dim() == 1 => vec![mean],
            _ => vec![0.0; self.state_dim()],
        }
    }

    /// Warm-up length in time units discarded before observation starts.
    fn burn_in_time(&self, alpha: &ParamVector) -> Option<f64> {
        let _ = alpha;
        None
    }
}

/// Observation schedule: `n` steps of size `h_n`, optionally `h_n = c·n^{-β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub n: usize,
    pub step: f64,
    pub beta: Option<f64>,
}

impl RateSchedule {
    pub fn new(n: usize, step: f64) -> Result<Self> {
        if n == 0 || !(step > 0.0) || !step.is_finite() {
            return Err(Error::invalid("schedule", "need n >= 1 and h_n > 0"));
        }
        Ok(RateSchedule { n, step, beta: None })
    }

    pub fn power_law(n: usize, c: f64, beta: f64) -> Result<Self> {
        if !(c > 0.0) || !(beta > 0.0) {
            return Err(Error::invalid("schedule", "need c > 0 and beta > 0"));
        }
        let mut s = RateSchedule::new(n, c * (n as f64).powf(-beta))?;
        s.beta = Some(beta);
        Ok(s)
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.step
    }

    /// Diagonal of `ε_n = diag(n^{-1/2} I_{d1}, (n h_n)^{-1/2} I_{d2})`.
    pub fn epsilon(&self, d1: usize, d2: usize) -> Vec<f64> {
        let a = (self.n as f64).powf(-0.5);
        let b = self.horizon().powf(-0.5);
        let mut e = vec![a; d1];
        e.extend(std::iter::repeat_n(b, d2));
        e
    }

    /// `n^{1+η} h_n^{1 + ((m+γ)/2) ∧ 1}`, which must vanish as `n → ∞`.
    pub fn balance_quantity(&self, m: usize, gamma: f64, eta: f64) -> f64 {
        let expo = 1.0 + ((m as f64 + gamma) / 2.0).min(1.0);
        (self.n as f64).powf(1.0 + eta) * self.step.powf(expo)
    }
}

/// True when the balance quantity strictly decreases along `schedule`.
pub fn balance_condition_holds(schedule: &[RateSchedule], m: usize, gamma: f64, eta: f64) -> bool {
    schedule.windows(2).all(|w| w[1].balance_quantity(m, gamma, eta) < w[0].balance_quantity(m, gamma, eta))
}
