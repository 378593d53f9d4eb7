//! Thresholded Gaussian/jump quasi-log-likelihood.
//!
//! An increment is treated as continuous when `|Δ_j X| ≤ u_n = C h_n^ρ`; it
//! then contributes the Euler Gaussian log-density. Otherwise it contributes
//! `log λ(θ) + log h_n + log F_θ(Δ_j X)`. The compensator `-λ(θ) T_n` is
//! added once.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fd_step, JumpDiffusion, ParamVector, RateSchedule};
use crate::sim::Path;
use crate::stats::pairwise_sum;

/// Jump detection rule `|Δx| > C · h^ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdRule {
    pub rho: f64,
    pub scale: f64,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule { rho: 0.4, scale: 2.0 }
    }
}

impl ThresholdRule {
    /// Exponents outside `(1/4, 1/2)` are accepted with a warning.
    pub fn new(rho: f64, scale: f64) -> Result<Self> {
        let rule = ThresholdRule { rho, scale };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", "threshold scale must be positive"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", "threshold exponent must be positive"));
        }
        if !(self.rho > 0.25 && self.rho < 0.5) {
            warn!("threshold exponent {} outside (1/4, 1/2)", self.rho);
        }
        Ok(())
    }

    pub fn threshold(&self, step: f64) -> f64 {
        self.scale * step.powf(self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementClassification {
    /// `true` where a jump was detected, one flag per increment.
    pub jump_detected: Vec<bool>,
    pub threshold: f64,
    pub jumps: usize,
    pub continuous: usize,
}

/// Flags `|Δ_j X| > u_n` (Euclidean norm); the boundary counts as continuous.
pub fn classify_increments(path: &Path, rule: &ThresholdRule) -> IncrementClassification {
    let u = rule.threshold(path.step);
    let m = path.m;
    let jump_detected: Vec<bool> = (1..=path.n())
        .map(|j| {
            let (a, b) = (path.x(j - 1), path.x(j));
            let sq: f64 = (0..m).map(|i| (b[i] - a[i]) * (b[i] - a[i])).sum();
            sq.sqrt() > u
        })
        .collect();
    let jumps = jump_detected.iter().filter(|&&f| f).count();
    IncrementClassification { continuous: jump_detected.len() - jumps, jump_detected, threshold: u, jumps }
}

/// A contrast value with its branch decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    pub total: f64,
    pub continuous: f64,
    pub jump: f64,
    /// `-λ(θ) T_n`.
    pub compensator: f64,
    pub n_continuous: usize,
    pub n_jump: usize,
    /// Jump increments where `F_θ` vanished and the floor was used.
    pub floored: usize,
}

/// `-ε_nᵀ ∇²ℓ ε_n` and `ε_nᵀ ∇ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledScoreInfo {
    pub v: Vec<f64>,
    /// Row-major `d × d`.
    pub t: Vec<f64>,
    pub epsilon: Vec<f64>,
}

pub const DEFAULT_FLOOR: f64 = -690.775_527_898_213_7; // ln 1e-300

/// The quasi-log-likelihood of one path with a frozen classification.
pub struct Contrast<'a> {
    model: &'a dyn JumpDiffusion,
    path: &'a Path,
    class: IncrementClassification,
    floor: f64,
}

impl<'a> Contrast<'a> {
    pub fn new(model: &'a dyn JumpDiffusion, path: &'a Path, rule: &ThresholdRule) -> Result<Self> {
        rule.validate()?;
        if path.m != model.state_dim() {
            return Err(Error::Dimension { expected: model.state_dim(), got: path.m, context: "path state dimension" });
        }
        Ok(Contrast { model, path, class: classify_increments(path, rule), floor: DEFAULT_FLOOR })
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn classification(&self) -> &IncrementClassification {
        &self.class
    }

    pub fn path(&self) -> &Path {
        self.path
    }

    pub fn model(&self) -> &dyn JumpDiffusion {
        self.model
    }

    pub fn d1(&self) -> usize {
        self.model.sigma_dim()
    }

    pub fn dim(&self) -> usize {
        self.model.sigma_dim() + self.model.theta_dim()
    }

    fn split(&self, alpha: &[f64]) -> Result<ParamVector> {
        if alpha.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: alpha.len(), context: "alpha" });
        }
        Ok(ParamVector::from_slice(self.d1(), alpha))
    }

    pub fn value(&self, alpha: &[f64]) -> Result<LogLik> {
        let a = self.split(alpha)?;
        let (m, h) = (self.path.m, self.path.step);
        let mut cont = Vec::with_capacity(self.class.continuous);
        let mut jump = Vec::with_capacity(self.class.jumps);
        let mut floored = 0;
        let mut drift = vec![0.0; m];
        let mut b = vec![0.0; m * m];
        let mut dx = vec![0.0; m];
        let lambda = self.model.intensity(&a.theta);
        for (k, &is_jump) in self.class.jump_detected.iter().enumerate() {
            let (x0, x1) = (self.path.x(k), self.path.x(k + 1));
            for i in 0..m {
                dx[i] = x1[i] - x0[i];
            }
            let term = if is_jump {
                let log_f = self.model.jump_log_density(&dx, &a.theta) + lambda.ln();
                if log_f.is_finite() {
                    log_f + h.ln()
                } else {
                    floored += 1;
                    self.floor
                }
            } else {
                self.model.drift(x0, &a.theta, &mut drift);
                self.model.diffusion(x0, &a.sigma, &mut b);
                gaussian_term(&dx, &drift, &b, h)
            };
            if !term.is_finite() {
                return Err(Error::Evaluation { index: k + 1 });
            }
            if is_jump {
                jump.push(term);
            } else {
                cont.push(term);
            }
        }
        let continuous = pairwise_sum(&cont);
        let jump_sum = pairwise_sum(&jump);
        let compensator = -lambda * self.path.horizon();
        Ok(LogLik {
            total: continuous + jump_sum + compensator,
            continuous,
            jump: jump_sum,
            compensator,
            n_continuous: cont.len(),
            n_jump: jump.len(),
            floored,
        })
    }

    /// `∇_α ℓ` from the model's derivative hooks.
    pub fn score(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let a = self.split(alpha)?;
        let (m, h) = (self.path.m, self.path.step);
        let (d1, d2) = (a.d1(), a.d2());
        let mut drift = vec![0.0; m];
        let mut b = vec![0.0; m * m];
        let mut db = vec![0.0; d1 * m * m];
        let mut da = vec![0.0; m * d2];
        let mut js = vec![0.0; d2];
        let mut dx = vec![0.0; m];
        let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(self.path.n()); d1 + d2];
        let lambda = self.model.intensity(&a.theta);
        for (k, &is_jump) in self.class.jump_detected.iter().enumerate() {
            let (x0, x1) = (self.path.x(k), self.path.x(k + 1));
            for i in 0..m {
                dx[i] = x1[i] - x0[i];
            }
            if is_jump {
                let finite = (self.model.jump_log_density(&dx, &a.theta) + lambda.ln()).is_finite();
                if finite {
                    self.model.jump_score(&dx, &a.theta, &mut js);
                } else {
                    js.fill(0.0);
                }
                for q in 0..d1 {
                    terms[q].push(0.0);
                }
                for q in 0..d2 {
                    terms[d1 + q].push(js[q]);
                }
                continue;
            }
            self.model.drift(x0, &a.theta, &mut drift);
            self.model.diffusion(x0, &a.sigma, &mut b);
            self.model.drift_theta_jacobian(x0, &a.theta, &mut da);
            self.model.diffusion_sigma_jacobian(x0, &a.sigma, &mut db);
            if m == 1 {
                let s = b[0] * b[0];
                let r = dx[0] - h * drift[0];
                for q in 0..d1 {
                    let ds = 2.0 * b[0] * db[q];
                    terms[q].push(-0.5 * ds / s + 0.5 * r * r * ds / (h * s * s));
                }
                for q in 0..d2 {
                    terms[d1 + q].push(da[q] * r / s);
                }
            } else {
                let bm = DMatrix::from_row_slice(m, m, &b);
                let s = &bm * &bm;
                let s_inv = s.clone().try_inverse().ok_or(Error::Evaluation { index: k + 1 })?;
                let r = DVector::from_iterator(m, (0..m).map(|i| dx[i] - h * drift[i]));
                let sr = &s_inv * &r;
                for q in 0..d1 {
                    let dbq = DMatrix::from_row_slice(m, m, &db[q * m * m..(q + 1) * m * m]);
                    let ds = &dbq * &bm + &bm * &dbq;
                    let tr = (&s_inv * &ds).trace();
                    let quad = (sr.transpose() * &ds * &sr)[(0, 0)];
                    terms[q].push(-0.5 * tr + 0.5 * quad / h);
                }
                let dam = DMatrix::from_row_slice(m, d2, &da);
                let g = dam.transpose() * &sr;
                for q in 0..d2 {
                    terms[d1 + q].push(g[q]);
                }
            }
        }
        let mut grad_lambda = vec![0.0; d2];
        self.model.intensity_gradient(&a.theta, &mut grad_lambda);
        let mut out: Vec<f64> = terms.iter().map(|t| pairwise_sum(t)).collect();
        for q in 0..d2 {
            // Jump branch carries ∂ log λ already; remove the compensator part.
            out[d1 + q] -= grad_lambda[q] * self.path.horizon();
        }
        if let Some(k) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation { index: k });
        }
        Ok(out)
    }

    /// Central differences of [`Contrast::value`], step `ε^{1/3}`.
    pub fn score_fd(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let mut p = alpha.to_vec();
        let mut out = vec![0.0; alpha.len()];
        for k in 0..alpha.len() {
            let step = fd_step(alpha[k], 3.0);
            p[k] = alpha[k] + step;
            let up = self.value(&p)?.total;
            p[k] = alpha[k] - step;
            let dn = self.value(&p)?.total;
            p[k] = alpha[k];
            out[k] = (up - dn) / (2.0 * step);
        }
        Ok(out)
    }

    /// `-∇²ℓ` by central differences of the score (step `ε^{1/4}`), before
    /// symmetrization, row-major.
    pub fn hessian_raw(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let d = alpha.len();
        let mut p = alpha.to_vec();
        let mut h = vec![0.0; d * d];
        for k in 0..d {
            let step = fd_step(alpha[k], 4.0);
            p[k] = alpha[k] + step;
            let up = self.score(&p)?;
            p[k] = alpha[k] - step;
            let dn = self.score(&p)?;
            p[k] = alpha[k];
            for i in 0..d {
                h[i * d + k] = -(up[i] - dn[i]) / (2.0 * step);
            }
        }
        Ok(h)
    }

    /// Symmetrized observed information `-(H + Hᵀ)/2`.
    pub fn observed_info(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let d = alpha.len();
        let h = self.hessian_raw(alpha)?;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                out[i * d + k] = 0.5 * (h[i * d + k] + h[k * d + i]);
            }
        }
        Ok(out)
    }

    pub fn epsilon(&self) -> Vec<f64> {
        RateSchedule { n: self.path.n(), step: self.path.step, beta: None }.epsilon(self.d1(), self.model.theta_dim())
    }

    pub fn scaled_score_info(&self, alpha: &[f64]) -> Result<ScaledScoreInfo> {
        let eps = self.epsilon();
        let d = eps.len();
        let score = self.score(alpha)?;
        let info = self.observed_info(alpha)?;
        let v = (0..d).map(|i| eps[i] * score[i]).collect();
        let t = (0..d * d).map(|ik| eps[ik / d] * info[ik] * eps[ik % d]).collect();
        Ok(ScaledScoreInfo { v, t, epsilon: eps })
    }
}

/// Euler Gaussian log-density of `dx` with mean `h·a` and covariance `h·b²`.
fn gaussian_term(dx: &[f64], drift: &[f64], b: &[f64], h: f64) -> f64 {
    let m = dx.len();
    if m == 1 {
        let var = h * b[0] * b[0];
        let r = dx[0] - h * drift[0];
        return -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var;
    }
    let bm = DMatrix::from_row_slice(m, m, b);
    let cov = (&bm * &bm) * h;
    let Some(chol) = cov.cholesky() else {
        return f64::NAN;
    };
    let r = DVector::from_iterator(m, (0..m).map(|i| dx[i] - h * drift[i]));
    let z = chol.l().solve_lower_triangular(&r).unwrap_or_else(|| DVector::from_element(m, f64::NAN));
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet) - 0.5 * z.norm_squared()
}

pub fn quasi_loglik(model: &dyn JumpDiffusion, alpha: &ParamVector, path: &Path, rule: &ThresholdRule) -> Result<LogLik> {
    Contrast::new(model, path, rule)?.value(&alpha.to_vec())
}

pub fn quasi_score(model: &dyn JumpDiffusion, alpha: &ParamVector, path: &Path, rule: &ThresholdRule) -> Result<Vec<f64>> {
    Contrast::new(model, path, rule)?.score(&alpha.to_vec())
}

pub fn observed_info(model: &dyn JumpDiffusion, alpha: &ParamVector, path: &Path, rule: &ThresholdRule) -> Result<Vec<f64>> {
    Contrast::new(model, path, rule)?.observed_info(&alpha.to_vec())
}

pub fn scaled_score_info(model: &dyn JumpDiffusion, alpha: &ParamVector, path: &Path, rule: &ThresholdRule) -> Result<ScaledScoreInfo> {
    Contrast::new(model, path, rule)?.scaled_score_info(&alpha.to_vec())
}
