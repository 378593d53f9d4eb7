//! Quasi-maximum-likelihood and grid Bayes estimation, the Fisher
//! information Γ, standard errors and Wald tests.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JumpDiffusion, ModelSpec, ParamVector};
use crate::optim::{maximize, Objective, OptimOptions, TraceEntry};
use crate::quad::{integrate, QuadSpec};
use crate::quasi_lik::{Contrast, ThresholdRule};
use crate::sim::Path;
use crate::stats::{chi_square_sf, pairwise_sum};

/// `Γ = diag(Γ₁, Γ₂)` with both blocks row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherGamma {
    pub d1: usize,
    pub d2: usize,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    /// Diagonal of `ε_n`; empty when no schedule is attached.
    #[serde(default)]
    pub epsilon: Vec<f64>,
    /// Jump-law mass left out of the jump-term quadrature.
    #[serde(default)]
    pub excluded_mass: f64,
}

impl FisherGamma {
    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    /// The full `d × d` matrix, row-major.
    pub fn assembled(&self) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; d * d];
        for i in 0..self.d1 {
            for k in 0..self.d1 {
                g[i * d + k] = self.gamma1[i * self.d1 + k];
            }
        }
        for i in 0..self.d2 {
            for k in 0..self.d2 {
                g[(self.d1 + i) * d + self.d1 + k] = self.gamma2[i * self.d2 + k];
            }
        }
        g
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.assembled())
    }

    pub fn with_epsilon(mut self, epsilon: Vec<f64>) -> Result<Self> {
        if epsilon.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: epsilon.len(), context: "epsilon" });
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.matrix();
        (&m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
    }

    /// Cholesky check of both blocks.
    pub fn check_positive_definite(&self) -> Result<()> {
        for (name, block, d) in [("gamma1", &self.gamma1, self.d1), ("gamma2", &self.gamma2, self.d2)] {
            if d > 0 && DMatrix::from_row_slice(d, d, block).cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(name.into()));
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.matrix().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::NotPositiveDefinite("gamma".into()))
    }

    /// Symmetric square root `Γ^{1/2}`.
    pub fn sqrt(&self) -> Result<DMatrix<f64>> {
        self.check_positive_definite()?;
        let eig = self.matrix().symmetric_eigen();
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
    }

    /// `hᵀ Γ h`.
    pub fn quadratic_form(&self, h: &[f64]) -> f64 {
        let v = DVector::from_column_slice(h);
        (v.transpose() * self.matrix() * &v)[(0, 0)]
    }
}

/// Where the state averages in Γ come from.
#[derive(Debug, Clone, Copy)]
pub enum FisherSource<'a> {
    /// States `X_{t_0}, …, X_{t_{n-1}}` of an observed path.
    Path(&'a Path),
    /// Draws from the stationary law, flat `k × m`.
    Sample(&'a [f64]),
}

/// `Γ` from state averages of the diffusion and drift integrands plus a
/// quadrature of the jump term (`m = 1`).
pub fn fisher_gamma_plugin(model: &dyn JumpDiffusion, alpha: &ParamVector, source: FisherSource<'_>, quad: &QuadSpec) -> Result<FisherGamma> {
    let m = model.state_dim();
    let (d1, d2) = (alpha.d1(), alpha.d2());
    let states: &[f64] = match source {
        FisherSource::Path(p) => {
            if p.m != m {
                return Err(Error::Dimension { expected: m, got: p.m, context: "path state dimension" });
            }
            &p.observations[..p.n() * m]
        }
        FisherSource::Sample(s) => s,
    };
    if states.is_empty() || !states.len().is_multiple_of(m) {
        return Err(Error::invalid("source", "need a non-empty set of states"));
    }
    let count = states.len() / m;
    let mut g1_terms = vec![Vec::with_capacity(count); d1 * d1];
    let mut g2_terms = vec![Vec::with_capacity(count); d2 * d2];
    let mut b = vec![0.0; m * m];
    let mut db = vec![0.0; d1 * m * m];
    let mut da = vec![0.0; m * d2];
    for x in states.chunks(m) {
        model.diffusion(x, &alpha.sigma, &mut b);
        model.diffusion_sigma_jacobian(x, &alpha.sigma, &mut db);
        model.drift_theta_jacobian(x, &alpha.theta, &mut da);
        let bm = DMatrix::from_row_slice(m, m, &b);
        let s = &bm * bm.transpose();
        let sinv = s.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("S = b bᵀ".into()))?.inverse();
        // ∂S = ∂b bᵀ + b ∂bᵀ
        let ds: Vec<DMatrix<f64>> = (0..d1)
            .map(|i| {
                let dbi = DMatrix::from_row_slice(m, m, &db[i * m * m..(i + 1) * m * m]);
                (&dbi * bm.transpose() + &bm * dbi.transpose()) * &sinv
            })
            .collect();
        for i in 0..d1 {
            for k in 0..d1 {
                g1_terms[i * d1 + k].push(0.5 * (&ds[i] * &ds[k]).trace());
            }
        }
        let dam = DMatrix::from_row_slice(m, d2, &da);
        let g = dam.transpose() * &sinv * &dam;
        for i in 0..d2 {
            for k in 0..d2 {
                g2_terms[i * d2 + k].push(g[(i, k)]);
            }
        }
    }
    let avg = |v: &Vec<f64>| pairwise_sum(v) / count as f64;
    let gamma1: Vec<f64> = g1_terms.iter().map(avg).collect();
    let mut gamma2: Vec<f64> = g2_terms.iter().map(avg).collect();
    let (jump, excluded_mass) = jump_fisher(model, &alpha.theta, quad)?;
    for (g, j) in gamma2.iter_mut().zip(&jump) {
        *g += j;
    }
    let epsilon = match source {
        FisherSource::Path(p) => crate::model::RateSchedule::new(p.n(), p.step)?.epsilon(d1, d2),
        FisherSource::Sample(_) => Vec::new(),
    };
    Ok(FisherGamma { d1, d2, gamma1, gamma2, epsilon, excluded_mass })
}

/// `∫ (∂_θ f)(∂_θ f)ᵀ / f` with `f = λ F_θ`, over `{f ≠ 0}`; also the
/// jump-law mass outside the integration window.
fn jump_fisher(model: &dyn JumpDiffusion, theta: &[f64], quad: &QuadSpec) -> Result<(Vec<f64>, f64)> {
    let d2 = theta.len();
    let lambda = model.intensity(theta);
    if lambda == 0.0 {
        return Ok((vec![0.0; d2 * d2], 0.0));
    }
    if model.state_dim() != 1 {
        return Err(Error::Unsupported("jump Fisher quadrature needs m = 1".into()));
    }
    let (lo, hi) = model.jump_range(theta, 1e-15)?;
    let density = |z: f64| {
        let v = model.jump_log_density(&[z], theta).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mass = integrate(density, lo, hi, quad)?;
    let mut out = vec![0.0; d2 * d2];
    let mut score = vec![0.0; d2];
    for i in 0..d2 {
        for k in i..d2 {
            let v = integrate(
                |z| {
                    let f = density(z);
                    if f == 0.0 {
                        return 0.0;
                    }
                    model.jump_score(&[z], theta, &mut score);
                    let t = f * score[i] * score[k];
                    if t.is_finite() {
                        t
                    } else {
                        0.0
                    }
                },
                lo,
                hi,
                quad,
            )?;
            out[i * d2 + k] = lambda * v;
            out[k * d2 + i] = lambda * v;
        }
    }
    Ok((out, (1.0 - mass).max(0.0)))
}

/// Exact `Γ` for the ergodic built-ins from their stationary moments.
pub fn fisher_gamma_closed_form(spec: &ModelSpec, alpha: &ParamVector) -> Result<FisherGamma> {
    let (mean, var) = spec.stationary_moments(alpha).ok_or_else(|| Error::Unsupported(format!("{} is not ergodic", spec.kind())))?;
    let s = alpha.sigma[0];
    let jump = spec.jump_fisher_closed_form(&alpha.theta);
    let ex2 = var + mean * mean;
    let gamma2 = vec![ex2 / (s * s) + jump[0], jump[1], jump[2], jump[3]];
    Ok(FisherGamma { d1: 1, d2: 2, gamma1: vec![2.0 / (s * s)], gamma2, epsilon: Vec::new(), excluded_mass: 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct FitOptions {
    #[serde(flatten)]
    pub optim: OptimOptions,
    /// σ on the no-jump branch, then θ, then a joint polish.
    pub two_stage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha_hat: ParamVector,
    pub converged: bool,
    pub iterations: usize,
    /// `‖ε_n ∇ℓ‖_∞` at the estimate.
    pub grad_norm: f64,
    pub loglik: f64,
    pub two_stage: bool,
    pub used_simplex: bool,
    /// Within `10⁻⁶` of a face of the parameter box, relative to its width.
    pub near_boundary: bool,
    /// `ε_i √((T̂_n⁻¹)_ii)`; empty if `T̂_n` is not positive definite.
    pub std_errors: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub trace: Vec<TraceEntry>,
}

/// The contrast restricted to the coordinates in `free`, others held at `base`.
struct Restricted<'c, 'a> {
    contrast: &'c Contrast<'a>,
    base: Vec<f64>,
    free: Vec<usize>,
    continuous_only: bool,
}

impl Restricted<'_, '_> {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut a = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = x[k];
        }
        a
    }
}

impl Objective for Restricted<'_, '_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let v = self.contrast.value(&self.full(x))?;
        Ok(if self.continuous_only { v.continuous } else { v.total })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        // The σ-components of the score come from the no-jump branch only.
        let g = self.contrast.score(&self.full(x))?;
        Ok(self.free.iter().map(|&i| g[i]).collect())
    }

    fn admissible(&self, x: &[f64]) -> bool {
        self.contrast.model().param_space().contains(&self.full(x))
    }
}

/// Maximizes the quasi-log-likelihood of `path` from `init`.
pub fn fit_qmle(model: &dyn JumpDiffusion, path: &Path, rule: &ThresholdRule, init: &ParamVector, opts: &FitOptions) -> Result<FitResult> {
    let contrast = Contrast::new(model, path, rule)?;
    let space = model.param_space();
    let x0 = init.to_vec();
    space.check(&x0)?;
    let eps = contrast.epsilon();
    let d = x0.len();
    let d1 = init.d1();
    let run = |base: Vec<f64>, free: Vec<usize>, continuous_only: bool| {
        let obj = Restricted { contrast: &contrast, base: base.clone(), free: free.clone(), continuous_only };
        let start: Vec<f64> = free.iter().map(|&i| base[i]).collect();
        let scale: Vec<f64> = free.iter().map(|&i| eps[i]).collect();
        let positive: Vec<bool> = free.iter().map(|&i| space.positive[i]).collect();
        let out = maximize(&obj, &start, &scale, &positive, &opts.optim)?;
        Ok::<_, Error>((obj.full(&out.x), out))
    };
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut current = x0;
    if opts.two_stage {
        for (free, cont) in [((0..d1).collect::<Vec<_>>(), true), ((d1..d).collect(), false)] {
            if free.is_empty() {
                continue;
            }
            let (x, out) = run(current.clone(), free, cont)?;
            iterations += out.iterations;
            trace.extend(out.trace);
            current = x;
        }
    }
    let (alpha, out) = run(current, (0..d).collect(), false)?;
    iterations += out.iterations;
    trace.extend(out.trace);
    let std_errors = match contrast.observed_info(&alpha) {
        Ok(info) => {
            let t = DMatrix::from_fn(d, d, |i, k| eps[i] * info[i * d + k] * eps[k]);
            t.cholesky().map(|c| {
                let inv = c.inverse();
                (0..d).map(|i| eps[i] * inv[(i, i)].sqrt()).collect()
            })
        }
        Err(_) => None,
    }
    .unwrap_or_default();
    let near_boundary = space.boundary_proximity(&alpha) < 1e-6;
    if near_boundary {
        warn!("estimate within 1e-6 of the parameter box boundary");
    }
    Ok(FitResult {
        alpha_hat: ParamVector::from_slice(d1, &alpha),
        converged: out.converged && !near_boundary,
        iterations,
        grad_norm: out.grad_norm,
        loglik: out.value,
        two_stage: opts.two_stage,
        used_simplex: out.used_simplex,
        near_boundary,
        std_errors,
        epsilon: eps,
        trace,
    })
}

/// Independent log-prior on each coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    Flat,
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl Prior {
    pub fn log_density(&self, alpha: &[f64]) -> f64 {
        match self {
            Prior::Flat => 0.0,
            Prior::Gaussian { mean, sd } => alpha.iter().zip(mean.iter().zip(sd)).map(|(a, (m, s))| -0.5 * ((a - m) / s).powi(2)).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesGrid {
    /// Nodes per axis, odd and at least 41.
    pub nodes: usize,
    /// Box half-width in plug-in standard errors.
    pub half_width: f64,
}

impl Default for BayesGrid {
    fn default() -> Self {
        BayesGrid { nodes: 41, half_width: 6.0 }
    }
}

impl BayesGrid {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 41 || self.nodes.is_multiple_of(2) {
            return Err(Error::invalid("nodes", "need an odd count of at least 41"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::invalid("half_width", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesEstimate {
    pub alpha: ParamVector,
    /// Posterior mass on the outer layer of the grid.
    pub edge_mass: f64,
    pub qmle: FitResult,
}

/// Posterior mean by tensor-grid Simpson quadrature of
/// `exp(ℓ_n − max ℓ_n)·prior` on a box around the QMLE.
pub fn fit_bayes(model: &dyn JumpDiffusion, path: &Path, rule: &ThresholdRule, init: &ParamVector, prior: &Prior, grid: &BayesGrid) -> Result<BayesEstimate> {
    let d = init.dim();
    if d > 3 {
        return Err(Error::Unsupported(format!("grid Bayes estimator needs d <= 3, got {d}")));
    }
    grid.validate()?;
    let qmle = fit_qmle(model, path, rule, init, &FitOptions::default())?;
    if qmle.std_errors.len() != d {
        return Err(Error::NotPositiveDefinite("observed information at the QMLE".into()));
    }
    let contrast = Contrast::new(model, path, rule)?;
    let space = model.param_space();
    let center = qmle.alpha_hat.to_vec();
    let k = grid.nodes;
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let w = grid.half_width * qmle.std_errors[i];
            let lo = (center[i] - w).max(space.lower[i] + 1e-9 * (space.upper[i] - space.lower[i]));
            let hi = (center[i] + w).min(space.upper[i] - 1e-9 * (space.upper[i] - space.lower[i]));
            (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
        })
        .collect();
    let simpson = |j: usize| {
        if j == 0 || j == k - 1 {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let total = k.pow(d as u32);
    let mut logs = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for flat in 0..total {
        let mut r = flat;
        for i in (0..d).rev() {
            idx[i] = r % k;
            r /= k;
        }
        let a: Vec<f64> = (0..d).map(|i| axes[i][idx[i]]).collect();
        let l = contrast.value(&a).map(|v| v.total).unwrap_or(f64::NEG_INFINITY);
        logs.push((idx.clone(), a.clone(), l + prior.log_density(&a)));
    }
    let top = logs.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Evaluation { index: 0 });
    }
    let mut norm = 0.0;
    let mut edge = 0.0;
    let mut first = vec![0.0; d];
    for (idx, a, l) in &logs {
        let w: f64 = idx.iter().map(|&j| simpson(j)).product::<f64>() * (l - top).exp();
        norm += w;
        if idx.iter().any(|&j| j == 0 || j == k - 1) {
            edge += w;
        }
        for i in 0..d {
            first[i] += w * a[i];
        }
    }
    let edge_mass = edge / norm;
    if edge_mass > 1e-3 {
        warn!("posterior mass {edge_mass:.2e} on the grid edge; widen the box");
    }
    let mean: Vec<f64> = first.iter().map(|v| v / norm).collect();
    Ok(BayesEstimate { alpha: ParamVector::from_slice(init.d1(), &mean), edge_mass, qmle })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
}

/// `W = zᵀ Γ_S z` with `z = (ε_n⁻¹(α̂ − α⁰))_S`, referred to `χ²_{|S|}`.
pub fn wald_test(alpha_hat: &ParamVector, gamma: &FisherGamma, null_value: &ParamVector, subset: &[usize]) -> Result<WaldResult> {
    let d = gamma.dim();
    if gamma.epsilon.len() != d {
        return Err(Error::invalid("gamma", "attach ε_n before testing"));
    }
    if subset.is_empty() || subset.iter().any(|&i| i >= d) {
        return Err(Error::invalid("subset", "indices must be non-empty and in range"));
    }
    let (a, b) = (alpha_hat.to_vec(), null_value.to_vec());
    let g = gamma.assembled();
    let z: Vec<f64> = subset.iter().map(|&i| (a[i] - b[i]) / gamma.epsilon[i]).collect();
    let s = subset.len();
    let block = DMatrix::from_fn(s, s, |i, k| g[subset[i] * d + subset[k]]);
    if block.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("Γ sub-block".into()));
    }
    let zv = DVector::from_column_slice(&z);
    let statistic = (zv.transpose() * block * &zv)[(0, 0)];
    Ok(WaldResult { statistic, p_value: chi_square_sf(statistic, s as f64), df: s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_gamma_jump, builtin_merton, builtin_ou_jump};

    #[test]
    fn closed_form_ou_jump() {
        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let g = fisher_gamma_closed_form(&m, &m.nominal_alpha()).unwrap();
        assert_eq!(g.assembled(), vec![2.0, 0.0, 0.0, 0.0, 0.625, 0.0, 0.0, 0.0, 4.0]);
        g.check_positive_definite().unwrap();
        let m2 = builtin_ou_jump(1.0, 2.0, 1.0, 0.0, 0.5).unwrap();
        assert_eq!(fisher_gamma_closed_form(&m2, &m2.nominal_alpha()).unwrap().gamma1, vec![0.5]);
        let merton = builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        assert!(matches!(fisher_gamma_closed_form(&merton, &merton.nominal_alpha()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn plugin_on_a_stationary_sample() {
        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        // Deterministic sample with E x² = 0.625.
        let sample: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { 0.625f64.sqrt() } else { -(0.625f64.sqrt()) }).collect();
        let g = fisher_gamma_plugin(&m, &a, FisherSource::Sample(&sample), &QuadSpec::default()).unwrap();
        let want = [2.0, 0.0, 0.0, 0.0, 0.625, 0.0, 0.0, 0.0, 4.0];
        for (x, y) in g.assembled().iter().zip(want) {
            assert!((x - y).abs() < 1e-9, "{:?}", g.assembled());
        }
        assert!(g.excluded_mass < 1e-12);
    }

    #[test]
    fn gamma_jump_fisher_by_quadrature() {
        let m = builtin_gamma_jump(1.0, 1.0, 2.0, 0.5, 3.0).unwrap();
        let a = m.nominal_alpha();
        let (j, _) = jump_fisher(&m, &a.theta, &QuadSpec::default()).unwrap();
        let closed = m.jump_fisher_closed_form(&a.theta);
        for (x, y) in j.iter().zip(closed) {
            assert!((x - y).abs() < 1e-7 * y.abs().max(1.0), "{j:?} vs {closed:?}");
        }
    }

    #[test]
    fn wald_identities() {
        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let a0 = m.nominal_alpha();
        let g = fisher_gamma_closed_form(&m, &a0).unwrap().with_epsilon(vec![0.1, 0.5, 0.5]).unwrap();
        let w = wald_test(&a0, &g, &a0, &[0]).unwrap();
        assert_eq!((w.statistic, w.p_value), (0.0, 1.0));
        // Standardized error z with Γ = 2: W = 2 z², p = two-sided normal tail of √2 z.
        let z = 1.3;
        let shifted = ParamVector::new(vec![1.0 + 0.1 * z], a0.theta.clone()).unwrap();
        let w = wald_test(&shifted, &g, &a0, &[0]).unwrap();
        assert!((w.statistic - 2.0 * z * z).abs() < 1e-12);
        let two_sided = 2.0 * (1.0 - crate::stats::normal_cdf(2f64.sqrt() * z));
        assert!((w.p_value - two_sided).abs() < 1e-10);
        assert!(wald_test(&a0, &fisher_gamma_closed_form(&m, &a0).unwrap(), &a0, &[0]).is_err());
    }
}
