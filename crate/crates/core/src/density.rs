//! Transition densities for scalar models: the no-jump and one-jump
//! components, the thresholded density and its mass, the exact Merton
//! mixture, and the L¹ / normalizer diagnostics built on them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{JumpDiffusion, MertonParams, ParamVector, RateSchedule};
use crate::quad::{gauss_legendre, integrate, integrate_pieces, QuadSpec};
use crate::quasi_lik::ThresholdRule;
use crate::stats::{normal_cdf, normal_log_pdf, ols_slope};

/// How the continuous transition density inside `p⁰` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcMode {
    EulerGaussian,
    /// `levels` Euler substeps chained by numerical Chapman–Kolmogorov
    /// integration on a grid.
    ChapmanKolmogorov {
        levels: usize,
    },
    /// The model's exact continuous density.
    Exact,
}

fn require_scalar(model: &dyn JumpDiffusion) -> Result<()> {
    if model.state_dim() != 1 {
        return Err(Error::Unsupported("densities are implemented for m = 1".into()));
    }
    Ok(())
}

fn coeffs(model: &dyn JumpDiffusion, alpha: &ParamVector, x: f64) -> (f64, f64) {
    let (mut a, mut b) = ([0.0], [0.0]);
    model.drift(&[x], &alpha.theta, &mut a);
    model.diffusion(&[x], &alpha.sigma, &mut b);
    (a[0], b[0])
}

/// Euler Gaussian kernel `N(x; y + a(y) t, b(y)² t)`.
fn euler_kernel(model: &dyn JumpDiffusion, alpha: &ParamVector, y: f64, x: f64, t: f64) -> f64 {
    let (a, b) = coeffs(model, alpha, y);
    normal_log_pdf(x, y + a * t, b * b * t).exp()
}

const CK_NODES: usize = 401;

fn chapman_kolmogorov(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, x: f64, h: f64, levels: usize, quad: &QuadSpec) -> f64 {
    if levels <= 1 {
        return euler_kernel(model, alpha, x_prev, x, h);
    }
    let dt = h / levels as f64;
    let (a, b) = coeffs(model, alpha, x_prev);
    let center = x_prev + a * h;
    let half = 1.5 * quad.truncation_sd * b * h.sqrt();
    let dz = 2.0 * half / (CK_NODES - 1) as f64;
    let grid: Vec<f64> = (0..CK_NODES).map(|i| center - half + i as f64 * dz).collect();
    let weight = |i: usize| if i == 0 || i == CK_NODES - 1 { 0.5 * dz } else { dz };
    let mut q: Vec<f64> = grid.iter().map(|&z| euler_kernel(model, alpha, x_prev, z, dt)).collect();
    for _ in 1..levels - 1 {
        q = grid.iter().map(|&z1| (0..CK_NODES).map(|i| weight(i) * q[i] * euler_kernel(model, alpha, grid[i], z1, dt)).sum()).collect();
    }
    (0..CK_NODES).map(|i| weight(i) * q[i] * euler_kernel(model, alpha, grid[i], x, dt)).sum()
}

/// Continuous transition density `p^c` over `h` in the requested mode.
pub fn pc(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, x: f64, h: f64, quad: &QuadSpec, mode: PcMode) -> Result<f64> {
    require_scalar(model)?;
    match mode {
        PcMode::EulerGaussian => Ok(euler_kernel(model, alpha, x_prev, x, h)),
        PcMode::ChapmanKolmogorov { levels } => Ok(chapman_kolmogorov(model, alpha, x_prev, x, h, levels, quad)),
        PcMode::Exact => {
            model.continuous_transition_density(x_prev, x, h, alpha).ok_or_else(|| Error::Unsupported("model has no exact continuous density".into()))
        }
    }
}

/// No-jump component `e^{-λh} p^c`.
pub fn p0(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, x: f64, h: f64, quad: &QuadSpec, mode: PcMode) -> Result<f64> {
    let lambda = model.intensity(&alpha.theta);
    Ok((-lambda * h).exp() * pc(model, alpha, x_prev, x, h, quad, mode)?)
}

/// One-jump component
/// `λ e^{-λh} ∫₀^h ∫∫ p^c_τ(x_prev, y) F_θ(w - y) p^c_{h-τ}(w, x) dy dw dτ`
/// with Euler Gaussian `p^c`.
pub fn p1(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, x: f64, h: f64, quad: &QuadSpec) -> Result<f64> {
    require_scalar(model)?;
    let lambda = model.intensity(&alpha.theta);
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (zlo, zhi) = model.jump_support().bounds();
    let k = quad.truncation_sd;
    let kernel = quad.kernel();
    let (a_end, b_end) = coeffs(model, alpha, x);
    let (a_start, b_start) = coeffs(model, alpha, x_prev);
    let jump_f = |z: f64| {
        let v = model.jump_log_density(&[z], &alpha.theta).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };

    // ∫ F(w - y) p^c_{t2}(w, x) dw over post-jump states w.
    let inner = |y: f64, t2: f64| -> Result<f64> {
        let sd = b_end * t2.sqrt();
        let center = x - a_end * t2;
        if sd <= 1e-12 * center.abs().max(1.0) {
            return Ok(jump_f(center - y));
        }
        let half = 1.25 * k * sd;
        let breaks = [y + zlo, y + zhi];
        integrate_pieces(|w| jump_f(w - y) * euler_kernel(model, alpha, w, x, t2), center - half, center + half, &breaks, &kernel)
    };

    let (nodes, weights) = gauss_legendre(quad.time_nodes);
    let mut total = 0.0;
    for (xi, wi) in nodes.iter().zip(&weights) {
        let t1 = 0.5 * h * (1.0 + xi);
        let t2 = h - t1;
        let sd = b_start * t1.sqrt();
        let center = x_prev + a_start * t1;
        let outer = if sd <= 1e-12 * center.abs().max(1.0) {
            inner(center, t2)?
        } else {
            let mut err = None;
            let v = integrate(
                |y| match inner(y, t2) {
                    Ok(v) => normal_log_pdf(y, center, sd * sd).exp() * v,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                },
                center - k * sd,
                center + k * sd,
                &kernel,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            v
        };
        total += 0.5 * h * wi * outer;
    }
    Ok(lambda * (-lambda * h).exp() * total)
}

/// `p⁰` inside the threshold ball (boundary included), `p¹` outside.
pub fn p_tilde(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, x: f64, h: f64, rule: &ThresholdRule, quad: &QuadSpec) -> Result<f64> {
    if (x - x_prev).abs() <= rule.threshold(h) {
        p0(model, alpha, x_prev, x, h, quad, PcMode::EulerGaussian)
    } else {
        p1(model, alpha, x_prev, x, h, quad)
    }
}

/// Integration windows for one transition: the continuous window around
/// the Euler mean and the window covering one jump.
#[derive(Debug, Clone, Copy)]
struct Windows {
    cont: (f64, f64),
    jump: (f64, f64),
}

fn windows(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, h: f64, quad: &QuadSpec) -> Windows {
    let (a, b) = coeffs(model, alpha, x_prev);
    let k = quad.truncation_sd;
    let center = x_prev + a * h;
    let sd = b * h.sqrt();
    let cont = (center - k * sd, center + k * sd);
    let (zlo, zhi) = model.jump_range(&alpha.theta, 1e-15).unwrap_or_else(|_| {
        let (lo, hi) = model.jump_support().bounds();
        (lo.max(-50.0), hi.min(50.0))
    });
    let b_lo = coeffs(model, alpha, x_prev + zlo).1;
    let b_hi = coeffs(model, alpha, x_prev + zhi).1;
    let spread = 1.25 * k * b.max(b_lo).max(b_hi) * h.sqrt() + a.abs() * h;
    let jump = (x_prev + zlo - spread, x_prev + zhi + spread);
    Windows { cont, jump }
}

/// Mass of `p̃` for one transition, split at `x_prev ± u_n`.
pub fn dj(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, h: f64, rule: &ThresholdRule, quad: &QuadSpec) -> Result<f64> {
    require_scalar(model)?;
    let u = rule.threshold(h);
    let w = windows(model, alpha, x_prev, h, quad);
    let (lo, hi) = (x_prev - u, x_prev + u);
    let cont = integrate(|x| p0(model, alpha, x_prev, x, h, quad, PcMode::EulerGaussian).unwrap_or(f64::NAN), lo.max(w.cont.0), hi.min(w.cont.1), quad)?;
    if model.intensity(&alpha.theta) == 0.0 {
        return Ok(cont);
    }
    Ok(cont + p1_mass_outside(model, alpha, x_prev, h, lo, hi, quad)?)
}

/// `∫ p¹(x_prev, x) dx` over `x ∉ [lo, hi]`. The `x` integral of the Euler
/// kernel is a Gaussian tail, leaving the same triple integral as `p¹`.
fn p1_mass_outside(model: &dyn JumpDiffusion, alpha: &ParamVector, x_prev: f64, h: f64, lo: f64, hi: f64, quad: &QuadSpec) -> Result<f64> {
    let lambda = model.intensity(&alpha.theta);
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (zlo, zhi) = model.jump_range(&alpha.theta, 1e-15)?;
    let k = quad.truncation_sd;
    let kernel = quad.kernel();
    let (a_start, b_start) = coeffs(model, alpha, x_prev);
    let jump_f = |z: f64| {
        let v = model.jump_log_density(&[z], &alpha.theta).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let outside = |w: f64, t2: f64| {
        let (a, b) = coeffs(model, alpha, w);
        let m = w + a * t2;
        let s = b * t2.sqrt();
        if s <= 0.0 {
            return if m < lo || m > hi { 1.0 } else { 0.0 };
        }
        normal_cdf((lo - m) / s) + normal_cdf((m - hi) / s)
    };
    // The Gaussian tail steps from 0 to 1 within a few kernel widths of lo and hi.
    let b_edge = coeffs(model, alpha, lo).1.max(coeffs(model, alpha, hi).1);
    let inner = |y: f64, t2: f64| {
        let zone = 1.25 * k * b_edge * t2.sqrt();
        let breaks = [lo - zone, lo, lo + zone, hi - zone, hi, hi + zone];
        integrate_pieces(|w| jump_f(w - y) * outside(w, t2), y + zlo, y + zhi, &breaks, &kernel)
    };
    let (nodes, weights) = gauss_legendre(quad.time_nodes);
    let mut total = 0.0;
    for (xi, wi) in nodes.iter().zip(&weights) {
        let t1 = 0.5 * h * (1.0 + xi);
        let t2 = h - t1;
        let sd = b_start * t1.sqrt();
        let center = x_prev + a_start * t1;
        let outer = if sd <= 1e-12 * center.abs().max(1.0) {
            inner(center, t2)?
        } else {
            integrate_result(|y| Ok(normal_log_pdf(y, center, sd * sd).exp() * inner(y, t2)?), center - k * sd, center + k * sd, &kernel)?
        };
        total += 0.5 * h * wi * outer;
    }
    Ok(lambda * (-lambda * h).exp() * total)
}

/// Integrates a fallible integrand, returning the first error it raised.
fn integrate_result<F: Fn(f64) -> Result<f64>>(f: F, a: f64, b: f64, quad: &QuadSpec) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mut err = None;
    let v = integrate(
        |x| match f(x) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        },
        a,
        b,
        quad,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Exact Merton transition density: a Poisson mixture of Gaussians,
/// truncated at the first `L` whose upper Poisson tail is below `tail`.
pub fn exact_merton_density(p: &MertonParams, x_prev: f64, x: f64, dt: f64, tail: f64) -> f64 {
    let mu = p.lambda * dt;
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut l = 0usize;
    loop {
        let lf = l as f64;
        let w = if mu > 0.0 {
            (-mu + lf * mu.ln() - ln_gamma(lf + 1.0)).exp()
        } else if l == 0 {
            1.0
        } else {
            0.0
        };
        let mean = x_prev + p.drift_level * dt + lf * p.jump_mean;
        let var = p.sigma * p.sigma * dt + lf * p.jump_sd * p.jump_sd;
        total += w * normal_log_pdf(x, mean, var).exp();
        mass += w;
        if 1.0 - mass < tail || l > 10_000 || (lf > mu && w == 0.0) {
            break;
        }
        l += 1;
    }
    total
}

/// One point of a (B1)-type series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Point {
    pub n: usize,
    pub step: f64,
    pub threshold: f64,
    /// Largest `∫|p - p̃|` over the starting-point grid.
    pub l1_gap: f64,
    pub scaled_gap: f64,
    /// Same with `p̃ / d_j` in place of `p̃`.
    pub l1_gap_normalized: f64,
    pub one_minus_dj: f64,
    /// Largest `p̃ - p` over the evaluation grids; negative when dominated.
    pub domination_excess: f64,
    /// `n^δ` bound on the starting points used.
    pub localization: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Series {
    pub points: Vec<L1Point>,
    /// Log–log slope of `scaled_gap` against `n`.
    pub slope: f64,
}

/// One point of a (B2)-type series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativePoint {
    pub n: usize,
    pub step: f64,
    pub order: usize,
    /// Largest `|∂_t^l D(t)|` over the stencil and starting points.
    pub max_derivative: f64,
    /// `n^{1/l}` times the above.
    pub scaled: f64,
    pub localization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSeries {
    pub points: Vec<DerivativePoint>,
    pub slope_first: f64,
    pub slope_second: f64,
}

/// Settings shared by both diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticPlan {
    pub n_schedule: Vec<usize>,
    pub c: f64,
    pub beta: f64,
    pub x_prev_grid: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Points in the domination probe per starting point.
    #[serde(default = "default_probe")]
    pub probe_points: usize,
}

fn default_delta() -> f64 {
    0.1
}

fn default_probe() -> usize {
    201
}

impl DiagnosticPlan {
    fn localized(&self, n: usize) -> (f64, Vec<f64>) {
        let bound = (n as f64).powf(self.delta);
        (bound, self.x_prev_grid.iter().copied().filter(|x| x.abs() <= bound).collect())
    }
}

fn l1_at(
    model: &dyn JumpDiffusion,
    alpha: &ParamVector,
    x_prev: f64,
    h: f64,
    rule: &ThresholdRule,
    quad: &QuadSpec,
    probe: usize,
) -> Result<(f64, f64, f64, f64)> {
    let exact = |x: f64| {
        model.exact_transition_density(x_prev, x, h, alpha).ok_or_else(|| Error::Unsupported("L1 diagnostic needs an exact transition density".into()))
    };
    exact(x_prev)?;
    let u = rule.threshold(h);
    let w = windows(model, alpha, x_prev, h, quad);
    let (lo, hi) = (w.cont.0.min(w.jump.0), w.cont.1.max(w.jump.1));
    let d = dj(model, alpha, x_prev, h, rule, quad)?;
    // |p - p̃| jumps at x_prev ± u, so each side gets its own fixed rule and
    // the node values serve both the raw and the normalized gap.
    let (gl_x, gl_w) = gauss_legendre(quad.fixed_nodes);
    let cuts = [lo, (x_prev - u).max(lo), (x_prev + u).min(hi), hi];
    let mut nodes = Vec::new();
    for piece in cuts.windows(2) {
        let (a, b) = (piece[0], piece[1]);
        if b <= a {
            continue;
        }
        let width = (b - a) / quad.fixed_panels as f64;
        for panel in 0..quad.fixed_panels {
            let left = a + panel as f64 * width;
            for (t, wt) in gl_x.iter().zip(&gl_w) {
                nodes.push((left + 0.5 * width * (1.0 + t), 0.5 * width * wt));
            }
        }
    }
    let values: Vec<(f64, f64, f64)> =
        nodes.par_iter().map(|&(x, wt)| Ok((wt, exact(x)?, p_tilde(model, alpha, x_prev, x, h, rule, quad)?))).collect::<Result<_>>()?;
    let raw: f64 = values.iter().map(|(w, p, pt)| w * (p - pt).abs()).sum();
    let normalized: f64 = values.iter().map(|(w, p, pt)| w * (p - pt / d).abs()).sum();
    let mut excess = f64::NEG_INFINITY;
    for i in 0..probe {
        let x = lo + (hi - lo) * i as f64 / (probe - 1).max(1) as f64;
        excess = excess.max(p_tilde(model, alpha, x_prev, x, h, rule, quad)? - exact(x)?);
    }
    Ok((raw, normalized, 1.0 - d, excess))
}

/// `n · max_x ∫|p - p̃|` over the schedule, using the model's exact density.
pub fn diagnose_b1(model: &dyn JumpDiffusion, alpha: &ParamVector, plan: &DiagnosticPlan, rule: &ThresholdRule, quad: &QuadSpec) -> Result<L1Series> {
    require_scalar(model)?;
    let mut points = Vec::with_capacity(plan.n_schedule.len());
    for &n in &plan.n_schedule {
        let sched = RateSchedule::power_law(n, plan.c, plan.beta)?;
        let (bound, grid) = plan.localized(n);
        let rows: Vec<(f64, f64, f64, f64)> =
            grid.par_iter().map(|&x| l1_at(model, alpha, x, sched.step, rule, quad, plan.probe_points)).collect::<Result<_>>()?;
        let max = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let l1 = max(|r| r.0);
        points.push(L1Point {
            n,
            step: sched.step,
            threshold: rule.threshold(sched.step),
            l1_gap: l1,
            scaled_gap: n as f64 * l1,
            l1_gap_normalized: max(|r| r.1),
            one_minus_dj: max(|r| r.2),
            domination_excess: max(|r| r.3),
            localization: bound,
            grid_points: rows.len(),
        });
    }
    let slope = log_slope(points.iter().map(|p| (p.n as f64, p.scaled_gap)));
    Ok(L1Series { points, slope })
}

fn log_slope(pts: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = pts.filter(|p| p.1 > 0.0).map(|(a, b)| (a.ln(), b.ln())).unzip();
    if x.len() < 2 {
        return f64::NAN;
    }
    ols_slope(&x, &y)
}

const STENCIL: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Derivative weights of the quartic interpolant through the stencil,
/// evaluated at stencil node `at`.
fn lagrange_derivative_weights(at: usize, order: usize) -> [f64; 5] {
    // Differentiate the Lagrange basis numerically exact via polynomial coefficients.
    let mut out = [0.0; 5];
    let t = STENCIL[at];
    for (k, w) in out.iter_mut().enumerate() {
        // Basis polynomial coefficients, lowest degree first.
        let mut coef = vec![1.0];
        let mut denom = 1.0;
        for (i, &ti) in STENCIL.iter().enumerate() {
            if i == k {
                continue;
            }
            denom *= STENCIL[k] - ti;
            let mut next = vec![0.0; coef.len() + 1];
            for (p, c) in coef.iter().enumerate() {
                next[p + 1] += c;
                next[p] -= c * ti;
            }
            coef = next;
        }
        let mut v = 0.0;
        for (p, c) in coef.iter().enumerate().skip(order) {
            let falling: f64 = (0..order).map(|q| (p - q) as f64).product();
            v += c * falling * t.powi((p - order) as i32);
        }
        *w = v / denom;
    }
    out
}

/// `D(t) = d_j(α₀ + t ε_n h)` on a five-point stencil, reporting
/// `n^{1/l} max |∂_t^l D|` for `l = 1, 2`.
pub fn diagnose_b2(
    model: &dyn JumpDiffusion,
    alpha0: &ParamVector,
    direction: &[f64],
    plan: &DiagnosticPlan,
    rule: &ThresholdRule,
    quad: &QuadSpec,
) -> Result<DerivativeSeries> {
    require_scalar(model)?;
    let d1 = alpha0.d1();
    if direction.len() != alpha0.dim() {
        return Err(Error::Dimension { expected: alpha0.dim(), got: direction.len(), context: "direction" });
    }
    let base = alpha0.to_vec();
    let mut points = Vec::new();
    for &n in &plan.n_schedule {
        let sched = RateSchedule::power_law(n, plan.c, plan.beta)?;
        let eps = sched.epsilon(d1, alpha0.d2());
        let (bound, grid) = plan.localized(n);
        let jobs: Vec<(f64, usize)> = grid.iter().flat_map(|&x| (0..5).map(move |s| (x, s))).collect();
        let values: Vec<f64> = jobs
            .par_iter()
            .map(|&(x, s)| {
                let a: Vec<f64> = (0..base.len()).map(|i| base[i] + STENCIL[s] * eps[i] * direction[i]).collect();
                dj(model, &ParamVector::from_slice(d1, &a), x, sched.step, rule, quad)
            })
            .collect::<Result<_>>()?;
        for order in [1usize, 2] {
            let mut worst = 0.0f64;
            for g in 0..grid.len() {
                let dvals = &values[5 * g..5 * g + 5];
                for at in 0..5 {
                    let w = lagrange_derivative_weights(at, order);
                    let deriv: f64 = w.iter().zip(dvals).map(|(a, b)| a * b).sum();
                    worst = worst.max(deriv.abs());
                }
            }
            points.push(DerivativePoint {
                n,
                step: sched.step,
                order,
                max_derivative: worst,
                scaled: (n as f64).powf(1.0 / order as f64) * worst,
                localization: bound,
            });
        }
    }
    let slope = |order: usize| log_slope(points.iter().filter(|p| p.order == order).map(|p| (p.n as f64, p.scaled)));
    Ok(DerivativeSeries { slope_first: slope(1), slope_second: slope(2), points })
}

/// Writes rows `n, h_n, metric, value`.
pub fn write_diagnostics_csv(out: impl Write, l1: Option<&L1Series>, derivs: &[(&str, &DerivativeSeries)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["n", "h_n", "metric", "value"]).map_err(err)?;
    let mut row = |n: usize, h: f64, metric: &str, v: f64| w.write_record([n.to_string(), format!("{h:e}"), metric.to_string(), format!("{v:e}")]);
    if let Some(s) = l1 {
        for p in &s.points {
            row(p.n, p.step, "l1_gap", p.l1_gap).map_err(err)?;
            row(p.n, p.step, "n_l1_gap", p.scaled_gap).map_err(err)?;
            row(p.n, p.step, "l1_gap_normalized", p.l1_gap_normalized).map_err(err)?;
            row(p.n, p.step, "one_minus_dj", p.one_minus_dj).map_err(err)?;
            row(p.n, p.step, "domination_excess", p.domination_excess).map_err(err)?;
            row(p.n, p.step, "localization", p.localization).map_err(err)?;
        }
    }
    for (label, s) in derivs {
        for p in &s.points {
            row(p.n, p.step, &format!("{label}_d{}", p.order), p.max_derivative).map_err(err)?;
            row(p.n, p.step, &format!("{label}_scaled_d{}", p.order), p.scaled).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_merton, builtin_ou_jump, ModelSpec};

    fn merton(lambda: f64) -> (ModelSpec, ParamVector) {
        let m = builtin_merton(0.0, 1.0, lambda, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        (m, a)
    }

    #[test]
    fn gaussian_peak_and_discount() {
        let q = QuadSpec::default();
        let (m, a) = merton(0.0);
        let v = p0(&m, &a, 0.0, 0.0, 0.01, &q, PcMode::EulerGaussian).unwrap();
        assert!((v - 3.989_422_804_014_327).abs() < 1e-12);
        let (m, a) = merton(10.0);
        let v = p0(&m, &a, 0.0, 0.0, 0.01, &q, PcMode::EulerGaussian).unwrap();
        assert!((v - 3.989_422_804_014_327 * (-0.1f64).exp()).abs() < 1e-12);
        assert!((v - 3.609_779_029_438_101).abs() < 1e-12);
    }

    #[test]
    fn exact_mode_uses_the_continuous_density() {
        let q = QuadSpec::default();
        let g = crate::model::builtin_gamma_jump(1.0, 1.0, 1.0, 1.0, 2.0).unwrap();
        let o = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let vg = p0(&g, &g.nominal_alpha(), 0.0, 0.2, 0.01, &q, PcMode::Exact).unwrap();
        let vo = p0(&o, &o.nominal_alpha(), 0.0, 0.2, 0.01, &q, PcMode::Exact).unwrap();
        assert!((vg - vo).abs() < 1e-14);
    }

    #[test]
    fn chapman_kolmogorov_constant_coefficients() {
        let q = QuadSpec::default();
        let m = builtin_merton(0.7, 1.3, 1.0, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        let h = 0.02;
        for levels in [1, 2, 4, 8] {
            let mut gap = 0.0f64;
            for i in 0..41 {
                let x = -0.6 + 0.03 * i as f64;
                let ck = pc(&m, &a, 0.0, x, h, &q, PcMode::ChapmanKolmogorov { levels }).unwrap();
                let ex = pc(&m, &a, 0.0, x, h, &q, PcMode::Exact).unwrap();
                gap = gap.max((ck - ex).abs());
            }
            assert!(gap < 1e-6, "levels {levels}: {gap}");
        }
    }

    #[test]
    fn chapman_kolmogorov_converges_for_mean_reversion() {
        let q = QuadSpec::default();
        let m = builtin_ou_jump(4.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        let h = 0.2;
        let gap = |levels| {
            (0..41)
                .map(|i| {
                    let x = 0.5 - 1.5 + 0.075 * i as f64;
                    let ck = pc(&m, &a, 1.0, x, h, &q, PcMode::ChapmanKolmogorov { levels }).unwrap();
                    (ck - pc(&m, &a, 1.0, x, h, &q, PcMode::Exact).unwrap()).abs()
                })
                .fold(0.0f64, f64::max)
        };
        let g: Vec<f64> = [1, 2, 4, 8].iter().map(|&k| gap(k)).collect();
        for w in g.windows(2) {
            assert!(w[1] < 0.6 * w[0], "{g:?}");
        }
    }

    #[test]
    fn one_jump_component_matches_merton_mixture() {
        let q = QuadSpec::default();
        let m = builtin_merton(0.3, 1.0, 2.0, 0.2, 0.5).unwrap();
        let a = m.nominal_alpha();
        let h = 0.01;
        let lh = 2.0 * h;
        for &x in &[0.4, -0.7, 1.1] {
            let v = p1(&m, &a, 0.1, x, h, &q).unwrap();
            let oracle = (-lh).exp() * lh * normal_log_pdf(x, 0.1 + 0.3 * h + 0.2, h + 0.25).exp();
            assert!((v / oracle - 1.0).abs() < 1e-3, "{v} vs {oracle}");
        }
        let (m0, a0) = merton(0.0);
        assert_eq!(p1(&m0, &a0, 0.0, 0.5, h, &q).unwrap(), 0.0);
    }

    #[test]
    fn one_jump_small_step_limit() {
        let q = QuadSpec::default();
        let m = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let a = m.nominal_alpha();
        let dx: f64 = 0.8;
        let gaps: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&h| {
                let v = p1(&m, &a, 0.0, dx, h, &q).unwrap();
                let lead = h * (-h).exp() * normal_log_pdf(dx, 0.0, 0.25).exp();
                (v / lead - 1.0).abs()
            })
            .collect();
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
        assert!(gaps[2] < 1e-3);
    }

    #[test]
    fn normalizer_without_jumps() {
        let q = QuadSpec::default();
        let (m, a) = merton(0.0);
        let rule = ThresholdRule { rho: 0.3, scale: 1.0 };
        let d = dj(&m, &a, 0.0, 0.01, &rule, &q).unwrap();
        let u = 0.01f64.powf(0.3);
        let oracle = 2.0 * normal_cdf(u / 0.1) - 1.0;
        assert!((d - oracle).abs() < 1e-10);
        assert!((d - 0.988).abs() < 1e-4);
        let wide = ThresholdRule { rho: 0.3, scale: 1e3 };
        assert!((dj(&m, &a, 0.0, 0.01, &wide, &q).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn merton_mixture_normalizes() {
        let (m, _) = merton(10.0);
        let ModelSpec::Merton(p) = m else { unreachable!() };
        let q = QuadSpec::default();
        let v = integrate(|x| exact_merton_density(&p, 0.0, x, 0.01, 1e-14), -6.0, 6.0, &q).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let lead = (-0.1f64).exp();
        assert!((lead - 0.904_837).abs() < 1e-6);
    }

    #[test]
    fn lagrange_weights_differentiate_polynomials() {
        let f = |t: f64| 1.0 + 2.0 * t - t * t + 0.5 * t.powi(4);
        let df = |t: f64| 2.0 - 2.0 * t + 2.0 * t.powi(3);
        let d2f = |t: f64| -2.0 + 6.0 * t * t;
        let vals: Vec<f64> = STENCIL.iter().map(|&t| f(t)).collect();
        for at in 0..5 {
            let d1: f64 = lagrange_derivative_weights(at, 1).iter().zip(&vals).map(|(a, b)| a * b).sum();
            let d2: f64 = lagrange_derivative_weights(at, 2).iter().zip(&vals).map(|(a, b)| a * b).sum();
            assert!((d1 - df(STENCIL[at])).abs() < 1e-10);
            assert!((d2 - d2f(STENCIL[at])).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_direction_gives_zero_derivatives() {
        let (m, a) = merton(1.0);
        let plan = DiagnosticPlan { n_schedule: vec![250], c: 0.4, beta: 0.75, x_prev_grid: vec![0.0], delta: 0.1, probe_points: 11 };
        let s = diagnose_b2(&m, &a, &[0.0, 0.0, 0.0], &plan, &ThresholdRule::default(), &QuadSpec::fixed()).unwrap();
        assert!(s.points.iter().all(|p| p.max_derivative < 1e-12), "{:?}", s.points);
    }
}
