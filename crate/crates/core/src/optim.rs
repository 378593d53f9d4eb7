//! Maximization of smooth objectives: BFGS with backtracking on
//! log-transformed positive coordinates, and a Nelder–Mead fallback.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Bound on `‖s ∘ ∇f‖_∞` with `s` the coordinate scales.
    pub grad_tol: f64,
    /// Bound on the standardized step `‖Δx / s‖_∞`.
    pub step_tol: f64,
    /// Failed line searches tolerated before switching to Nelder–Mead.
    pub max_failed_line_searches: usize,
    pub simplex_max_evals: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iter: 200, grad_tol: 1e-6, step_tol: 1e-8, max_failed_line_searches: 3, simplex_max_evals: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `‖s ∘ ∇f‖_∞` at `x`.
    pub grad_norm: f64,
    pub used_simplex: bool,
    pub trace: Vec<TraceEntry>,
}

/// An objective to maximize. Evaluation errors count as `-∞`.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Whether `x` is admissible; inadmissible points are rejected by line searches.
    fn admissible(&self, _x: &[f64]) -> bool {
        true
    }
}

/// Coordinates `u` seen by the optimizer: `x = exp(u)` where `positive`,
/// `x = u` elsewhere, further divided by `scale`.
struct Transform<'a> {
    positive: &'a [bool],
    scale: &'a [f64],
}

impl Transform<'_> {
    fn to_x(&self, u: &[f64]) -> Vec<f64> {
        u.iter().enumerate().map(|(i, &v)| if self.positive[i] { v.exp() } else { v * self.scale[i] }).collect()
    }

    fn to_u(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| if self.positive[i] { v.ln() } else { v / self.scale[i] }).collect()
    }

    /// `dx/du` per coordinate.
    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| if self.positive[i] { v } else { self.scale[i] }).collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn scaled_grad(g: &[f64], scale: &[f64]) -> f64 {
    inf_norm(&g.iter().zip(scale).map(|(a, b)| a * b).collect::<Vec<_>>())
}

fn safe_value(obj: &dyn Objective, x: &[f64]) -> f64 {
    if !obj.admissible(x) {
        return f64::NEG_INFINITY;
    }
    match obj.value(x) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// Maximizes `obj` from `x0`. `scale` gives the natural size of each
/// coordinate (its standard error scale); `positive` marks coordinates
/// optimized on the log scale.
pub fn maximize(obj: &dyn Objective, x0: &[f64], scale: &[f64], positive: &[bool], opts: &OptimOptions) -> Result<OptimOutcome> {
    let d = x0.len();
    let tr = Transform { positive, scale };
    let mut x = x0.to_vec();
    let mut u = tr.to_u(&x);
    let mut f = obj.value(&x)?;
    let mut gx = obj.gradient(&x)?;
    let mut trace = Vec::new();
    let grad_u = |gx: &[f64], x: &[f64]| -> Vec<f64> { gx.iter().zip(tr.jacobian(x)).map(|(g, j)| g * j).collect() };
    // Inverse Hessian of -f in u, started at the scale-free guess diag((s/j)²).
    let init_h = |x: &[f64]| -> Vec<f64> {
        let j = tr.jacobian(x);
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            let r = scale[i] / j[i];
            h[i * d + i] = r * r;
        }
        h
    };
    let mut hinv = init_h(&x);
    let mut gu = grad_u(&gx, &x);
    let mut failures = 0;
    let mut iterations = 0;
    let mut gnorm = scaled_grad(&gx, scale);
    trace.push(TraceEntry { iteration: 0, value: f, grad_norm: gnorm, step_norm: 0.0, method: "start".into() });
    while gnorm >= opts.grad_tol && iterations < opts.max_iter {
        iterations += 1;
        // Ascent direction p = H ∇_u f.
        let mut p: Vec<f64> = (0..d).map(|i| (0..d).map(|k| hinv[i * d + k] * gu[k]).sum()).collect();
        let mut slope: f64 = p.iter().zip(&gu).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            hinv = init_h(&x);
            p = (0..d).map(|i| hinv[i * d + i] * gu[i]).collect();
            slope = p.iter().zip(&gu).map(|(a, b)| a * b).sum();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let un: Vec<f64> = (0..d).map(|i| u[i] + t * p[i]).collect();
            let xn = tr.to_x(&un);
            let fnew = safe_value(obj, &xn);
            if fnew >= f + 1e-4 * t * slope {
                accepted = Some((un, xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((un, xn, fnew)) = accepted else {
            failures += 1;
            hinv = init_h(&x);
            trace.push(TraceEntry { iteration: iterations, value: f, grad_norm: gnorm, step_norm: 0.0, method: "line_search_failed".into() });
            if failures >= opts.max_failed_line_searches {
                break;
            }
            continue;
        };
        let gnew = obj.gradient(&xn)?;
        let gun = grad_u(&gnew, &xn);
        let step_norm = (0..d).map(|i| ((xn[i] - x[i]) / scale[i]).abs()).fold(0.0, f64::max);
        // BFGS update for the minimization of -f: s = Δu, y = -(Δ∇f).
        let s: Vec<f64> = (0..d).map(|i| un[i] - u[i]).collect();
        let y: Vec<f64> = (0..d).map(|i| gu[i] - gun[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * inf_norm(&s) * inf_norm(&y) && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..d).map(|i| (0..d).map(|k| hinv[i * d + k] * y[k]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..d {
                for k in 0..d {
                    hinv[i * d + k] += -rho * (hy[i] * s[k] + s[i] * hy[k]) + (rho * rho * yhy + rho) * s[i] * s[k];
                }
            }
        }
        u = un;
        x = xn;
        f = fnew;
        gx = gnew;
        gu = gun;
        gnorm = scaled_grad(&gx, scale);
        trace.push(TraceEntry { iteration: iterations, value: f, grad_norm: gnorm, step_norm, method: "bfgs".into() });
        if step_norm < opts.step_tol {
            break;
        }
    }
    let mut used_simplex = false;
    if gnorm >= opts.grad_tol && failures >= opts.max_failed_line_searches {
        used_simplex = true;
        let (ubest, fbest, evals) = nelder_mead(|v| safe_value(obj, &tr.to_x(v)), &u, opts.simplex_max_evals);
        if fbest > f {
            u = ubest;
            x = tr.to_x(&u);
            f = fbest;
            gx = obj.gradient(&x)?;
            gnorm = scaled_grad(&gx, scale);
        }
        iterations += 1;
        trace.push(TraceEntry { iteration: iterations, value: f, grad_norm: gnorm, step_norm: evals as f64, method: "nelder_mead".into() });
    }
    Ok(OptimOutcome { x, value: f, converged: gnorm < opts.grad_tol, iterations, grad_norm: gnorm, used_simplex, trace })
}

/// Nelder–Mead maximization with unit initial edges. Returns the best
/// vertex, its value and the number of evaluations.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, start: &[f64], max_evals: usize) -> (Vec<f64>, f64, usize) {
    let d = start.len();
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += 1.0;
        pts.push(p);
    }
    // Minimize g = -f.
    let g = |p: &[f64]| -f(p);
    let mut vals: Vec<f64> = pts.iter().map(|p| g(p)).collect();
    let mut evals = d + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = (vals[d] - vals[0]).abs();
        let size = pts.iter().skip(1).map(|p| inf_norm(&p.iter().zip(&pts[0]).map(|(a, b)| a - b).collect::<Vec<_>>())).fold(0.0, f64::max);
        if spread <= 1e-12 * (1.0 + vals[0].abs()) && size < 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|k| pts[..d].iter().map(|p| p[k]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|k| centroid[k] + t * (pts[d][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = g(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = g(&xe);
            evals += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let xc = along(-0.5);
                let fc = g(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = g(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    pts[i] = (0..d).map(|k| pts[0][k] + 0.5 * (pts[i][k] - pts[0][k])).collect();
                    vals[i] = g(&pts[i]);
                }
                evals += d;
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (pts[best].clone(), -vals[best], evals)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
        a: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self, x: &[f64]) -> Result<f64> {
            let d = x.len();
            let mut v = 0.0;
            for i in 0..d {
                for k in 0..d {
                    v -= 0.5 * (x[i] - self.center[i]) * self.a[i * d + k] * (x[k] - self.center[k]);
                }
            }
            Ok(v)
        }

        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            let d = x.len();
            Ok((0..d).map(|i| -(0..d).map(|k| self.a[i * d + k] * (x[k] - self.center[k])).sum::<f64>()).collect())
        }
    }

    #[test]
    fn quadratic_from_the_maximizer_stops_immediately() {
        let q = Quadratic { center: vec![1.0, -2.0], a: vec![4.0, 1.0, 1.0, 3.0] };
        let out = maximize(&q, &[1.0, -2.0], &[0.5, 0.5], &[false, false], &OptimOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn bfgs_finds_quadratic_maximizer() {
        let q = Quadratic { center: vec![1.0, -2.0, 0.3], a: vec![4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0] };
        let out = maximize(&q, &[0.0, 0.0, 0.0], &[1.0; 3], &[false; 3], &OptimOptions::default()).unwrap();
        assert!(out.converged, "{out:?}");
        for (a, b) in out.x.iter().zip(&q.center) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_coordinates_stay_positive() {
        let q = Quadratic { center: vec![0.05, 2.0], a: vec![100.0, 0.0, 0.0, 1.0] };
        let out = maximize(&q, &[3.0, 0.0], &[0.1, 1.0], &[true, false], &OptimOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 0.05).abs() < 1e-7);
    }

    #[test]
    fn simplex_on_rosenbrock() {
        let f = |p: &[f64]| -((1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2));
        let (x, v, _) = nelder_mead(f, &[-1.2, 1.0], 10_000);
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4, "{x:?} {v}");
    }
}
