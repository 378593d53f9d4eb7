//! One-dimensional quadrature: globally adaptive Simpson and Gauss–Legendre.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadMethod {
    AdaptiveSimpson,
    /// Composite Gauss–Legendre on equal panels. The node set does not move
    /// with the integrand, so results vary smoothly with parameters.
    FixedGaussLegendre,
}

/// Quadrature settings shared by the density computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadSpec {
    pub method: QuadMethod,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Half-width of truncated Gaussian domains, in standard deviations.
    pub truncation_sd: f64,
    /// Maximum number of panels before giving up.
    pub max_subdivisions: usize,
    /// Gauss–Legendre nodes for integrals over the jump time.
    pub time_nodes: usize,
    /// Panels and nodes per panel of the fixed rule.
    pub fixed_panels: usize,
    pub fixed_nodes: usize,
    /// Panels per piece for the Gaussian-kernel integrals inside `p¹`.
    pub kernel_panels: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec {
            method: QuadMethod::AdaptiveSimpson,
            abs_tol: 1e-11,
            rel_tol: 1e-10,
            truncation_sd: 12.0,
            max_subdivisions: 4000,
            time_nodes: 8,
            fixed_panels: 24,
            fixed_nodes: 16,
            kernel_panels: 8,
        }
    }
}

impl QuadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::invalid("quad", "tolerances must be positive"));
        }
        // 12 sd leaves ~2e-33 of Gaussian mass outside; 7.1 sd is the floor for 1e-12.
        if self.truncation_sd < 7.1 {
            return Err(Error::invalid("truncation_sd", "must cover 1 - 1e-12 of Gaussian mass"));
        }
        if self.max_subdivisions < 2 || self.time_nodes == 0 || self.fixed_panels == 0 || self.fixed_nodes == 0 || self.kernel_panels == 0 {
            return Err(Error::invalid("quad", "need at least two panels and one time node"));
        }
        Ok(())
    }

    pub fn fixed() -> QuadSpec {
        QuadSpec { method: QuadMethod::FixedGaussLegendre, ..QuadSpec::default() }
    }

    /// Fixed rule for integrals of a Gaussian kernel over a window of
    /// `±truncation_sd` standard deviations, split at the jump-support edges.
    pub(crate) fn kernel(&self) -> QuadSpec {
        QuadSpec { method: QuadMethod::FixedGaussLegendre, fixed_panels: self.kernel_panels, ..*self }
    }
}

/// A panel carrying five equally spaced samples; its estimate is the
/// Richardson-extrapolated composite Simpson rule.
#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    f: [f64; 5],
    value: f64,
    error: f64,
}

impl Panel {
    fn new(a: f64, b: f64, f: [f64; 5]) -> Panel {
        let h = b - a;
        let whole = h / 6.0 * (f[0] + 4.0 * f[2] + f[4]);
        let halves = h / 12.0 * (f[0] + 4.0 * f[1] + 2.0 * f[2] + 4.0 * f[3] + f[4]);
        let delta = halves - whole;
        Panel { a, b, f, value: halves + delta / 15.0, error: delta.abs() / 15.0 }
    }

    fn split<F: FnMut(f64) -> f64>(&self, f: &mut F) -> (Panel, Panel) {
        let q = (self.b - self.a) / 8.0;
        let m = 0.5 * (self.a + self.b);
        let l1 = f(self.a + q);
        let l3 = f(self.a + 3.0 * q);
        let r1 = f(m + q);
        let r3 = f(m + 3.0 * q);
        let v = self.f;
        (Panel::new(self.a, m, [v[0], l1, v[1], l3, v[2]]), Panel::new(m, self.b, [v[2], r1, v[3], r3, v[4]]))
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Simpson quadrature of `f` over `[a, b]`.
///
/// The panel with the largest error estimate is bisected until the summed
/// estimate meets `max(abs_tol, rel_tol * |I|)`.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, spec: &QuadSpec) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    const START: usize = 8;
    let width = (b - a) / START as f64;
    let mut heap = BinaryHeap::with_capacity(2 * START);
    let mut left = f(a);
    for k in 0..START {
        let pa = a + k as f64 * width;
        let pb = if k + 1 == START { b } else { pa + width };
        let q = (pb - pa) / 4.0;
        let right = f(pb);
        let samples = [left, f(pa + q), f(pa + 2.0 * q), f(pa + 3.0 * q), right];
        heap.push(Panel::new(pa, pb, samples));
        left = right;
    }
    let mut total: f64 = heap.iter().map(|p| p.value).sum();
    let mut err: f64 = heap.iter().map(|p| p.error).sum();
    loop {
        if !total.is_finite() {
            return Err(Error::Quadrature { achieved: f64::INFINITY, tolerance: spec.abs_tol });
        }
        let tol = spec.abs_tol.max(spec.rel_tol * total.abs());
        if err <= tol {
            break;
        }
        if heap.len() >= spec.max_subdivisions {
            // Nested quadrature noise routinely sits just above the nominal
            // target; accept within two orders of magnitude.
            if err <= 100.0 * tol {
                break;
            }
            return Err(Error::Quadrature { achieved: err, tolerance: tol });
        }
        let worst = heap.pop().expect("non-empty heap");
        let (l, r) = worst.split(&mut f);
        total += l.value + r.value - worst.value;
        err += l.error + r.error - worst.error;
        heap.push(l);
        heap.push(r);
    }
    // Resum in a fixed order to shed the running-update drift.
    let mut panels = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    Ok(panels.iter().map(|p| p.value).sum())
}

/// Integrate over `[a, b]` split at the interior `breaks` (ignored when
/// outside the interval). Pieces stop one ulp short of each break.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, breaks: &[f64], spec: &QuadSpec) -> Result<f64> {
    let mut points = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(|x, y| x.total_cmp(y));
    points.extend(inner);
    points.push(b);
    let last = points.len() - 2;
    let mut total = 0.0;
    for (k, w) in points.windows(2).enumerate() {
        // Keep each piece off the breakpoints so one-sided limits are sampled.
        let lo = if k > 0 { w[0].next_up() } else { w[0] };
        let hi = if k < last { w[1].next_down() } else { w[1] };
        total += integrate(&mut f, lo, hi, spec)?;
    }
    Ok(total)
}

/// Integrate over `[a, b]` with the method selected in `spec`.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadSpec) -> Result<f64> {
    match spec.method {
        QuadMethod::AdaptiveSimpson => adaptive_simpson(f, a, b, spec),
        QuadMethod::FixedGaussLegendre => Ok(composite_gauss_legendre(f, a, b, spec.fixed_panels, spec.fixed_nodes)),
    }
}

pub fn composite_gauss_legendre<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize, nodes: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (x, w) = gauss_legendre(nodes);
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(mid + 0.5 * width * xi);
        }
        total += 0.5 * width * s;
    }
    total
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_gaussian() {
        let spec = QuadSpec::default();
        let v = adaptive_simpson(|x| crate::stats::normal_pdf(x), -12.0, 12.0, &spec).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "{v}");
    }

    #[test]
    fn simpson_handles_narrow_peak() {
        let spec = QuadSpec::default();
        let sd = 1e-3;
        let v = adaptive_simpson(|x| crate::stats::normal_pdf((x - 0.3) / sd) / sd, 0.3 - 12.0 * sd, 0.3 + 12.0 * sd, &spec).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pieces_handle_a_jump_discontinuity() {
        let spec = QuadSpec::default();
        let v = integrate_pieces(|x| if x < 0.25 { 1.0 } else { 3.0 }, 0.0, 1.0, &[0.25], &spec).unwrap();
        assert!((v - 2.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn fixed_rule_integrates_gaussian() {
        let v = integrate(crate::stats::normal_pdf, -12.0, 12.0, &QuadSpec::fixed()).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in 1..=10 {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            // degree 2n - 1 exactness
            let deg = 2 * n - 2;
            let approx: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
            let exact = 2.0 / (deg as f64 + 1.0);
            assert!((approx - exact).abs() < 1e-12, "n={n}");
        }
    }
}
