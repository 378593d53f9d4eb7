use jdlan::inference::{fisher_gamma_closed_form, fisher_gamma_plugin, fit_bayes, fit_qmle, BayesGrid, FisherSource, FitOptions, Prior};
use jdlan::model::{builtin_merton, builtin_ou_jump, JumpDiffusion, ModelSpec, ParamSpace, ParamVector, RateSchedule};
use jdlan::optim::{maximize, Objective, OptimOptions};
use jdlan::quad::QuadSpec;
use jdlan::quasi_lik::{Contrast, ThresholdRule};
use jdlan::sim::{simulate_path, Path, SimConfig};
use jdlan::stats::{mean, normal_cdf, ols_slope, variance};
use jdlan::Result;
use rand::RngCore;

fn ou() -> ModelSpec {
    builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap()
}

fn path(model: &ModelSpec, n: usize, step: f64, seed: u64, stream: u64) -> Path {
    let mut cfg = SimConfig::new(n, step, seed);
    cfg.burn_in = true;
    cfg.stream_index = stream;
    simulate_path(model, &model.nominal_alpha(), &cfg).unwrap()
}

fn schedule_path(model: &ModelSpec, n: usize, seed: u64, stream: u64) -> Path {
    path(model, n, RateSchedule::power_law(n, 0.4, 0.75).unwrap().step, seed, stream)
}

/// OU-jump with `σ = 2σ′`.
struct HalfSigma {
    inner: ModelSpec,
    space: ParamSpace,
}

impl HalfSigma {
    fn new(inner: ModelSpec) -> HalfSigma {
        let s = inner.param_space();
        let mut lower = s.lower.clone();
        let mut upper = s.upper.clone();
        lower[0] /= 2.0;
        upper[0] /= 2.0;
        let space = ParamSpace::new(lower, upper, s.positive.clone()).unwrap();
        HalfSigma { inner, space }
    }
}

impl JumpDiffusion for HalfSigma {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn sigma_dim(&self) -> usize {
        self.inner.sigma_dim()
    }
    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }
    fn param_space(&self) -> &ParamSpace {
        &self.space
    }
    fn drift(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.drift(x, theta, out)
    }
    fn diffusion(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
        self.inner.diffusion(x, &[2.0 * sigma[0]], out)
    }
    fn intensity(&self, theta: &[f64]) -> f64 {
        self.inner.intensity(theta)
    }
    fn jump_log_density(&self, z: &[f64], theta: &[f64]) -> f64 {
        self.inner.jump_log_density(z, theta)
    }
    fn sample_jump(&self, theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) {
        self.inner.sample_jump(theta, rng, out)
    }
    fn gamma_exponent(&self) -> f64 {
        self.inner.gamma_exponent()
    }
}

#[test]
fn qmle_is_equivariant_under_sigma_rescaling() {
    let model = ou();
    let p = schedule_path(&model, 2000, 3, 0);
    let rule = ThresholdRule::default();
    let fit = fit_qmle(&model, &p, &rule, &ParamVector::new(vec![0.8], vec![1.3, 0.1]).unwrap(), &FitOptions::default()).unwrap();
    let half = HalfSigma::new(model);
    let fit2 = fit_qmle(&half, &p, &rule, &ParamVector::new(vec![0.4], vec![1.3, 0.1]).unwrap(), &FitOptions::default()).unwrap();
    assert!(fit.converged && fit2.converged);
    let (a, b) = (fit.alpha_hat.to_vec(), fit2.alpha_hat.to_vec());
    assert!((a[0] - 2.0 * b[0]).abs() <= 1e-4 * fit.epsilon[0], "{a:?} vs {b:?}");
    for i in 1..3 {
        assert!((a[i] - b[i]).abs() <= 1e-4 * fit.epsilon[i], "{a:?} vs {b:?}");
    }
}

struct Shifted<'a> {
    contrast: &'a Contrast<'a>,
    shift: f64,
}

impl Objective for Shifted<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.contrast.value(x)?.total + self.shift)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.contrast.score(x)
    }
    fn admissible(&self, x: &[f64]) -> bool {
        self.contrast.model().param_space().contains(x)
    }
}

#[test]
fn constant_shift_keeps_the_maximizer() {
    let model = ou();
    let p = schedule_path(&model, 1000, 5, 0);
    let contrast = Contrast::new(&model, &p, &ThresholdRule::default()).unwrap();
    let eps = contrast.epsilon();
    let start = [0.9, 1.2, 0.05];
    let positive = [true, true, false];
    let run = |shift: f64| maximize(&Shifted { contrast: &contrast, shift }, &start, &eps, &positive, &OptimOptions::default()).unwrap();
    let a = run(0.0);
    let b = run(0.37 * p.n() as f64);
    assert!(a.converged && b.converged);
    for i in 0..3 {
        assert!((a.x[i] - b.x[i]).abs() <= 1e-4 * eps[i], "{:?} vs {:?}", a.x, b.x);
    }
}

#[test]
fn converged_fits_are_interior_stationary_points() {
    let model = ou();
    let opts = FitOptions::default();
    for stream in 0..10 {
        let p = schedule_path(&model, 1000, 17, stream);
        let fit = fit_qmle(&model, &p, &ThresholdRule::default(), &model.nominal_alpha(), &opts).unwrap();
        if fit.converged {
            assert!(fit.grad_norm < opts.optim.grad_tol);
            assert!(!fit.near_boundary);
            assert!(model.param_space().contains(&fit.alpha_hat.to_vec()));
        }
    }
}

// The jump-mean SE follows the number of detected jumps, so only σ and the drift
// coordinate are held to the square-root clocks.
#[test]
fn standard_errors_follow_their_clocks() {
    let model = ou();
    let ns = [250usize, 1000, 4000];
    let mut se = vec![Vec::new(); 3];
    for &n in &ns {
        let mut acc = [0.0; 3];
        let mut kept = 0;
        for stream in 0..20 {
            let p = schedule_path(&model, n, 9, stream);
            let fit = fit_qmle(&model, &p, &ThresholdRule::default(), &model.nominal_alpha(), &FitOptions::default()).unwrap();
            // Empty when no jump was detected: the jump-mean information is then zero.
            if fit.std_errors.len() == 3 {
                kept += 1;
                for i in 0..3 {
                    acc[i] += fit.std_errors[i];
                }
            }
        }
        assert!(kept >= 10, "only {kept} fits with standard errors at n = {n}");
        for i in 0..3 {
            se[i].push((acc[i] / kept as f64).ln());
        }
    }
    let log_n: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let log_t: Vec<f64> = ns.iter().map(|&n| RateSchedule::power_law(n, 0.4, 0.75).unwrap().horizon().ln()).collect();
    let s0 = ols_slope(&log_n, &se[0]);
    assert!((s0 + 0.5).abs() <= 0.1, "sigma slope {s0}");
    let s1 = ols_slope(&log_t, &se[1]);
    assert!((s1 + 0.5).abs() <= 0.1, "drift slope {s1}");
    assert!(se[2].windows(2).all(|w| w[1] < w[0]), "jump mean {:?}", se[2]);
}

/// Entries of `Γ̂` and their standard errors from 10 batch means.
fn plugin_with_se(model: &ModelSpec, p: &Path) -> (Vec<f64>, Vec<f64>) {
    let alpha = model.nominal_alpha();
    let quad = QuadSpec::default();
    let full = fisher_gamma_plugin(model, &alpha, FisherSource::Path(p), &quad).unwrap().assembled();
    let blocks = 10;
    let len = p.n() / blocks;
    let parts: Vec<Vec<f64>> = (0..blocks)
        .map(|b| {
            let obs = p.observations[b * len..=(b + 1) * len].to_vec();
            let sub = Path::new(1, p.step, obs).unwrap();
            fisher_gamma_plugin(model, &alpha, FisherSource::Path(&sub), &quad).unwrap().assembled()
        })
        .collect();
    let se = (0..full.len()).map(|k| (variance(&parts.iter().map(|v| v[k]).collect::<Vec<_>>()) / blocks as f64).sqrt()).collect();
    (full, se)
}

#[test]
fn plugin_gamma_does_not_depend_on_the_path() {
    let model = ou();
    let (a, sa) = plugin_with_se(&model, &path(&model, 50_000, 0.1, 1, 0));
    let (b, sb) = plugin_with_se(&model, &path(&model, 50_000, 0.1, 2, 0));
    for k in 0..a.len() {
        let se = (sa[k] * sa[k] + sb[k] * sb[k]).sqrt();
        assert!((a[k] - b[k]).abs() <= 3.0 * se + 1e-12, "entry {k}: {} vs {} (se {se})", a[k], b[k]);
    }
}

#[test]
fn scaled_score_is_centered_for_merton() {
    let model = builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5).unwrap();
    let alpha = model.nominal_alpha();
    let reps = 200;
    let mut v = vec![Vec::with_capacity(reps); 3];
    for stream in 0..reps as u64 {
        let p = schedule_path(&model, 4000, 31, stream);
        let st = Contrast::new(&model, &p, &ThresholdRule::default()).unwrap().scaled_score_info(&alpha.to_vec()).unwrap();
        for i in 0..3 {
            v[i].push(st.v[i]);
        }
    }
    for (i, col) in v.iter().enumerate() {
        let se = (variance(col) / reps as f64).sqrt();
        assert!(mean(col).abs() <= 3.0 * se, "V[{i}] mean {} se {se}", mean(col));
    }
}

#[test]
fn observed_information_estimates_gamma() {
    let model = ou();
    let alpha = model.nominal_alpha();
    let mut g = fisher_gamma_closed_form(&model, &alpha).unwrap().assembled();
    // Only detected jumps carry jump-mean information: scale by P(|Δx| > u_n | one jump).
    let h = RateSchedule::power_law(4000, 0.4, 0.75).unwrap().step;
    let u = ThresholdRule::default().threshold(h);
    let missed = 2.0 * normal_cdf(u / (0.25 + h).sqrt()) - 1.0;
    g[8] *= 1.0 - missed;
    let reps = 200;
    let mut t = vec![Vec::with_capacity(reps); 9];
    for stream in 0..reps as u64 {
        let p = schedule_path(&model, 4000, 41, stream);
        let st = Contrast::new(&model, &p, &ThresholdRule::default()).unwrap().scaled_score_info(&alpha.to_vec()).unwrap();
        for k in 0..9 {
            t[k].push(st.t[k]);
        }
    }
    for k in 0..9 {
        let se = (variance(&t[k]) / reps as f64).sqrt();
        assert!((mean(&t[k]) - g[k]).abs() <= 3.0 * se + 1e-12, "T[{k}] mean {} vs {} (se {se})", mean(&t[k]), g[k]);
    }
}

#[test]
fn flat_prior_bayes_tracks_the_qmle() {
    let model = ou();
    let p = path(&model, 1000, 0.05, 13, 0);
    let est = fit_bayes(&model, &p, &ThresholdRule::default(), &model.nominal_alpha(), &Prior::Flat, &BayesGrid::default()).unwrap();
    let q = est.qmle.alpha_hat.to_vec();
    let b = est.alpha.to_vec();
    assert!(est.edge_mass < 1e-3);
    for i in 0..3 {
        assert!((q[i] - b[i]).abs() <= 0.25 * est.qmle.std_errors[i], "{q:?} vs {b:?}");
    }
}

#[test]
fn tight_prior_pulls_the_posterior_mean() {
    let model = ou();
    let p = path(&model, 1000, 0.05, 13, 0);
    let rule = ThresholdRule::default();
    let flat = fit_bayes(&model, &p, &rule, &model.nominal_alpha(), &Prior::Flat, &BayesGrid::default()).unwrap();
    let se = flat.qmle.std_errors.clone();
    let center = flat.alpha.to_vec();
    // Prior one SE above the flat posterior mean with sd SE/2: the Gaussian product moves 4/5 of the way.
    let prior = Prior::Gaussian { mean: center.iter().zip(&se).map(|(c, s)| c + s).collect(), sd: se.iter().map(|s| s / 2.0).collect() };
    let est = fit_bayes(&model, &p, &rule, &model.nominal_alpha(), &prior, &BayesGrid::default()).unwrap();
    let b = est.alpha.to_vec();
    for i in 0..3 {
        let moved = (b[i] - center[i]) / se[i];
        assert!((moved - 0.8).abs() <= 0.15, "coordinate {i} moved {moved} SE");
    }
}
