//! Monte Carlo experiments: the LAN expansion, estimator asymptotics,
//! Wald size and power, and threshold jump detection.

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::{dj, p_tilde};
use crate::error::{Error, Result};
use crate::inference::{fisher_gamma_closed_form, fisher_gamma_plugin, fit_qmle, wald_test, FisherGamma, FisherSource, FitOptions};
use crate::model::{JumpDiffusion, ModelSpec, ParamVector, RateSchedule};
use crate::par::map_indexed;
use crate::quad::QuadSpec;
use crate::quasi_lik::{classify_increments, Contrast, ThresholdRule};
use crate::sim::{simulate_path, Path, SimConfig};
use crate::stats::{chi_square_quantile, ks_test, mean, median, noncentral_chi_square_sf, normal_cdf, normal_quantile, ols_slope, quantile, variance};

/// Contrast used for `Λ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    #[default]
    Euler,
    /// `Σ ln(p̃_j / d_j)` by quadrature; `m = 1` and `n ≤ 500` only.
    PTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaSource {
    #[default]
    ClosedForm,
    /// Plug-in on one long stationary path simulated at `α₀`.
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaldSpec {
    pub subset: Vec<usize>,
    pub level: f64,
    /// Local alternatives `h`; the null `h = 0` is always run first.
    pub alternatives: Vec<Vec<f64>>,
    /// Sample size for the power runs; the largest scheduled `n` if unset.
    pub n: Option<usize>,
    /// Replications for the power runs; `replications` if unset.
    pub replications: Option<usize>,
}

impl Default for WaldSpec {
    fn default() -> Self {
        WaldSpec { subset: vec![0], level: 0.05, alternatives: Vec::new(), n: None, replications: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanTolerances {
    pub mean_se_multiple: f64,
    /// Band for `Var(Λ) / hᵀΓh`.
    pub var_band: [f64; 2],
    pub ks_level: f64,
    pub cov_band: [f64; 2],
    pub coverage_band: [f64; 2],
    pub max_excluded: f64,
    pub size_band: [f64; 2],
    pub power_tol: f64,
    pub monotone_slack: f64,
    pub false_rate_max: f64,
}

impl Default for LanTolerances {
    fn default() -> Self {
        LanTolerances {
            mean_se_multiple: 3.0,
            var_band: [0.75, 1.25],
            ks_level: 0.01,
            cov_band: [0.75, 1.25],
            coverage_band: [0.92, 0.98],
            max_excluded: 0.05,
            size_band: [0.02, 0.09],
            power_tol: 0.10,
            monotone_slack: 0.03,
            false_rate_max: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanConfig {
    /// Model with its parameters at `α₀`.
    pub model: ModelSpec,
    /// Local direction `h`; defaults to `h_i = (d Γ_ii)^{-1/2}`, so `hᵀΓh = 1` for diagonal `Γ`.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default = "default_schedule")]
    pub n_schedule: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    pub replications: usize,
    #[serde(default)]
    pub rule: ThresholdRule,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub contrast: ContrastKind,
    #[serde(default)]
    pub gamma_source: GammaSource,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_true")]
    pub burn_in: bool,
    #[serde(default)]
    pub quad: QuadSpec,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub wald: WaldSpec,
    #[serde(default)]
    pub tolerances: LanTolerances,
}

fn default_schedule() -> Vec<usize> {
    vec![250, 1000, 4000]
}

fn default_beta() -> f64 {
    0.75
}

fn default_c() -> f64 {
    0.4
}

fn default_substeps() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl LanConfig {
    pub fn new(model: ModelSpec, replications: usize) -> Self {
        LanConfig {
            model,
            direction: None,
            n_schedule: default_schedule(),
            beta: default_beta(),
            c: default_c(),
            replications,
            rule: ThresholdRule::default(),
            master_seed: 0,
            contrast: ContrastKind::Euler,
            gamma_source: GammaSource::ClosedForm,
            substeps: default_substeps(),
            burn_in: true,
            quad: QuadSpec::default(),
            fit: FitOptions::default(),
            wald: WaldSpec::default(),
            tolerances: LanTolerances::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LanConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn alpha0(&self) -> ParamVector {
        self.model.nominal_alpha()
    }

    pub fn schedule(&self, n: usize) -> Result<RateSchedule> {
        RateSchedule::power_law(n, self.c, self.beta)
    }

    pub fn sim_config(&self, n: usize, rep: usize) -> Result<SimConfig> {
        let s = self.schedule(n)?;
        Ok(SimConfig { n, step: s.step, substeps: self.substeps, x0: None, burn_in: self.burn_in, master_seed: self.master_seed, stream_index: rep as u64 })
    }

    /// Checks everything that does not need `Γ`.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rule.validate()?;
        self.quad.validate()?;
        if self.replications < 2 {
            return Err(Error::invalid("replications", "need R >= 2"));
        }
        if self.n_schedule.is_empty() {
            return Err(Error::invalid("n_schedule", "must not be empty"));
        }
        let d = self.alpha0().dim();
        if let Some(h) = &self.direction {
            if h.len() != d {
                return Err(Error::Dimension { expected: d, got: h.len(), context: "direction" });
            }
        }
        for &n in &self.n_schedule {
            self.sim_config(n, 0)?.validate()?;
        }
        if self.wald.subset.iter().any(|&i| i >= d) {
            return Err(Error::invalid("wald.subset", "index out of range"));
        }
        for h in &self.wald.alternatives {
            if h.len() != d {
                return Err(Error::Dimension { expected: d, got: h.len(), context: "wald alternative" });
            }
        }
        Ok(())
    }

    /// The direction, defaulted from `Γ`, checked against the parameter box for every `n`.
    pub fn resolved_direction(&self, gamma: &FisherGamma) -> Result<Vec<f64>> {
        let d = gamma.dim();
        let g = gamma.assembled();
        let h = match &self.direction {
            Some(h) => h.clone(),
            None => (0..d).map(|i| 1.0 / (d as f64 * g[i * d + i]).sqrt()).collect(),
        };
        for &n in &self.n_schedule {
            self.local_alternative(n, &h)?;
        }
        Ok(h)
    }

    /// `α₀ + ε_n h`, which must lie in the parameter box.
    pub fn local_alternative(&self, n: usize, h: &[f64]) -> Result<ParamVector> {
        let a0 = self.alpha0();
        let eps = self.schedule(n)?.epsilon(a0.d1(), a0.d2());
        let v: Vec<f64> = a0.to_vec().iter().zip(&eps).zip(h).map(|((a, e), hi)| a + e * hi).collect();
        self.model.param_space().check(&v)?;
        Ok(ParamVector::from_slice(a0.d1(), &v))
    }

    pub fn gamma(&self) -> Result<FisherGamma> {
        let a0 = self.alpha0();
        let g = match self.gamma_source {
            GammaSource::ClosedForm => fisher_gamma_closed_form(&self.model, &a0)?,
            GammaSource::Plugin => {
                let mut cfg = SimConfig::new(100_000, 0.1, self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
                cfg.burn_in = true;
                let path = simulate_path(&self.model, &a0, &cfg)?;
                let mut g = fisher_gamma_plugin(&self.model, &a0, FisherSource::Path(&path), &self.quad)?;
                g.epsilon.clear();
                g
            }
        };
        g.check_positive_definite()?;
        Ok(g)
    }
}

/// Hex prefix of the SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Parse(e.to_string()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// One replication of the LAN experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanRow {
    pub n: usize,
    pub rep: usize,
    pub stream_index: u64,
    /// `ℓ_n(α₀ + ε_n h) − ℓ_n(α₀)`.
    pub lambda: f64,
    pub v: Vec<f64>,
    /// Row-major `d × d`.
    pub t: Vec<f64>,
    /// `Λ − (hᵀV − ½hᵀTh)`.
    pub residual: f64,
    /// `Λ` from the `p̃` contrast when requested.
    pub lambda_ptilde: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanAggregate {
    pub n: usize,
    pub step: f64,
    pub mean_lambda: f64,
    pub se_mean_lambda: f64,
    pub var_lambda: f64,
    /// KS of `(Λ + hᵀΓh/2)/√(hᵀΓh)` against `N(0, 1)`.
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub mean_t: Vec<f64>,
    /// Mean Frobenius norm of `T̂_n − Γ`.
    pub mean_t_gap: f64,
    pub median_abs_residual: f64,
    /// 5%, 50%, 95% quantiles of the residual.
    pub residual_quantiles: [f64; 3],
    /// Mean `|Λ − Λ̃|` over rows with a `p̃` value.
    pub ptilde_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub bound: String,
}

impl Check {
    fn new(name: &str, passed: bool, observed: f64, bound: String) -> Check {
        Check { name: name.into(), passed, observed, bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanReport {
    pub config_hash: String,
    pub alpha0: ParamVector,
    pub gamma: FisherGamma,
    pub direction: Vec<f64>,
    /// `hᵀΓh`.
    pub hgh: f64,
    pub rows: Vec<LanRow>,
    pub aggregates: Vec<LanAggregate>,
    pub checks: Vec<Check>,
}

impl LanReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Per-replication CSV: `n, rep, Lambda, V_i…, T_ik…, residual`.
    pub fn write_rows_csv(&self, out: impl std::io::Write) -> Result<()> {
        let d = self.direction.len();
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        let mut header = vec!["n".to_string(), "rep".into(), "Lambda".into()];
        header.extend((1..=d).map(|i| format!("V_{i}")));
        header.extend((0..d * d).map(|ik| format!("T_{}{}", ik / d + 1, ik % d + 1)));
        header.push("residual".into());
        header.push("Lambda_ptilde".into());
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.n.to_string(), r.rep.to_string(), r.lambda.to_string()];
            rec.extend(r.v.iter().map(|x| x.to_string()));
            rec.extend(r.t.iter().map(|x| x.to_string()));
            rec.push(r.residual.to_string());
            rec.push(r.lambda_ptilde.map(|x| x.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn simulate(cfg: &LanConfig, alpha: &ParamVector, n: usize, rep: usize) -> Result<Path> {
    let model = cfg.model.with_alpha(alpha);
    simulate_path(&model, alpha, &cfg.sim_config(n, rep)?)
}

fn ptilde_loglik(model: &dyn JumpDiffusion, alpha: &ParamVector, path: &Path, rule: &ThresholdRule, quad: &QuadSpec) -> Result<f64> {
    let h = path.step;
    let mut total = 0.0;
    for j in 0..path.n() {
        let (x0, x1) = (path.x(j)[0], path.x(j + 1)[0]);
        let p = p_tilde(model, alpha, x0, x1, h, rule, quad)?;
        let d = dj(model, alpha, x0, h, rule, quad)?;
        let term = (p / d).ln();
        if !term.is_finite() {
            return Err(Error::Evaluation { index: j + 1 });
        }
        total += term;
    }
    Ok(total)
}

/// Simulates replication `rep` at size `n` under `α₀` and evaluates `Λ_n(h)`,
/// `V̂_n` and `T̂_n`.
pub fn lan_row(cfg: &LanConfig, h: &[f64], n: usize, rep: usize) -> Result<LanRow> {
    let a0 = cfg.alpha0();
    let path = simulate(cfg, &a0, n, rep)?;
    let contrast = Contrast::new(&cfg.model, &path, &cfg.rule)?;
    let ah = cfg.local_alternative(n, h)?;
    let l0 = contrast.value(&a0.to_vec())?.total;
    let lh = contrast.value(&ah.to_vec())?.total;
    let lambda = lh - l0;
    let st = contrast.scaled_score_info(&a0.to_vec())?;
    let d = h.len();
    let hv: f64 = h.iter().zip(&st.v).map(|(a, b)| a * b).sum();
    let mut hth = 0.0;
    for i in 0..d {
        for k in 0..d {
            hth += h[i] * st.t[i * d + k] * h[k];
        }
    }
    let lambda_ptilde = if cfg.contrast == ContrastKind::PTilde && n <= 500 && path.m == 1 {
        if h.iter().all(|&v| v == 0.0) {
            Some(0.0)
        } else {
            Some(ptilde_loglik(&cfg.model, &ah, &path, &cfg.rule, &cfg.quad)? - ptilde_loglik(&cfg.model, &a0, &path, &cfg.rule, &cfg.quad)?)
        }
    } else {
        None
    };
    Ok(LanRow { n, rep, stream_index: rep as u64, lambda, v: st.v, t: st.t, residual: lambda - (hv - 0.5 * hth), lambda_ptilde })
}

/// Recomputes one row from `(master_seed, stream_index, n)`.
pub fn replay_lan_row(cfg: &LanConfig, n: usize, rep: usize) -> Result<LanRow> {
    let gamma = cfg.gamma()?;
    let h = cfg.resolved_direction(&gamma)?;
    lan_row(cfg, &h, n, rep)
}

/// Aggregates for the rows of one `n`.
pub fn aggregate_lan_rows(n: usize, step: f64, rows: &[LanRow], gamma: &FisherGamma, hgh: f64) -> LanAggregate {
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let r = rows.len() as f64;
    let var_lambda = variance(&lambdas);
    let (ks_statistic, ks_p_value) = if hgh > 0.0 {
        let z: Vec<f64> = lambdas.iter().map(|l| (l + 0.5 * hgh) / hgh.sqrt()).collect();
        let ks = ks_test(&z, normal_cdf);
        (ks.statistic, ks.p_value)
    } else {
        (0.0, 1.0)
    };
    let d = gamma.dim();
    let g = gamma.assembled();
    let mean_t: Vec<f64> = (0..d * d).map(|ik| mean(&rows.iter().map(|x| x.t[ik]).collect::<Vec<_>>())).collect();
    let gaps: Vec<f64> = rows.iter().map(|x| x.t.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).collect();
    let abs_res: Vec<f64> = rows.iter().map(|x| x.residual.abs()).collect();
    let res: Vec<f64> = rows.iter().map(|x| x.residual).collect();
    let pt: Vec<f64> = rows.iter().filter_map(|x| x.lambda_ptilde.map(|p| (p - x.lambda).abs())).collect();
    LanAggregate {
        n,
        step,
        mean_lambda: mean(&lambdas),
        se_mean_lambda: (var_lambda / r).sqrt(),
        var_lambda,
        ks_statistic,
        ks_p_value,
        mean_t,
        mean_t_gap: mean(&gaps),
        median_abs_residual: median(&abs_res),
        residual_quantiles: [quantile(&res, 0.05), quantile(&res, 0.5), quantile(&res, 0.95)],
        ptilde_gap: (!pt.is_empty()).then(|| mean(&pt)),
    }
}

fn lan_checks(aggs: &[LanAggregate], hgh: f64, tol: &LanTolerances) -> Vec<Check> {
    let (Some(first), Some(last)) = (aggs.first(), aggs.last()) else {
        return Vec::new();
    };
    let bias = (last.mean_lambda + 0.5 * hgh).abs();
    let vlo = tol.var_band[0] * hgh;
    let vhi = tol.var_band[1] * hgh;
    let res_ok =
        last.median_abs_residual < first.median_abs_residual || (last.median_abs_residual == 0.0 && first.median_abs_residual == 0.0) || aggs.len() == 1;
    vec![
        Check::new(
            "lan_mean",
            bias <= tol.mean_se_multiple * last.se_mean_lambda,
            bias,
            format!("<= {} SE = {:.4e}", tol.mean_se_multiple, tol.mean_se_multiple * last.se_mean_lambda),
        ),
        Check::new("lan_variance", last.var_lambda >= vlo && last.var_lambda <= vhi, last.var_lambda, format!("in [{vlo:.4}, {vhi:.4}]")),
        Check::new("lan_normality", last.ks_p_value >= tol.ks_level, last.ks_p_value, format!("KS p >= {}", tol.ks_level)),
        Check::new("lan_residual_decay", res_ok, last.median_abs_residual, format!("< {:.4e} at n = {}", first.median_abs_residual, first.n)),
    ]
}

/// LAN expansion experiment over the schedule.
pub fn lan_expansion_experiment(cfg: &LanConfig, threads: Option<usize>) -> Result<LanReport> {
    cfg.validate()?;
    if cfg.contrast == ContrastKind::PTilde {
        if cfg.model.state_dim() != 1 {
            return Err(Error::Unsupported("p̃ contrast needs m = 1".into()));
        }
        if cfg.n_schedule.iter().any(|&n| n > 500) {
            warn!("p̃ contrast is skipped for n > 500");
        }
    }
    let gamma = cfg.gamma()?;
    let h = cfg.resolved_direction(&gamma)?;
    let hgh = gamma.quadratic_form(&h);
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for &n in &cfg.n_schedule {
        let block = map_indexed(cfg.replications, threads, |rep| lan_row(cfg, &h, n, rep))?;
        aggregates.push(aggregate_lan_rows(n, cfg.schedule(n)?.step, &block, &gamma, hgh));
        rows.extend(block);
    }
    let checks = lan_checks(&aggregates, hgh, &cfg.tolerances);
    Ok(LanReport { config_hash: config_hash(cfg)?, alpha0: cfg.alpha0(), gamma, direction: h, hgh, rows, aggregates, checks })
}

/// Whether each entry of `mean T̂_n` moves toward `Γ` along the schedule,
/// allowing one inversion per entry.
pub fn information_trend_ok(report: &LanReport) -> bool {
    let g = report.gamma.assembled();
    (0..g.len()).all(|ik| {
        let gaps: Vec<f64> = report.aggregates.iter().map(|a| (a.mean_t[ik] - g[ik]).abs()).collect();
        gaps.windows(2).filter(|w| w[1] > w[0] + 1e-12).count() <= 1
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub n: usize,
    pub rep: usize,
    pub alpha_hat: Vec<f64>,
    pub converged: bool,
    /// `ε_n⁻¹(α̂ − α₀)`.
    pub standardized: Vec<f64>,
    /// `Γ^{1/2} ε_n⁻¹(α̂ − α₀)`.
    pub z: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAggregate {
    pub n: usize,
    pub fits: usize,
    pub excluded: usize,
    pub excluded_fraction: f64,
    /// Row-major `cov(Z)`.
    pub cov_z: Vec<f64>,
    /// Approximate standard errors of the entries of `cov(Z)` under `Z ~ N(0, I)`.
    pub cov_se: Vec<f64>,
    pub ks_p_values: Vec<f64>,
    /// Coverage of `α̂_i ± q ε_i √((Γ⁻¹)_ii)` at 90% and 95%.
    pub coverage90: Vec<f64>,
    pub coverage95: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub config_hash: String,
    pub alpha0: ParamVector,
    pub gamma: FisherGamma,
    pub rows: Vec<EstimatorRow>,
    pub aggregates: Vec<EstimatorAggregate>,
    pub checks: Vec<Check>,
}

impl EstimatorReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn estimator_row(cfg: &LanConfig, gamma_sqrt: &nalgebra::DMatrix<f64>, n: usize, rep: usize) -> Result<EstimatorRow> {
    let a0 = cfg.alpha0();
    let path = simulate(cfg, &a0, n, rep)?;
    let fit = fit_qmle(&cfg.model, &path, &cfg.rule, &a0, &cfg.fit)?;
    let ah = fit.alpha_hat.to_vec();
    let standardized: Vec<f64> = ah.iter().zip(a0.to_vec()).zip(&fit.epsilon).map(|((a, b), e)| (a - b) / e).collect();
    let z = gamma_sqrt * DVector::from_column_slice(&standardized);
    Ok(EstimatorRow { n, rep, alpha_hat: ah, converged: fit.converged, standardized, z: z.as_slice().to_vec(), iterations: fit.iterations })
}

pub fn aggregate_estimator_rows(n: usize, rows: &[EstimatorRow], gamma: &FisherGamma) -> Result<EstimatorAggregate> {
    let d = gamma.dim();
    let kept: Vec<&EstimatorRow> = rows.iter().filter(|r| r.converged).collect();
    let k = kept.len();
    let excluded = rows.len() - k;
    let col = |i: usize| kept.iter().map(|r| r.z[i]).collect::<Vec<f64>>();
    let means: Vec<f64> = (0..d).map(|i| mean(&col(i))).collect();
    let mut cov_z = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let s: f64 = kept.iter().map(|r| (r.z[i] - means[i]) * (r.z[j] - means[j])).sum();
            cov_z[i * d + j] = s / (k as f64 - 1.0);
        }
    }
    let cov_se = (0..d * d).map(|ij| if ij / d == ij % d { (2.0 / (k as f64 - 1.0)).sqrt() } else { (1.0 / (k as f64 - 1.0)).sqrt() }).collect();
    let ks_p_values = (0..d).map(|i| ks_test(&col(i), normal_cdf).p_value).collect();
    let inv = gamma.inverse()?;
    let coverage = |level: f64| -> Vec<f64> {
        let q = normal_quantile(0.5 + level / 2.0);
        (0..d)
            .map(|i| {
                let half = q * inv[(i, i)].sqrt();
                kept.iter().filter(|r| r.standardized[i].abs() <= half).count() as f64 / k as f64
            })
            .collect()
    };
    Ok(EstimatorAggregate {
        n,
        fits: rows.len(),
        excluded,
        excluded_fraction: excluded as f64 / rows.len() as f64,
        cov_z,
        cov_se,
        ks_p_values,
        coverage90: coverage(0.90),
        coverage95: coverage(0.95),
    })
}

fn estimator_checks(agg: &EstimatorAggregate, gamma: &FisherGamma, tol: &LanTolerances) -> Vec<Check> {
    let d = gamma.dim();
    let d1 = gamma.d1;
    let mut checks = Vec::new();
    for i in 0..d {
        let v = agg.cov_z[i * d + i];
        checks.push(Check::new(
            &format!("cov_z_{i}{i}"),
            v >= tol.cov_band[0] && v <= tol.cov_band[1],
            v,
            format!("in [{}, {}]", tol.cov_band[0], tol.cov_band[1]),
        ));
    }
    for i in 0..d1 {
        for j in d1..d {
            let v = agg.cov_z[i * d + j];
            let b = 3.0 * agg.cov_se[i * d + j];
            checks.push(Check::new(&format!("cov_z_{i}{j}"), v.abs() <= b, v, format!("|.| <= {b:.4}")));
        }
    }
    for i in 0..d {
        let p = agg.ks_p_values[i];
        checks.push(Check::new(&format!("ks_z_{i}"), p >= tol.ks_level, p, format!(">= {}", tol.ks_level)));
        let c = agg.coverage95[i];
        checks.push(Check::new(
            &format!("coverage95_{i}"),
            c >= tol.coverage_band[0] && c <= tol.coverage_band[1],
            c,
            format!("in [{}, {}]", tol.coverage_band[0], tol.coverage_band[1]),
        ));
    }
    checks.push(Check::new("excluded_fits", agg.excluded_fraction <= tol.max_excluded, agg.excluded_fraction, format!("<= {}", tol.max_excluded)));
    checks
}

/// `R` QMLE fits per `n`; checks are made at the largest `n`.
pub fn estimator_asymptotics_experiment(cfg: &LanConfig, threads: Option<usize>) -> Result<EstimatorReport> {
    cfg.validate()?;
    let gamma = cfg.gamma()?;
    let root = gamma.sqrt()?;
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for &n in &cfg.n_schedule {
        let block = map_indexed(cfg.replications, threads, |rep| estimator_row(cfg, &root, n, rep))?;
        aggregates.push(aggregate_estimator_rows(n, &block, &gamma)?);
        rows.extend(block);
    }
    let checks = aggregates.last().map(|a| estimator_checks(a, &gamma, &cfg.tolerances)).unwrap_or_default();
    Ok(EstimatorReport { config_hash: config_hash(cfg)?, alpha0: cfg.alpha0(), gamma, rows, aggregates, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub h: Vec<f64>,
    /// `h_Sᵀ Γ_S h_S`.
    pub ncp: f64,
    pub predicted: f64,
    pub fits: usize,
    pub excluded: usize,
    pub rejections: usize,
    pub rate: f64,
    pub rate_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub config_hash: String,
    pub n: usize,
    pub subset: Vec<usize>,
    pub critical_value: f64,
    pub rows: Vec<PowerRow>,
    pub checks: Vec<Check>,
}

impl PowerReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Wald size under `α₀` and power under `α₀ + ε_n h` for each alternative.
pub fn test_power_experiment(cfg: &LanConfig, threads: Option<usize>) -> Result<PowerReport> {
    cfg.validate()?;
    let gamma = cfg.gamma()?;
    let a0 = cfg.alpha0();
    let d = a0.dim();
    let n = cfg.wald.n.unwrap_or_else(|| cfg.n_schedule.iter().copied().max().unwrap_or(1000));
    let reps = cfg.wald.replications.unwrap_or(cfg.replications);
    let subset = &cfg.wald.subset;
    let s = subset.len();
    let crit = chi_square_quantile(1.0 - cfg.wald.level, s as f64);
    let g = gamma.assembled();
    let mut alternatives = vec![vec![0.0; d]];
    alternatives.extend(cfg.wald.alternatives.iter().cloned());
    let eps = cfg.schedule(n)?.epsilon(a0.d1(), a0.d2());
    let standardized = gamma.clone().with_epsilon(eps)?;
    let mut rows = Vec::new();
    for h in alternatives {
        let alt = cfg.local_alternative(n, &h)?;
        let outcomes = map_indexed(reps, threads, |rep| {
            let path = simulate(cfg, &alt, n, rep)?;
            let fit = fit_qmle(&cfg.model, &path, &cfg.rule, &a0, &cfg.fit)?;
            if !fit.converged {
                return Ok(None);
            }
            let w = wald_test(&fit.alpha_hat, &standardized, &a0, subset)?;
            Ok(Some(w.statistic > crit))
        })?;
        let kept: Vec<bool> = outcomes.iter().flatten().copied().collect();
        let rejections = kept.iter().filter(|&&r| r).count();
        let rate = rejections as f64 / kept.len().max(1) as f64;
        let mut ncp = 0.0;
        for &i in subset {
            for &k in subset {
                ncp += h[i] * g[i * d + k] * h[k];
            }
        }
        rows.push(PowerRow {
            h,
            ncp,
            predicted: noncentral_chi_square_sf(crit, s as f64, ncp),
            fits: reps,
            excluded: reps - kept.len(),
            rejections,
            rate,
            rate_se: (rate * (1.0 - rate) / kept.len().max(1) as f64).sqrt(),
        });
    }
    let tol = &cfg.tolerances;
    let mut checks = vec![Check::new(
        "wald_size",
        rows[0].rate >= tol.size_band[0] && rows[0].rate <= tol.size_band[1],
        rows[0].rate,
        format!("in [{}, {}]", tol.size_band[0], tol.size_band[1]),
    )];
    for (i, r) in rows.iter().enumerate().skip(1) {
        let gap = (r.rate - r.predicted).abs();
        checks.push(Check::new(&format!("wald_power_{i}"), gap <= tol.power_tol, r.rate, format!("within {} of {:.4}", tol.power_tol, r.predicted)));
    }
    let mut by_ncp: Vec<&PowerRow> = rows.iter().collect();
    by_ncp.sort_by(|a, b| a.ncp.total_cmp(&b.ncp));
    let monotone = by_ncp.windows(2).all(|w| w[1].rate + tol.monotone_slack >= w[0].rate);
    checks.push(Check::new("wald_power_monotone", monotone, by_ncp.len() as f64, format!("nondecreasing in ncp with slack {}", tol.monotone_slack)));
    Ok(PowerReport { config_hash: config_hash(cfg)?, n, subset: subset.clone(), critical_value: crit, rows, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpDetectionRow {
    pub n: usize,
    pub step: f64,
    pub threshold: f64,
    pub no_jump_intervals: u64,
    pub false_flags: u64,
    pub one_jump_intervals: u64,
    pub missed: u64,
    pub false_rate: f64,
    pub missed_rate: f64,
    pub mean_detected: f64,
    /// `λ T_n`.
    pub expected_jumps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpDetectionReport {
    pub config_hash: String,
    pub rows: Vec<JumpDetectionRow>,
    /// Log–log slope of the missed-jump rate against `h_n`.
    pub missed_slope: f64,
    /// `ρ (m + γ)`.
    pub predicted_slope: f64,
    pub checks: Vec<Check>,
}

impl JumpDetectionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Threshold misclassification rates against the latent jump record.
pub fn jump_detection_experiment(cfg: &LanConfig, threads: Option<usize>) -> Result<JumpDetectionReport> {
    cfg.validate()?;
    let a0 = cfg.alpha0();
    let lambda = cfg.model.intensity(&a0.theta);
    let mut rows = Vec::new();
    for &n in &cfg.n_schedule {
        let counts = map_indexed(cfg.replications, threads, |rep| {
            let path = simulate(cfg, &a0, n, rep)?;
            let class = classify_increments(&path, &cfg.rule);
            let latent = path.latent.as_ref().ok_or_else(|| Error::Unsupported("path has no latent jump record".into()))?;
            let mut c = [0u64; 5];
            for (j, &flag) in class.jump_detected.iter().enumerate() {
                match latent.counts[j] {
                    0 => {
                        c[0] += 1;
                        c[1] += flag as u64;
                    }
                    1 => {
                        c[2] += 1;
                        c[3] += (!flag) as u64;
                    }
                    _ => {}
                }
            }
            c[4] = class.jumps as u64;
            Ok(c)
        })?;
        let sum = |i: usize| counts.iter().map(|c| c[i]).sum::<u64>();
        let s = cfg.schedule(n)?;
        rows.push(JumpDetectionRow {
            n,
            step: s.step,
            threshold: cfg.rule.threshold(s.step),
            no_jump_intervals: sum(0),
            false_flags: sum(1),
            one_jump_intervals: sum(2),
            missed: sum(3),
            false_rate: sum(1) as f64 / sum(0).max(1) as f64,
            missed_rate: sum(3) as f64 / sum(2).max(1) as f64,
            mean_detected: sum(4) as f64 / cfg.replications as f64,
            expected_jumps: lambda * s.horizon(),
        });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.missed_rate > 0.0).map(|r| (r.step.ln(), r.missed_rate.ln())).unzip();
    let missed_slope = if x.len() >= 2 { ols_slope(&x, &y) } else { f64::NAN };
    let predicted_slope = cfg.rule.rho * (cfg.model.state_dim() as f64 + cfg.model.gamma_exponent());
    let mut checks = Vec::new();
    if let Some(last) = rows.last() {
        checks.push(Check::new(
            "false_jump_rate",
            last.false_rate <= cfg.tolerances.false_rate_max,
            last.false_rate,
            format!("<= {}", cfg.tolerances.false_rate_max),
        ));
        let band = 3.0 * (last.expected_jumps / cfg.replications as f64).sqrt();
        checks.push(Check::new(
            "detected_jump_count",
            (last.mean_detected - last.expected_jumps).abs() <= 3.0 * last.expected_jumps.sqrt(),
            last.mean_detected,
            format!("within 3 sqrt(λT) of {:.4} (MC SE {:.4})", last.expected_jumps, band / 3.0),
        ));
    }
    if lambda > 0.0 {
        checks.push(Check::new(
            "missed_jump_slope",
            missed_slope >= predicted_slope / 2.0 && missed_slope <= 2.0 * predicted_slope,
            missed_slope,
            format!("in [{:.3}, {:.3}]", predicted_slope / 2.0, 2.0 * predicted_slope),
        ));
    }
    Ok(JumpDetectionReport { config_hash: config_hash(cfg)?, rows, missed_slope, predicted_slope, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_ou_jump;

    fn small_cfg() -> LanConfig {
        let mut cfg = LanConfig::new(builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap(), 4);
        cfg.n_schedule = vec![100, 200];
        cfg
    }

    #[test]
    fn zero_direction_gives_zero_report() {
        let mut cfg = small_cfg();
        cfg.direction = Some(vec![0.0; 3]);
        let r = lan_expansion_experiment(&cfg, Some(1)).unwrap();
        assert!(r.rows.iter().all(|x| x.lambda == 0.0 && x.residual == 0.0));
        for a in &r.aggregates {
            assert_eq!((a.mean_lambda, a.var_lambda, a.median_abs_residual), (0.0, 0.0, 0.0));
        }
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn default_direction_has_unit_information() {
        let cfg = small_cfg();
        let g = cfg.gamma().unwrap();
        let h = cfg.resolved_direction(&g).unwrap();
        assert!((g.quadratic_form(&h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_replay_exactly() {
        let cfg = small_cfg();
        let r = lan_expansion_experiment(&cfg, Some(2)).unwrap();
        let row = &r.rows[5];
        assert_eq!(&replay_lan_row(&cfg, row.n, row.rep).unwrap(), row);
        let agg = aggregate_lan_rows(200, cfg.schedule(200).unwrap().step, &r.rows[4..], &r.gamma, r.hgh);
        assert_eq!(agg, r.aggregates[1]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = small_cfg();
        let mut b = small_cfg();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.master_seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn rejects_alternative_outside_the_box() {
        let mut cfg = small_cfg();
        cfg.direction = Some(vec![-1e3, 0.0, 0.0]);
        let g = cfg.gamma().unwrap();
        assert!(cfg.resolved_direction(&g).is_err());
    }
}
