//! `jdlan`: simulate, fit, verify LAN and diagnose density approximations
//! from JSON configs.
//!
//! Exit codes: 0 success, 1 tolerance failure, 2 config error, 3 runtime error.

mod config;

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jdlan::density::{diagnose_b1, diagnose_b2, write_diagnostics_csv, DerivativeSeries, L1Series};
use jdlan::inference::{fit_bayes, fit_qmle, BayesEstimate, FitResult};
use jdlan::lan::{
    config_hash, estimator_asymptotics_experiment, jump_detection_experiment, lan_expansion_experiment, test_power_experiment, Check, EstimatorReport,
    JumpDetectionReport, LanReport, PowerReport,
};
use jdlan::model::{JumpDiffusion, ParamVector};
use jdlan::sim::{simulate_path, Path};
use serde::Serialize;

use config::{load, DensityDiagConfig, Experiment, FitConfig, LanVerifyConfig, NamedDirection, SimulateConfig};

#[derive(Parser)]
#[command(name = "jdlan", version, about = "Jump-diffusion simulation, quasi-likelihood fitting and LAN verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a path and write path.csv, path.bin and jumps.csv.
    Simulate(Common),
    /// Fit by quasi-maximum likelihood (and optionally grid Bayes); writes fit.json.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Fit σ on the no-jump branch, then θ, then jointly.
        #[arg(long)]
        two_stage: bool,
    },
    /// Run the LAN and estimator experiments; writes lan_report.json and lan_rows.csv.
    LanVerify(Common),
    /// L¹ and normalizer-derivative diagnostics; writes density_diag.csv.
    DensityDiag(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the plan without running it.
    #[arg(long)]
    dry_run: bool,
}

enum Failure {
    Tolerance(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Tolerance(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => with_pool(&c, || simulate(&c)),
        Command::Fit { common, two_stage } => with_pool(&common, || fit(&common, two_stage)),
        Command::LanVerify(c) => with_pool(&c, || lan_verify(&c)),
        Command::DensityDiag(c) => with_pool(&c, || density_diag(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Tolerance(m) => ("tolerance failure", m),
                Failure::Config(m) => ("config error", m),
                Failure::Runtime(m) => ("runtime error", m),
            };
            eprintln!("jdlan: {kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn with_pool(c: &Common, run: impl FnOnce() -> Result<(), Failure> + Send) -> Result<(), Failure> {
    match c.threads {
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build().map_err(runtime_err)?.install(run),
        None => run(),
    }
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(runtime_err)
}

fn out_dir(c: &Common) -> Result<&FsPath, Failure> {
    fs::create_dir_all(&c.out).map_err(runtime_err)?;
    Ok(&c.out)
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let mut cfg: SimulateConfig = load(&c.config).map_err(Failure::Config)?;
    cfg.model.validate().map_err(config_err)?;
    if let Some(s) = c.seed {
        cfg.sim.master_seed = s;
    }
    cfg.sim.validate().map_err(config_err)?;
    if c.dry_run {
        println!("simulate {} n = {} h_n = {:e} T = {} substeps = {}", cfg.model.kind(), cfg.sim.n, cfg.sim.step, cfg.sim.horizon(), cfg.sim.substeps);
        return Ok(());
    }
    let alpha = cfg.model.nominal_alpha();
    let path = simulate_path(&cfg.model, &alpha, &cfg.sim).map_err(runtime_err)?;
    path.save(out_dir(c)?).map_err(runtime_err)?;
    let jumps = path.latent.as_ref().map(|l| l.total()).unwrap_or(0);
    println!("n = {}  h_n = {:e}  jumps = {}", path.n(), path.step, jumps);
    Ok(())
}

#[derive(Serialize)]
struct FitOutput {
    config_hash: String,
    two_stage: bool,
    fit: FitResult,
    bayes: Option<BayesEstimate>,
}

fn read_path(file: &FsPath) -> Result<Path, Failure> {
    let f = fs::File::open(file).map_err(|e| Failure::Config(format!("cannot open {}: {e}", file.display())))?;
    let reader = std::io::BufReader::new(f);
    let parsed = if file.extension().is_some_and(|e| e == "bin") { Path::read_binary(reader) } else { Path::read_csv(reader) };
    parsed.map_err(config_err)
}

fn fit(c: &Common, two_stage: bool) -> Result<(), Failure> {
    let mut cfg: FitConfig = load(&c.config).map_err(Failure::Config)?;
    cfg.model.validate().map_err(config_err)?;
    cfg.rule.validate().map_err(config_err)?;
    if let Some(b) = &cfg.bayes {
        b.grid.validate().map_err(config_err)?;
    }
    cfg.fit.two_stage |= two_stage;
    let base = c.config.parent().unwrap_or(FsPath::new("."));
    let file = base.join(&cfg.path);
    let init = match &cfg.init {
        Some(v) => {
            let d1 = cfg.model.sigma_dim();
            if v.len() != d1 + cfg.model.theta_dim() {
                return Err(Failure::Config(format!("init has {} entries, model needs {}", v.len(), d1 + cfg.model.theta_dim())));
            }
            ParamVector::from_slice(d1, v)
        }
        None => cfg.model.nominal_alpha(),
    };
    cfg.model.param_space().check(&init.to_vec()).map_err(config_err)?;
    let path = read_path(&file)?;
    if c.dry_run {
        println!(
            "fit {} on {} (n = {}, h_n = {:e}) from {:?} two_stage = {}",
            cfg.model.kind(),
            file.display(),
            path.n(),
            path.step,
            init.to_vec(),
            cfg.fit.two_stage
        );
        return Ok(());
    }
    let result = fit_qmle(&cfg.model, &path, &cfg.rule, &init, &cfg.fit).map_err(runtime_err)?;
    let bayes = match &cfg.bayes {
        Some(b) => Some(fit_bayes(&cfg.model, &path, &cfg.rule, &init, &b.prior, &b.grid).map_err(runtime_err)?),
        None => None,
    };
    let converged = result.converged;
    println!("alpha_hat = {:?}  converged = {}  iterations = {}  se = {:?}", result.alpha_hat.to_vec(), result.converged, result.iterations, result.std_errors);
    let out = FitOutput { config_hash: config_hash(&cfg).map_err(runtime_err)?, two_stage: cfg.fit.two_stage, fit: result, bayes };
    write_json(&out_dir(c)?.join("fit.json"), &out)?;
    if converged {
        Ok(())
    } else {
        Err(Failure::Tolerance("optimizer did not converge".into()))
    }
}

#[derive(Serialize, Default)]
struct LanVerifyOutput {
    config_hash: String,
    lan: Option<LanReport>,
    estimator: Option<EstimatorReport>,
    power: Option<PowerReport>,
    jump_detection: Option<JumpDetectionReport>,
}

fn print_checks(title: &str, checks: &[Check]) {
    for ch in checks {
        println!("{:<6} {title}/{:<24} observed {:<14.6e} bound {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.observed, ch.bound);
    }
}

fn lan_verify(c: &Common) -> Result<(), Failure> {
    let mut cfg: LanVerifyConfig = load(&c.config).map_err(Failure::Config)?;
    if let Some(s) = c.seed {
        cfg.lan.master_seed = s;
    }
    let lan = &cfg.lan;
    lan.validate().map_err(config_err)?;
    let gamma = lan.gamma().map_err(config_err)?;
    lan.resolved_direction(&gamma).map_err(config_err)?;
    if c.dry_run {
        let mut secs = 0.0;
        for &n in &lan.n_schedule {
            let s = lan.schedule(n).map_err(config_err)?;
            let burn = if lan.burn_in { lan.model.burn_in_time(&lan.alpha0()).unwrap_or(0.0) / s.step } else { 0.0 };
            // About 50 ns per Euler substep, plus contrast evaluations and fits.
            let per_rep = (n as f64 + burn) * lan.substeps as f64 * 5e-8 + n as f64 * 2e-6;
            secs += per_rep * (lan.replications * cfg.experiments.len()) as f64;
            println!("n = {n:>7}  h_n = {:.6e}  T_n = {:.4}  R = {}", s.step, s.horizon(), lan.replications);
        }
        println!("experiments: {:?}", cfg.experiments);
        println!("estimated runtime: {secs:.0} s on one thread");
        return Ok(());
    }
    let threads = None;
    let mut out = LanVerifyOutput { config_hash: config_hash(&cfg).map_err(runtime_err)?, ..Default::default() };
    let mut all = Vec::new();
    for e in &cfg.experiments {
        match e {
            Experiment::LanExpansion => {
                let r = lan_expansion_experiment(lan, threads).map_err(runtime_err)?;
                print_checks("lan", &r.checks);
                all.extend(r.checks.clone());
                out.lan = Some(r);
            }
            Experiment::EstimatorAsymptotics => {
                let r = estimator_asymptotics_experiment(lan, threads).map_err(runtime_err)?;
                print_checks("estimator", &r.checks);
                all.extend(r.checks.clone());
                out.estimator = Some(r);
            }
            Experiment::TestPower => {
                let r = test_power_experiment(lan, threads).map_err(runtime_err)?;
                print_checks("wald", &r.checks);
                all.extend(r.checks.clone());
                out.power = Some(r);
            }
            Experiment::JumpDetection => {
                let r = jump_detection_experiment(lan, threads).map_err(runtime_err)?;
                print_checks("jumps", &r.checks);
                all.extend(r.checks.clone());
                out.jump_detection = Some(r);
            }
        }
    }
    let dir = out_dir(c)?;
    write_json(&dir.join("lan_report.json"), &out)?;
    if let Some(r) = &out.lan {
        let f = fs::File::create(dir.join("lan_rows.csv")).map_err(runtime_err)?;
        r.write_rows_csv(std::io::BufWriter::new(f)).map_err(runtime_err)?;
    }
    let failed = all.iter().filter(|ch| !ch.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!("{failed} of {} checks failed", all.len())))
    }
}

#[derive(Serialize)]
struct DensityDiagOutput {
    config_hash: String,
    l1: Option<L1Series>,
    derivatives: Vec<(String, DerivativeSeries)>,
}

fn density_diag(c: &Common) -> Result<(), Failure> {
    let cfg: DensityDiagConfig = load(&c.config).map_err(Failure::Config)?;
    cfg.model.validate().map_err(config_err)?;
    cfg.rule.validate().map_err(config_err)?;
    cfg.quad.validate().map_err(config_err)?;
    let alpha = cfg.model.nominal_alpha();
    let d1 = alpha.d1();
    let d = alpha.dim();
    let directions = cfg.directions.clone().unwrap_or_else(|| {
        vec![
            NamedDirection { label: "sigma".into(), direction: (0..d).map(|i| if i < d1 { 1.0 } else { 0.0 }).collect() },
            NamedDirection { label: "theta".into(), direction: (0..d).map(|i| if i < d1 { 0.0 } else { 1.0 }).collect() },
        ]
    });
    if let Some(bad) = directions.iter().find(|x| x.direction.len() != d) {
        return Err(Failure::Config(format!("direction `{}` has {} entries, model needs {d}", bad.label, bad.direction.len())));
    }
    if cfg.l1 && !cfg.model.has_exact_density() {
        return Err(Failure::Config(format!("l1 diagnostic needs an exact transition density; {} has none", cfg.model.kind())));
    }
    if c.dry_run {
        println!(
            "density-diag {} n = {:?} c = {} beta = {} grid = {:?}",
            cfg.model.kind(),
            cfg.plan.n_schedule,
            cfg.plan.c,
            cfg.plan.beta,
            cfg.plan.x_prev_grid
        );
        println!("series: l1 = {}  directions = {:?}", cfg.l1, directions.iter().map(|x| &x.label).collect::<Vec<_>>());
        return Ok(());
    }
    let l1 = if cfg.l1 { Some(diagnose_b1(&cfg.model, &alpha, &cfg.plan, &cfg.rule, &cfg.quad).map_err(runtime_err)?) } else { None };
    let mut derivatives = Vec::new();
    for nd in &directions {
        let s = diagnose_b2(&cfg.model, &alpha, &nd.direction, &cfg.plan, &cfg.rule, &cfg.quad).map_err(runtime_err)?;
        derivatives.push((nd.label.clone(), s));
    }
    if let Some(s) = &l1 {
        for p in &s.points {
            println!("n = {:>6}  n*L1 = {:.6e}  1-d_j = {:.6e}", p.n, p.scaled_gap, p.one_minus_dj);
        }
    }
    for (label, s) in &derivatives {
        for p in &s.points {
            println!("n = {:>6}  {label} d{}  scaled = {:.6e}", p.n, p.order, p.scaled);
        }
    }
    let dir = out_dir(c)?;
    let f = fs::File::create(dir.join("density_diag.csv")).map_err(runtime_err)?;
    let refs: Vec<(&str, &DerivativeSeries)> = derivatives.iter().map(|(l, s)| (l.as_str(), s)).collect();
    write_diagnostics_csv(std::io::BufWriter::new(f), l1.as_ref(), &refs).map_err(runtime_err)?;
    let out = DensityDiagOutput { config_hash: config_hash(&cfg).map_err(runtime_err)?, l1, derivatives };
    write_json(&dir.join("density_diag.json"), &out)
}
