//! Path simulation: exact jump placement with Euler–Maruyama substeps.

use std::io::{Read, Write};
use std::path::Path as FsPath;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JumpDiffusion, ParamVector};
use crate::par::map_indexed;
use crate::rng::{stream_rng, Purpose};

fn default_substeps() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    /// Observation step `h_n`.
    pub step: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Initial state; defaults to the model's stationary mean or zero.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Run the model's burn-in period before the first observation.
    #[serde(default)]
    pub burn_in: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub stream_index: u64,
}

impl SimConfig {
    pub fn new(n: usize, step: f64, master_seed: u64) -> Self {
        SimConfig { n, step, substeps: default_substeps(), x0: None, burn_in: false, master_seed, stream_index: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "need at least one observation interval"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", "must be positive and finite"));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.step
    }
}

/// Jumps that occurred along a simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentJumps {
    /// Jump times in `(0, T_n]`, increasing.
    pub times: Vec<f64>,
    /// Jump sizes, `m` per jump.
    pub sizes: Vec<f64>,
    /// 1-based observation interval of each jump.
    pub interval: Vec<usize>,
    /// `Δ_j N` for `j = 1..n`.
    pub counts: Vec<u32>,
}

impl LatentJumps {
    pub fn total(&self) -> usize {
        self.times.len()
    }
}

/// Observations `X_{t_0}, …, X_{t_n}` stored row-major, `m` values per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub m: usize,
    pub step: f64,
    pub observations: Vec<f64>,
    pub latent: Option<LatentJumps>,
}

impl Path {
    pub fn new(m: usize, step: f64, observations: Vec<f64>) -> Result<Self> {
        if m == 0 || observations.len() < 2 * m || !observations.len().is_multiple_of(m) {
            return Err(Error::Dimension { expected: m, got: observations.len(), context: "path observations" });
        }
        if let Some(i) = observations.iter().position(|v| !v.is_finite()) {
            return Err(Error::Simulation { interval: i / m });
        }
        Ok(Path { m, step, observations, latent: None })
    }

    /// Number of increments.
    pub fn n(&self) -> usize {
        self.observations.len() / self.m - 1
    }

    pub fn x(&self, j: usize) -> &[f64] {
        &self.observations[j * self.m..(j + 1) * self.m]
    }

    pub fn horizon(&self) -> f64 {
        self.n() as f64 * self.step
    }

    /// Scalar increments `Δ_j X`, `m = 1` only.
    pub fn increments(&self) -> Vec<f64> {
        assert_eq!(self.m, 1, "scalar increments need m = 1");
        self.observations.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.m).map(|i| format!("x_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for j in 0..=self.n() {
            let mut row = vec![format!("{:e}", j as f64 * self.step)];
            row.extend(self.x(j).iter().map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a path written by [`Path::write_csv`]; the step is taken from the
    /// first two time stamps.
    pub fn read_csv(input: impl Read) -> Result<Path> {
        let mut r = csv::Reader::from_reader(input);
        let m = r.headers().map_err(csv_err)?.len().saturating_sub(1);
        let mut times = Vec::new();
        let mut obs = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec.iter().map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")))).collect::<Result<_>>()?;
            if vals.len() != m + 1 {
                return Err(Error::Parse(format!("row with {} columns, expected {}", vals.len(), m + 1)));
            }
            times.push(vals[0]);
            obs.extend_from_slice(&vals[1..]);
        }
        if times.len() < 2 {
            return Err(Error::Parse("path needs at least two rows".into()));
        }
        let step = times[1] - times[0];
        Path::new(m, step, obs)
    }

    pub fn write_jumps_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "interval".to_string()];
        header.extend((1..=self.m).map(|i| format!("z_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        if let Some(l) = &self.latent {
            for (k, t) in l.times.iter().enumerate() {
                let mut row = vec![format!("{t:e}"), l.interval[k].to_string()];
                row.extend(l.sizes[k * self.m..(k + 1) * self.m].iter().map(|v| format!("{v:e}")));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary layout: `"JDLP"`, version, n, m as little-endian `u32`, then the
    /// step and the observations as little-endian `f64`.
    pub fn write_binary(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&(self.n() as u32).to_le_bytes())?;
        out.write_all(&(self.m as u32).to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        for v in &self.observations {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut input: impl Read) -> Result<Path> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(Error::Parse("bad magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
        if word(1) != BINARY_VERSION {
            return Err(Error::Parse(format!("unsupported version {}", word(1))));
        }
        let (n, m) = (word(2) as usize, word(3) as usize);
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let step = f64::from_le_bytes(buf);
        let mut obs = Vec::with_capacity((n + 1) * m);
        for _ in 0..(n + 1) * m {
            input.read_exact(&mut buf)?;
            obs.push(f64::from_le_bytes(buf));
        }
        Path::new(m, step, obs)
    }

    pub fn save(&self, dir: &FsPath) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("path.csv"))?)?;
        self.write_jumps_csv(std::fs::File::create(dir.join("jumps.csv"))?)?;
        self.write_binary(std::io::BufWriter::new(std::fs::File::create(dir.join("path.bin"))?))
    }
}

const MAGIC: &[u8; 4] = b"JDLP";
const BINARY_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

struct Streams {
    jumps: Purpose,
    brownian: Purpose,
    bridge: Purpose,
}

const OBSERVED: Streams = Streams { jumps: Purpose::Jumps, brownian: Purpose::Brownian, bridge: Purpose::Bridge };
const BURN_IN: Streams = Streams { jumps: Purpose::BurnInJumps, brownian: Purpose::BurnInBrownian, bridge: Purpose::BurnInBridge };

/// Brownian values at the substep nodes of one interval, `(M + 1) × m`,
/// starting from zero. For `M = 2^k` the nodes are filled coarse to fine by
/// midpoint bridges, so a run with `2M` substeps refines the same path.
fn brownian_nodes(rng: &mut ChaCha8Rng, m: usize, substeps: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; (substeps + 1) * m];
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    if substeps.is_power_of_two() {
        for i in 0..m {
            w[substeps * m + i] = h.sqrt() * normal();
        }
        let mut span = substeps;
        while span > 1 {
            let half = span / 2;
            let sd = (h * half as f64 / substeps as f64 / 2.0).sqrt();
            for left in (0..substeps).step_by(span) {
                let mid = left + half;
                for i in 0..m {
                    let mean = 0.5 * (w[left * m + i] + w[(left + span) * m + i]);
                    w[mid * m + i] = mean + sd * normal();
                }
            }
            span = half;
        }
    } else {
        let sd = (h / substeps as f64).sqrt();
        for s in 1..=substeps {
            for i in 0..m {
                w[s * m + i] = w[(s - 1) * m + i] + sd * normal();
            }
        }
    }
    w
}

/// Euler–Maruyama step `x += a(x) dt + b(x) dW`.
fn euler_step(model: &dyn JumpDiffusion, alpha: &ParamVector, x: &mut [f64], dt: f64, dw: &[f64], scratch: &mut Scratch) {
    let m = x.len();
    model.drift(x, &alpha.theta, &mut scratch.drift);
    model.diffusion(x, &alpha.sigma, &mut scratch.diff);
    for i in 0..m {
        let mut v = scratch.drift[i] * dt;
        for k in 0..m {
            v += scratch.diff[i * m + k] * dw[k];
        }
        scratch.next[i] = x[i] + v;
    }
    x.copy_from_slice(&scratch.next);
}

struct Scratch {
    drift: Vec<f64>,
    diff: Vec<f64>,
    next: Vec<f64>,
}

fn draw_jumps(model: &dyn JumpDiffusion, alpha: &ParamVector, n: usize, h: f64, seed: u64, stream: u64, streams: &Streams) -> LatentJumps {
    let m = model.state_dim();
    let horizon = n as f64 * h;
    let mut rng = stream_rng(seed, streams.jumps, stream, 0);
    let rate = model.intensity(&alpha.theta) * horizon;
    let total = if rate > 0.0 { Poisson::new(rate).expect("finite positive rate").sample(&mut rng) as usize } else { 0 };
    // Uniform on (0, 1] so that every time lies in (0, T].
    let mut times: Vec<f64> = (0..total).map(|_| (1.0 - rng.random::<f64>()) * horizon).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let mut sizes = vec![0.0; total * m];
    for k in 0..total {
        model.sample_jump(&alpha.theta, &mut rng, &mut sizes[k * m..(k + 1) * m]);
    }
    let mut counts = vec![0u32; n];
    let interval: Vec<usize> = times
        .iter()
        .map(|&t| {
            let j = ((t / h).ceil() as usize).clamp(1, n);
            counts[j - 1] += 1;
            j
        })
        .collect();
    LatentJumps { times, sizes, interval, counts }
}

fn run(
    model: &dyn JumpDiffusion,
    alpha: &ParamVector,
    x0: Vec<f64>,
    n: usize,
    h: f64,
    substeps: usize,
    seed: u64,
    stream: u64,
    streams: &Streams,
) -> Result<Path> {
    let m = model.state_dim();
    let latent = draw_jumps(model, alpha, n, h, seed, stream, streams);
    let mut obs = Vec::with_capacity((n + 1) * m);
    obs.extend_from_slice(&x0);
    let mut x = x0;
    let mut scratch = Scratch { drift: vec![0.0; m], diff: vec![0.0; m * m], next: vec![0.0; m] };
    let (mut dw, mut wc, mut wt) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let delta = h / substeps as f64;
    let mut next_jump = 0usize;
    for j in 1..=n {
        let mut brng = stream_rng(seed, streams.brownian, stream, j as u64);
        let w = brownian_nodes(&mut brng, m, substeps, h);
        let mut bridge = stream_rng(seed, streams.bridge, stream, j as u64);
        let t_start = (j - 1) as f64 * h;
        let last_jump = next_jump + latent.counts[j - 1] as usize;
        for s in 0..substeps {
            let w0 = &w[s * m..(s + 1) * m];
            let w1 = &w[(s + 1) * m..(s + 2) * m];
            let (mut c, c_end) = (s as f64 * delta, (s + 1) as f64 * delta);
            wc.copy_from_slice(w0);
            while next_jump < last_jump {
                let local = latent.times[next_jump] - t_start;
                let sub = ((local / delta).ceil() as usize).clamp(1, substeps) - 1;
                if sub != s {
                    break;
                }
                let tau = local.clamp(c, c_end);
                let frac = if c_end > c { (tau - c) / (c_end - c) } else { 1.0 };
                let var = (tau - c) * (c_end - tau) / (c_end - c).max(f64::MIN_POSITIVE);
                for i in 0..m {
                    let z: f64 = StandardNormal.sample(&mut bridge);
                    wt[i] = wc[i] + frac * (w1[i] - wc[i]) + var.max(0.0).sqrt() * z;
                    dw[i] = wt[i] - wc[i];
                }
                euler_step(model, alpha, &mut x, tau - c, &dw, &mut scratch);
                for i in 0..m {
                    x[i] += latent.sizes[next_jump * m + i];
                }
                wc.copy_from_slice(&wt);
                c = tau;
                next_jump += 1;
            }
            for i in 0..m {
                dw[i] = w1[i] - wc[i];
            }
            euler_step(model, alpha, &mut x, c_end - c, &dw, &mut scratch);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation { interval: j });
        }
        obs.extend_from_slice(&x);
    }
    Ok(Path { m, step: h, observations: obs, latent: Some(latent) })
}

/// Simulates one path. Deterministic in `(master_seed, stream_index)`.
pub fn simulate_path(model: &dyn JumpDiffusion, alpha: &ParamVector, cfg: &SimConfig) -> Result<Path> {
    cfg.validate()?;
    let m = model.state_dim();
    if alpha.d1() != model.sigma_dim() || alpha.d2() != model.theta_dim() {
        return Err(Error::Dimension { expected: model.sigma_dim() + model.theta_dim(), got: alpha.dim(), context: "alpha" });
    }
    model.param_space().check(&alpha.to_vec())?;
    let mut x0 = cfg.x0.clone().unwrap_or_else(|| model.default_initial_state(alpha));
    if x0.len() != m {
        return Err(Error::Dimension { expected: m, got: x0.len(), context: "x0" });
    }
    if cfg.burn_in {
        if let Some(b) = model.burn_in_time(alpha) {
            let steps = (b / cfg.step).ceil().max(1.0) as usize;
            let warm = run(model, alpha, x0, steps, cfg.step, cfg.substeps, cfg.master_seed, cfg.stream_index, &BURN_IN)?;
            x0 = warm.x(steps).to_vec();
        }
    }
    run(model, alpha, x0, cfg.n, cfg.step, cfg.substeps, cfg.master_seed, cfg.stream_index, &OBSERVED)
}

/// `count` paths with stream indices `0..count`, in stream order.
pub fn simulate_ensemble(model: &dyn JumpDiffusion, alpha: &ParamVector, cfg: &SimConfig, count: usize, threads: Option<usize>) -> Result<Vec<Path>> {
    if count == 0 {
        return Err(Error::invalid("replications", "need at least one"));
    }
    map_indexed(count, threads, |r| {
        let c = SimConfig { stream_index: r as u64, ..cfg.clone() };
        simulate_path(model, alpha, &c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_merton, builtin_ou_jump};

    #[test]
    fn dyadic_nodes_refine_the_coarse_path() {
        let mut a = stream_rng(1, Purpose::Brownian, 0, 5);
        let mut b = stream_rng(1, Purpose::Brownian, 0, 5);
        let coarse = brownian_nodes(&mut a, 1, 8, 0.3);
        let fine = brownian_nodes(&mut b, 1, 16, 0.3);
        for k in 0..=8 {
            assert_eq!(coarse[k], fine[2 * k]);
        }
    }

    #[test]
    fn latent_counts_match_times() {
        let model = builtin_merton(0.0, 1.0, 2.0, 0.0, 0.5).unwrap();
        let cfg = SimConfig::new(500, 0.1, 9);
        let p = simulate_path(&model, &model.nominal_alpha(), &cfg).unwrap();
        let l = p.latent.as_ref().unwrap();
        assert_eq!(l.counts.iter().map(|&c| c as usize).sum::<usize>(), l.total());
        for (k, &t) in l.times.iter().enumerate() {
            assert!(t > 0.0 && t <= p.horizon());
            let j = l.interval[k];
            assert!(t > (j - 1) as f64 * 0.1 - 1e-12 && t <= j as f64 * 0.1 + 1e-12);
        }
    }

    #[test]
    fn deterministic_ode_without_noise() {
        // σ is bounded away from zero by the box, so use a tiny value.
        let model = builtin_ou_jump(1.0, 1e-5, 0.0, 0.0, 0.5).unwrap();
        let mut cfg = SimConfig::new(100, 0.01, 3);
        cfg.x0 = Some(vec![2.0]);
        let p = simulate_path(&model, &model.nominal_alpha(), &cfg).unwrap();
        let exact = 2.0 * (-1.0f64).exp();
        let delta = 0.01 / 16.0;
        assert!((p.x(100)[0] - exact).abs() < 2.0 * delta + 1e-4);
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        let p = simulate_path(&model, &model.nominal_alpha(), &SimConfig::new(50, 0.02, 4)).unwrap();
        let mut bin = Vec::new();
        p.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..4], b"JDLP");
        assert_eq!(bin.len(), 16 + 8 + 51 * 8);
        let back = Path::read_binary(bin.as_slice()).unwrap();
        assert_eq!(back.observations, p.observations);
        let mut text = Vec::new();
        p.write_csv(&mut text).unwrap();
        let back = Path::read_csv(text.as_slice()).unwrap();
        assert_eq!(back.observations, p.observations);
        assert!((back.step - 0.02).abs() < 1e-15);
    }
}
