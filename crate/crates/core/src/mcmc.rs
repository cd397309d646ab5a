//! Random-walk Metropolis with burn-in adaptation and convergence
//! diagnostics.
//!
//! During burn-in the global proposal scale follows a Robbins–Monro
//! recursion towards the target acceptance rate and, optionally, the
//! proposal covariance is learned from the chain. Both are frozen when
//! sampling starts.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::measure::{project_zero_sum, Gauge, MeasureParams};
use crate::process::stream_rng;
use crate::stats::{autocorrelation, effective_sample_size, split_rhat};

/// R̂ above this flags the output.
pub const RHAT_LIMIT: f64 = 1.05;

/// Target density in log form; non-finite values are rejected moves.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn gauge(&self) -> Gauge;
    fn log_density(&self, x: &[f64]) -> f64;
}

impl LogDensity for MeasureParams<f64> {
    fn dim(&self) -> usize {
        MeasureParams::dim(self)
    }

    fn gauge(&self) -> Gauge {
        MeasureParams::gauge(self)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        MeasureParams::log_density(self, x).unwrap_or(f64::NAN)
    }
}

/// Closure-backed target.
pub struct FnTarget<F> {
    pub dim: usize,
    pub gauge: Gauge,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gauge(&self) -> Gauge {
        self.gauge
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// State of one Metropolis chain.
#[derive(Debug, Clone)]
pub struct McmcChain {
    pub position: Vec<f64>,
    pub log_density: f64,
    pub proposal_scale: f64,
    pub accepted: u64,
    pub proposed: u64,
    /// Proposals rejected because the target was not finite there.
    pub nonfinite: u64,
    gauge: Gauge,
    /// Lower Cholesky factor of the proposal covariance (identity if unset).
    shape: Option<Matrix<f64>>,
    last_acceptance: f64,
    buf: Vec<f64>,
    noise: Vec<f64>,
}

impl McmcChain {
    pub fn new<D: LogDensity + ?Sized>(target: &D, start: Vec<f64>, scale: f64) -> Result<Self> {
        if start.len() != target.dim() {
            return Err(Error::InvalidArgument(format!(
                "start has {} coordinates, target has {}",
                start.len(),
                target.dim()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument("proposal scale must be positive".into()));
        }
        let mut position = start;
        if target.gauge() == Gauge::ZeroSum {
            project_zero_sum(&mut position);
        }
        let log_density = target.log_density(&position);
        if !log_density.is_finite() {
            return Err(Error::NonFinite(format!("target at the start point: {log_density}")));
        }
        let n = position.len();
        Ok(Self {
            position,
            log_density,
            proposal_scale: scale,
            accepted: 0,
            proposed: 0,
            nonfinite: 0,
            gauge: target.gauge(),
            shape: None,
            last_acceptance: 0.0,
            buf: vec![0.0; n],
            noise: vec![0.0; n],
        })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Sets the proposal covariance through its lower Cholesky factor.
    pub fn set_shape(&mut self, lower: Option<Matrix<f64>>) {
        self.shape = lower;
    }
}

/// One Metropolis step with a Gaussian proposal (projected onto `Σx = 0`
/// in the zero-sum gauge). Returns whether the move was accepted.
pub fn metropolis_step<D: LogDensity + ?Sized, R: Rng + ?Sized>(
    chain: &mut McmcChain,
    target: &D,
    rng: &mut R,
) -> bool {
    let n = chain.position.len();
    for z in chain.noise.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
    match &chain.shape {
        Some(l) => {
            for i in 0..n {
                let row = l.row(i);
                let dz: f64 = row[..=i].iter().zip(&chain.noise[..=i]).map(|(a, b)| a * b).sum();
                chain.buf[i] = chain.proposal_scale * dz;
            }
        }
        None => {
            for i in 0..n {
                chain.buf[i] = chain.proposal_scale * chain.noise[i];
            }
        }
    }
    if chain.gauge == Gauge::ZeroSum {
        project_zero_sum(&mut chain.buf);
    }
    for i in 0..n {
        chain.buf[i] += chain.position[i];
    }
    chain.proposed += 1;
    let proposal = target.log_density(&chain.buf);
    if !proposal.is_finite() {
        chain.nonfinite += 1;
        chain.last_acceptance = 0.0;
        return false;
    }
    let log_alpha = proposal - chain.log_density;
    chain.last_acceptance = log_alpha.min(0.0).exp();
    let accept = log_alpha >= 0.0 || rng.gen::<f64>() < chain.last_acceptance;
    if accept {
        std::mem::swap(&mut chain.position, &mut chain.buf);
        if chain.gauge == Gauge::ZeroSum {
            // drift control
            project_zero_sum(&mut chain.position);
        }
        chain.log_density = proposal;
        chain.accepted += 1;
    }
    accept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    pub n_samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Keep every `thinning`-th state; `None` picks the smallest lag with
    /// autocorrelation of the monitored coordinate below 0.5.
    #[serde(default)]
    pub thinning: Option<usize>,
    #[serde(default)]
    pub monitor: usize,
    #[serde(default)]
    pub initial_scale: Option<f64>,
    #[serde(default = "default_true")]
    pub adapt_covariance: bool,
    #[serde(default)]
    pub seed: u64,
    /// Stream of `seed` to draw from; chains of one run use sub-streams.
    #[serde(default)]
    pub stream: u64,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
}

fn default_burn_in() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

impl McmcSettings {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            burn_in: default_burn_in(),
            thinning: None,
            monitor: 0,
            initial_scale: None,
            adapt_covariance: true,
            seed,
            stream: 0,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ess: Vec<f64>,
    pub rhat: Vec<f64>,
    pub acceptance: f64,
    pub scale: f64,
    pub thinning: usize,
    pub nonfinite: u64,
    /// True when a diagnostic exceeded its threshold.
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct McmcOutput {
    /// Retained samples, one row per state.
    pub samples: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl McmcOutput {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[k]).collect()
    }

    /// CSV with one row per retained sample.
    pub fn write_csv<W: Write>(&self, mut w: W, prefix: &str) -> Result<()> {
        let d = self.samples.first().map_or(0, |s| s.len());
        let header: Vec<String> = (0..d).map(|i| format!("{prefix}{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn effective_dim(dim: usize, gauge: Gauge) -> usize {
    match gauge {
        Gauge::ZeroSum => dim.saturating_sub(1).max(1),
        Gauge::Free => dim.max(1),
    }
}

fn target_acceptance(dim: usize) -> f64 {
    if dim == 1 {
        0.44
    } else {
        0.234
    }
}

/// Running mean and covariance (Welford).
struct CovAccumulator {
    n: f64,
    mean: Vec<f64>,
    m2: Matrix<f64>,
}

impl CovAccumulator {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; d],
            m2: Matrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        let d = x.len();
        let delta: Vec<f64> = (0..d).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / self.n;
        }
        for i in 0..d {
            let di = x[i] - self.mean[i];
            for j in 0..=i {
                self.m2[(i, j)] += delta[j] * di;
            }
        }
    }

    /// Cholesky factor of the regularised covariance, normalised to unit
    /// average variance so that the scalar scale keeps its meaning.
    fn shape(&self) -> Option<Matrix<f64>> {
        if self.n < 10.0 {
            return None;
        }
        let d = self.mean.len();
        let mut c = Matrix::from_fn(d, d, |i, j| {
            let (a, b) = if j <= i { (i, j) } else { (j, i) };
            self.m2[(a, b)] / (self.n - 1.0)
        });
        let avg = (0..d).map(|i| c[(i, i)]).sum::<f64>() / d as f64;
        if !(avg > 0.0) || !avg.is_finite() {
            return None;
        }
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] /= avg;
            }
            c[(i, i)] += 1e-6;
        }
        c.cholesky().ok().map(|ch| ch.lower().clone())
    }
}

fn run_chain<D: LogDensity + ?Sized>(target: &D, settings: &McmcSettings, chain_index: u64) -> Result<(Vec<Vec<f64>>, Diagnostics)> {
    if settings.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be ≥ 1".into()));
    }
    let dim = target.dim();
    if settings.monitor >= dim {
        return Err(Error::InvalidArgument("monitored coordinate out of range".into()));
    }
    let deff = effective_dim(dim, target.gauge());
    let alpha_star = target_acceptance(deff);
    let base_scale = 2.38 / (deff as f64).sqrt();
    let mut rng = stream_rng(settings.seed, (settings.stream << 16) | chain_index);
    let start = settings.start.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut chain = McmcChain::new(target, start, settings.initial_scale.unwrap_or(base_scale))?;

    // burn-in: Robbins–Monro on log scale, covariance learned from the
    // second quarter onwards and installed at the half and three-quarter marks
    let b = settings.burn_in;
    let mut log_scale = chain.proposal_scale.ln();
    let mut cov = CovAccumulator::new(dim);
    for k in 0..b {
        metropolis_step(&mut chain, target, &mut rng);
        let gamma = 1.0 / ((k + 1) as f64).powf(0.6);
        log_scale = (log_scale + gamma * (chain.last_acceptance - alpha_star)).clamp(-30.0, 10.0);
        chain.proposal_scale = log_scale.exp();
        if settings.adapt_covariance && dim > 1 {
            if k >= b / 4 {
                cov.push(&chain.position);
            }
            if (k + 1 == b / 2 || k + 1 == 3 * b / 4) && k > 0 {
                if let Some(l) = cov.shape() {
                    chain.set_shape(Some(l));
                    // restart the scale search for the new shape
                    if k + 1 == b / 2 {
                        log_scale = base_scale.ln();
                        chain.proposal_scale = base_scale;
                    }
                }
            }
        }
    }
    chain.accepted = 0;
    chain.proposed = 0;
    let frozen_scale = chain.proposal_scale;

    let thinning = match settings.thinning {
        Some(t) => t.max(1),
        None => {
            let pilot_len = settings.n_samples.clamp(2_000, 50_000);
            let mut pilot = Vec::with_capacity(pilot_len);
            for _ in 0..pilot_len {
                metropolis_step(&mut chain, target, &mut rng);
                pilot.push(chain.position[settings.monitor]);
            }
            (1..=pilot_len / 10)
                .find(|&lag| autocorrelation(&pilot, lag) < 0.5)
                .unwrap_or(pilot_len / 10)
                .max(1)
        }
    };
    chain.accepted = 0;
    chain.proposed = 0;

    let mut samples = Vec::with_capacity(settings.n_samples);
    for _ in 0..settings.n_samples {
        for _ in 0..thinning {
            metropolis_step(&mut chain, target, &mut rng);
        }
        samples.push(chain.position.clone());
    }
    // no adaptation after burn-in
    assert_eq!(chain.proposal_scale, frozen_scale, "proposal scale changed while sampling");

    let diag = Diagnostics {
        ess: Vec::new(),
        rhat: Vec::new(),
        acceptance: chain.acceptance_rate(),
        scale: frozen_scale,
        thinning,
        nonfinite: chain.nonfinite,
        flagged: false,
    };
    Ok((samples, diag))
}

fn summarise(chains: &[Vec<Vec<f64>>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ess = Vec::with_capacity(dim);
    let mut rhat = Vec::with_capacity(dim);
    for k in 0..dim {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|s| s[k]).collect()).collect();
        ess.push(cols.iter().map(|c| effective_sample_size(c)).sum());
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        rhat.push(split_rhat(&refs));
    }
    (ess, rhat)
}

fn flag(d: &mut Diagnostics, gauge: Gauge) {
    // in the zero-sum gauge a constant coordinate (dimension 1) has no spread
    d.flagged = d.rhat.iter().any(|&r| r > RHAT_LIMIT || (r.is_nan() && gauge == Gauge::Free));
}

/// Adapts during burn-in, then draws `n_samples` thinned states.
/// Deterministic given `settings.seed`.
pub fn adapt_and_sample<D: LogDensity + ?Sized>(target: &D, settings: &McmcSettings) -> Result<McmcOutput> {
    let (samples, mut diagnostics) = run_chain(target, settings, 0)?;
    let (ess, rhat) = summarise(std::slice::from_ref(&samples), target.dim());
    diagnostics.ess = ess;
    diagnostics.rhat = rhat;
    flag(&mut diagnostics, target.gauge());
    Ok(McmcOutput { samples, diagnostics })
}

/// Runs `n_chains` independent chains (sub-streams `0..n_chains`)
/// in parallel and pools them; R̂ is computed across all split chains.
pub fn sample_chains<D: LogDensity + ?Sized>(
    target: &D,
    settings: &McmcSettings,
    n_chains: usize,
) -> Result<McmcOutput> {
    let runs: Vec<(Vec<Vec<f64>>, Diagnostics)> = (0..n_chains as u64)
        .into_par_iter()
        .map(|s| run_chain(target, settings, s))
        .collect::<Result<_>>()?;
    let chains: Vec<Vec<Vec<f64>>> = runs.iter().map(|r| r.0.clone()).collect();
    let (ess, rhat) = summarise(&chains, target.dim());
    let mut diagnostics = Diagnostics {
        ess,
        rhat,
        acceptance: runs.iter().map(|r| r.1.acceptance).sum::<f64>() / n_chains as f64,
        scale: runs[0].1.scale,
        thinning: runs.iter().map(|r| r.1.thinning).max().unwrap_or(1),
        nonfinite: runs.iter().map(|r| r.1.nonfinite).sum(),
        flagged: false,
    };
    flag(&mut diagnostics, target.gauge());
    Ok(McmcOutput {
        samples: chains.into_iter().flatten().collect(),
        diagnostics,
    })
}
