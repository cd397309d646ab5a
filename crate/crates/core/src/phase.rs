//! Phase-diagram constants of the lattice sigma model and two finite-box
//! diagnostics: decay of `μ(e^{t_x/2})` away from the pinned origin, and
//! the averaged effective-resistance bound.
//!
//! ```text
//! I_β  = √β ∫ e^{−β(cosh t − 1)} dt/√(2π)
//! Î_a  = E[I_β],  Ĵ_a = E[max(β,1) e^{min(β,1)}],   β ~ Gamma(a, 1)
//! β_c(d):  I_β e^{β(2d−2)} (2d−1) = 1
//! a_c(d):  Î_a Ĵ_a^{2d−2} (2d−1) = 1
//! ```

use std::io::Write;

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LatticeBox, PinnedGraph};
use crate::mcmc::{adapt_and_sample, McmcSettings};
use crate::measure::MeasureParams;
use crate::network::effective_resistance;
use crate::process::stream_rng;
use crate::quadrature::{bisect, bracket_up, integrate, Quad};
use crate::scalar::{ln_gamma, Scalar};
use crate::stats::{effective_sample_size, mean_var, ols_slope};

/// Residual of the `β_c` root.
pub const BETA_C_RESIDUAL: f64 = 1e-10;
/// Residual of the `a_c` root.
pub const A_C_RESIDUAL: f64 = 1e-8;

fn abs_tol<T: Scalar>(x: f64) -> T {
    T::lit(x).max(T::epsilon() * T::lit(64.0))
}

/// Integrates at `tol` and at `tol/2`; the two must agree within `tol`.
fn quad_checked<T: Scalar>(f: impl Fn(T) -> T, a: T, b: T, tol: T) -> Result<T> {
    let coarse: Quad<T> = integrate(&f, a, b, tol, T::zero())?;
    let fine = integrate(&f, a, b, tol * T::lit(0.5), T::zero())?;
    let diff = (coarse.value - fine.value).abs();
    if diff > tol {
        return Err(Error::Consistency {
            residual: diff.as_f64(),
            limit: tol.as_f64(),
        });
    }
    Ok(fine.value)
}

fn check_positive<T: Scalar>(x: T, name: &str) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite and > 0, got {x}")))
    }
}

/// `I_β ∈ (0, 1)`, to absolute accuracy 1e-12 (in `f64`).
pub fn i_beta<T: Scalar>(beta: T) -> Result<T> {
    check_positive(beta, "β")?;
    let two = T::lit(2.0);
    // e^{−80} is far below the tolerance
    let t_max = (T::one() + T::lit(80.0) / beta).acosh();
    let prefactor = (two * beta / T::PI()).sqrt();
    let tol = abs_tol::<T>(1e-12) / prefactor.max(T::one());
    let integral = quad_checked(
        |t: T| {
            let s = (t / two).sinh();
            (-two * beta * s * s).exp()
        },
        T::zero(),
        t_max,
        tol,
    )?;
    Ok(prefactor * integral)
}

/// `I_β e^{β(2d−2)} (2d−1)`.
pub fn beta_bound_base<T: Scalar>(d: usize, beta: T) -> Result<T> {
    let k = T::count(2 * d);
    Ok(i_beta(beta)? * (beta * (k - T::lit(2.0))).exp() * (k - T::one()))
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be ≥ 1".into()));
    }
    Ok(())
}

/// Critical `β_c(d)`; `+∞` for `d = 1`.
pub fn beta_c<T: Scalar>(d: usize) -> Result<T> {
    check_dim(d)?;
    if d == 1 {
        return Ok(T::infinity());
    }
    let f = |b: T| Ok(beta_bound_base(d, b)? - T::one());
    let (lo, hi) = bracket_up(f, T::lit(1e-8), T::lit(1e3))?;
    bisect(f, lo, hi, T::lit(BETA_C_RESIDUAL))
}

/// `Î_a` by the Γ-ratio representation
/// `Γ(a+½)/Γ(a) ∫ cosh(t)^{−a−½} dt/√(2π)`.
pub fn i_hat<T: Scalar>(a: T) -> Result<T> {
    check_positive(a, "a")?;
    let half = T::lit(0.5);
    let p = a + half;
    let two = T::lit(2.0);
    let ln_cosh = |t: T| t + ((T::one() + (-two * t).exp()) * half).ln();
    // beyond L the integrand is 2^p e^{−pt} to relative accuracy e^{−2L}
    let l = T::lit(20.0);
    let tol = abs_tol::<T>(1e-12);
    let body = quad_checked(|t: T| (-p * ln_cosh(t)).exp(), T::zero(), l, tol)?;
    let tail = (p * two.ln() - p * l).exp() / p;
    let log_ratio = ln_gamma(p) - ln_gamma(a) - half * crate::scalar::ln_two_pi::<T>();
    Ok(two * (body + tail) * log_ratio.exp())
}

/// `Î_a = ∫ I_β Gamma(a,1)(dβ)` by nested quadrature in `y = ln β`.
pub fn i_hat_by_mixing<T: Scalar>(a: T) -> Result<T> {
    check_positive(a, "a")?;
    let y_lo = T::lit(-80.0);
    let y_hi = (T::lit(60.0) + T::lit(4.0) * a).ln();
    let lg = ln_gamma(a);
    let mut failure = None;
    let value = integrate(
        |y: T| {
            let beta = y.exp();
            match i_beta(beta) {
                Ok(i) => i * (a * y - beta - lg).exp(),
                Err(e) => {
                    failure.get_or_insert(e);
                    T::nan()
                }
            }
        },
        y_lo,
        y_hi,
        abs_tol::<T>(1e-11),
        T::zero(),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(value?.value)
}

/// `Ĵ_a`, split at `β = 1`. Below 1 the substitution `s = β^a` removes the
/// `β^{a−1}` singularity of the Gamma density.
pub fn j_hat<T: Scalar>(a: T) -> Result<T> {
    check_positive(a, "a")?;
    let tol = abs_tol::<T>(1e-11);
    let inv_a = T::one() / a;
    let lg1 = ln_gamma(a + T::one());
    let lower = quad_checked(
        |s: T| {
            // e^β against the Gamma density, which became ds/Γ(a+1)
            let beta = s.powf(inv_a);
            beta.exp() * (-beta - lg1).exp()
        },
        T::zero(),
        T::one(),
        tol,
    )?;
    let lg = ln_gamma(a);
    let upper = quad_checked(
        |b: T| b * T::one().exp() * ((a - T::one()) * b.ln() - b - lg).exp(),
        T::one(),
        T::lit(100.0) + T::lit(4.0) * a,
        tol,
    )?;
    Ok(lower + upper)
}

/// `Î_a Ĵ_a^{2d−2} (2d−1)`.
pub fn gamma_bound_base<T: Scalar>(d: usize, a: T) -> Result<T> {
    let k = T::count(2 * d);
    Ok(i_hat(a)? * j_hat(a)?.powf(k - T::lit(2.0)) * (k - T::one()))
}

/// Threshold `a_c(d)`; `+∞` for `d = 1` where `Î_a < 1` for every `a`.
pub fn a_c<T: Scalar>(d: usize) -> Result<T> {
    check_dim(d)?;
    if d == 1 {
        return Ok(T::infinity());
    }
    let f = |a: T| Ok(gamma_bound_base(d, a)? - T::one());
    let mut start = T::lit(1e-3);
    while f(start)? > T::zero() {
        start = start * T::lit(0.1);
        if start < T::lit(1e-12) {
            return Err(Error::RootFinding(format!("bound base exceeds 1 down to a = {start}")));
        }
    }
    let (lo, hi) = bracket_up(f, start, T::lit(1e4))?;
    bisect(f, lo, hi, T::lit(A_C_RESIDUAL))
}

/// `C₀ = 2d/(2d−1)`.
pub fn c0<T: Scalar>(d: usize) -> T {
    T::count(2 * d) / T::count(2 * d - 1)
}

/// Conductance law of a phase point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conductance<T> {
    /// Constant `β` on every edge.
    Beta(T),
    /// I.i.d. `Gamma(a, 1)` edge weights.
    Gamma(T),
}

/// Constants at a point of the phase diagram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhasePoint<T> {
    pub d: usize,
    pub conductance: Conductance<T>,
    /// `I_β` or `Î_a`.
    pub i: T,
    /// `Ĵ_a` (Gamma case only).
    pub j: Option<T>,
    /// `I_β e^{β(2d−2)}(2d−1)` or `Î_a Ĵ_a^{2d−2}(2d−1)`.
    pub bound_base: T,
}

impl<T: Scalar> PhasePoint<T> {
    pub fn new(d: usize, conductance: Conductance<T>) -> Result<Self> {
        check_dim(d)?;
        let k = T::count(2 * d);
        match conductance {
            Conductance::Beta(b) => {
                let i = i_beta(b)?;
                Ok(Self {
                    d,
                    conductance,
                    i,
                    j: None,
                    bound_base: i * (b * (k - T::lit(2.0))).exp() * (k - T::one()),
                })
            }
            Conductance::Gamma(a) => {
                let i = i_hat(a)?;
                let j = j_hat(a)?;
                Ok(Self {
                    d,
                    conductance,
                    i,
                    j: Some(j),
                    bound_base: i * j.powf(k - T::lit(2.0)) * (k - T::one()),
                })
            }
        }
    }

    /// Right-hand side `C₀ I_η base^{|x|}` of the decay bound.
    pub fn decay_bound(&self, eta: T, distance: u64) -> Result<T> {
        Ok(c0::<T>(self.d) * i_beta(eta)? * self.bound_base.powi(distance as i32))
    }
}

/// Configuration of [`decay_scan`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub d: usize,
    pub n: usize,
    pub conductance: Conductance<f64>,
    /// Pinning strength at the origin.
    #[serde(default = "one")]
    pub eta: f64,
    /// Conductance draws averaged over in the Gamma case.
    #[serde(default = "default_draws")]
    pub draws: usize,
    pub mcmc: McmcSettings,
}

fn one() -> f64 {
    1.0
}

fn default_draws() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub d: usize,
    pub n: usize,
    /// `β` or `a`.
    pub parameter: f64,
    pub distance: u64,
    pub vertex: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    /// `μ(t_x)`, used for the Jensen lower bound `e^{μ(t_x)/2}`.
    pub mean_t: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayTable {
    pub bound_base: f64,
    pub rows: Vec<DecayRow>,
}

impl DecayTable {
    /// Least-squares slope of `ln estimate` against `|x|`.
    pub fn log_slope(&self) -> f64 {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.distance as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.estimate.ln()).collect();
        ols_slope(&xs, &ys)
    }

    /// Rows whose estimate exceeds the bound by more than `k` standard errors.
    pub fn violations(&self, k: f64) -> Vec<&DecayRow> {
        self.rows.iter().filter(|r| r.estimate > r.bound + k * r.stderr).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d,n,parameter,distance,estimate,stderr,bound")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.d, r.n, r.parameter, r.distance, r.estimate, r.stderr, r.bound
            )?;
        }
        Ok(())
    }
}

struct Estimates {
    mean: Vec<f64>,
    var_of_mean: Vec<f64>,
    mean_t: Vec<f64>,
    flagged: bool,
}

fn estimate_axis(
    lattice: &LatticeBox<f64>,
    weights: Option<Vec<f64>>,
    eta: f64,
    points: &[usize],
    settings: &McmcSettings,
) -> Result<Estimates> {
    let graph = match weights {
        Some(w) => lattice.graph.with_weights(w)?,
        None => lattice.graph.clone(),
    };
    let target = MeasureParams::Pinned(PinnedGraph::point(graph, lattice.origin(), eta)?);
    let out = adapt_and_sample(&target, settings)?;
    let mut est = Estimates {
        mean: Vec::new(),
        var_of_mean: Vec::new(),
        mean_t: Vec::new(),
        flagged: out.diagnostics.flagged,
    };
    for &v in points {
        let t = out.column(v);
        let h: Vec<f64> = t.iter().map(|x| (0.5 * x).exp()).collect();
        let (m, var) = mean_var(&h)?;
        let ess = effective_sample_size(&h).max(1.0);
        est.mean.push(m);
        est.var_of_mean.push(var / ess);
        est.mean_t.push(t.iter().sum::<f64>() / t.len() as f64);
    }
    Ok(est)
}

/// MCMC estimates of `μ_Λ^{ηδ₀}(e^{t_x/2})` for `x = (k, 0, …, 0)`,
/// `k = 0..=n`, next to the decay bound. In the Gamma case the estimate is
/// averaged over `draws` independent conductance fields (parallel).
pub fn decay_scan(cfg: &DecayConfig) -> Result<DecayTable> {
    let lattice = LatticeBox::new(cfg.d, cfg.n, 1.0)?;
    let point = PhasePoint::new(cfg.d, cfg.conductance)?;
    let points: Vec<usize> = (0..=cfg.n)
        .map(|k| lattice.axis_point(k).expect("axis point inside the box"))
        .collect();
    let (parameter, est) = match cfg.conductance {
        Conductance::Beta(b) => {
            check_positive(b, "β")?;
            let w = vec![b; lattice.graph.n_edges()];
            (b, estimate_axis(&lattice, Some(w), cfg.eta, &points, &cfg.mcmc)?)
        }
        Conductance::Gamma(a) => {
            if cfg.draws < 2 {
                return Err(Error::InvalidArgument("Gamma scan needs ≥ 2 conductance draws".into()));
            }
            let law = Gamma::new(a, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let runs: Vec<Estimates> = (0..cfg.draws as u64)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(cfg.mcmc.seed, (1 << 40) | k);
                    // β_e of order e^{−1/a} are legal but make the chain stiff
                    let w: Vec<f64> = (0..lattice.graph.n_edges())
                        .map(|_| law.sample(&mut rng).max(f64::MIN_POSITIVE))
                        .collect();
                    let mut s = cfg.mcmc.clone();
                    s.stream = cfg.mcmc.stream + 1 + k;
                    estimate_axis(&lattice, Some(w), cfg.eta, &points, &s)
                })
                .collect::<Result<_>>()?;
            let m = runs.len() as f64;
            let mut mean = vec![0.0; points.len()];
            let mut var_of_mean = vec![0.0; points.len()];
            let mut mean_t = vec![0.0; points.len()];
            for p in 0..points.len() {
                let vals: Vec<f64> = runs.iter().map(|r| r.mean[p]).collect();
                let (mu, var) = mean_var(&vals)?;
                mean[p] = mu;
                // between-draw spread already contains the within-chain error
                var_of_mean[p] = var / m;
                mean_t[p] = runs.iter().map(|r| r.mean_t[p]).sum::<f64>() / m;
            }
            let flagged = runs.iter().any(|r| r.flagged);
            (
                a,
                Estimates {
                    mean,
                    var_of_mean,
                    mean_t,
                    flagged,
                },
            )
        }
    };
    let rows = points
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let distance = lattice.l1_norm(v);
            Ok(DecayRow {
                d: cfg.d,
                n: cfg.n,
                parameter,
                distance,
                vertex: v,
                estimate: est.mean[k],
                stderr: est.var_of_mean[k].sqrt(),
                bound: point.decay_bound(cfg.eta, distance)?,
                mean_t: est.mean_t[k],
                flagged: est.flagged,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DecayTable {
        bound_base: point.bound_base,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResistanceConfig {
    pub d: usize,
    pub n: usize,
    pub beta: f64,
    pub mcmc: McmcSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResistanceReport {
    /// Monte Carlo mean of `c₀ R(0, ∂Λ_n, c)`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `16 d R(0, ∂Λ_n)`.
    pub rhs: f64,
    /// `R(0, ∂Λ_n)` at unit conductances.
    pub unit_resistance: f64,
    /// `|Σ θ² − R(0, ∂Λ_n)|` for the unit current flow `θ`.
    pub flow_energy_residual: f64,
    /// Samples where `c₀ Σ θ²/c < c₀ R(c)`.
    pub flow_bound_violations: usize,
    pub samples: usize,
    /// `lhs ≤ rhs + 3·stderr`.
    pub holds: bool,
    pub flagged: bool,
    /// Per-sample `(c₀ R(c), c₀ Σ θ²/c)`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_sample: Vec<(f64, f64)>,
}

/// Samples `t ~ μ_Λ^{δ₀,β}` and compares `E[c₀ R(0, ∂Λ_n, c)]`, with
/// `c_ij = β e^{t_i+t_j}` and `c₀ = Σ_{j∼0} c_0j`, against `16 d R(0, ∂Λ_n)`.
/// The inequality is reported, not enforced.
pub fn resistance_bound_check(cfg: &ResistanceConfig) -> Result<ResistanceReport> {
    check_positive(cfg.beta, "β")?;
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("box radius must be ≥ 1".into()));
    }
    let lattice = LatticeBox::new(cfg.d, cfg.n, 1.0)?;
    let g = &lattice.graph;
    let o = lattice.origin();
    let ones = vec![1.0; g.n_edges()];
    let unit = effective_resistance(g, &ones, o, lattice.boundary())?;
    let theta = unit.flow.clone();
    let energy: f64 = theta.iter().map(|x| x * x).sum();

    let weighted = g.with_weights(vec![cfg.beta; g.n_edges()])?;
    let target = MeasureParams::Pinned(PinnedGraph::point(weighted, o, 1.0)?);
    let out = adapt_and_sample(&target, &cfg.mcmc)?;

    let per_sample: Vec<(f64, f64)> = out
        .samples
        .par_iter()
        .map(|t| {
            let c: Vec<f64> = g
                .edges()
                .iter()
                .map(|&(i, j)| cfg.beta * (t[i] + t[j]).exp())
                .collect();
            let c0: f64 = g.neighbors(o).iter().map(|&(_, e)| c[e]).sum();
            let r = effective_resistance(g, &c, o, lattice.boundary())?.resistance;
            let flow_bound: f64 = theta.iter().zip(&c).map(|(th, ce)| th * th / ce).sum();
            Ok((c0 * r, c0 * flow_bound))
        })
        .collect::<Result<_>>()?;
    let violations = per_sample
        .iter()
        .filter(|(lhs, bound)| *bound < *lhs * (1.0 - 1e-10))
        .count();
    let values: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
    let (lhs, var) = mean_var(&values)?;
    let lhs_stderr = (var / effective_sample_size(&values).max(1.0)).sqrt();
    let rhs = 16.0 * cfg.d as f64 * unit.resistance;
    Ok(ResistanceReport {
        lhs,
        lhs_stderr,
        rhs,
        unit_resistance: unit.resistance,
        flow_energy_residual: (energy - unit.resistance).abs(),
        flow_bound_violations: violations,
        samples: per_sample.len(),
        holds: lhs <= rhs + 3.0 * lhs_stderr,
        flagged: out.diagnostics.flagged,
        per_sample,
    })
}
