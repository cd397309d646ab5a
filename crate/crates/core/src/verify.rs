//! Exact path-law oracles and the statistical suites that check the
//! equalities in law between the reinforced walks and their random
//! environment representations.
//!
//! The oracle recomputes reinforced transition probabilities from scratch;
//! it shares no code with the simulators in [`crate::process`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, WeightedGraph};
use crate::mcmc::{adapt_and_sample, McmcSettings};
use crate::measure::{cd_log_density, MeasureParams};
use crate::potential::{martingale_diagnostics, q_derivative, solve_q, QTracking};
use crate::process::{
    continuous_errw_step, errw_step, run_until_with, stream_rng, vrjp_step, x_process_step, z_process_step, Budget,
    EdgeTimelines, Jump, ProcessKind, ProcessState, RunConfig, TimeChange,
};
use crate::quadrature::integrate_2d;
use crate::stats::{
    chi_square_gof, chi_square_homogeneity, ks_one_sample, ks_two_sample, mean_var, ChiSquareResult, InverseGaussian,
};

/// Per-test significance level.
pub const SIGNIFICANCE: f64 = 0.01;
/// Longest path the oracle evaluates.
pub const MAX_PATH_STEPS: usize = 8;
/// Largest number of paths [`enumerate_path_law`] materialises.
pub const PATH_LAW_CAP: usize = 1 << 20;
/// Replicas per random stream; results do not depend on the thread count.
pub const BLOCK: u64 = 10_000;

fn check_weights(g: &WeightedGraph<f64>, a: &[f64]) -> Result<()> {
    if a.len() != g.n_edges() {
        return Err(Error::InvalidArgument(format!(
            "{} initial weights for {} edges",
            a.len(),
            g.n_edges()
        )));
    }
    if a.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("initial weights must be finite and > 0".into()));
    }
    Ok(())
}

/// Exact probability that the discrete ERRW with initial weights `a`
/// follows `path` (starting at `path[0]`).
pub fn errw_path_prob(g: &WeightedGraph<f64>, a: &[f64], path: &[usize]) -> Result<f64> {
    check_weights(g, a)?;
    let Some(&first) = path.first() else {
        return Err(Error::InvalidArgument("empty path".into()));
    };
    if path.len() - 1 > MAX_PATH_STEPS {
        return Err(Error::Capacity {
            what: "path steps",
            requested: path.len() - 1,
            cap: MAX_PATH_STEPS,
        });
    }
    if first >= g.n_vertices() {
        return Err(Error::InvalidArgument(format!("vertex {first} out of range")));
    }
    let mut z = a.to_vec();
    let mut p = 1.0;
    for w in path.windows(2) {
        let (x, y) = (w[0], w[1]);
        let e = g
            .edge_index(x, y)
            .ok_or_else(|| Error::InvalidArgument(format!("{x} and {y} are not adjacent")))?;
        let total: f64 = g.neighbors(x).iter().map(|&(_, f)| z[f]).sum();
        p *= z[e] / total;
        z[e] += 1.0;
    }
    Ok(p)
}

/// Law of the first `steps` moves of the ERRW.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathLaw {
    pub start: usize,
    pub steps: usize,
    pub n_vertices: usize,
    pub paths: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
    #[serde(skip)]
    index: HashMap<u64, usize>,
}

impl PathLaw {
    fn code(n: usize, path: &[usize]) -> u64 {
        path.iter().rev().fold(0u64, |acc, &v| acc * n as u64 + v as u64)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn index_of(&self, path: &[usize]) -> Option<usize> {
        if path.len() != self.steps + 1 {
            return None;
        }
        self.index.get(&Self::code(self.n_vertices, path)).copied()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Same law with the masses of paths `i` and `j` exchanged.
    pub fn with_swapped(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.probs.swap(i, j);
        out
    }
}

/// Exhaustive tree walk over all `steps`-step paths from `start`.
pub fn enumerate_path_law(g: &WeightedGraph<f64>, a: &[f64], start: usize, steps: usize) -> Result<PathLaw> {
    check_weights(g, a)?;
    if start >= g.n_vertices() {
        return Err(Error::InvalidArgument(format!("start {start} out of range")));
    }
    if steps > MAX_PATH_STEPS {
        return Err(Error::Capacity {
            what: "path steps",
            requested: steps,
            cap: MAX_PATH_STEPS,
        });
    }
    let mut law = PathLaw {
        start,
        steps,
        n_vertices: g.n_vertices(),
        paths: Vec::new(),
        probs: Vec::new(),
        index: HashMap::new(),
    };
    let mut z = a.to_vec();
    let mut path = vec![start];
    fn walk(g: &WeightedGraph<f64>, z: &mut [f64], path: &mut Vec<usize>, p: f64, steps: usize, law: &mut PathLaw) -> Result<()> {
        if path.len() == steps + 1 {
            if law.paths.len() >= PATH_LAW_CAP {
                return Err(Error::Capacity {
                    what: "enumerated paths",
                    requested: law.paths.len() + 1,
                    cap: PATH_LAW_CAP,
                });
            }
            law.index.insert(PathLaw::code(law.n_vertices, path), law.paths.len());
            law.paths.push(path.clone());
            law.probs.push(p);
            return Ok(());
        }
        let x = *path.last().expect("non-empty");
        let total: f64 = g.neighbors(x).iter().map(|&(_, f)| z[f]).sum();
        for &(y, e) in g.neighbors(x) {
            let q = z[e] / total;
            z[e] += 1.0;
            path.push(y);
            walk(g, z, path, p * q, steps, law)?;
            path.pop();
            z[e] -= 1.0;
        }
        Ok(())
    }
    walk(g, &mut z, &mut path, 1.0, steps, &mut law)?;
    Ok(law)
}

/// Block-parallel path histogram. `init` builds per-block scratch state;
/// `draw` writes one path (including the start) for replica `r`.
pub fn count_paths<S, I, D>(law: &PathLaw, replicas: u64, seed: u64, stream: u64, init: I, draw: D) -> Result<Vec<u64>>
where
    I: Fn() -> S + Sync,
    D: Fn(&mut S, u64, &mut ChaCha8Rng, &mut Vec<usize>) -> Result<()> + Sync,
{
    let blocks = replicas.div_ceil(BLOCK);
    let partial: Vec<Vec<u64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, (stream << 32) | b);
            let mut scratch = init();
            let mut counts = vec![0u64; law.len()];
            let mut path = Vec::with_capacity(law.steps + 1);
            for r in b * BLOCK..((b + 1) * BLOCK).min(replicas) {
                path.clear();
                draw(&mut scratch, r, &mut rng, &mut path)?;
                let k = law
                    .index_of(&path)
                    .ok_or_else(|| Error::Invariant(format!("sampled path {path:?} has zero oracle mass")))?;
                counts[k] += 1;
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0u64; law.len()];
    for c in partial {
        for (t, x) in total.iter_mut().zip(c) {
            *t += x;
        }
    }
    Ok(total)
}

/// Walks whose jump chains should follow the ERRW path law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathSampler {
    /// Discrete ERRW (self-test of the harness).
    Errw,
    /// Jump chain of the continuous-time ERRW with Yule alarms.
    Rubin,
    /// Jump chain of `X` with `W_e ~ Gamma(a_e, 1)` drawn per replica.
    GammaX,
}

/// Histogram of the first `law.steps` moves of `sampler` over `replicas`.
pub fn sample_path_counts(
    g: &WeightedGraph<f64>,
    a: &[f64],
    law: &PathLaw,
    sampler: PathSampler,
    replicas: u64,
    seed: u64,
    stream: u64,
) -> Result<Vec<u64>> {
    check_weights(g, a)?;
    let base = g.with_weights(a.to_vec())?;
    let steps = law.steps;
    let start = law.start;
    match sampler {
        PathSampler::Errw => count_paths(
            law,
            replicas,
            seed,
            stream,
            || ProcessState::new(&base, start),
            |state, _, rng, path| {
                state.reset(&base, start);
                path.push(start);
                for _ in 0..steps {
                    path.push(errw_step(&base, state, rng));
                }
                Ok(())
            },
        ),
        PathSampler::Rubin => count_paths(
            law,
            replicas,
            seed,
            stream,
            || {
                let mut rng = stream_rng(0, 0);
                (ProcessState::new(&base, start), EdgeTimelines::yule(a, &mut rng))
            },
            |(state, tl), _, rng, path| {
                state.reset(&base, start);
                tl.reset_yule(a, rng);
                path.push(start);
                for _ in 0..steps {
                    path.push(continuous_errw_step(&base, state, tl, rng).1);
                }
                Ok(())
            },
        ),
        PathSampler::GammaX => {
            let laws: Vec<Gamma<f64>> = a
                .iter()
                .map(|&ae| Gamma::new(ae, 1.0).map_err(|e| Error::InvalidArgument(e.to_string())))
                .collect::<Result<_>>()?;
            count_paths(
                law,
                replicas,
                seed,
                stream,
                || (base.clone(), ProcessState::new(&base, start), vec![0.0; a.len()]),
                |(g, state, w), _, rng, path| {
                    for (we, l) in w.iter_mut().zip(&laws) {
                        *we = l.sample(rng).max(f64::MIN_POSITIVE);
                    }
                    g.set_weights(w)?;
                    state.reset(g, start);
                    path.push(start);
                    for _ in 0..steps {
                        path.push(x_process_step(g, state, rng)?.1);
                    }
                    Ok(())
                },
            )
        }
    }
}

/// One χ² comparison of a sampler against the oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathExperiment {
    pub counts: Vec<u64>,
    pub chi_square: ChiSquareResult,
}

#[allow(clippy::too_many_arguments)]
pub fn path_law_experiment(
    g: &WeightedGraph<f64>,
    a: &[f64],
    law: &PathLaw,
    sampler: PathSampler,
    replicas: u64,
    seed: u64,
    stream: u64,
) -> Result<PathExperiment> {
    let counts = sample_path_counts(g, a, law, sampler, replicas, seed, stream)?;
    let chi_square = chi_square_gof(&counts, &law.probs)?;
    Ok(PathExperiment { counts, chi_square })
}

/// Named cross-module suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Rubin,
    GammaCoupling,
    Mixture,
    InverseGaussian,
    MartingaleQv,
    CdNormalization,
    DensityVsSimulation,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Rubin,
        Suite::GammaCoupling,
        Suite::Mixture,
        Suite::InverseGaussian,
        Suite::MartingaleQv,
        Suite::CdNormalization,
        Suite::DensityVsSimulation,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Unknown(format!("suite {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rubin => "rubin",
            Suite::GammaCoupling => "gamma-coupling",
            Suite::Mixture => "mixture",
            Suite::InverseGaussian => "inverse-gaussian",
            Suite::MartingaleQv => "martingale-qv",
            Suite::CdNormalization => "cd-normalization",
            Suite::DensityVsSimulation => "density-vs-simulation",
        }
    }
}

/// Suite parameters; unset fields take per-suite defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    /// Uniform initial weight `a` (path-law and CD suites).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinning: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    /// Events for the stationary-occupancy run of the mixture suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<u64>,
}

fn triangle_spec() -> GraphSpec {
    GraphSpec::from_json(r#"{"vertices": 3, "edges": [[0, 1, 1.0], [1, 2, 1.0], [0, 2, 1.0]]}"#)
        .expect("static graph")
}

fn pair_spec() -> GraphSpec {
    GraphSpec::from_json(r#"{"vertices": 2, "edges": [[0, 1, 1.0]]}"#).expect("static graph")
}

impl SuiteConfig {
    /// Fills every unset field with the suite's default.
    pub fn resolved(&self, suite: Suite) -> SuiteConfig {
        let mut c = self.clone();
        let pair = matches!(suite, Suite::InverseGaussian | Suite::MartingaleQv);
        c.graph.get_or_insert_with(|| if pair { pair_spec() } else { triangle_spec() });
        match suite {
            Suite::Rubin | Suite::GammaCoupling => {
                c.replicas.get_or_insert(100_000);
                c.steps.get_or_insert(4);
                c.repeats.get_or_insert(1);
            }
            Suite::Mixture => {
                c.replicas.get_or_insert(25_000);
                c.steps.get_or_insert(4);
                c.events.get_or_insert(10_000_000);
                c.thinning.get_or_insert(10);
                c.burn_in.get_or_insert(10_000);
            }
            Suite::InverseGaussian => {
                c.samples.get_or_insert(10_000);
                c.thinning.get_or_insert(25);
                c.burn_in.get_or_insert(10_000);
            }
            Suite::MartingaleQv => {
                c.replicas.get_or_insert(10_000);
                c.horizon.get_or_insert(6.0);
            }
            Suite::CdNormalization => {
                c.a.get_or_insert_with(|| vec![0.5, 1.0]);
            }
            Suite::DensityVsSimulation => {
                c.replicas.get_or_insert(10_000);
                c.horizon.get_or_insert(12.0);
                c.samples.get_or_insert(10_000);
                c.thinning.get_or_insert(20);
                c.burn_in.get_or_insert(10_000);
            }
        }
        c
    }

    fn graph(&self) -> Result<WeightedGraph<f64>> {
        self.graph.as_ref().expect("resolved").build()
    }

    fn mcmc(&self, samples: usize, seed: u64, stream: u64) -> McmcSettings {
        let mut s = McmcSettings::new(samples, seed);
        s.burn_in = self.burn_in.unwrap_or(10_000);
        s.thinning = self.thinning;
        s.stream = stream;
        s
    }
}

/// Machine-readable suite outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub config: SuiteConfig,
    pub seed: u64,
    pub statistics: BTreeMap<String, Value>,
    pub pass: bool,
}

/// Runs a named suite. Infrastructure failures are `Err`; statistical
/// rejections are reports with `pass = false`.
pub fn verify_suite(suite: Suite, config: &SuiteConfig, seed: u64) -> Result<Report> {
    let cfg = config.resolved(suite);
    let mut stats = BTreeMap::new();
    let pass = match suite {
        Suite::Rubin => path_suite(&cfg, PathSampler::Rubin, seed, &mut stats)?,
        Suite::GammaCoupling => path_suite(&cfg, PathSampler::GammaX, seed, &mut stats)?,
        Suite::Mixture => mixture_suite(&cfg, seed, &mut stats)?,
        Suite::InverseGaussian => inverse_gaussian_suite(&cfg, seed, &mut stats)?,
        Suite::MartingaleQv => martingale_suite(&cfg, seed, &mut stats)?,
        Suite::CdNormalization => cd_suite(&cfg, &mut stats)?,
        Suite::DensityVsSimulation => density_suite(&cfg, seed, &mut stats)?,
    };
    Ok(Report {
        suite: suite.name().to_string(),
        config: cfg,
        seed,
        statistics: stats,
        pass,
    })
}

fn initial_weights(cfg: &SuiteConfig, g: &WeightedGraph<f64>) -> Result<Vec<f64>> {
    match cfg.a.as_deref() {
        None => Ok(g.weights().to_vec()),
        Some([x]) => Ok(vec![*x; g.n_edges()]),
        Some(v) if v.len() == g.n_edges() => Ok(v.to_vec()),
        Some(v) => Err(Error::InvalidArgument(format!(
            "`a` needs 1 or {} entries, got {}",
            g.n_edges(),
            v.len()
        ))),
    }
}

fn path_suite(cfg: &SuiteConfig, sampler: PathSampler, seed: u64, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    let a = initial_weights(cfg, &g)?;
    let law = enumerate_path_law(&g, &a, 0, cfg.steps.expect("resolved"))?;
    let replicas = cfg.replicas.expect("resolved");
    let repeats = cfg.repeats.expect("resolved").max(1);
    let mut p_values = Vec::new();
    let mut last = None;
    for k in 0..repeats {
        let exp = path_law_experiment(&g, &a, &law, sampler, replicas, seed, k)?;
        p_values.push(exp.chi_square.p_value);
        last = Some(exp);
    }
    let above = p_values.iter().filter(|&&p| p > SIGNIFICANCE).count() as u64;
    let last = last.expect("at least one repeat");
    stats.insert("paths".into(), json!(law.len()));
    stats.insert("chi_square".into(), json!(last.chi_square));
    stats.insert("p_values".into(), json!(p_values));
    stats.insert("passing_experiments".into(), json!(above));
    // one experiment: p > 0.01; repeated: at least 95 % of them
    Ok(if repeats == 1 {
        above == 1
    } else {
        above as f64 >= 0.95 * repeats as f64
    })
}

fn mixture_suite(cfg: &SuiteConfig, seed: u64, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    let n = g.n_vertices();
    let steps = cfg.steps.expect("resolved");
    let replicas = cfg.replicas.expect("resolved");
    let start = 0;
    let law = enumerate_path_law(&g, &vec![1.0; g.n_edges()], start, steps)?;

    // pipeline A: VRJP jump chain (the D time change leaves it unchanged);
    // its Z-clock at the last jump is D of the VRJP local times
    let vrjp_clock = std::sync::Mutex::new(vec![0.0; replicas as usize]);
    let from_vrjp = count_paths(
        &law,
        replicas,
        seed,
        0,
        || ProcessState::new(&g, start),
        |state, r, rng, path| {
            state.reset(&g, start);
            path.push(start);
            for _ in 0..steps {
                path.push(vrjp_step(&g, state, rng).1);
            }
            vrjp_clock.lock().expect("clock buffer")[r as usize] = TimeChange::D.apply(&state.local_time);
            Ok(())
        },
    )?;

    // pipeline B: one density sample of U per replica drives Z
    let target = MeasureParams::Vertex { graph: g.clone(), i0: start };
    let fields = adapt_and_sample(&target, &cfg.mcmc(replicas as usize, seed, 1))?;
    let z_clock = std::sync::Mutex::new(vec![0.0; replicas as usize]);
    let from_z = count_paths(
        &law,
        replicas,
        seed,
        2,
        || ProcessState::new(&g, start),
        |state, r, rng, path| {
            let u = &fields.samples[r as usize];
            state.reset(&g, start);
            path.push(start);
            for _ in 0..steps {
                path.push(z_process_step(&g, u, state, rng).1);
            }
            z_clock.lock().expect("clock buffer")[r as usize] = state.clock;
            Ok(())
        },
    )?;
    let chi = chi_square_homogeneity(&from_vrjp, &from_z)?;
    let ks = ks_two_sample(
        &vrjp_clock.into_inner().expect("clock buffer"),
        &z_clock.into_inner().expect("clock buffer"),
    )?;

    // stationary occupancy of Z for one fixed sampled U
    let u = &fields.samples[0];
    let mut rng = stream_rng(seed, 3);
    let mut state = ProcessState::new(&g, start);
    for _ in 0..cfg.events.expect("resolved") {
        z_process_step(&g, u, &mut state, &mut rng);
    }
    let norm: f64 = u.iter().map(|x| (2.0 * x).exp()).sum();
    let rel: Vec<f64> = (0..n)
        .map(|i| (state.local_time[i] / state.clock) / ((2.0 * u[i]).exp() / norm) - 1.0)
        .collect();
    let worst = rel.iter().fold(0.0_f64, |m, r| m.max(r.abs()));

    stats.insert("transitions".into(), json!(replicas * steps as u64));
    stats.insert("chi_square".into(), json!(chi));
    stats.insert("ks_z_clock_at_last_jump".into(), json!(ks));
    stats.insert("mcmc".into(), json!(fields.diagnostics));
    stats.insert("occupancy_field".into(), json!(u));
    stats.insert("occupancy_relative_error".into(), json!(rel));
    Ok(chi.p_value > SIGNIFICANCE && worst < 0.01)
}

fn inverse_gaussian_suite(cfg: &SuiteConfig, seed: u64, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    if g.n_vertices() != 2 {
        return Err(Error::InvalidArgument("inverse-gaussian suite needs a 2-vertex graph".into()));
    }
    let w = g.weight(0);
    let target = MeasureParams::Vertex { graph: g, i0: 0 };
    let out = adapt_and_sample(&target, &cfg.mcmc(cfg.samples.expect("resolved"), seed, 0))?;
    let v: Vec<f64> = out.samples.iter().map(|u| (u[1] - u[0]).exp()).collect();
    let fit = InverseGaussian::fit_moments(&v)?;
    let ks = ks_one_sample(&v, |x| fit.cdf(x))?;
    let exact = InverseGaussian::new(1.0, w)?;
    let ks_exact = ks_one_sample(&v, |x| exact.cdf(x))?;
    let flipped: Vec<f64> = v.iter().map(|x| 1.0 / x).collect();
    let flipped_fit = InverseGaussian::fit_moments(&flipped)?;
    let ks_flipped = ks_one_sample(&flipped, |x| flipped_fit.cdf(x))?;
    stats.insert("fit".into(), json!(fit));
    stats.insert("ks_fitted".into(), json!(ks));
    stats.insert("ks_mean_1_shape_w".into(), json!(ks_exact));
    stats.insert("ks_reversed_orientation".into(), json!(ks_flipped));
    stats.insert("mcmc".into(), json!(out.diagnostics));
    Ok(ks.p_value > SIGNIFICANCE)
}

/// `z_{1−α/(2k)}` for a Bonferroni band over `k` checkpoints.
fn bonferroni_z(k: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - SIGNIFICANCE / (2.0 * k as f64))
}

fn martingale_suite(cfg: &SuiteConfig, seed: u64, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    let horizon = cfg.horizon.expect("resolved");
    let replicas = cfg.replicas.expect("resolved");
    let l = 0;
    let q0 = solve_q(&g, &vec![0.0; g.n_vertices()])?;
    let target_var = -q0[(l, l)];
    let checkpoints: Vec<f64> = (1..=horizon.floor() as usize).map(|k| k as f64).collect();
    let blocks = replicas.div_ceil(BLOCK);
    let per_block: Vec<Vec<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b);
            let mut cfg_run = RunConfig::new(ProcessKind::X, Budget::horizon(horizon));
            cfg_run.record_jumps = true;
            (b * BLOCK..((b + 1) * BLOCK).min(replicas))
                .map(|_| {
                    let traj = run_until_with(&g, &cfg_run, &mut rng)?;
                    let s = martingale_diagnostics(&g, 0, &traj.jumps, horizon, l, QTracking::Exact)?;
                    let mut row: Vec<f64> = checkpoints.iter().map(|&t| s.value_at(t)).collect();
                    row.push(s.terminal);
                    row.push(s.qv);
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = per_block.into_iter().flatten().collect();
    let column = |k: usize| -> Vec<f64> { rows.iter().map(|r| r[k]).collect() };
    let kc = checkpoints.len();
    let terminal = column(kc);
    let (mean_t, var_t) = mean_var(&terminal)?;
    let (mean_qv, _) = mean_var(&column(kc + 1))?;
    let z = bonferroni_z(kc + 1);
    let mut worst_z: f64 = mean_t.abs() / (var_t / terminal.len() as f64).sqrt();
    let mut means = Vec::new();
    for k in 0..kc {
        let (m, v) = mean_var(&column(k))?;
        worst_z = worst_z.max(m.abs() / (v / rows.len() as f64).sqrt());
        means.push(m);
    }

    // ∂Q/∂T_i against central differences at a random point
    let mut rng = stream_rng(seed, 1 << 40);
    let t: Vec<f64> = (0..g.n_vertices()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let q = solve_q(&g, &t)?;
    let h = 1e-5;
    let mut fd_error: f64 = 0.0;
    for i in 0..g.n_vertices() {
        let (mut tp, mut tm) = (t.clone(), t.clone());
        tp[i] += h;
        tm[i] -= h;
        let fd = solve_q(&g, &tp)?.sub(&solve_q(&g, &tm)?).scaled(0.5 / h);
        fd_error = fd_error.max(q_derivative(&g, &t, &q, i).sub(&fd).max_abs());
    }
    let rel = var_t / target_var - 1.0;
    stats.insert("variance".into(), json!(var_t));
    stats.insert("target_variance".into(), json!(target_var));
    stats.insert("relative_error".into(), json!(rel));
    stats.insert("mean_quadratic_variation".into(), json!(mean_qv));
    stats.insert("checkpoint_means".into(), json!(means));
    stats.insert("max_mean_z".into(), json!(worst_z));
    stats.insert("mean_z_limit".into(), json!(z));
    stats.insert("finite_difference_error".into(), json!(fd_error));
    Ok(rel.abs() < 0.05 && worst_z < z && fd_error < 1e-6)
}

/// `∫ CD density` over `(0,∞)^{E∖{e0}}` for a triangle, in log coordinates.
pub fn cd_total_mass(g: &WeightedGraph<f64>, i0: usize, e0: usize) -> Result<f64> {
    if g.n_edges() != 3 {
        return Err(Error::InvalidArgument("CD quadrature is implemented for 3 edges".into()));
    }
    let others: Vec<usize> = (0..3).filter(|&e| e != e0).collect();
    let mut failure = None;
    let q = integrate_2d(
        |s1: f64, s2: f64| {
            let mut y = [1.0; 3];
            y[others[0]] = s1.exp();
            y[others[1]] = s2.exp();
            match cd_log_density(g, i0, e0, &y) {
                Ok(v) => (v + s1 + s2).exp(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        (-60.0, 60.0),
        (-60.0, 60.0),
        1e-9,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(q?.value)
}

fn cd_suite(cfg: &SuiteConfig, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    let mut pass = true;
    let mut masses = Vec::new();
    for &a in cfg.a.as_deref().expect("resolved") {
        let ga = g.with_weights(vec![a; g.n_edges()])?;
        let mass = cd_total_mass(&ga, 0, 0)?;
        pass &= (mass - 1.0).abs() < 1e-6;
        masses.push(json!({"a": a, "mass": mass}));
    }
    stats.insert("masses".into(), json!(masses));
    Ok(pass)
}

/// `T_i(h) − h/N` for `replicas` independent `X` runs from vertex 0.
pub fn centred_local_times(g: &WeightedGraph<f64>, horizon: f64, replicas: u64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let blocks = replicas.div_ceil(BLOCK);
    let per_block: Vec<Vec<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b);
            let cfg = RunConfig::new(ProcessKind::X, Budget::horizon(horizon));
            (b * BLOCK..((b + 1) * BLOCK).min(replicas))
                .map(|_| {
                    let traj = run_until_with(g, &cfg, &mut rng)?;
                    let n = g.n_vertices() as f64;
                    Ok(traj.final_state.local_time.iter().map(|t| t - horizon / n).collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_block.into_iter().flatten().collect())
}

fn density_suite(cfg: &SuiteConfig, seed: u64, stats: &mut BTreeMap<String, Value>) -> Result<bool> {
    let g = cfg.graph()?;
    let horizon = cfg.horizon.expect("resolved");
    let sim = centred_local_times(&g, horizon, cfg.replicas.expect("resolved"), seed)?;
    let target = MeasureParams::Vertex { graph: g.clone(), i0: 0 };
    let out = adapt_and_sample(&target, &cfg.mcmc(cfg.samples.expect("resolved"), seed, 1 << 20))?;
    let mut distances = Vec::new();
    for i in 0..g.n_vertices() {
        let xs: Vec<f64> = sim.iter().map(|u| u[i]).collect();
        let ys = out.column(i);
        distances.push(ks_two_sample(&xs, &ys)?);
    }
    let worst = distances.iter().fold(0.0_f64, |m, k| m.max(k.statistic));
    stats.insert("ks".into(), json!(distances));
    stats.insert("max_ks_distance".into(), json!(worst));
    stats.insert("mcmc".into(), json!(out.diagnostics));
    Ok(worst < 0.05)
}

/// Jump list of an `X` run; convenience for diagnostics outside the suites.
pub fn x_jumps(g: &WeightedGraph<f64>, horizon: f64, seed: u64) -> Result<Vec<Jump>> {
    let mut cfg = RunConfig::new(ProcessKind::X, Budget::horizon(horizon));
    cfg.record_jumps = true;
    let mut rng = stream_rng(seed, 0);
    Ok(run_until_with(g, &cfg, &mut rng)?.jumps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> WeightedGraph<f64> {
        WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let g = triangle();
        let a = [1.0; 3];
        let p = errw_path_prob(&g, &a, &[0, 1, 0, 1, 0]).unwrap();
        assert!((p - 0.2).abs() < 1e-15);
        for j in [1, 2] {
            assert_eq!(errw_path_prob(&g, &a, &[0, j]).unwrap(), 0.5);
        }
        assert!(errw_path_prob(&g, &a, &[0, 0]).is_err());
        assert!(errw_path_prob(&g, &a, &[0; 10]).is_err());
    }

    #[test]
    fn path_law_sums_to_one() {
        let g = triangle();
        for steps in 0..=6 {
            let law = enumerate_path_law(&g, &[1.0, 0.5, 2.0], 0, steps).unwrap();
            assert_eq!(law.len(), 1 << steps);
            assert!((law.total() - 1.0).abs() < 1e-12);
        }
        let law = enumerate_path_law(&g, &[1.0; 3], 0, 4).unwrap();
        let k = law.index_of(&[0, 1, 0, 1, 0]).unwrap();
        assert!((law.probs[k] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn exact_counts_give_zero_statistic() {
        // star around 0: two 2-step paths of mass 1/2 each
        let g = WeightedGraph::new(3, [(0, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let law = enumerate_path_law(&g, &[1.0, 1.0], 0, 2).unwrap();
        let counts: Vec<u64> = law.probs.iter().map(|p| (p * 1000.0) as u64).collect();
        let r = chi_square_gof(&counts, &law.probs).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn errw_self_test_and_power() {
        let g = triangle();
        let a = [1.0; 3];
        let law = enumerate_path_law(&g, &a, 0, 4).unwrap();
        let exp = path_law_experiment(&g, &a, &law, PathSampler::Errw, 200_000, 3, 0).unwrap();
        assert!(exp.chi_square.p_value > 1e-3);
        // swap a heavy and a light path
        let heavy = law.index_of(&[0, 1, 0, 1, 0]).unwrap();
        let light = law.index_of(&[0, 1, 2, 0, 1]).unwrap();
        let wrong = law.with_swapped(heavy, light);
        assert!(chi_square_gof(&exp.counts, &wrong.probs).unwrap().p_value < 1e-6);
    }

    #[test]
    fn determinism_independent_of_blocks() {
        let g = triangle();
        let a = [1.0; 3];
        let law = enumerate_path_law(&g, &a, 0, 3).unwrap();
        let x = sample_path_counts(&g, &a, &law, PathSampler::Rubin, 25_000, 5, 0).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let y = pool.install(|| sample_path_counts(&g, &a, &law, PathSampler::Rubin, 25_000, 5, 0).unwrap());
        assert_eq!(x, y);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert!(Suite::parse("nope").is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<SuiteConfig>(r#"{"replicas": 10, "bogus": 1}"#).is_err());
    }

    #[test]
    fn cd_triangle_mass() {
        let g = triangle();
        let m = cd_total_mass(&g, 0, 0).unwrap();
        assert!((m - 1.0).abs() < 1e-6, "{m}");
    }
}
