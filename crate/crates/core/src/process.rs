//! Exact-event simulation of the reinforced processes.
//!
//! * ERRW — discrete walk, edge weights `Z_n(e) = a_e + #crossings`.
//! * continuous-time ERRW — Rubin construction with per-edge alarm clocks.
//! * VRJP `Y` — jumps `i → j` at rate `W_ij L_j`, `L_j = 1 + local time`.
//! * `X` — jumps at rate `W_ij e^{T_i + T_j}`.
//! * `Z` — jumps at rate `½ W_ij e^{U_j − U_i}` for a fixed field `U`.
//!
//! Local times are stored as elapsed time starting at 0 for every process;
//! the VRJP's `L_i` is `1 + local_time[i]`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightedGraph;

/// Abort bound on `X`-process local times (`e^T` must stay representable).
pub const DEFAULT_OVERFLOW_BOUND: f64 = 500.0;

/// Horizon at which the Yule construction estimates `W = lim N_t e^{−t}`.
pub const DEFAULT_YULE_HORIZON: f64 = 30.0;

/// Explicit alarms generated per edge before the Yule count is advanced to
/// the horizon in one exact negative-binomial jump.
const YULE_EXPLICIT_ALARMS: u64 = 10_000;

/// Random stream for `(seed, stream)`; independent streams of one seed never
/// overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit exponential by inversion.
#[inline]
pub fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln()
}

/// Index `k` such that `u·total` falls in the `k`-th cumulative bin.
#[inline]
fn pick(weights: impl Iterator<Item = f64> + Clone, u: f64) -> usize {
    let total: f64 = weights.clone().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        acc += w;
        if w > 0.0 {
            last = k;
        }
        if target < acc {
            return k;
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    Errw,
    ErrwCt,
    Vrjp,
    #[serde(rename = "xproc")]
    X,
    Z,
}

impl ProcessKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "errw" => Ok(Self::Errw),
            "errw-ct" => Ok(Self::ErrwCt),
            "vrjp" => Ok(Self::Vrjp),
            "xproc" | "x" => Ok(Self::X),
            "z" => Ok(Self::Z),
            other => Err(Error::Unknown(format!("process kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Errw => "errw",
            Self::ErrwCt => "errw-ct",
            Self::Vrjp => "vrjp",
            Self::X => "xproc",
            Self::Z => "z",
        }
    }

    pub fn is_continuous(self) -> bool {
        self != Self::Errw
    }
}

/// Current vertex, native clock, local times and (for ERRW) edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessState {
    pub current: usize,
    pub clock: f64,
    pub local_time: Vec<f64>,
    pub edge_count: Vec<f64>,
    pub step_count: u64,
}

impl ProcessState {
    /// Fresh state at `start`; `edge_count` initialised to the graph weights.
    pub fn new(g: &WeightedGraph<f64>, start: usize) -> Self {
        Self {
            current: start,
            clock: 0.0,
            local_time: vec![0.0; g.n_vertices()],
            edge_count: g.weights().to_vec(),
            step_count: 0,
        }
    }

    /// Resets in place, reusing allocations.
    pub fn reset(&mut self, g: &WeightedGraph<f64>, start: usize) {
        self.current = start;
        self.clock = 0.0;
        self.local_time.iter_mut().for_each(|x| *x = 0.0);
        self.edge_count.copy_from_slice(g.weights());
        self.step_count = 0;
    }

    fn accrue(&mut self, dt: f64) {
        self.local_time[self.current] += dt;
        self.clock += dt;
    }

    fn jump(&mut self, to: usize) {
        self.current = to;
        self.step_count += 1;
    }
}

/// Discrete ERRW transition for a given uniform `u`.
pub fn errw_step_with(g: &WeightedGraph<f64>, state: &mut ProcessState, u: f64) -> usize {
    let nb = g.neighbors(state.current);
    let k = pick(nb.iter().map(|&(_, e)| state.edge_count[e]), u);
    let (to, e) = nb[k];
    state.edge_count[e] += 1.0;
    state.accrue(1.0);
    state.jump(to);
    to
}

/// One ERRW step: cross `{current, j}` with probability proportional to its
/// current weight `Z_n`, then reinforce it by one.
pub fn errw_step<R: Rng + ?Sized>(g: &WeightedGraph<f64>, state: &mut ProcessState, rng: &mut R) -> usize {
    errw_step_with(g, state, rng.gen())
}

#[derive(Debug, Clone)]
enum AlarmSource {
    /// `V_{k+1} = V_k + τ_k / (a + k)`.
    Yule { a: f64 },
    /// `V_k = log(1 + p_k / W)` for unit-Poisson arrivals `p_k`.
    Conditional { w: f64, arrivals: f64 },
}

/// Per-edge alarm sequences `V_1 < V_2 < …` (lazily extended) and the edge
/// clocks `T̃_e = T̃_i + T̃_j`.
#[derive(Debug, Clone)]
pub struct EdgeTimelines {
    sources: Vec<AlarmSource>,
    /// Pre-generated alarms (in reverse order) consumed before new draws.
    queued: Vec<Vec<f64>>,
    next: Vec<f64>,
    rings: Vec<u64>,
    clock: Vec<f64>,
}

impl EdgeTimelines {
    /// Rubin timelines with exponential gaps of rate `a_e + k`.
    pub fn yule<R: Rng + ?Sized>(a: &[f64], rng: &mut R) -> Self {
        let mut t = Self {
            sources: a.iter().map(|&a| AlarmSource::Yule { a }).collect(),
            queued: vec![Vec::new(); a.len()],
            next: vec![0.0; a.len()],
            rings: vec![0; a.len()],
            clock: vec![0.0; a.len()],
        };
        for e in 0..a.len() {
            t.next[e] = t.draw(e, rng);
        }
        t
    }

    /// Timelines conditioned on `W`: alarm rate `W e^t` at edge clock `t`.
    pub fn conditional<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Self {
        let mut t = Self {
            sources: w
                .iter()
                .map(|&w| AlarmSource::Conditional { w, arrivals: 0.0 })
                .collect(),
            queued: vec![Vec::new(); w.len()],
            next: vec![0.0; w.len()],
            rings: vec![0; w.len()],
            clock: vec![0.0; w.len()],
        };
        for e in 0..w.len() {
            t.next[e] = t.draw(e, rng);
        }
        t
    }

    /// Re-initialises Rubin timelines in place.
    pub fn reset_yule<R: Rng + ?Sized>(&mut self, a: &[f64], rng: &mut R) {
        for e in 0..a.len() {
            self.sources[e] = AlarmSource::Yule { a: a[e] };
            self.queued[e].clear();
            self.rings[e] = 0;
            self.clock[e] = 0.0;
            self.next[e] = 0.0;
            self.next[e] = self.draw(e, rng);
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, e: usize, rng: &mut R) -> f64 {
        if let Some(v) = self.queued[e].pop() {
            return v;
        }
        let k = self.rings[e] as f64;
        let prev = self.next[e];
        match &mut self.sources[e] {
            AlarmSource::Yule { a } => prev + exp1(rng) / (*a + k),
            AlarmSource::Conditional { w, arrivals } => {
                *arrivals += exp1(rng);
                (*arrivals / *w).ln_1p()
            }
        }
    }

    pub fn n_edges(&self) -> usize {
        self.next.len()
    }

    /// Next alarm of edge `e`.
    pub fn next_alarm(&self, e: usize) -> f64 {
        self.next[e]
    }

    /// Elapsed clock `T̃_e` of edge `e`.
    pub fn edge_clock(&self, e: usize) -> f64 {
        self.clock[e]
    }

    /// Number of alarms of `e` already rung (= crossings of `e`).
    pub fn rings(&self, e: usize) -> u64 {
        self.rings[e]
    }

    /// Alarm times `V_1, …, V_k` of edge `e` generated so far from a fresh
    /// copy, without disturbing the timeline (test helper).
    pub fn first_alarms<R: Rng + ?Sized>(&self, e: usize, k: usize, rng: &mut R) -> Vec<f64> {
        let mut copy = self.clone();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            out.push(copy.next[e]);
            copy.rings[e] += 1;
            copy.next[e] = copy.draw(e, rng);
        }
        out
    }

    fn ring<R: Rng + ?Sized>(&mut self, e: usize, rng: &mut R) {
        self.rings[e] += 1;
        self.next[e] = self.draw(e, rng);
    }
}

/// One Rubin step: every edge adjacent to the walker advances its clock in
/// lockstep with the walker's local time; the first edge to reach its next
/// alarm is crossed. Ties go to the lowest edge index. Returns the jump time
/// (walker clock) and the new vertex.
pub fn continuous_errw_step<R: Rng + ?Sized>(
    g: &WeightedGraph<f64>,
    state: &mut ProcessState,
    timelines: &mut EdgeTimelines,
    rng: &mut R,
) -> (f64, usize) {
    let (gap, to, edge) = rubin_next(g, state, timelines);
    advance_rubin(g, state, timelines, gap);
    timelines.ring(edge, rng);
    state.edge_count[edge] += 1.0;
    state.jump(to);
    (state.clock, to)
}

fn rubin_next(g: &WeightedGraph<f64>, state: &ProcessState, tl: &EdgeTimelines) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
    for &(j, e) in g.neighbors(state.current) {
        let gap = (tl.next[e] - tl.clock[e]).max(0.0);
        if gap < best.0 || (gap == best.0 && e < best.2) {
            best = (gap, j, e);
        }
    }
    best
}

fn advance_rubin(g: &WeightedGraph<f64>, state: &mut ProcessState, tl: &mut EdgeTimelines, dt: f64) {
    for &(_, e) in g.neighbors(state.current) {
        tl.clock[e] += dt;
    }
    state.accrue(dt);
}

/// How [`sample_gamma_coupling`] produces `W` and the timelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Rubin/Yule alarms; `W_e ≈ N_t e^{−t}` at the given horizon.
    Direct { horizon: f64 },
    /// `W_e ~ Gamma(a_e, 1)` exactly, alarms conditional on `W_e`.
    Conditional,
}

/// Gamma/Yule coupling: returns `W` and matching edge timelines.
///
/// In the direct construction the first alarms of each edge are generated
/// explicitly (and replayed to the walk); the Yule count is then advanced
/// to the horizon by one exact negative-binomial draw
/// (`K ~ Poisson(G (e^{Δt} − 1))`, `G ~ Gamma(N_s, 1)`), so `W` is an
/// estimate consistent with the walk's first alarms.
pub fn sample_gamma_coupling<R: Rng + ?Sized>(
    a: &[f64],
    coupling: Coupling,
    rng: &mut R,
) -> Result<(Vec<f64>, EdgeTimelines)> {
    if a.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("coupling weights must be positive".into()));
    }
    match coupling {
        Coupling::Conditional => {
            let w = a
                .iter()
                .map(|&ae| Gamma::new(ae, 1.0).expect("positive shape").sample(rng))
                .collect::<Vec<_>>();
            let tl = EdgeTimelines::conditional(&w, rng);
            Ok((w, tl))
        }
        Coupling::Direct { horizon } => {
            if !(horizon > 0.0) {
                return Err(Error::InvalidArgument("Yule horizon must be positive".into()));
            }
            let mut tl = EdgeTimelines::yule(a, rng);
            let mut w = Vec::with_capacity(a.len());
            for e in 0..a.len() {
                let mut alarms = Vec::new();
                let mut probe = tl.clone();
                while probe.next[e] <= horizon && (alarms.len() as u64) < YULE_EXPLICIT_ALARMS {
                    alarms.push(probe.next[e]);
                    probe.ring(e, rng);
                }
                let mut count = a[e] + alarms.len() as f64;
                if probe.next[e] <= horizon {
                    // remaining births on [last alarm, horizon]
                    let s = *alarms.last().expect("explicit alarms generated");
                    let g = Gamma::new(count, 1.0).expect("positive shape").sample(rng);
                    let mean = g * (horizon - s).exp_m1();
                    count += Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(mean);
                }
                w.push(count * (-horizon).exp());
                // replay the explicit alarms to the walk, then continue
                let mut queued = alarms;
                queued.push(probe.next[e]);
                queued.reverse();
                tl.next[e] = queued.pop().expect("at least one alarm");
                tl.queued[e] = queued;
                tl.sources[e] = probe.sources[e].clone();
            }
            Ok((w, tl))
        }
    }
}

/// Next VRJP event for explicit randomness (`e` unit exponential, `u`
/// uniform), without mutating the state.
pub fn vrjp_next(g: &WeightedGraph<f64>, state: &ProcessState, e: f64, u: f64) -> (f64, usize) {
    let nb = g.neighbors(state.current);
    let rate = |&(j, edge): &(usize, usize)| g.weight(edge) * (1.0 + state.local_time[j]);
    let total: f64 = nb.iter().map(rate).sum();
    let k = pick(nb.iter().map(rate), u);
    (e / total, nb[k].0)
}

pub fn vrjp_step_with(g: &WeightedGraph<f64>, state: &mut ProcessState, e: f64, u: f64) -> (f64, usize) {
    let (sojourn, to) = vrjp_next(g, state, e, u);
    state.accrue(sojourn);
    state.jump(to);
    (sojourn, to)
}

/// VRJP: rates `W_ij L_j` are frozen during the sojourn at `i`.
pub fn vrjp_step<R: Rng + ?Sized>(g: &WeightedGraph<f64>, state: &mut ProcessState, rng: &mut R) -> (f64, usize) {
    let e = exp1(rng);
    vrjp_step_with(g, state, e, rng.gen())
}

/// Next `X` event for explicit randomness, without mutating the state:
/// sojourn `log(1 + e/c)` with `c = Σ_j W_ij e^{T_i + T_j}` and target
/// `∝ W_ij e^{T_j}`.
pub fn x_next(g: &WeightedGraph<f64>, state: &ProcessState, e: f64, u: f64) -> (f64, usize) {
    let i = state.current;
    let nb = g.neighbors(i);
    let ti = state.local_time[i];
    // factor e^{T_i} out of c so that only e^{T_j} terms are summed
    let rate = |&(j, edge): &(usize, usize)| g.weight(edge) * state.local_time[j].exp();
    let c = ti.exp() * nb.iter().map(rate).sum::<f64>();
    let sojourn = (e / c).ln_1p();
    let k = pick(nb.iter().map(rate), u);
    (sojourn, nb[k].0)
}

fn check_overflow(state: &ProcessState, bound: f64) -> Result<()> {
    let i = state.current;
    if state.local_time[i] > bound {
        return Err(Error::Overflow {
            vertex: i,
            value: state.local_time[i],
            bound,
            state: state.local_time.clone(),
        });
    }
    Ok(())
}

pub fn x_step_with(
    g: &WeightedGraph<f64>,
    state: &mut ProcessState,
    e: f64,
    u: f64,
    bound: f64,
) -> Result<(f64, usize)> {
    let (sojourn, to) = x_next(g, state, e, u);
    state.accrue(sojourn);
    check_overflow(state, bound)?;
    state.jump(to);
    Ok((sojourn, to))
}

/// `X` step at rate `W_ij e^{T_i + T_j}`, sampled exactly by inverting the
/// integrated rate `c (e^s − 1)`.
pub fn x_process_step<R: Rng + ?Sized>(
    g: &WeightedGraph<f64>,
    state: &mut ProcessState,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let e = exp1(rng);
    x_step_with(g, state, e, rng.gen(), DEFAULT_OVERFLOW_BOUND)
}

pub fn z_next(g: &WeightedGraph<f64>, field: &[f64], state: &ProcessState, e: f64, u: f64) -> (f64, usize) {
    let i = state.current;
    let nb = g.neighbors(i);
    let rate = |&(j, edge): &(usize, usize)| 0.5 * g.weight(edge) * (field[j] - field[i]).exp();
    let total: f64 = nb.iter().map(rate).sum();
    let k = pick(nb.iter().map(rate), u);
    (e / total, nb[k].0)
}

pub fn z_step_with(g: &WeightedGraph<f64>, field: &[f64], state: &mut ProcessState, e: f64, u: f64) -> (f64, usize) {
    let (sojourn, to) = z_next(g, field, state, e, u);
    state.accrue(sojourn);
    state.jump(to);
    (sojourn, to)
}

/// `Z` step at constant rates `½ W_ij e^{U_j − U_i}`.
pub fn z_process_step<R: Rng + ?Sized>(
    g: &WeightedGraph<f64>,
    field: &[f64],
    state: &mut ProcessState,
    rng: &mut R,
) -> (f64, usize) {
    let e = exp1(rng);
    z_step_with(g, field, state, e, rng.gen())
}

/// Closed-form additive functionals relating the clocks of `Y`, `X`, `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeChange {
    /// `A = Σ log L_x` (Y local times → X time).
    A,
    /// `A⁻¹ = Σ (e^{T_i} − 1)` (X local times → Y time).
    AInv,
    /// `B = Σ (√(1 + l_i) − 1)` (Z local times → Y time).
    B,
    /// `C = Σ (e^{2 T_i} − 1)` (X local times → Z time).
    C,
    /// `D = Σ (L_i² − 1)` (Y local times → Z time).
    D,
}

impl TimeChange {
    /// Evaluates the functional on elapsed local times (all start at 0).
    pub fn apply(self, local_time: &[f64]) -> f64 {
        let it = local_time.iter();
        match self {
            TimeChange::A => it.map(|&l| l.ln_1p()).sum(),
            TimeChange::AInv => it.map(|&t| t.exp_m1()).sum(),
            TimeChange::B => it.map(|&l| (1.0 + l).sqrt() - 1.0).sum(),
            TimeChange::C => it.map(|&t| (2.0 * t).exp_m1()).sum(),
            TimeChange::D => it.map(|&l| l * (l + 2.0)).sum(),
        }
    }
}

/// Horizon and step budget for [`run_until`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Native-clock horizon (steps for the discrete ERRW).
    pub horizon: Option<f64>,
    pub max_steps: Option<u64>,
}

impl Budget {
    pub fn horizon(h: f64) -> Self {
        Self {
            horizon: Some(h),
            max_steps: None,
        }
    }

    pub fn steps(n: u64) -> Self {
        Self {
            horizon: None,
            max_steps: Some(n),
        }
    }
}

/// Inputs for [`run_until`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub kind: ProcessKind,
    pub start: usize,
    pub budget: Budget,
    /// Clock values at which local times are snapshotted.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    /// Field `U` for the `Z` process.
    #[serde(default)]
    pub field: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub record_jumps: bool,
    #[serde(default = "default_bound")]
    pub overflow_bound: f64,
}

fn default_true() -> bool {
    true
}

fn default_bound() -> f64 {
    DEFAULT_OVERFLOW_BOUND
}

impl RunConfig {
    pub fn new(kind: ProcessKind, budget: Budget) -> Self {
        Self {
            kind,
            start: 0,
            budget,
            checkpoints: Vec::new(),
            field: None,
            record_jumps: true,
            overflow_bound: DEFAULT_OVERFLOW_BOUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub t: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: f64,
    pub local_time: Vec<f64>,
    /// `T_i(t) − t/N` in `X` time (VRJP and `X` only).
    pub centred: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: ProcessKind,
    pub jumps: Vec<Jump>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: ProcessState,
    /// False when the step budget ran out before the horizon.
    pub complete: bool,
}

impl Trajectory {
    /// One JSON object `{t, from, to}` per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for j in &self.jumps {
            serde_json::to_writer(&mut w, j)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Checkpoint CSV with columns `t, T_0, …, T_{N−1}`.
    pub fn write_checkpoints_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.final_state.local_time.len();
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..n).map(|i| format!("T_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for c in &self.checkpoints {
            let row: Vec<String> = std::iter::once(c.t)
                .chain(c.local_time.iter().copied())
                .map(|x| format!("{x}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn centred(kind: ProcessKind, local_time: &[f64]) -> Option<Vec<f64>> {
    let n = local_time.len() as f64;
    match kind {
        ProcessKind::X => {
            let t: f64 = local_time.iter().sum();
            Some(local_time.iter().map(|&x| x - t / n).collect())
        }
        ProcessKind::Vrjp => {
            let logs: Vec<f64> = local_time.iter().map(|&l| l.ln_1p()).collect();
            let t: f64 = logs.iter().sum();
            Some(logs.iter().map(|&x| x - t / n).collect())
        }
        _ => None,
    }
}

/// Runs one process from `config.start` until the horizon or the step
/// budget. Deterministic given `seed`.
pub fn run_until(g: &WeightedGraph<f64>, config: &RunConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = stream_rng(seed, 0);
    run_until_with(g, config, &mut rng)
}

pub fn run_until_with<R: Rng + ?Sized>(
    g: &WeightedGraph<f64>,
    config: &RunConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let n = g.n_vertices();
    if config.start >= n {
        return Err(Error::InvalidArgument(format!("start vertex {} out of range", config.start)));
    }
    if config.kind == ProcessKind::Z {
        match &config.field {
            Some(f) if f.len() == n && f.iter().all(|x| x.is_finite()) => {}
            _ => return Err(Error::InvalidArgument("Z process needs a finite field U".into())),
        }
    }
    if config.budget.horizon.is_none() && config.budget.max_steps.is_none() {
        return Err(Error::InvalidArgument("budget needs a horizon or a step count".into()));
    }
    let mut cps = config.checkpoints.clone();
    cps.sort_by(f64::total_cmp);
    let mut cp_iter = cps.into_iter().peekable();
    let horizon = config.budget.horizon.unwrap_or(f64::INFINITY);
    let max_steps = config.budget.max_steps.unwrap_or(u64::MAX);

    let mut state = ProcessState::new(g, config.start);
    let mut timelines = (config.kind == ProcessKind::ErrwCt).then(|| EdgeTimelines::yule(g.weights(), rng));
    let mut jumps = Vec::new();
    let mut checkpoints = Vec::new();
    let mut complete = true;

    let snapshot = |state: &ProcessState, t: f64, extra: f64| {
        let mut lt = state.local_time.clone();
        lt[state.current] += extra;
        Checkpoint {
            t,
            centred: centred(config.kind, &lt),
            local_time: lt,
        }
    };

    loop {
        if g.degree(state.current) == 0 {
            // isolated start vertex: time passes, nothing happens
            while let Some(&t) = cp_iter.peek().filter(|&&t| t <= horizon) {
                checkpoints.push(snapshot(&state, t, t - state.clock));
                cp_iter.next();
            }
            break;
        }
        if state.step_count >= max_steps {
            complete = state.clock >= horizon;
            break;
        }
        // propose the next event without committing it
        let (sojourn, to, edge) = match config.kind {
            ProcessKind::Errw => (1.0, usize::MAX, None),
            ProcessKind::ErrwCt => {
                let (gap, to, e) = rubin_next(g, &state, timelines.as_ref().expect("timelines"));
                (gap, to, Some(e))
            }
            ProcessKind::Vrjp => {
                let e = exp1(rng);
                let (s, to) = vrjp_next(g, &state, e, rng.gen());
                (s, to, None)
            }
            ProcessKind::X => {
                let e = exp1(rng);
                let (s, to) = x_next(g, &state, e, rng.gen());
                (s, to, None)
            }
            ProcessKind::Z => {
                let field = config.field.as_deref().expect("checked above");
                let e = exp1(rng);
                let (s, to) = z_next(g, field, &state, e, rng.gen());
                (s, to, None)
            }
        };
        let t_next = state.clock + sojourn;
        while let Some(&t) = cp_iter.peek().filter(|&&t| t <= horizon.min(t_next)) {
            checkpoints.push(snapshot(&state, t, t - state.clock));
            cp_iter.next();
        }
        if t_next > horizon {
            let rest = horizon - state.clock;
            match (config.kind, timelines.as_mut()) {
                (ProcessKind::ErrwCt, Some(tl)) => advance_rubin(g, &mut state, tl, rest),
                (ProcessKind::Errw, _) => {}
                _ => state.accrue(rest),
            }
            if config.kind == ProcessKind::X {
                check_overflow(&state, config.overflow_bound)?;
            }
            break;
        }
        let from = state.current;
        let to = match config.kind {
            ProcessKind::Errw => errw_step(g, &mut state, rng),
            ProcessKind::ErrwCt => {
                let tl = timelines.as_mut().expect("timelines");
                advance_rubin(g, &mut state, tl, sojourn);
                let e = edge.expect("rubin edge");
                tl.ring(e, rng);
                state.edge_count[e] += 1.0;
                state.jump(to);
                to
            }
            ProcessKind::X => {
                state.accrue(sojourn);
                check_overflow(&state, config.overflow_bound)?;
                state.jump(to);
                to
            }
            ProcessKind::Vrjp | ProcessKind::Z => {
                state.accrue(sojourn);
                state.jump(to);
                to
            }
        };
        if config.record_jumps {
            jumps.push(Jump {
                t: state.clock,
                from,
                to,
            });
        }
    }
    Ok(Trajectory {
        kind: config.kind,
        jumps,
        checkpoints,
        final_state: state,
        complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3(a01: f64, a12: f64) -> WeightedGraph<f64> {
        WeightedGraph::new(3, [(0, 1, a01), (1, 2, a12)]).unwrap()
    }

    fn triangle() -> WeightedGraph<f64> {
        WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
    }

    #[test]
    fn errw_transition_probabilities() {
        let g = path3(1.0, 2.0);
        // P(0) = 1/3: uniforms below 1/3 go to 0
        let mut s = ProcessState::new(&g, 1);
        assert_eq!(errw_step_with(&g, &mut s, 0.333), 0);
        let mut s = ProcessState::new(&g, 1);
        assert_eq!(errw_step_with(&g, &mut s, 0.334), 2);
        // after crossing {0,1} once, P(0) from 1 is 2/3
        let g = path3(1.0, 1.0);
        let mut s = ProcessState::new(&g, 1);
        errw_step_with(&g, &mut s, 0.1);
        errw_step_with(&g, &mut s, 0.0);
        assert_eq!(s.current, 1);
        assert_eq!(s.edge_count, vec![3.0, 1.0]);
        let mut probe = s.clone();
        // weights now 3 and 1 → P(0) = 3/4
        assert_eq!(errw_step_with(&g, &mut probe, 0.74), 0);
        let mut probe = s.clone();
        assert_eq!(errw_step_with(&g, &mut probe, 0.76), 2);
    }

    #[test]
    fn errw_mass_conservation() {
        let g = triangle();
        let mut rng = stream_rng(3, 0);
        let mut s = ProcessState::new(&g, 0);
        for _ in 0..500 {
            errw_step(&g, &mut s, &mut rng);
        }
        let mass: f64 = s.edge_count.iter().sum();
        assert_eq!(mass, 3.0 + 500.0);
        assert!(s.edge_count.iter().all(|&c| c >= 1.0));
    }

    #[test]
    fn rubin_single_edge_first_jump_is_first_alarm() {
        let g = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let mut rng = stream_rng(11, 0);
        let mut tl = EdgeTimelines::yule(g.weights(), &mut rng);
        let v1 = tl.next_alarm(0);
        let mut s = ProcessState::new(&g, 0);
        let (t, to) = continuous_errw_step(&g, &mut s, &mut tl, &mut rng);
        assert_eq!(to, 1);
        assert!((t - v1).abs() < 1e-15);
        assert!(tl.next_alarm(0) > v1);
    }

    #[test]
    fn rubin_picks_smallest_residual_and_tracks_edge_clocks() {
        let g = triangle();
        let mut rng = stream_rng(5, 1);
        let mut tl = EdgeTimelines::yule(g.weights(), &mut rng);
        let mut s = ProcessState::new(&g, 0);
        for _ in 0..200 {
            let i = s.current;
            let expected = g
                .neighbors(i)
                .iter()
                .map(|&(j, e)| (tl.next_alarm(e) - tl.edge_clock(e), j))
                .fold((f64::INFINITY, 0), |b, x| if x.0 < b.0 { x } else { b });
            let (_, to) = continuous_errw_step(&g, &mut s, &mut tl, &mut rng);
            assert_eq!(to, expected.1);
            for (e, &(a, b)) in g.edges().iter().enumerate() {
                let sum = s.local_time[a] + s.local_time[b];
                assert!((tl.edge_clock(e) - sum).abs() <= 1e-9 * (1.0 + sum));
                assert_eq!(s.edge_count[e], 1.0 + tl.rings(e) as f64);
            }
            let total: f64 = s.local_time.iter().sum();
            assert!((total - s.clock).abs() <= 1e-9 * s.clock);
        }
    }

    #[test]
    fn alarms_strictly_increase() {
        let mut rng = stream_rng(8, 0);
        for tl in [
            EdgeTimelines::yule(&[0.5, 2.0], &mut rng),
            EdgeTimelines::conditional(&[0.5, 2.0], &mut rng),
        ] {
            let v = tl.first_alarms(1, 50, &mut rng);
            assert!(v.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn time_change_identities() {
        assert_eq!(TimeChange::A.apply(&[0.0; 3]), 0.0);
        assert_eq!(TimeChange::D.apply(&[0.0; 3]), 0.0);
        assert!((TimeChange::AInv.apply(&[1.0, 0.0, 0.0]) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        let mut rng = stream_rng(2, 0);
        for _ in 0..100 {
            let l: Vec<f64> = (0..4).map(|_| 10.0 * rng.gen::<f64>()).collect();
            let t: Vec<f64> = l.iter().map(|x| x.ln_1p()).collect();
            // C∘A = D and A⁻¹∘A = id
            let d = TimeChange::D.apply(&l);
            assert!((TimeChange::C.apply(&t) - d).abs() < 1e-10 * d.max(1.0));
            let y: f64 = l.iter().sum();
            assert!((TimeChange::AInv.apply(&t) - y).abs() < 1e-10 * y.max(1.0));
            // B inverts D at the level of local times: Z local time is L² − 1
            let z: Vec<f64> = l.iter().map(|x| x * (x + 2.0)).collect();
            assert!((TimeChange::B.apply(&z) - y).abs() < 1e-10 * y.max(1.0));
        }
    }

    #[test]
    fn y_and_x_share_jumps_under_time_change() {
        let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 0.7), (2, 3, 1.3), (0, 3, 2.0), (0, 2, 0.4)]).unwrap();
        let mut rng = stream_rng(21, 0);
        let mut y = ProcessState::new(&g, 0);
        let mut x = ProcessState::new(&g, 0);
        for _ in 0..2000 {
            let e = exp1(&mut rng);
            let u: f64 = rng.gen();
            let (_, ty) = vrjp_step_with(&g, &mut y, e, u);
            let (_, tx) = x_step_with(&g, &mut x, e, u, DEFAULT_OVERFLOW_BOUND).unwrap();
            assert_eq!(ty, tx);
        }
        for i in 0..4 {
            assert!((x.local_time[i] - y.local_time[i].ln_1p()).abs() < 1e-9);
        }
        assert!((x.clock - TimeChange::A.apply(&y.local_time)).abs() < 1e-8);
    }

    #[test]
    fn z_detailed_balance() {
        let g = triangle();
        let u = [0.3_f64, -1.2, 0.9];
        for &(i, j) in g.edges() {
            let fwd = (2.0 * u[i]).exp() * 0.5 * (u[j] - u[i]).exp();
            let bwd = (2.0 * u[j]).exp() * 0.5 * (u[i] - u[j]).exp();
            assert!((fwd - bwd).abs() < 1e-14 * fwd);
        }
        // U ≡ 0 on two vertices: rate 1/2
        let g2 = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let mut s = ProcessState::new(&g2, 0);
        let (soj, to) = z_step_with(&g2, &[0.0, 0.0], &mut s, 1.0, 0.5);
        assert_eq!((soj, to), (2.0, 1));
    }

    #[test]
    fn x_sojourn_inversion() {
        let g = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let s = ProcessState::new(&g, 0);
        let (soj, _) = x_next(&g, &s, 0.7, 0.5);
        assert!((soj - 1.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn x_overflow_is_reported() {
        let g = WeightedGraph::new(2, [(0, 1, 1e-300)]).unwrap();
        let mut s = ProcessState::new(&g, 0);
        let err = x_step_with(&g, &mut s, 5.0, 0.5, 10.0).unwrap_err();
        assert!(matches!(err, Error::Overflow { vertex: 0, .. }));
    }

    #[test]
    fn run_until_contracts() {
        let g = triangle();
        let empty = run_until(&g, &RunConfig::new(ProcessKind::Errw, Budget::steps(0)), 1).unwrap();
        assert!(empty.jumps.is_empty());
        assert_eq!(empty.final_state, ProcessState::new(&g, 0));
        for kind in [ProcessKind::Errw, ProcessKind::ErrwCt, ProcessKind::Vrjp, ProcessKind::X, ProcessKind::Z] {
            let mut cfg = RunConfig::new(kind, Budget::horizon(5.0));
            cfg.checkpoints = vec![1.0, 2.5, 4.0];
            cfg.field = Some(vec![0.1, -0.3, 0.2]);
            let a = run_until(&g, &cfg, 42).unwrap();
            let b = run_until(&g, &cfg, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.complete);
            assert_eq!(a.checkpoints.len(), 3);
            for c in &a.checkpoints {
                let total: f64 = c.local_time.iter().sum();
                assert!((total - c.t).abs() < 1e-9 * c.t.max(1.0), "{kind:?}");
            }
            assert!(a.jumps.windows(2).all(|w| w[0].t < w[1].t && w[0].to == w[1].from));
            let total: f64 = a.final_state.local_time.iter().sum();
            assert!((total - a.final_state.clock).abs() < 1e-9 * total.max(1.0));
            if matches!(kind, ProcessKind::X | ProcessKind::Vrjp) {
                assert!(a.checkpoints.iter().all(|c| c.centred.is_some()));
            }
        }
        let short = run_until(&g, &RunConfig::new(ProcessKind::Vrjp, Budget { horizon: Some(1e6), max_steps: Some(10) }), 3).unwrap();
        assert!(!short.complete);
        assert_eq!(short.jumps.len(), 10);
    }

    #[test]
    fn exports() {
        let g = triangle();
        let mut cfg = RunConfig::new(ProcessKind::Vrjp, Budget::steps(5));
        cfg.checkpoints = vec![0.1];
        let t = run_until(&g, &cfg, 9).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let first: Jump = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.from, 0);
        let mut csv = Vec::new();
        t.write_checkpoints_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("t,T_0,T_1,T_2\n"));
    }

    #[test]
    fn gamma_coupling_moments() {
        let mut rng = stream_rng(17, 0);
        let n = 20_000;
        for coupling in [Coupling::Conditional, Coupling::Direct { horizon: DEFAULT_YULE_HORIZON }] {
            let a = [0.5, 2.0];
            let mut sums = [0.0; 2];
            let reps = if matches!(coupling, Coupling::Direct { .. }) { n / 20 } else { n };
            for _ in 0..reps {
                let (w, _) = sample_gamma_coupling(&a, coupling, &mut rng).unwrap();
                sums[0] += w[0];
                sums[1] += w[1];
            }
            for k in 0..2 {
                let mean = sums[k] / reps as f64;
                let se = (a[k] / reps as f64).sqrt();
                assert!((mean - a[k]).abs() < 4.0 * se, "{coupling:?}: {mean}");
            }
        }
    }

    #[test]
    fn direct_coupling_replays_explicit_alarms() {
        let mut rng = stream_rng(4, 0);
        let (_, tl) = sample_gamma_coupling(&[1.0], Coupling::Direct { horizon: 3.0 }, &mut rng).unwrap();
        let v = tl.first_alarms(0, 30, &mut rng);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
}
