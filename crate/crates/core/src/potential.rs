//! Poisson-equation solver `L(T) Q(T) = I − 𝟙/N` for the generator with
//! off-diagonal rates `W_ij e^{T_i + T_j}`, its derivative in `T`, and the
//! martingale part of the local times of the `X` process:
//!
//! ```text
//! M_l(t) = T_l(t) − t/N − Q(T(t))_{X_t,l} + Q(0)_{X_0,l} + ∫₀ᵗ (∂_{T_{X_s}} Q)_{X_s,l} ds
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightedGraph;
use crate::linalg::Matrix;
use crate::process::Jump;
use crate::scalar::Scalar;

/// Smallest admissible spectral gap relative to the largest eigenvalue.
pub const GAP_THRESHOLD: f64 = 1e-13;

/// Generator `L(T)` (rows sum to zero, off-diagonals `W_ij e^{T_i+T_j}`).
pub fn generator<T: Scalar>(g: &WeightedGraph<T>, t: &[T]) -> Matrix<T> {
    let n = g.n_vertices();
    let mut l = Matrix::zeros(n, n);
    for (&(i, j), &w) in g.edges().iter().zip(g.weights()) {
        let r = w * (t[i] + t[j]).exp();
        l[(i, j)] = l[(i, j)] + r;
        l[(j, i)] = l[(j, i)] + r;
        l[(i, i)] = l[(i, i)] - r;
        l[(j, j)] = l[(j, j)] - r;
    }
    l
}

/// `Q(T) = Σ_{λ_k ≠ 0} λ_k⁻¹ v_k v_kᵀ` from the eigendecomposition of the
/// symmetric generator.
pub fn solve_q<T: Scalar>(g: &WeightedGraph<T>, t: &[T]) -> Result<Matrix<T>> {
    let n = g.n_vertices();
    if t.len() != n {
        return Err(Error::InvalidArgument(format!(
            "local-time vector has {} entries for {} vertices",
            t.len(),
            n
        )));
    }
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("local times {t:?}")));
    }
    if n == 1 {
        return Ok(Matrix::zeros(1, 1));
    }
    let eig = generator(g, t).symmetric_eigen();
    // eigenvalues ascend; all ≤ 0, the largest is the constant mode
    let scale = eig.values[0].abs().max(T::min_positive_value());
    let gap = eig.values[n - 2].abs() / scale;
    if gap < T::lit(GAP_THRESHOLD) {
        return Err(Error::SpectralGap { gap: gap.as_f64() });
    }
    let mut q = Matrix::zeros(n, n);
    for k in 0..n - 1 {
        let inv = T::one() / eig.values[k];
        for a in 0..n {
            let va = eig.vectors[(a, k)] * inv;
            for b in 0..n {
                q[(a, b)] = q[(a, b)] + va * eig.vectors[(b, k)];
            }
        }
    }
    // symmetrise away rounding
    for a in 0..n {
        for b in a + 1..n {
            let m = T::lit(0.5) * (q[(a, b)] + q[(b, a)]);
            q[(a, b)] = m;
            q[(b, a)] = m;
        }
    }
    Ok(q)
}

/// `∂Q/∂T_i` with entries `Σ_{j∼i} W_ij e^{T_i+T_j} (Q_kj − Q_ki)(Q_jl − Q_il)`.
pub fn q_derivative<T: Scalar>(g: &WeightedGraph<T>, t: &[T], q: &Matrix<T>, i: usize) -> Matrix<T> {
    let n = g.n_vertices();
    let mut d = Matrix::zeros(n, n);
    for &(j, e) in g.neighbors(i) {
        let w = g.weight(e) * (t[i] + t[j]).exp();
        let grad: Vec<T> = (0..n).map(|k| q[(k, j)] - q[(k, i)]).collect();
        for k in 0..n {
            let gk = w * grad[k];
            for l in 0..n {
                d[(k, l)] = d[(k, l)] + gk * grad[l];
            }
        }
    }
    d
}

/// Checks the structural invariants of a Q matrix: zero column sums,
/// symmetry and nonpositive diagonal. Returns the largest violation.
pub fn q_structure_violation<T: Scalar>(q: &Matrix<T>) -> T {
    let n = q.rows();
    let mut worst = T::zero();
    for j in 0..n {
        let s: T = (0..n).map(|i| q[(i, j)]).sum();
        worst = worst.max(s.abs());
        worst = worst.max(q[(j, j)]);
        for i in 0..n {
            worst = worst.max((q[(i, j)] - q[(j, i)]).abs());
        }
    }
    worst
}

/// Largest tolerated gap between the ODE-evolved and the solved `Q`.
pub const ODE_RESIDUAL_LIMIT: f64 = 1e-4;
pub const DEFAULT_ODE_STEP: f64 = 1e-3;
const ODE_HALVINGS: usize = 4;

/// How `Q(T(t))` is followed along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QTracking {
    /// Integrate `dQ/dT_i = ∂_{T_i}Q` through each sojourn with fixed-step
    /// RK4; cross-checked against [`solve_q`] at every jump. The step is
    /// halved (up to 4 times) when the residual exceeds 1e-4.
    Ode { step: f64 },
    /// Solve for `Q` at every jump. Exact because within a sojourn at `i`
    /// only `T_i` moves, so the drift integral over the sojourn is the
    /// increment of `Q_{i,l}`.
    Exact,
}

/// `M_l` after every jump, plus quadratic-variation summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleSeries {
    pub l: usize,
    pub n_vertices: usize,
    /// `(t, vertex entered, M_l(t))`, starting with `(0, X_0, 0)`.
    pub points: Vec<(f64, usize, f64)>,
    pub horizon: f64,
    /// `M_l` at the horizon.
    pub terminal: f64,
    /// `Σ (ΔM_l)²` over jumps.
    pub qv: f64,
    /// `Q(T(horizon))_{l,l} − Q(0)_{l,l}`, the predictable bracket.
    pub bracket: f64,
    /// `max |Q_ode − Q_solved|` over jumps (0 in exact mode).
    pub consistency_residual: f64,
    pub ode_step: Option<f64>,
}

impl MartingaleSeries {
    /// `M_l(t)`: between jumps `M_l` is linear with slope `1{X=l} − 1/N`.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.points.partition_point(|p| p.0 <= t).max(1) - 1;
        let (tk, x, m) = self.points[k];
        let slope = if x == self.l { 1.0 } else { 0.0 } - 1.0 / self.n_vertices as f64;
        m + (t.min(self.horizon) - tk) * slope
    }
}

fn rk4_sojourn(g: &WeightedGraph<f64>, t: &mut [f64], q: &mut Matrix<f64>, i: usize, length: f64, step: f64) {
    let n_sub = (length / step).ceil().max(1.0) as usize;
    let h = length / n_sub as f64;
    let t0 = t[i];
    for k in 0..n_sub {
        let base = t0 + k as f64 * h;
        let mut eval = |dt: f64, qq: &Matrix<f64>| {
            t[i] = base + dt;
            q_derivative(g, t, qq, i)
        };
        let shifted = |s: f64, k: &Matrix<f64>| {
            let mut m = q.clone();
            m.axpy(s, k);
            m
        };
        let k1 = eval(0.0, q);
        let k2 = eval(0.5 * h, &shifted(0.5 * h, &k1));
        let k3 = eval(0.5 * h, &shifted(0.5 * h, &k2));
        let k4 = eval(h, &shifted(h, &k3));
        let n = q.rows();
        for a in 0..n {
            for b in 0..n {
                q[(a, b)] += h / 6.0 * (k1[(a, b)] + 2.0 * k2[(a, b)] + 2.0 * k3[(a, b)] + k4[(a, b)]);
            }
        }
    }
    t[i] = t0 + length;
}

fn check_increments(q_prev: &Matrix<f64>, q: &Matrix<f64>, l: usize, t: f64) -> Result<()> {
    let scale = q_prev.max_abs().max(q.max_abs()).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let dll = q[(l, l)] - q_prev[(l, l)];
    if dll < -tol {
        return Err(Error::Invariant(format!("Q_ll decreased by {:e} at t = {t}", -dll)));
    }
    for k in 0..q.rows() {
        let dkl = q[(k, l)] - q_prev[(k, l)];
        let dkk = q[(k, k)] - q_prev[(k, k)];
        let excess = dkl * dkl - dkk.max(0.0) * dll.max(0.0);
        if excess > tol * scale {
            return Err(Error::Invariant(format!(
                "|ΔQ_({k},{l})|² exceeds ΔQ_kk·ΔQ_ll by {excess:e} at t = {t}"
            )));
        }
    }
    Ok(())
}

fn reconstruct(
    g: &WeightedGraph<f64>,
    start: usize,
    jumps: &[Jump],
    horizon: f64,
    l: usize,
    ode_step: Option<f64>,
) -> Result<MartingaleSeries> {
    let n = g.n_vertices();
    let inv_n = 1.0 / n as f64;
    let mut t = vec![0.0; n];
    let q0 = solve_q(g, &t)?;
    let mut q = q0.clone();
    let base = q0[(start, l)];
    let mut x = start;
    let mut clock = 0.0;
    let mut drift = 0.0; // Σ over finished sojourns of ΔQ_{x,l}
    let mut points = vec![(0.0, start, 0.0)];
    let mut qv = 0.0;
    let mut residual: f64 = 0.0;
    for jump in jumps.iter().filter(|j| j.t <= horizon) {
        if jump.from != x {
            return Err(Error::InvalidArgument(format!(
                "jump at t = {} leaves {} but the walk is at {x}",
                jump.t, jump.from
            )));
        }
        let q_prev = q.clone();
        let before = q[(x, l)];
        let length = jump.t - clock;
        match ode_step {
            Some(step) => {
                rk4_sojourn(g, &mut t, &mut q, x, length, step);
                let solved = solve_q(g, &t)?;
                residual = residual.max(q.sub(&solved).max_abs());
                if residual > ODE_RESIDUAL_LIMIT {
                    return Err(Error::OdeResidual {
                        residual,
                        limit: ODE_RESIDUAL_LIMIT,
                    });
                }
            }
            None => {
                t[x] += length;
                q = solve_q(g, &t)?;
            }
        }
        check_increments(&q_prev, &q, l, jump.t)?;
        drift += q[(x, l)] - before;
        clock = jump.t;
        // M jumps by −(Q_{to,l} − Q_{from,l})
        let dm = q[(jump.from, l)] - q[(jump.to, l)];
        qv += dm * dm;
        x = jump.to;
        let m = t[l] - clock * inv_n - q[(x, l)] + base + drift;
        points.push((clock, x, m));
    }
    let last = points.last().expect("non-empty").2;
    let slope = if x == l { 1.0 } else { 0.0 } - inv_n;
    let terminal = last + (horizon - clock) * slope;
    t[x] += horizon - clock;
    let q_end = solve_q(g, &t)?;
    Ok(MartingaleSeries {
        l,
        n_vertices: n,
        points,
        horizon,
        terminal,
        qv,
        bracket: q_end[(l, l)] - q0[(l, l)],
        consistency_residual: residual,
        ode_step,
    })
}

/// Reconstructs `M_l` along an `X` trajectory given by its start vertex and
/// jump list (X-time). Asserts at every jump that `Q_{l,l}` did not decrease
/// and that `|ΔQ_{k,l}|² ≤ ΔQ_{k,k} ΔQ_{l,l}`.
pub fn martingale_diagnostics(
    g: &WeightedGraph<f64>,
    start: usize,
    jumps: &[Jump],
    horizon: f64,
    l: usize,
    tracking: QTracking,
) -> Result<MartingaleSeries> {
    let n = g.n_vertices();
    if start >= n || l >= n {
        return Err(Error::InvalidArgument("vertex out of range".into()));
    }
    match tracking {
        QTracking::Exact => reconstruct(g, start, jumps, horizon, l, None),
        QTracking::Ode { step } => {
            if !(step > 0.0) {
                return Err(Error::InvalidArgument("ODE step must be > 0".into()));
            }
            let mut step = step;
            for _ in 0..ODE_HALVINGS {
                match reconstruct(g, start, jumps, horizon, l, Some(step)) {
                    Err(Error::OdeResidual { .. }) => step *= 0.5,
                    other => return other,
                }
            }
            reconstruct(g, start, jumps, horizon, l, Some(step))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_vertex(w: f64) -> WeightedGraph<f64> {
        WeightedGraph::new(2, [(0, 1, w)]).unwrap()
    }

    #[test]
    fn two_vertex_closed_form() {
        let g = two_vertex(1.7);
        let t = [0.4, -0.1];
        let w = 1.7 * (0.3f64).exp();
        let q = solve_q(&g, &t).unwrap();
        let c = 1.0 / (4.0 * w);
        assert!((q[(0, 0)] + c).abs() < 1e-14);
        assert!((q[(0, 1)] - c).abs() < 1e-14);
        let d = q_derivative(&g, &t, &q, 0);
        // w·(ΔQ)² with ΔQ = 1/(2w)
        assert!((d[(0, 0)] - c).abs() < 1e-14);
    }

    #[test]
    fn poisson_identity_and_negativity() {
        let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5), (0, 2, 1.0)]).unwrap();
        let q = solve_q(&g, &[0.0; 4]).unwrap();
        let l = generator(&g, &[0.0; 4]);
        for prod in [l.matmul(&q), q.matmul(&l)] {
            for a in 0..4 {
                for b in 0..4 {
                    let target: f64 = if a == b { 0.75 } else { -0.25 };
                    assert!((prod[(a, b)] - target).abs() < 1e-12);
                }
            }
        }
        assert!(q_structure_violation(&q) < 1e-12);
        assert!(q.symmetric_eigen().values.iter().all(|&v| v <= 1e-12));
    }

    fn x_run(g: &WeightedGraph<f64>, horizon: f64, seed: u64) -> crate::process::Trajectory {
        use crate::process::{run_until, Budget, ProcessKind, RunConfig};
        let mut cfg = RunConfig::new(ProcessKind::X, Budget::horizon(horizon));
        cfg.record_jumps = true;
        run_until(g, &cfg, seed).unwrap()
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 0.7), (2, 3, 1.3), (3, 0, 0.4), (0, 2, 2.0)]).unwrap();
        let t = [0.1, -0.3, 0.25, 0.05];
        let q = solve_q(&g, &t).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let (mut tp, mut tm) = (t, t);
            tp[i] += h;
            tm[i] -= h;
            let fd = solve_q(&g, &tp).unwrap().sub(&solve_q(&g, &tm).unwrap()).scaled(0.5 / h);
            let d = q_derivative(&g, &t, &q, i);
            assert!(d.sub(&fd).max_abs() < 1e-6);
            for l in 0..4 {
                assert!(d[(l, l)] >= 0.0);
            }
        }
    }

    #[test]
    fn ode_tracking_matches_solved_q_on_triangle() {
        let g = WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let traj = x_run(&g, 3.0, 4);
        let ode = martingale_diagnostics(&g, 0, &traj.jumps, 3.0, 1, QTracking::Ode { step: 1e-3 }).unwrap();
        assert!(ode.consistency_residual < 1e-6, "{}", ode.consistency_residual);
        let exact = martingale_diagnostics(&g, 0, &traj.jumps, 3.0, 1, QTracking::Exact).unwrap();
        assert!((ode.terminal - exact.terminal).abs() < 1e-5);
        for (p, q) in ode.points.iter().zip(&exact.points) {
            assert!((p.2 - q.2).abs() < 1e-5);
        }
    }

    #[test]
    fn two_vertex_bracket_is_deterministic() {
        // Q(T)_ll = −e^{−(T_0+T_1)}/4 and T_0 + T_1 = t
        let g = two_vertex(1.0);
        let traj = x_run(&g, 2.5, 8);
        let s = martingale_diagnostics(&g, 0, &traj.jumps, 2.5, 0, QTracking::Exact).unwrap();
        assert!((s.bracket - 0.25 * (1.0 - (-2.5f64).exp())).abs() < 1e-12);
        for w in s.points.windows(2) {
            let (t0, _, _) = w[0];
            let (t1, _, m1) = w[1];
            assert!((s.value_at(t1) - m1).abs() < 1e-12);
            assert!(t1 >= t0);
        }
    }

    #[test]
    fn two_vertex_variance_and_mean() {
        let g = two_vertex(1.0);
        let h = 3.0;
        let ms: Vec<f64> = (0..4000)
            .map(|k| {
                let traj = x_run(&g, h, 1000 + k);
                martingale_diagnostics(&g, 0, &traj.jumps, h, 0, QTracking::Exact).unwrap().terminal
            })
            .collect();
        let (mean, var) = crate::stats::mean_var(&ms).unwrap();
        let expected = 0.25 * (1.0 - (-h as f64).exp());
        assert!(mean.abs() < 4.0 * (var / ms.len() as f64).sqrt());
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn tiny_gap_is_reported() {
        let g = WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1e-30)]).unwrap();
        assert!(matches!(solve_q(&g, &[0.0; 3]), Err(Error::SpectralGap { .. })));
    }
}
