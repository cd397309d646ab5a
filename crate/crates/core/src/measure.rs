//! Log-densities of the VRJP limiting measure, the pinned sigma-model measure
//! and the Coppersmith–Diaconis mixing measure.
//!
//! Reference measures:
//! * [`limit_log_density`] is a density on the zero-sum hyperplane with
//!   respect to Lebesgue measure in difference coordinates
//!   `(u_j − u_{j0})_{j ≠ j0}` (any `j0`; the change between choices is
//!   unimodular).
//! * [`sigma_log_density`] is a density on `R^V` w.r.t. `Π dt_j`.
//! * [`cd_log_density`] is a density on `(0,∞)^{E∖{e0}}` w.r.t. `Π dy_e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{PinnedGraph, WeightedGraph};
use crate::linalg::Matrix;
use crate::scalar::{ln_gamma, ln_two_pi, Scalar};

/// Gauge tolerance for `|Σ u_i|` relative to `1 + max |u_i|`.
pub fn gauge_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(256.0))
}

/// Interaction energy `H(W, u) = 2 Σ W_ij sinh²((u_i − u_j)/2)`.
pub fn h_functional<T: Scalar>(g: &WeightedGraph<T>, u: &[T]) -> T {
    let half = T::lit(0.5);
    g.edges()
        .iter()
        .zip(g.weights())
        .map(|(&(i, j), &w)| {
            let s = (half * (u[i] - u[j])).sinh();
            T::lit(2.0) * w * s * s
        })
        .sum()
}

/// Sigma-model gradient energy `F^β(∇t) = Σ β_ij (cosh(t_i − t_j) − 1)`.
pub fn f_functional<T: Scalar>(g: &WeightedGraph<T>, t: &[T]) -> T {
    g.edges()
        .iter()
        .zip(g.weights())
        .map(|(&(i, j), &b)| b * (t[i] - t[j]).cosh() - b)
        .sum()
}

/// Pinning energy `M^ε(t) = Σ ε_i (cosh t_i − 1)`.
pub fn m_functional<T: Scalar>(eps: &[T], t: &[T]) -> T {
    eps.iter()
        .zip(t)
        .filter(|(&e, _)| e > T::zero())
        .map(|(&e, &x)| e * (x.cosh() - T::one()))
        .sum()
}

/// Edge conductances `W_ij e^{u_i + u_j}`.
pub fn tilted_conductances<T: Scalar>(g: &WeightedGraph<T>, u: &[T]) -> Vec<T> {
    g.edges()
        .iter()
        .zip(g.weights())
        .map(|(&(i, j), &w)| w * (u[i] + u[j]).exp())
        .collect()
}

/// `log` of the `k`-th diagonal minor of the Laplacian with conductances `c`.
pub fn log_laplacian_minor<T: Scalar>(g: &WeightedGraph<T>, c: &[T], k: usize) -> Result<T> {
    let n = g.n_vertices();
    if k >= n {
        return Err(Error::InvalidArgument(format!("minor index {k} out of range")));
    }
    if n == 1 {
        return Ok(T::zero());
    }
    let (sign, logabs) = g.laplacian_with(c).minor(k).lu()?.log_abs_det();
    if sign <= T::zero() || !logabs.is_finite() {
        return Err(Error::NonFinite(format!(
            "Laplacian minor is not positive (sign {sign}, log|det| {logabs})"
        )));
    }
    Ok(logabs)
}

/// `log` of the `k`-th diagonal minor of the Laplacian built from the
/// symmetric, nonnegative conductance matrix `c` (diagonal ignored).
///
/// Kron reduction eliminating every vertex but `k`: each pivot is the sum of
/// the eliminated vertex's current conductances, so no subtraction occurs
/// and the result keeps full relative accuracy even when conductances span
/// hundreds of orders of magnitude. Conductances are rescaled by their
/// maximum first.
pub fn log_grounded_det<T: Scalar>(c: &Matrix<T>, k: usize) -> Result<T> {
    let n = c.rows();
    if k >= n {
        return Err(Error::InvalidArgument(format!("minor index {k} out of range")));
    }
    if n == 1 {
        return Ok(T::zero());
    }
    let mut cmax = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cmax = cmax.max(c[(i, j)]);
            }
        }
    }
    if !(cmax > T::zero()) || !cmax.is_finite() {
        return Err(Error::NonFinite(format!("conductance scale {cmax}")));
    }
    let mut w = Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { c[(i, j)] / cmax });
    let mut alive: Vec<usize> = (0..n).collect();
    let mut log_det = T::count(n - 1) * cmax.ln();
    for p in (0..n).filter(|&p| p != k) {
        alive.retain(|&v| v != p);
        let d: T = alive.iter().map(|&q| w[(p, q)]).sum();
        if !(d > T::zero()) {
            return Err(Error::Singular(format!("vertex {p} is cut off during elimination")));
        }
        log_det = log_det + d.ln();
        for (a, &q) in alive.iter().enumerate() {
            let wq = w[(q, p)];
            if wq == T::zero() {
                continue;
            }
            for &r in &alive[a + 1..] {
                let add = wq * w[(p, r)] / d;
                w[(q, r)] = w[(q, r)] + add;
                w[(r, q)] = w[(r, q)] + add;
            }
        }
    }
    if !log_det.is_finite() {
        return Err(Error::NonFinite(format!("log determinant {log_det}")));
    }
    Ok(log_det)
}

/// Kron-reduction counterpart of [`log_laplacian_minor`] for per-edge
/// conductances `c`.
pub fn log_conductance_minor<T: Scalar>(g: &WeightedGraph<T>, c: &[T], k: usize) -> Result<T> {
    let n = g.n_vertices();
    let mut m = Matrix::zeros(n, n);
    for (&(i, j), &x) in g.edges().iter().zip(c) {
        m[(i, j)] = x;
        m[(j, i)] = x;
    }
    log_grounded_det(&m, k)
}

/// `log D(W, u)`: the `k`-th diagonal minor of the Laplacian with
/// conductances `W_ij e^{u_i + u_j}` (equal for every `k`).
pub fn log_tree_determinant_minor<T: Scalar>(g: &WeightedGraph<T>, u: &[T], k: usize) -> Result<T> {
    let n = g.n_vertices();
    if u.len() != n {
        return Err(Error::InvalidArgument(format!(
            "field has {} entries for {} vertices",
            u.len(),
            n
        )));
    }
    let mut c = Matrix::zeros(n, n);
    for (&(i, j), &w) in g.edges().iter().zip(g.weights()) {
        let x = w * (u[i] + u[j]).exp();
        c[(i, j)] = x;
        c[(j, i)] = x;
    }
    log_grounded_det(&c, k).map_err(|e| match e {
        Error::NonFinite(_) | Error::Singular(_) => Error::NonFinite(format!("tree determinant at u = {u:?}")),
        other => other,
    })
}

pub fn log_tree_determinant<T: Scalar>(g: &WeightedGraph<T>, u: &[T]) -> Result<T> {
    log_tree_determinant_minor(g, u, 0)
}

/// Subtracts the mean so that `Σ u = 0`.
pub fn project_zero_sum<T: Scalar>(u: &mut [T]) {
    if u.is_empty() {
        return;
    }
    let mean = u.iter().copied().sum::<T>() / T::count(u.len());
    for x in u.iter_mut() {
        *x = *x - mean;
    }
}

fn check_zero_sum<T: Scalar>(u: &[T]) -> Result<()> {
    let sum: T = u.iter().copied().sum();
    let scale = T::one() + u.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if sum.abs() > gauge_tolerance::<T>() * scale {
        return Err(Error::InvalidArgument(format!(
            "field is not on the zero-sum hyperplane (Σu = {sum})"
        )));
    }
    Ok(())
}

/// `log` of the limiting density at `u ∈ H₀` for pinning vertex `i0`:
/// `u_{i0} − H(W,u) + ½ log D(W,u) − ((N−1)/2) log 2π`.
pub fn limit_log_density<T: Scalar>(g: &WeightedGraph<T>, i0: usize, u: &[T]) -> Result<T> {
    if i0 >= g.n_vertices() {
        return Err(Error::InvalidArgument(format!("pinning vertex {i0} out of range")));
    }
    check_zero_sum(u)?;
    let logd = log_tree_determinant(g, u)?;
    let half = T::lit(0.5);
    Ok(u[i0] - h_functional(g, u) + half * logd
        - half * T::count(g.n_vertices() - 1) * ln_two_pi::<T>())
}

/// `log` of `dμ^{ε,β}/Π dt_j`:
/// `−Σ t − F^β(∇t) − M^ε(t) + ½ log det A − (|V|/2) log 2π`,
/// where `A` has off-diagonals `−β_ij e^{t_i+t_j}` and diagonal
/// `Σ_j β_ij e^{t_i+t_j} + ε_i e^{t_i}`.
pub fn sigma_log_density<T: Scalar>(p: &PinnedGraph<T>, t: &[T]) -> Result<T> {
    let g = p.base();
    let n = g.n_vertices();
    if t.len() != n {
        return Err(Error::InvalidArgument(format!(
            "field has {} entries for {} vertices",
            t.len(),
            n
        )));
    }
    // det A is the δ-minor of the Laplacian with conductances β_ij e^{t_i+t_j}
    // and ε_i e^{t_i} on the edges to δ
    let mut c = Matrix::zeros(n + 1, n + 1);
    for (&(i, j), &b) in g.edges().iter().zip(g.weights()) {
        let x = b * (t[i] + t[j]).exp();
        c[(i, j)] = x;
        c[(j, i)] = x;
    }
    for (i, &e) in p.eps().iter().enumerate() {
        let x = e * t[i].exp();
        c[(i, n)] = x;
        c[(n, i)] = x;
    }
    let sum_t: T = t.iter().copied().sum();
    let log_det = log_grounded_det(&c, n)?;
    let half = T::lit(0.5);
    let value = -sum_t - f_functional(g, t) - m_functional(p.eps(), t) + half * log_det
        - half * T::count(n) * ln_two_pi::<T>();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("sigma density at t = {t:?}")));
    }
    Ok(value)
}

/// Embeds `t ∈ R^V` into the pinned graph's vertex set (`u_δ = 0`) and
/// projects onto the zero-sum hyperplane.
pub fn embed_pinned<T: Scalar>(p: &PinnedGraph<T>, t: &[T]) -> Vec<T> {
    let mut u = t.to_vec();
    u.push(T::zero());
    project_zero_sum(&mut u);
    debug_assert_eq!(u.len(), p.delta() + 1);
    u
}

/// `log C''(a)` for initial weights `a` (stored as the graph weights):
/// `(1 − N + Σa) log 2 − ((N−1)/2) log π + log Γ(a_{i0}/2)
///  + Σ_{i≠i0} log Γ((a_i+1)/2) − Σ_e log Γ(a_e)`, with `a_i = Σ_{j∼i} a_ij`.
pub fn cd_log_constant<T: Scalar>(g: &WeightedGraph<T>, i0: usize) -> T {
    let n = g.n_vertices();
    let sum_a: T = g.weights().iter().copied().sum();
    let half = T::lit(0.5);
    let mut c = (T::one() - T::count(n) + sum_a) * T::LN_2()
        - half * T::count(n - 1) * T::PI().ln();
    for i in 0..n {
        let ai = g.weighted_degree(i);
        c = c + if i == i0 {
            ln_gamma(half * ai)
        } else {
            ln_gamma(half * (ai + T::one()))
        };
    }
    c - g.weights().iter().map(|&a| ln_gamma(a)).sum::<T>()
}

/// `log` of the Coppersmith–Diaconis density of the normalised conductances
/// `y = x / x_{e0}` w.r.t. `Π_{e≠e0} dy_e`:
///
/// `log C''(a) + ½ log y_{i0} + Σ_e a_e log y_e − Σ_i ((a_i+1)/2) log y_i
///  + ½ log D(y) − Σ_{e≠e0} log y_e`
///
/// with `y_i = Σ_{j∼i} y_ij`. The last sum converts the natural
/// `Π dy_e / y_e` reference measure to Lebesgue.
pub fn cd_log_density<T: Scalar>(g: &WeightedGraph<T>, i0: usize, e0: usize, y: &[T]) -> Result<T> {
    let n = g.n_vertices();
    if y.len() != g.n_edges() || e0 >= g.n_edges() || i0 >= n {
        return Err(Error::InvalidArgument("edge vector, e0 or i0 out of range".into()));
    }
    if (y[e0] - T::one()).abs() > T::epsilon() * T::lit(4.0) {
        return Err(Error::InvalidArgument(format!("y[e0] must equal 1, got {}", y[e0])));
    }
    if y.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidArgument("y must be positive and finite".into()));
    }
    let half = T::lit(0.5);
    let yi = |i: usize| -> T { g.neighbors(i).iter().map(|&(_, e)| y[e]).sum() };
    let mut value = cd_log_constant(g, i0) + half * yi(i0).ln();
    for (e, &a) in g.weights().iter().enumerate() {
        value = value + a * y[e].ln();
        if e != e0 {
            value = value - y[e].ln();
        }
    }
    for i in 0..n {
        value = value - half * (g.weighted_degree(i) + T::one()) * yi(i).ln();
    }
    value = value + half * log_conductance_minor(g, y, 0)?;
    Ok(value)
}

/// Target of a density evaluation: the limiting measure pinned at a vertex
/// (on `H₀`) or the sigma-model measure pinned through `δ` (on `R^V`).
#[derive(Debug, Clone)]
pub enum MeasureParams<T> {
    Vertex { graph: WeightedGraph<T>, i0: usize },
    Pinned(PinnedGraph<T>),
}

/// Gauge of a field configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gauge {
    /// `Σ u = 0`.
    ZeroSum,
    /// Unconstrained `t`-coordinates.
    Free,
}

impl<T: Scalar> MeasureParams<T> {
    pub fn dim(&self) -> usize {
        match self {
            MeasureParams::Vertex { graph, .. } => graph.n_vertices(),
            MeasureParams::Pinned(p) => p.base().n_vertices(),
        }
    }

    pub fn gauge(&self) -> Gauge {
        match self {
            MeasureParams::Vertex { .. } => Gauge::ZeroSum,
            MeasureParams::Pinned(_) => Gauge::Free,
        }
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        match self {
            MeasureParams::Vertex { graph, i0 } => limit_log_density(graph, *i0, x),
            MeasureParams::Pinned(p) => sigma_log_density(p, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::spanning_trees;
    use crate::quadrature::integrate;
    use proptest::prelude::*;

    fn triangle() -> WeightedGraph<f64> {
        WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
    }

    #[test]
    fn h_examples() {
        let g = WeightedGraph::new(2, [(0, 1, 1.0_f64)]).unwrap();
        assert_eq!(h_functional(&g, &[0.3, 0.3]), 0.0);
        // 2 sinh²(1) = cosh 2 − 1
        let expected = 2f64.cosh() - 1.0;
        assert!((h_functional(&g, &[1.0, -1.0]) - expected).abs() < 1e-14);
        assert!((expected - 2.762_195_7).abs() < 1e-7);
    }

    #[test]
    fn tree_determinant_examples() {
        let g = WeightedGraph::new(2, [(0, 1, 2.5_f64)]).unwrap();
        let v = log_tree_determinant(&g, &[0.3, -1.1]).unwrap();
        assert!((v - (2.5f64.ln() + 0.3 - 1.1)).abs() < 1e-14);
        let t = triangle();
        assert!((log_tree_determinant(&t, &[0.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn limit_density_at_origin() {
        let v = limit_log_density(&triangle(), 0, &[0.0; 3]).unwrap();
        let expected = 0.5 * 3f64.ln() - std::f64::consts::TAU.ln();
        assert!((v - expected).abs() < 1e-14);
        assert!(limit_log_density(&triangle(), 0, &[0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn two_vertex_normalisation() {
        for w in [0.25, 1.0, 4.0] {
            let g = WeightedGraph::new(2, [(0, 1, w)]).unwrap();
            let q = integrate(
                |s: f64| limit_log_density(&g, 0, &[-s / 2.0, s / 2.0]).unwrap().exp(),
                -40.0,
                40.0,
                1e-11,
                0.0,
            )
            .unwrap();
            assert!((q.value - 1.0).abs() < 1e-9, "W = {w}: {}", q.value);
        }
    }

    #[test]
    fn single_vertex_sigma() {
        let g = WeightedGraph::<f64>::new(1, []).unwrap();
        let p = PinnedGraph::new(g, vec![1.0]).unwrap();
        let v = sigma_log_density(&p, &[0.0]).unwrap();
        assert!((v + 0.5 * std::f64::consts::TAU.ln()).abs() < 1e-15);
        let q = integrate(|t: f64| sigma_log_density(&p, &[t]).unwrap().exp(), -40.0, 40.0, 1e-11, 0.0)
            .unwrap();
        assert!((q.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cd_constant_two_vertices_is_one() {
        // duplication formula: Γ(a/2)Γ((a+1)/2) = 2^{1−a}√π Γ(a)
        for a in [0.3_f64, 1.0, 2.7] {
            let g = WeightedGraph::new(2, [(0, 1, a)]).unwrap();
            assert!(cd_log_constant(&g, 0).abs() < 1e-12);
            assert!(cd_log_density(&g, 1, 0, &[1.0]).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn cd_rejects_unnormalised_y() {
        let g = triangle();
        assert!(cd_log_density(&g, 0, 0, &[2.0, 1.0, 1.0]).is_err());
        assert!(cd_log_density(&g, 0, 0, &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn f32_path_agrees() {
        let g = triangle();
        let u = [0.2, -0.5, 0.3];
        let v64 = limit_log_density(&g, 1, &u).unwrap();
        let g32: WeightedGraph<f32> = g.cast();
        let v32 = limit_log_density(&g32, 1, &[0.2f32, -0.5, 0.3]).unwrap();
        assert!((v64 - v32 as f64).abs() < 1e-5);
    }

    fn small_graph() -> impl Strategy<Value = WeightedGraph<f64>> {
        (2usize..7)
            .prop_flat_map(|n| {
                let extra = proptest::collection::vec((0..n, 0..n), 0..8);
                let w = proptest::collection::vec(0.1f64..4.0, n - 1 + 8);
                (Just(n), extra, w)
            })
            .prop_map(|(n, extra, w)| {
                let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
                for (i, j) in extra {
                    let key = (i.min(j), i.max(j));
                    if i != j && !edges.contains(&key) {
                        edges.push(key);
                    }
                }
                WeightedGraph::new(n, edges.iter().zip(&w).map(|(&(i, j), &x)| (i, j, x))).unwrap()
            })
    }

    proptest! {
        #[test]
        fn h_matches_cosh_form(g in small_graph(), seed in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let u = &seed[..g.n_vertices()];
            let h = h_functional(&g, u);
            let f = f_functional(&g, u);
            prop_assert!((h - f).abs() <= 1e-12 * (1.0 + h.abs()));
            prop_assert!(h >= 0.0);
        }

        #[test]
        fn minors_agree_with_tree_sum(g in small_graph(), seed in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let u = &seed[..g.n_vertices()];
            let trees = spanning_trees(&g).unwrap();
            let c = tilted_conductances(&g, u);
            let sum: f64 = trees.iter().map(|t| t.iter().map(|&e| c[e]).product::<f64>()).sum();
            for k in 0..g.n_vertices() {
                let v = log_tree_determinant_minor(&g, u, k).unwrap();
                prop_assert!((v.exp() - sum).abs() <= 1e-10 * sum);
                let direct = log_laplacian_minor(&g, &c, k).unwrap();
                prop_assert!((direct - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn pinned_equivalence(g in small_graph(), seed in proptest::collection::vec(-2.0f64..2.0, 6),
                              eps in proptest::collection::vec(0.0f64..2.0, 6)) {
            let n = g.n_vertices();
            let mut eps = eps[..n].to_vec();
            eps[0] += 0.1;
            let t = &seed[..n];
            let p = PinnedGraph::new(g, eps).unwrap();
            let direct = sigma_log_density(&p, t).unwrap();
            let ext = p.extended();
            let u = embed_pinned(&p, t);
            let via_limit = limit_log_density(&ext, p.delta(), &u).unwrap();
            prop_assert!((direct - via_limit).abs() <= 1e-12 * (1.0 + direct.abs()) * 10.0);
        }

        #[test]
        fn regauging_is_harmless(seed in proptest::collection::vec(-3.0f64..3.0, 4), j0 in 0usize..4) {
            // evaluate after shifting to u_{j0} = 0 and projecting back
            let g = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0), (0, 3, 1.5)]).unwrap();
            let mut u = seed.clone();
            project_zero_sum(&mut u);
            let base = limit_log_density(&g, 2, &u).unwrap();
            let mut v: Vec<f64> = u.iter().map(|x| x - u[j0]).collect();
            project_zero_sum(&mut v);
            let again = limit_log_density(&g, 2, &v).unwrap();
            prop_assert!((base - again).abs() < 1e-12);
        }

        #[test]
        fn log_domain_finite_at_large_fields(seed in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let g = WeightedGraph::new(6, (1..6).map(|i| (i - 1, i, 1.0)).chain([(0, 5, 0.5)])).unwrap();
            let mut u = seed.clone();
            project_zero_sum(&mut u);
            let logd = log_tree_determinant(&g, &u).unwrap();
            prop_assert!(logd.is_finite());
        }
    }
}
