//! Electrical-network quantities: effective resistance and unit current flow.

use crate::error::{Error, Result};
use crate::graph::WeightedGraph;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Harmonic solution between a source vertex and a grounded boundary set.
#[derive(Debug, Clone)]
pub struct ResistanceSolution<T> {
    /// Effective resistance `R(source, boundary)`.
    pub resistance: T,
    /// Potential with `v(source) = 1`, `v = 0` on the boundary.
    pub potential: Vec<T>,
    /// Unit current flow per edge, oriented from the lower to the higher
    /// vertex index of the stored pair.
    pub flow: Vec<T>,
}

impl<T: Scalar> ResistanceSolution<T> {
    /// Dissipated energy `Σ θ_e² / c_e` of the unit flow.
    pub fn energy(&self, conductances: &[T]) -> T {
        self.flow
            .iter()
            .zip(conductances)
            .map(|(&f, &c)| f * f / c)
            .sum()
    }
}

fn check_terminals<T: Scalar>(
    g: &WeightedGraph<T>,
    conductances: &[T],
    source: usize,
    boundary: &[usize],
) -> Result<Vec<bool>> {
    let n = g.n_vertices();
    if conductances.len() != g.n_edges() {
        return Err(Error::InvalidArgument(format!(
            "expected {} conductances, got {}",
            g.n_edges(),
            conductances.len()
        )));
    }
    if conductances.iter().any(|&c| !(c > T::zero()) || !c.is_finite()) {
        return Err(Error::InvalidArgument("conductances must be positive and finite".into()));
    }
    if source >= n || boundary.iter().any(|&b| b >= n) {
        return Err(Error::InvalidArgument("terminal vertex out of range".into()));
    }
    if boundary.is_empty() {
        return Err(Error::InvalidArgument("boundary set is empty".into()));
    }
    let mut grounded = vec![false; n];
    for &b in boundary {
        grounded[b] = true;
    }
    if grounded[source] {
        return Err(Error::InvalidArgument("source lies in the boundary".into()));
    }
    // every free vertex must reach the boundary, otherwise the system is singular
    let mut reaches = grounded.clone();
    let mut stack: Vec<usize> = boundary.to_vec();
    while let Some(v) = stack.pop() {
        for &(w, _) in g.neighbors(v) {
            if !reaches[w] {
                reaches[w] = true;
                stack.push(w);
            }
        }
    }
    if !reaches[source] {
        return Err(Error::Singular("source is disconnected from the boundary".into()));
    }
    Ok(grounded)
}

/// Effective resistance between `source` and the vertex set `boundary` for
/// per-edge `conductances`, via the Dirichlet problem for the potential.
pub fn effective_resistance<T: Scalar>(
    g: &WeightedGraph<T>,
    conductances: &[T],
    source: usize,
    boundary: &[usize],
) -> Result<ResistanceSolution<T>> {
    let grounded = check_terminals(g, conductances, source, boundary)?;
    let n = g.n_vertices();
    // unknowns: vertices that are neither grounded nor the source
    let free: Vec<usize> = (0..n).filter(|&v| !grounded[v] && v != source).collect();
    let mut slot = vec![usize::MAX; n];
    for (k, &v) in free.iter().enumerate() {
        slot[v] = k;
    }
    let m = free.len();
    let mut potential = vec![T::zero(); n];
    potential[source] = T::one();
    if m > 0 {
        let mut a = Matrix::zeros(m, m);
        let mut rhs = vec![T::zero(); m];
        for (k, &v) in free.iter().enumerate() {
            for &(w, e) in g.neighbors(v) {
                let c = conductances[e];
                a[(k, k)] = a[(k, k)] + c;
                if w == source {
                    rhs[k] = rhs[k] + c;
                } else if !grounded[w] {
                    a[(k, slot[w])] = a[(k, slot[w])] - c;
                }
            }
        }
        let x = a.lu()?.solve(&rhs);
        for (k, &v) in free.iter().enumerate() {
            potential[v] = x[k];
        }
    }
    let current: T = g
        .neighbors(source)
        .iter()
        .map(|&(w, e)| conductances[e] * (T::one() - potential[w]))
        .sum();
    if !(current > T::zero()) {
        return Err(Error::Singular("no current reaches the boundary".into()));
    }
    let flow = g
        .edges()
        .iter()
        .zip(conductances)
        .map(|(&(i, j), &c)| c * (potential[i] - potential[j]) / current)
        .collect();
    Ok(ResistanceSolution {
        resistance: T::one() / current,
        potential,
        flow,
    })
}

/// Effective resistance by injecting a unit current at `source` with the
/// boundary shorted to ground; `R` is the potential reached at the source.
/// Independent of [`effective_resistance`]: Cholesky on the grounded
/// Laplacian instead of LU on the Dirichlet block.
pub fn effective_resistance_by_injection<T: Scalar>(
    g: &WeightedGraph<T>,
    conductances: &[T],
    source: usize,
    boundary: &[usize],
) -> Result<T> {
    let grounded = check_terminals(g, conductances, source, boundary)?;
    let lap = g.laplacian_with(conductances);
    let keep: Vec<usize> = (0..g.n_vertices()).filter(|&v| !grounded[v]).collect();
    let reduced = Matrix::from_fn(keep.len(), keep.len(), |a, b| lap[(keep[a], keep[b])]);
    let mut injection = vec![T::zero(); keep.len()];
    let s = keep.iter().position(|&v| v == source).expect("source is free");
    injection[s] = T::one();
    let phi = reduced.cholesky()?.solve(&injection);
    Ok(phi[s])
}
