//! Simulation, exact oracles and statistical verification for reinforced
//! random walks and their random-environment representations.
//!
//! The analytic core (graphs, densities, quadrature, Poisson solver,
//! constants) is generic over [`Scalar`]; Monte Carlo code runs in `f64`.

pub mod error;
pub mod graph;
pub mod linalg;
pub mod mcmc;
pub mod measure;
pub mod network;
pub mod phase;
pub mod potential;
pub mod process;
pub mod quadrature;
pub mod scalar;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision graph.
pub type Graph = graph::WeightedGraph<f64>;
/// Single-precision graph.
pub type GraphF32 = graph::WeightedGraph<f32>;
pub type Lattice = graph::LatticeBox<f64>;
pub type Pinned = graph::PinnedGraph<f64>;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
