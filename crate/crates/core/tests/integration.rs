//! Cross-module checks: graph descriptions through simulation, densities,
//! the Poisson solver and the phase constants.

use approx::assert_relative_eq;
use proptest::prelude::*;
use reinforce_lab::graph::{GraphSpec, LatticeBox, PinnedGraph, WeightedGraph};
use reinforce_lab::measure::{limit_log_density, sigma_log_density, embed_pinned};
use reinforce_lab::network::{effective_resistance, effective_resistance_by_injection};
use reinforce_lab::phase::{beta_bound_base, beta_c, Conductance, PhasePoint};
use reinforce_lab::potential::{generator, solve_q};
use reinforce_lab::process::{run_until, Budget, ProcessKind, RunConfig, TimeChange};
use reinforce_lab::stats::chi_square_gof;
use reinforce_lab::verify::{enumerate_path_law, errw_path_prob, sample_path_counts, PathSampler};

fn triangle() -> WeightedGraph<f64> {
    WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
}

#[test]
fn graph_file_builds_the_same_graph() {
    let spec = GraphSpec::from_json(r#"{"vertices": 3, "edges": [[0, 1, 1.0], [1, 2, 1.0], [0, 2, 1.0]]}"#).unwrap();
    let g = spec.build::<f64>().unwrap();
    assert_eq!(g.edges(), triangle().edges());
    let back = GraphSpec::from_json(&spec.to_json()).unwrap();
    assert_eq!(back, spec);
    assert!(GraphSpec::from_json(r#"{"vertices": 2, "edges": [], "colour": 1}"#).is_err());
}

#[test]
fn series_and_parallel_resistances() {
    // path 0–1–2 with conductances 2 and 3: R = 1/2 + 1/3
    let g = WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
    let r = effective_resistance(&g, &[2.0, 3.0], 0, &[2]).unwrap();
    assert_relative_eq!(r.resistance, 5.0 / 6.0, max_relative = 1e-12);
    assert_relative_eq!(r.energy(&[2.0, 3.0]), 5.0 / 6.0, max_relative = 1e-12);
    // triangle 0→2: direct edge in parallel with the two-edge path
    let r = effective_resistance_by_injection(&triangle(), &[1.0, 1.0, 1.0], 0, &[2]).unwrap();
    assert_relative_eq!(r, 2.0 / 3.0, max_relative = 1e-12);
}

#[test]
fn lattice_box_resistance_matches_both_solvers() {
    let lat = LatticeBox::<f64>::new(2, 2, 1.0).unwrap();
    let c = vec![1.0; lat.graph.n_edges()];
    let a = effective_resistance(&lat.graph, &c, lat.origin(), lat.boundary()).unwrap();
    let b = effective_resistance_by_injection(&lat.graph, &c, lat.origin(), lat.boundary()).unwrap();
    assert_relative_eq!(a.resistance, b, max_relative = 1e-12);
    assert!(a.resistance > 0.25 && a.resistance < 1.0);
}

#[test]
fn poisson_solution_inverts_the_generator() {
    let g = triangle().with_weights(vec![0.5, 1.5, 2.0]).unwrap();
    let t = [0.3, -0.2, 1.1];
    let q = solve_q(&g, &t).unwrap();
    let l = generator(&g, &t);
    let n = 3;
    for i in 0..n {
        for j in 0..n {
            let lq: f64 = (0..n).map(|k| l[(i, k)] * q[(k, j)]).sum();
            let target = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
            assert!((lq - target).abs() < 1e-12, "({i},{j}): {lq}");
        }
    }
}

#[test]
fn two_vertex_poisson_diagonal_is_a_quarter() {
    let g = WeightedGraph::new(2, [(0, 1, 1.0)]).unwrap();
    let q = solve_q(&g, &[0.0, 0.0]).unwrap();
    assert_relative_eq!(-q[(0, 0)], 0.25, max_relative = 1e-14);
}

#[test]
fn pinned_density_equals_limit_density_of_the_extended_graph() {
    let g = triangle();
    let p = PinnedGraph::new(g, vec![0.7, 0.0, 0.2]).unwrap();
    let t = [0.4, -0.9, 0.1];
    let direct = sigma_log_density(&p, &t).unwrap();
    let u = embed_pinned(&p, &t);
    let via = limit_log_density(&p.extended(), p.delta(), &u).unwrap();
    assert_relative_eq!(direct, via, max_relative = 1e-12);
}

#[test]
fn beta_c_is_where_the_bound_base_crosses_one() {
    for d in 2..=3 {
        let b = beta_c::<f64>(d).unwrap();
        let p = PhasePoint::new(d, Conductance::Beta(b)).unwrap();
        assert_relative_eq!(p.bound_base, 1.0, max_relative = 1e-9);
        assert!(beta_bound_base(d, 0.5 * b).unwrap() < 1.0);
        assert!(beta_bound_base(d, 2.0 * b).unwrap() > 1.0);
    }
}

#[test]
fn discrete_errw_matches_the_path_oracle() {
    let g = triangle();
    let a = [1.0; 3];
    let law = enumerate_path_law(&g, &a, 0, 3).unwrap();
    assert_relative_eq!(law.total(), 1.0, max_relative = 1e-12);
    let counts = sample_path_counts(&g, &a, &law, PathSampler::Errw, 50_000, 17, 0).unwrap();
    let chi = chi_square_gof(&counts, &law.probs).unwrap();
    assert!(chi.p_value > 1e-3, "{chi:?}");
}

#[test]
fn path_probability_first_step_is_proportional_to_weights() {
    let g = triangle();
    let a = [1.0, 1.0, 3.0];
    // from 0: edges (0,1) weight 1 and (0,2) weight 3
    assert_relative_eq!(errw_path_prob(&g, &a, &[0, 2]).unwrap(), 0.75, max_relative = 1e-14);
    assert_relative_eq!(errw_path_prob(&g, &a, &[0, 1]).unwrap(), 0.25, max_relative = 1e-14);
}

#[test]
fn vrjp_checkpoint_centring_is_zero_sum() {
    let mut cfg = RunConfig::new(ProcessKind::Vrjp, Budget::horizon(5.0));
    cfg.checkpoints = vec![1.0, 2.5, 5.0];
    let tr = run_until(&triangle(), &cfg, 4).unwrap();
    assert_eq!(tr.checkpoints.len(), 3);
    for c in &tr.checkpoints {
        let s: f64 = c.centred.as_ref().unwrap().iter().sum();
        assert!(s.abs() < 1e-12);
    }
    // X time of the VRJP is A = Σ log(1 + l_i)
    let a = TimeChange::A.apply(&tr.final_state.local_time);
    assert!(a > 0.0 && a < 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn local_times_add_up_to_the_clock(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [ProcessKind::Vrjp, ProcessKind::X, ProcessKind::ErrwCt][kind];
        let cfg = RunConfig::new(kind, Budget::horizon(3.0));
        let tr = run_until(&triangle(), &cfg, seed).unwrap();
        let s: f64 = tr.final_state.local_time.iter().sum();
        prop_assert!((s - tr.final_state.clock).abs() <= 1e-9 * (1.0 + s));
        let again = run_until(&triangle(), &cfg, seed).unwrap();
        prop_assert_eq!(tr, again);
    }

    #[test]
    fn jumps_follow_edges(seed in any::<u64>()) {
        let lat = LatticeBox::<f64>::new(2, 1, 1.0).unwrap();
        let mut cfg = RunConfig::new(ProcessKind::Errw, Budget::steps(50));
        cfg.start = lat.origin();
        let tr = run_until(&lat.graph, &cfg, seed).unwrap();
        prop_assert_eq!(tr.jumps.len(), 50);
        let mut at = lat.origin();
        for j in &tr.jumps {
            prop_assert_eq!(j.from, at);
            prop_assert!(lat.graph.edge_index(j.from, j.to).is_some());
            at = j.to;
        }
    }
}
