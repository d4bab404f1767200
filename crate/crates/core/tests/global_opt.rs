mod common;

use chunkfuse::graph::{edge_jacobians, edge_residual, optimize, Edge, JacobianMode, LmConfig, PoseGraph};
use chunkfuse::sim3::{Matrix7, Sim3};
use common::{drifted_graph, gaussian_tangent};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn chain_with_one_loop_converges_exactly() {
    let case = drifted_graph(61, &[(60, 0)], 0.0, 0.5, 1);
    assert!(case.graph.total_cost().unwrap() > 1e-3);
    let (opt, report) = optimize(&case.graph, &LmConfig::default()).unwrap();
    assert!(report.final_cost < 1e-16, "final cost {:e}", report.final_cost);
    assert!(report.accepted_steps <= 10, "{} accepted steps", report.accepted_steps);
    for (a, b) in opt.nodes().iter().zip(&case.truth) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
}

#[test]
fn accepted_costs_strictly_decrease() {
    let case = drifted_graph(40, &[(39, 0), (30, 5)], 0.05, 0.5, 2);
    let (_, report) = optimize(&case.graph, &LmConfig::default()).unwrap();
    let mut prev = report.initial_cost;
    for c in report.accepted_costs() {
        assert!(c < prev);
        prev = c;
    }
}

#[test]
fn analytic_mode_reaches_same_optimum() {
    let case = drifted_graph(30, &[(29, 0)], 0.05, 0.5, 3);
    let (a, _) = optimize(&case.graph, &LmConfig::default()).unwrap();
    let cfg = LmConfig { jacobian_mode: JacobianMode::Analytic, ..LmConfig::default() };
    let (b, _) = optimize(&case.graph, &cfg).unwrap();
    for (x, y) in a.nodes().iter().zip(b.nodes()) {
        assert!(x.max_abs_diff(y) < 1e-7);
    }
}

#[test]
fn exact_chain_without_loops_is_already_optimal() {
    let case = drifted_graph(20, &[], 0.0, 0.0, 4);
    let (opt, report) = optimize(&case.graph, &LmConfig::default()).unwrap();
    assert_eq!(report.accepted_steps, 0);
    for (a, b) in opt.nodes().iter().zip(case.graph.nodes()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn disconnected_graph_is_rejected() {
    let nodes = vec![Sim3::identity(); 4];
    let edges = vec![Edge::sequential(0, Sim3::identity()), Edge::sequential(2, Sim3::identity())];
    assert!(PoseGraph::new(nodes, edges).is_err());
}

#[test]
fn residual_matches_independent_recomputation() {
    let case = drifted_graph(15, &[(14, 2)], 0.1, 0.3, 5);
    let nodes = case.graph.nodes();
    for e in case.graph.edges() {
        let r = edge_residual(nodes, e).unwrap();
        // Recompute through the 4×4 homogeneous matrices.
        let to_h = |s: &Sim3| {
            let mut m = nalgebra::Matrix4::<f64>::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(s.rotation() * s.scale()));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(s.translation());
            m
        };
        let h = to_h(&e.measurement).try_inverse().unwrap()
            * to_h(&nodes[e.from]).try_inverse().unwrap()
            * to_h(&nodes[e.to]);
        let scale = h.fixed_view::<3, 3>(0, 0).determinant().cbrt();
        let rot = h.fixed_view::<3, 3>(0, 0).into_owned() / scale;
        let s = Sim3::new(scale, rot, h.fixed_view::<3, 1>(0, 3).into_owned()).unwrap();
        let expect = s.log().unwrap().to_vector();
        assert!((r - expect).norm() < 1e-9);
    }
}

#[test]
fn gauge_invariance() {
    let case = drifted_graph(12, &[(11, 0)], 0.1, 0.3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Sim3::exp(&gaussian_tangent(&mut rng, 10.0, 1.0, 0.5));
    let moved: Vec<Sim3> = case.graph.nodes().iter().map(|s| g.compose(s)).collect();
    for e in case.graph.edges() {
        let a = edge_residual(case.graph.nodes(), e).unwrap();
        let b = edge_residual(&moved, e).unwrap();
        assert!((a - b).norm() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_jacobians_match_central_differences(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Sim3::exp(&gaussian_tangent(&mut rng, 20.0, 0.8, 0.4));
        let b = Sim3::exp(&gaussian_tangent(&mut rng, 20.0, 0.8, 0.4));
        let m = a.inverse().compose(&b).compose(&Sim3::exp(&gaussian_tangent(&mut rng, 0.5, 0.3, 0.1)));
        let e = Edge::looped(0, 1, m);
        let (na, nb) = edge_jacobians(&[a, b], &e, JacobianMode::Numeric).unwrap();
        let (aa, ab) = edge_jacobians(&[a, b], &e, JacobianMode::Analytic).unwrap();
        let rel = |x: &Matrix7, y: &Matrix7| (x - y).norm() / y.norm();
        prop_assert!(rel(&na, &aa) < 1e-5);
        prop_assert!(rel(&nb, &ab) < 1e-5);
    }
}

/// 75 chunks, 74 sequential edges and 6 loop edges with noisy measurements.
fn kitti_scale_case() -> common::GraphCase {
    drifted_graph(75, &[(74, 0), (73, 1), (72, 2), (70, 3), (71, 4), (69, 1)], 0.05, 0.5, 2)
}

#[test]
fn noisy_kitti_scale_graph_converges_in_few_steps() {
    let case = kitti_scale_case();
    assert_eq!(case.graph.edges().len(), 80);
    let (_, report) = optimize(&case.graph, &LmConfig::default()).unwrap();
    assert!(report.accepted_steps <= 5, "{} accepted steps", report.accepted_steps);
    assert!(report.final_cost < 1e-3 * report.initial_cost);
}

#[test]
fn iteration_time_within_budget() {
    let case = kitti_scale_case();
    for mode in [JacobianMode::Numeric, JacobianMode::Analytic] {
        let cfg = LmConfig { jacobian_mode: mode, ..LmConfig::default() };
        let (_, report) = optimize(&case.graph, &cfg).unwrap();
        let ms = report.mean_iteration_ms();
        assert!(ms <= 50.0, "{mode:?}: {ms} ms per iteration");
    }
}
