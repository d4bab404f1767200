#![allow(dead_code)]

use chunkfuse::graph::{Edge, PoseGraph};
use chunkfuse::sim3::{Sim3, Sim3Tangent, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn gaussian_tangent(rng: &mut impl Rng, t: f64, w: f64, l: f64) -> Sim3Tangent {
    let n = Normal::new(0.0, 1.0).unwrap();
    Sim3Tangent::new(
        Vec3::new(n.sample(rng) * t, n.sample(rng) * t, n.sample(rng) * t),
        Vec3::new(n.sample(rng) * w, n.sample(rng) * w, n.sample(rng) * w),
        n.sample(rng) * l,
    )
}

/// True chunk-to-world states along a closed circuit of `k` chunks,
/// 60 units of travel per chunk, first node at the identity.
pub fn circuit_truth(k: usize) -> Vec<Sim3> {
    let circumference = 60.0 * k as f64;
    let radius = circumference / (2.0 * std::f64::consts::PI);
    (0..k)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let pos = Vec3::new(radius * a.sin(), radius * (1.0 - a.cos()), 0.0);
            Sim3::from_axis_angle(&Vec3::new(0.0, 0.0, a), pos)
        })
        .collect()
}

pub struct GraphCase {
    pub truth: Vec<Sim3>,
    pub graph: PoseGraph,
}

/// Chain of sequential edges plus loop edges `(from, to)`; measurements
/// carry Gaussian tangent noise of the given scale (0 = exact), the
/// initial states are the sequential measurements chained together with an
/// extra per-edge drift.
pub fn drifted_graph(k: usize, loops: &[(usize, usize)], noise: f64, drift: f64, seed: u64) -> GraphCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = circuit_truth(k);
    let noisy = |rng: &mut ChaCha8Rng, m: Sim3| {
        if noise == 0.0 {
            m
        } else {
            m.compose(&Sim3::exp(&gaussian_tangent(rng, noise, noise * 0.01, noise * 0.005)))
        }
    };
    let mut edges = Vec::new();
    for i in 0..k - 1 {
        let m = truth[i].inverse().compose(&truth[i + 1]);
        edges.push(Edge::sequential(i, noisy(&mut rng, m)));
    }
    for &(a, b) in loops {
        let m = truth[a].inverse().compose(&truth[b]);
        edges.push(Edge::looped(a, b, noisy(&mut rng, m)));
    }
    let mut nodes = vec![truth[0]];
    for e in edges.iter().take(k - 1) {
        let d = Sim3::exp(&gaussian_tangent(&mut rng, drift, drift * 0.01, drift * 0.005));
        let next = nodes.last().unwrap().compose(&e.measurement).compose(&d);
        nodes.push(next);
    }
    GraphCase {
        truth,
        graph: PoseGraph::new(nodes, edges).unwrap(),
    }
}

/// Short, quiet scenario: 300 frames (5 chunks) with no warp.
pub fn short_scenario(seed: u64) -> chunkfuse::sim::SimScenario {
    chunkfuse::sim::SimScenario {
        seed,
        kind: chunkfuse::sim::TrajectoryKind::Straight,
        frames: 300,
        warp_rotation_deg: 0.0,
        warp_scale_pct: 0.0,
        warp_translation: 0.0,
        ..Default::default()
    }
}

pub fn rotation_error_deg(a: &Sim3, b: &Sim3) -> f64 {
    let r = a.rotation().transpose() * b.rotation();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}
