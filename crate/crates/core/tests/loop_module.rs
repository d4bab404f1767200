mod common;

use chunkfuse::align::IrlsConfig;
use chunkfuse::chunk::CorrespondenceOptions;
use chunkfuse::loops::*;
use chunkfuse::sim::{oracle_loop_constraint, SimScenario, Simulator, TrajectoryKind};
use chunkfuse::sim3::{Sim3, Vec3};
use common::{gaussian_tangent, rotation_error_deg};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn cfg(tau: f64, min_sep: usize, window: usize) -> LoopConfig {
    LoopConfig {
        similarity_threshold: tau,
        min_separation: min_sep,
        nms_window: window,
        max_candidates: usize::MAX,
    }
}

fn pairs(found: &[LoopPair]) -> Vec<(usize, usize)> {
    found.iter().map(|p| (p.frame_i, p.frame_j)).collect()
}

#[test]
fn orthogonal_descriptors_never_match() {
    let rows: Vec<Vec<f64>> = (0..64).map(|i| (0..64).map(|d| (d == i) as u8 as f64).collect()).collect();
    let d = DescriptorSet::from_rows(&rows).unwrap();
    assert!(detect_loops(&d, &cfg(0.01, 1, 1)).unwrap().is_empty());
}

#[test]
fn planted_pair_is_the_only_detection() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rows = random_rows(&mut rng, 600, 64);
    rows[500] = rows[10].iter().map(|x| x + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let d = DescriptorSet::from_rows(&rows).unwrap();
    assert!(d.cosine(10, 500) > 0.99);
    let found = detect_loops(&d, &cfg(0.9, 100, 25)).unwrap();
    assert_eq!(pairs(&found), vec![(10, 500)]);
    assert!((found[0].similarity - d.cosine(10, 500)).abs() < 1e-12);
}

#[test]
fn separation_is_strict() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = random_rows(&mut rng, 300, 64);
    rows[110] = rows[10].clone();
    rows[211] = rows[100].clone();
    let d = DescriptorSet::from_rows(&rows).unwrap();
    assert_eq!(pairs(&detect_loops(&d, &cfg(0.9, 100, 25)).unwrap()), vec![(100, 211)]);
    assert_eq!(pairs(&detect_loops(&d, &cfg(0.9, 99, 25)).unwrap()), vec![(10, 110), (100, 211)]);
}

#[test]
fn clustered_matches_collapse_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rows = random_rows(&mut rng, 600, 64);
    let v: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
    for k in (10..15).chain(500..505) {
        rows[k] = v.iter().map(|x| x + 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
    }
    let d = DescriptorSet::from_rows(&rows).unwrap();
    let raw = detect_loops(&d, &cfg(0.9, 100, 1)).unwrap();
    assert_eq!(raw.len(), 25);
    let found = detect_loops(&d, &cfg(0.9, 100, 10)).unwrap();
    assert_eq!(found.len(), 1);
    // The survivor is the best-scoring candidate.
    assert_eq!(found[0].similarity, raw[0].similarity);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kept_pairs_respect_window_and_limits(seed in any::<u64>(), window in 1usize..20, limit in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DescriptorSet::from_rows(&random_rows(&mut rng, 150, 3)).unwrap();
        let c = LoopConfig { max_candidates: limit, ..cfg(0.9, 10, window) };
        let found = detect_loops(&d, &c).unwrap();
        prop_assert!(found.len() <= limit);
        for (n, a) in found.iter().enumerate() {
            prop_assert!(a.frame_j > a.frame_i + 10);
            prop_assert!(a.similarity >= 0.9);
            for b in &found[n + 1..] {
                prop_assert!(a.similarity >= b.similarity);
                prop_assert!(a.frame_i.abs_diff(b.frame_i) >= window || a.frame_j.abs_diff(b.frame_j) >= window);
            }
        }
    }
}

#[test]
fn raising_threshold_only_removes_pairs() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DescriptorSet::from_rows(&random_rows(&mut rng, 120, 4)).unwrap();
        let mut previous: Option<Vec<(usize, usize)>> = None;
        for tau in [0.5, 0.7, 0.8, 0.9, 0.95, 0.99] {
            let mut now = pairs(&detect_loops(&d, &cfg(tau, 5, 1)).unwrap());
            now.sort_unstable();
            if let Some(prev) = &previous {
                assert!(now.iter().all(|p| prev.binary_search(p).is_ok()), "seed {seed}, tau {tau}");
            }
            previous = Some(now);
        }
    }
}

#[test]
fn detection_ignores_descriptor_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = random_rows(&mut rng, 200, 4);
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let s = rng.random_range(0.1..10.0);
            r.iter().map(|x| x * s).collect()
        })
        .collect();
    let a = DescriptorSet::from_rows(&rows).unwrap();
    let b = DescriptorSet::from_rows(&scaled).unwrap();
    let c = LoopConfig { max_candidates: 16, ..cfg(0.95, 20, 5) };
    assert_eq!(pairs(&detect_loops(&a, &c).unwrap()), pairs(&detect_loops(&b, &c).unwrap()));
}

#[test]
fn vgld_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = DescriptorSet::from_rows(&random_rows(&mut rng, 17, 9)).unwrap();
    let mut bytes = Vec::new();
    d.write_vgld(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"VGLD");
    assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 17 * 9 * 4);
    let back = DescriptorSet::read_vgld(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn loop_composition_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let a = Sim3::exp(&gaussian_tangent(&mut rng, 1.0, 1.0, 0.3));
        let b = Sim3::exp(&gaussian_tangent(&mut rng, 1.0, 1.0, 0.3));
        assert!(compose_loop_constraint(&a, &a).max_abs_diff(&Sim3::identity()) < 1e-12);
        assert!(compose_loop_constraint(&Sim3::identity(), &b).max_abs_diff(&b) < 1e-12);
        let inv = compose_loop_constraint(&b, &a).compose(&compose_loop_constraint(&a, &b));
        assert!(inv.max_abs_diff(&Sim3::identity()) < 1e-12);
    }
}

#[test]
fn oracle_loop_is_chained_oracle_alignments() {
    let sim = Simulator::new(SimScenario { frames: 600, ..Default::default() }).unwrap();
    let gt = sim.ground_truth();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let loop_to_world = Sim3::exp(&gaussian_tangent(&mut rng, 5.0, 0.5, 0.2));
    for (i, j) in [(0, 8), (1, 7), (3, 9)] {
        let s_i = gt.chunk_to_world[i].inverse().compose(&loop_to_world);
        let s_j = gt.chunk_to_world[j].inverse().compose(&loop_to_world);
        let got = compose_loop_constraint(&s_i, &s_j);
        assert!(got.max_abs_diff(&oracle_loop_constraint(&gt, i, j)) < 1e-12);
    }
}

#[test]
fn loop_window_clamps_and_merges() {
    let p = LoopPair { frame_i: 2, frame_j: 6, similarity: 1.0 };
    assert_eq!(loop_chunk_frames(&p, 3, 8), (0..8).collect::<Vec<_>>());
    let p = LoopPair { frame_i: 10, frame_j: 50, similarity: 1.0 };
    assert_eq!(loop_chunk_frames(&p, 1, 100), vec![9, 10, 11, 49, 50, 51]);
}

fn loop_scenario() -> SimScenario {
    SimScenario {
        seed: 3,
        kind: TrajectoryKind::CircuitWithLoop,
        frames: 600,
        warp_rotation_deg: 0.0,
        warp_scale_pct: 0.0,
        warp_translation: 0.0,
        ..Default::default()
    }
}

#[test]
fn simulated_revisit_is_detected() {
    let sim = Simulator::new(loop_scenario()).unwrap();
    let found = detect_loops(&sim.descriptors(), &LoopConfig::default()).unwrap();
    assert!(!found.is_empty());
    // The circuit closes after 80% of the frames.
    let period = 480;
    for p in &found {
        let gap = p.frame_j - p.frame_i;
        assert!(gap.abs_diff(period) <= 25, "{p:?}");
    }
}

#[test]
fn simulated_loop_constraint_matches_oracle() {
    let sim = Simulator::new(loop_scenario()).unwrap();
    let gt = sim.ground_truth();
    let hw = sim.scenario().half_width();
    let pair = LoopPair { frame_i: 30, frame_j: 510, similarity: f64::NAN };
    let ci = owning_chunk(sim.ranges(), pair.frame_i, hw).unwrap();
    let cj = owning_chunk(sim.ranges(), pair.frame_j, hw).unwrap();
    assert_eq!((ci, cj), (0, 8));
    let frames = loop_chunk_frames(&pair, hw, sim.scenario().frames);
    let lc = sim.loop_chunk(99, &frames).unwrap();
    let c = build_loop_constraint(
        pair,
        &lc,
        &sim.chunk(ci),
        &sim.chunk(cj),
        &IrlsConfig::default(),
        &CorrespondenceOptions::default(),
    )
    .unwrap();
    let oracle = oracle_loop_constraint(&gt, ci, cj);
    let rot = rotation_error_deg(&c.s_ji, &oracle);
    let scale = (c.s_ji.scale() / oracle.scale() - 1.0).abs();
    assert!(rot < 0.1, "rotation error {rot}°");
    assert!(scale < 1e-3, "scale error {scale}");
    // Compare where both send the points chunk i actually sees.
    let probe = Vec3::new(0.0, 0.0, 10.0);
    let d = (c.s_ji.transform_point(&probe) - oracle.transform_point(&probe)).norm();
    assert!(d < 0.05, "point displacement {d}");
}

#[test]
fn owning_chunk_prefers_larger_share() {
    let ranges = chunkfuse::chunk::plan_chunks(&chunkfuse::chunk::ChunkSpec::new(75, 15, 300).unwrap());
    assert_eq!(owning_chunk(&ranges, 5, 10), Some(0));
    assert_eq!(owning_chunk(&ranges, 62, 10), Some(0));
    assert_eq!(owning_chunk(&ranges, 67, 10), Some(0));
    assert_eq!(owning_chunk(&ranges, 68, 10), Some(1));
    assert_eq!(owning_chunk(&ranges, 74, 0), Some(0));
    assert_eq!(owning_chunk(&ranges, 299, 10), Some(4));
    assert_eq!(owning_chunk(&ranges, 300, 10), None);
}
