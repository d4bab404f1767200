use std::path::Path;

use chunkfuse::chunk::ChunkStore;
use chunkfuse::loops::DescriptorSet;
use chunkfuse::metrics::{ate_rmse, AlignMode};
use chunkfuse::pipeline::*;
use chunkfuse::ply::{header, read_ply, PlyWriter};
use chunkfuse::sim::{SimScenario, Simulator};
use chunkfuse::trajectory::Trajectory;

struct Run {
    result: ExportResult,
    output: PipelineOutput,
}

fn simulate(dir: &Path, frames: usize) -> Simulator {
    let sim = Simulator::new(SimScenario {
        frames,
        ..Default::default()
    })
    .unwrap();
    sim.write_dataset(dir, 0).unwrap();
    sim
}

fn run(dataset: &Path, sim: &Simulator, cfg: &PipelineConfig, out: &Path) -> Run {
    let store = ChunkStore::open(&dataset.join("chunks")).unwrap();
    let desc = DescriptorSet::load(&dataset.join("descriptors.vgld")).unwrap();
    let output = run_pipeline(&store, Some(&desc), Some(sim), cfg).unwrap();
    let result = write_outputs(&store, &output, cfg, out).unwrap();
    Run { result, output }
}

#[test]
fn loop_closure_reduces_trajectory_error() {
    let data = tempfile::tempdir().unwrap();
    let sim = simulate(data.path(), 900);
    let gt = Trajectory::read(&data.path().join("ground_truth.tum")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let on = run(data.path(), &sim, &PipelineConfig::default(), &out.path().join("on"));
    assert!(on.output.accepted_loops() > 0);
    assert!(on.output.optimization.is_some());
    let corrected = ate_rmse(&on.result.trajectory, &gt, AlignMode::Sim3).unwrap();
    let uncorrected = ate_rmse(&on.result.uncorrected, &gt, AlignMode::Sim3).unwrap();
    assert!(corrected < uncorrected, "{corrected} vs {uncorrected}");

    let off = run(data.path(), &sim, &PipelineConfig::default().without_loop_closure(), &out.path().join("off"));
    let without = ate_rmse(&off.result.trajectory, &gt, AlignMode::Sim3).unwrap();
    assert!(without > corrected);
    assert!(off.output.loops.is_empty() && off.output.optimization.is_none());
    // Without loops the exported path is the chained one.
    assert_eq!(off.result.trajectory, off.result.uncorrected);

    let on_files = OutputPaths::new(&out.path().join("on"));
    let written = Trajectory::read(&on_files.trajectory).unwrap();
    assert!((ate_rmse(&written, &gt, AlignMode::Sim3).unwrap() - corrected).abs() < 1e-4);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&on_files.report).unwrap()).unwrap();
    assert_eq!(report["frames"], 900);
    assert_eq!(report["accepted_loops"].as_u64().unwrap() as usize, on.output.accepted_loops());
    assert!(std::fs::read_to_string(&on_files.summary).unwrap().contains("total:"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let data = tempfile::tempdir().unwrap();
    let sim = simulate(data.path(), 700);
    let out = tempfile::tempdir().unwrap();
    let a = run(data.path(), &sim, &PipelineConfig::default(), &out.path().join("a"));
    let b = run(data.path(), &sim, &PipelineConfig::default(), &out.path().join("b"));
    let (pa, pb) = (&a.result.paths, &b.result.paths);
    for (x, y) in [
        (&pa.trajectory, &pb.trajectory),
        (&pa.trajectory_uncorrected, &pb.trajectory_uncorrected),
        (&pa.cloud, &pb.cloud),
        (&pa.graph, &pb.graph),
    ] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn stage_timings_add_up() {
    let data = tempfile::tempdir().unwrap();
    let sim = simulate(data.path(), 300);
    let out = tempfile::tempdir().unwrap();
    let r = run(data.path(), &sim, &PipelineConfig::default(), out.path());
    let stages: Vec<Stage> = r.result.stage_ms.iter().map(|(s, _)| *s).collect();
    assert_eq!(stages.first(), Some(&Stage::SequentialAlignment));
    assert_eq!(stages.last(), Some(&Stage::Export));
    let sum: f64 = r.result.stage_ms.iter().map(|(_, ms)| ms).sum();
    assert!(sum <= r.result.total_ms + 1e-6);
    assert!(r.result.total_ms - sum < 0.05 * r.result.total_ms + 5.0, "{sum} of {}", r.result.total_ms);
}

#[test]
fn empty_store_fails_at_input() {
    let dir = tempfile::tempdir().unwrap();
    let err = ChunkStore::open(dir.path()).unwrap_err();
    assert!(err.to_string().contains("no chunks found"));
}

#[test]
fn missing_loop_source_fails_at_constraint_stage() {
    let data = tempfile::tempdir().unwrap();
    let sim = simulate(data.path(), 700);
    let store = ChunkStore::open(&data.path().join("chunks")).unwrap();
    let err = run_pipeline(&store, Some(&sim.descriptors()), None, &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.stage, Stage::LoopConstraints);
    let err = run_pipeline(&store, None, None, &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.stage, Stage::LoopDetection);
}

#[test]
fn exit_codes_are_distinct_and_nonzero() {
    let stages = [
        Stage::Input,
        Stage::SequentialAlignment,
        Stage::LoopDetection,
        Stage::LoopConstraints,
        Stage::Optimization,
        Stage::Export,
    ];
    let mut codes: Vec<i32> = stages.iter().map(|s| s.exit_code()).collect();
    assert!(codes.iter().all(|c| *c > 2 && *c < 126));
    codes.sort_unstable();
    codes.dedup();
    assert_eq!(codes.len(), stages.len());
}

#[test]
fn config_text_sets_fields() {
    let mut cfg = PipelineConfig::default();
    cfg.apply_text(
        "# ablation\nloop_closure = false\nirls = false\nconfidence_weighting = false\n\
         similarity_threshold = 0.9\nmin_separation = 50\nkeep_factor = 0.5\nexport_stride = 2\n",
    )
    .unwrap();
    assert!(!cfg.loop_closure && !cfg.irls_enabled && !cfg.correspondence.use_confidence);
    assert_eq!(cfg.loops.similarity_threshold, 0.9);
    assert_eq!(cfg.loops.min_separation, 50);
    assert_eq!(cfg.export.keep_factor, 0.5);
    assert_eq!(cfg.export.stride, 2);
    assert_eq!(cfg.alignment_irls().max_iterations, 1);
    assert!(cfg.clone().apply_text("unknown_key = 1").is_err());
    assert!(cfg.clone().apply_text("min_separation = -3").is_err());
    assert!(cfg.clone().apply_text("no equals sign").is_err());
    let mut bad = PipelineConfig::default();
    assert!(bad.set("similarity_threshold", "1.5").is_err() || bad.validate().is_err());
}

#[test]
fn ply_golden_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.ply");
    let pts: Vec<([f32; 3], [u8; 3])> = (0..10)
        .map(|i| ([i as f32, -0.5 * i as f32, 1.0e3 + i as f32], [i as u8, 2 * i as u8, 255 - i as u8]))
        .collect();
    let mut w = PlyWriter::create(&path).unwrap();
    for (p, c) in &pts {
        w.push(*p, *c).unwrap();
    }
    assert_eq!(w.finish().unwrap(), 10);

    let mut expected = b"ply\nformat binary_little_endian 1.0\nelement vertex 10                  \n\
property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
        .to_vec();
    for (p, c) in &pts {
        for v in p {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(c);
    }
    assert_eq!(std::fs::read(&path).unwrap(), expected);
    let back = read_ply(&path).unwrap();
    assert_eq!(back.points, pts.iter().map(|(p, _)| *p).collect::<Vec<_>>());
    assert_eq!(back.colors, pts.iter().map(|(_, c)| *c).collect::<Vec<_>>());
}

#[test]
fn empty_ply_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ply");
    assert_eq!(PlyWriter::create(&path).unwrap().finish().unwrap(), 0);
    assert_eq!(std::fs::read(&path).unwrap(), header(0).into_bytes());
    assert!(read_ply(&path).unwrap().points.is_empty());
}
