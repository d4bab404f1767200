//! End-to-end backend run: sequential alignment, loop closure, pose-graph
//! optimization and fused export.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::align::{median, ConfidenceCombine, HuberDelta, IrlsConfig};
use crate::chunk::{
    accumulate_world, align_sequence, export_fused, ChunkPointMap, ChunkStore, CorrespondenceOptions, ExportOptions,
    SequentialEdge,
};
use crate::error::{Error, Result};
use crate::graph::{optimize, write_g2o, Edge, JacobianMode, LmConfig, LmReport, PoseGraph};
use crate::loops::{
    build_loop_constraint, detect_loops, loop_chunk_frames, owning_chunk, DescriptorSet, LoopConfig, LoopConstraint,
    LoopPair,
};
use crate::ply::PlyWriter;
use crate::sim::Simulator;
use crate::sim3::{Sim3, Vec3};
use crate::trajectory::Trajectory;

/// Produces the point map of a loop-centric window on demand: the frontend
/// run again over the frames around both ends of a loop.
pub trait LoopChunkSource {
    fn render(&self, index: usize, frames: &[usize]) -> Result<ChunkPointMap>;
}

impl LoopChunkSource for Simulator {
    fn render(&self, index: usize, frames: &[usize]) -> Result<ChunkPointMap> {
        self.loop_chunk(index, frames)
    }
}

/// Pipeline stage; each maps to a distinct process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    SequentialAlignment,
    LoopDetection,
    LoopConstraints,
    Optimization,
    Export,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Input => 3,
            Stage::SequentialAlignment => 4,
            Stage::LoopDetection => 5,
            Stage::LoopConstraints => 6,
            Stage::Optimization => 7,
            Stage::Export => 8,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::SequentialAlignment => "sequential alignment",
            Stage::LoopDetection => "loop detection",
            Stage::LoopConstraints => "loop constraints",
            Stage::Optimization => "optimization",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub irls: IrlsConfig,
    /// When false each pair gets a single confidence-weighted solve.
    pub irls_enabled: bool,
    pub correspondence: CorrespondenceOptions,
    pub loop_closure: bool,
    pub loops: LoopConfig,
    /// Frames on each side of a loop endpoint in the loop-centric chunk;
    /// a quarter of the chunk length when `None`.
    pub loop_half_width: Option<usize>,
    /// Replaces descriptor-based detection when set.
    pub loop_pairs: Option<Vec<LoopPair>>,
    /// A loop is rejected when its relative residual exceeds this multiple of
    /// the median over sequential alignments.
    pub residual_gate: f64,
    pub lm: LmConfig,
    pub export: ExportOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            irls: IrlsConfig::default(),
            irls_enabled: true,
            correspondence: CorrespondenceOptions::default(),
            loop_closure: true,
            loops: LoopConfig::default(),
            loop_half_width: None,
            loop_pairs: None,
            residual_gate: 3.0,
            lm: LmConfig::default(),
            export: ExportOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Turns robust reweighting off: one confidence-weighted solve per pair.
    pub fn without_irls(mut self) -> Self {
        self.irls_enabled = false;
        self
    }

    /// IRLS settings actually used for alignment.
    pub fn alignment_irls(&self) -> IrlsConfig {
        if self.irls_enabled {
            self.irls.clone()
        } else {
            IrlsConfig {
                max_iterations: 1,
                ..self.irls.clone()
            }
        }
    }

    /// Treats every confidence as 1 in alignment.
    pub fn without_confidence(mut self) -> Self {
        self.correspondence.use_confidence = false;
        self
    }

    pub fn without_loop_closure(mut self) -> Self {
        self.loop_closure = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.irls.validate()?;
        self.loops.validate()?;
        self.lm.validate()?;
        if !(self.residual_gate > 0.0) {
            return Err(Error::InvalidConfig("residual gate must be positive".into()));
        }
        if self.correspondence.stride == 0 || self.export.stride == 0 {
            return Err(Error::InvalidConfig("strides must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::format("config", format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Sets one option by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("{key} = {value:?}: {e}")))
        }
        match key {
            "loop_closure" => self.loop_closure = num(key, value)?,
            "irls" => self.irls_enabled = num(key, value)?,
            "confidence_weighting" => self.correspondence.use_confidence = num(key, value)?,
            "irls_max_iterations" => self.irls.max_iterations = num(key, value)?,
            "huber_mad_factor" => self.irls.huber_delta = HuberDelta::MadScaled(num(key, value)?),
            "huber_delta" => self.irls.huber_delta = HuberDelta::Fixed(num(key, value)?),
            "irls_tolerance" => self.irls.convergence_tol = num(key, value)?,
            "correspondence_stride" => self.correspondence.stride = num(key, value)?,
            "confidence_gate" => self.correspondence.gate_factor = num(key, value)?,
            "confidence_combine" => {
                self.correspondence.combine = match value {
                    "geometric_mean" => ConfidenceCombine::GeometricMean,
                    "min" => ConfidenceCombine::Min,
                    _ => return Err(Error::InvalidConfig(format!("{key} = {value:?}: expected geometric_mean or min"))),
                }
            }
            "similarity_threshold" => self.loops.similarity_threshold = num(key, value)?,
            "min_separation" => self.loops.min_separation = num(key, value)?,
            "nms_window" => self.loops.nms_window = num(key, value)?,
            "max_candidates" => self.loops.max_candidates = num(key, value)?,
            "loop_half_width" => {
                let w: usize = num(key, value)?;
                self.loop_half_width = (w > 0).then_some(w);
            }
            "residual_gate" => self.residual_gate = num(key, value)?,
            "lm_max_iterations" => self.lm.max_iterations = num(key, value)?,
            "lm_initial_damping" => self.lm.initial_damping = num(key, value)?,
            "lm_jacobian" => {
                self.lm.jacobian_mode = match value {
                    "numeric" => JacobianMode::Numeric,
                    "analytic" => JacobianMode::Analytic,
                    _ => return Err(Error::InvalidConfig(format!("{key} = {value:?}: expected numeric or analytic"))),
                }
            }
            "keep_factor" => self.export.keep_factor = num(key, value)?,
            "export_stride" => self.export.stride = num(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LoopOutcome {
    Accepted {
        constraint: LoopConstraint,
    },
    /// Both ends fall in the same chunk or next-door chunks.
    SameOrAdjacent {
        pair: LoopPair,
        chunk_i: usize,
        chunk_j: usize,
    },
    ResidualGate {
        constraint: LoopConstraint,
        threshold: f64,
    },
    AlignmentFailed {
        pair: LoopPair,
        reason: String,
    },
}

impl LoopOutcome {
    pub fn accepted(&self) -> Option<&LoopConstraint> {
        match self {
            LoopOutcome::Accepted { constraint } => Some(constraint),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub sequential: Vec<SequentialEdge>,
    /// Chained sequential transforms before optimization.
    pub uncorrected: Vec<Sim3>,
    /// Chunk-to-world transforms after optimization.
    pub world: Vec<Sim3>,
    pub loops: Vec<LoopOutcome>,
    pub graph: PoseGraph,
    pub optimization: Option<LmReport>,
    pub stage_ms: Vec<(Stage, f64)>,
    started: Instant,
}

impl PipelineOutput {
    pub fn accepted_loops(&self) -> usize {
        self.loops.iter().filter(|l| l.accepted().is_some()).count()
    }
}

/// Runs everything up to and including optimization.
pub fn run_pipeline(
    store: &ChunkStore,
    descriptors: Option<&DescriptorSet>,
    loop_source: Option<&dyn LoopChunkSource>,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutput, StageError> {
    cfg.validate().at(Stage::Input)?;
    if store.is_empty() {
        return Err(Error::Empty("chunk store has no chunks".into())).at(Stage::Input);
    }
    let started = Instant::now();
    let mut stage_ms = Vec::new();
    let mut clock = started;
    let mut lap = |stage: Stage, stage_ms: &mut Vec<(Stage, f64)>| {
        stage_ms.push((stage, clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };

    let irls = cfg.alignment_irls();
    let sequential = align_sequence(store, &irls, &cfg.correspondence).at(Stage::SequentialAlignment)?;
    let pairs: Vec<(usize, Sim3)> = sequential.iter().map(|e| (e.from, e.transform)).collect();
    let uncorrected = accumulate_world(store.len(), &pairs).at(Stage::SequentialAlignment)?;
    lap(Stage::SequentialAlignment, &mut stage_ms);

    let mut loops = Vec::new();
    if cfg.loop_closure {
        let candidates = match (&cfg.loop_pairs, descriptors) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => detect_loops(d, &cfg.loops).at(Stage::LoopDetection)?,
            (None, None) => {
                return Err(Error::InvalidConfig("loop closure needs descriptors or a loop pair list".into()))
                    .at(Stage::LoopDetection)
            }
        };
        lap(Stage::LoopDetection, &mut stage_ms);
        if !candidates.is_empty() {
            let source = loop_source
                .ok_or_else(|| Error::InvalidConfig("loop closure needs a loop chunk source".into()))
                .at(Stage::LoopConstraints)?;
            loops = close_loops(store, source, &sequential, &candidates, cfg).at(Stage::LoopConstraints)?;
        }
        lap(Stage::LoopConstraints, &mut stage_ms);
    }

    let mut edges: Vec<Edge> = pairs.iter().map(|&(k, s)| Edge::sequential(k, s)).collect();
    edges.extend(
        loops
            .iter()
            .filter_map(LoopOutcome::accepted)
            .map(|c| Edge::looped(c.chunk_i, c.chunk_j, c.edge_measurement())),
    );
    let graph = PoseGraph::new(uncorrected.clone(), edges).at(Stage::Optimization)?;
    let (graph, optimization) = if graph.loop_edge_count() > 0 {
        let frames = content_frames(store).at(Stage::Optimization)?;
        let centered = graph.reframed(&frames).at(Stage::Optimization)?;
        let (g, r) = optimize(&centered, &cfg.lm).at(Stage::Optimization)?;
        let back: Vec<Sim3> = frames.iter().map(Sim3::inverse).collect();
        let nodes = g.reframed(&back).at(Stage::Optimization)?.nodes().to_vec();
        (graph.with_nodes(nodes).at(Stage::Optimization)?, Some(r))
    } else {
        (graph, None)
    };
    lap(Stage::Optimization, &mut stage_ms);

    Ok(PipelineOutput {
        sequential,
        uncorrected,
        world: graph.nodes().to_vec(),
        loops,
        graph,
        optimization,
        stage_ms,
        started,
    })
}

/// Per chunk, a translation to the centroid of its points. Chunk frames can
/// sit far from their content (world-aligned frontends); optimizing in
/// content-centered frames keeps the graph well conditioned either way.
fn content_frames(store: &ChunkStore) -> Result<Vec<Sim3>> {
    (0..store.len())
        .map(|k| {
            let c = store.load(k)?.centroid().unwrap_or_else(Vec3::zeros);
            Ok(Sim3::from_translation(c))
        })
        .collect()
}

fn close_loops(
    store: &ChunkStore,
    source: &dyn LoopChunkSource,
    sequential: &[SequentialEdge],
    candidates: &[LoopPair],
    cfg: &PipelineConfig,
) -> Result<Vec<LoopOutcome>> {
    let ranges = store.ranges()?;
    let total = ranges.last().map_or(0, |r| r.end);
    let half_width = cfg
        .loop_half_width
        .unwrap_or_else(|| ranges.first().map_or(1, |r| (r.end - r.start) / 4))
        .max(1);
    let seq_residuals: Vec<f64> = sequential.iter().map(|e| e.diagnostics.relative_residual).collect();
    let threshold = if seq_residuals.is_empty() {
        f64::INFINITY
    } else {
        cfg.residual_gate * median(&seq_residuals)
    };
    let mut out = Vec::with_capacity(candidates.len());
    for (n, pair) in candidates.iter().enumerate() {
        if pair.frame_j >= total {
            return Err(Error::InvalidConfig(format!(
                "loop pair ({}, {}) is outside {total} frames",
                pair.frame_i, pair.frame_j
            )));
        }
        let ci = owning_chunk(&ranges, pair.frame_i, half_width).expect("frame is covered");
        let cj = owning_chunk(&ranges, pair.frame_j, half_width).expect("frame is covered");
        if cj <= ci + 1 {
            out.push(LoopOutcome::SameOrAdjacent {
                pair: *pair,
                chunk_i: ci,
                chunk_j: cj,
            });
            continue;
        }
        let frames = loop_chunk_frames(pair, half_width, total);
        let loop_chunk = source.render(store.len() + n, &frames)?;
        let built = {
            let a = store.load(ci)?;
            let b = store.load(cj)?;
            build_loop_constraint(*pair, &loop_chunk, &a, &b, &cfg.alignment_irls(), &cfg.correspondence)
        };
        out.push(match built {
            Ok(c) if c.relative_residual() > threshold => LoopOutcome::ResidualGate { constraint: c, threshold },
            Ok(c) => LoopOutcome::Accepted { constraint: c },
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => LoopOutcome::AlignmentFailed {
                pair: *pair,
                reason: e.to_string(),
            },
        });
    }
    Ok(out)
}

/// Files produced by [`write_outputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub trajectory_uncorrected: PathBuf,
    pub cloud: PathBuf,
    pub report: PathBuf,
    pub summary: PathBuf,
    pub graph: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path) -> Self {
        OutputPaths {
            trajectory: dir.join("trajectory.tum"),
            trajectory_uncorrected: dir.join("trajectory_uncorrected.tum"),
            cloud: dir.join("cloud.ply"),
            report: dir.join("report.json"),
            summary: dir.join("summary.txt"),
            graph: dir.join("graph.g2o"),
        }
    }
}

#[derive(Debug, Serialize)]
struct StageTiming {
    stage: Stage,
    ms: f64,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    chunks: usize,
    frames: usize,
    points_written: u64,
    loop_closure: bool,
    irls: bool,
    confidence_weighting: bool,
    sequential: &'a [SequentialEdge],
    loops: &'a [LoopOutcome],
    accepted_loops: usize,
    optimization: Option<&'a LmReport>,
    stages: Vec<StageTiming>,
    total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportResult {
    pub paths: OutputPaths,
    pub trajectory: Trajectory,
    pub uncorrected: Trajectory,
    pub points_written: u64,
    /// Wall time per stage including export, and from pipeline start to the
    /// end of export.
    pub stage_ms: Vec<(Stage, f64)>,
    pub total_ms: f64,
}

/// Writes the fused cloud, both trajectories, the graph and the reports.
/// Apart from timings every output is a pure function of the inputs.
pub fn write_outputs(
    store: &ChunkStore,
    out: &PipelineOutput,
    cfg: &PipelineConfig,
    dir: &Path,
) -> std::result::Result<ExportResult, StageError> {
    let start = Instant::now();
    let paths = OutputPaths::new(dir);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).at(Stage::Export)?;
    let mut writer = PlyWriter::create(&paths.cloud).at(Stage::Export)?;
    let fused = export_fused(store, &out.world, &cfg.export, Some(&mut writer)).at(Stage::Export)?;
    writer.finish().at(Stage::Export)?;
    let raw = export_fused(store, &out.uncorrected, &cfg.export, None).at(Stage::Export)?;
    fused.trajectory.write_tum(&paths.trajectory).at(Stage::Export)?;
    raw.trajectory.write_tum(&paths.trajectory_uncorrected).at(Stage::Export)?;
    write(&paths.graph, &write_g2o(&out.graph)).at(Stage::Export)?;

    let mut stage_ms = out.stage_ms.clone();
    stage_ms.push((Stage::Export, start.elapsed().as_secs_f64() * 1e3));
    let total_ms = out.started.elapsed().as_secs_f64() * 1e3;
    let report = Report {
        chunks: store.len(),
        frames: fused.trajectory.len(),
        points_written: fused.points_written,
        loop_closure: cfg.loop_closure,
        irls: cfg.irls_enabled,
        confidence_weighting: cfg.correspondence.use_confidence,
        sequential: &out.sequential,
        loops: &out.loops,
        accepted_loops: out.accepted_loops(),
        optimization: out.optimization.as_ref(),
        stages: stage_ms.iter().map(|&(stage, ms)| StageTiming { stage, ms }).collect(),
        total_ms,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&paths.report, &(json + "\n")).at(Stage::Export)?;

    let mut summary = format!(
        "chunks {}\nframes {}\npoints {}\nloops accepted {} of {}\n",
        store.len(),
        fused.trajectory.len(),
        fused.points_written,
        out.accepted_loops(),
        out.loops.len()
    );
    if let Some(r) = &out.optimization {
        summary += &format!(
            "optimization cost {:.6e} -> {:.6e} in {} accepted steps ({:?})\n",
            r.initial_cost, r.final_cost, r.accepted_steps, r.stop_reason
        );
    }
    for (stage, ms) in &stage_ms {
        summary += &format!("{stage}: {ms:.1} ms\n");
    }
    summary += &format!("total: {total_ms:.1} ms\n");
    write(&paths.summary, &summary).at(Stage::Export)?;

    Ok(ExportResult {
        paths,
        trajectory: fused.trajectory,
        uncorrected: raw.trajectory,
        points_written: fused.points_written,
        stage_ms,
        total_ms,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
