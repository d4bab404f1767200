//! `chunkfuse` command-line driver.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | `simulate`, `eval` or `graph` failed |
//! | 2 | bad command line |
//! | 3 | `run`: inputs missing or unreadable, bad configuration |
//! | 4 | `run`: sequential alignment |
//! | 5 | `run`: loop detection |
//! | 6 | `run`: loop constraints |
//! | 7 | `run`: pose-graph optimization |
//! | 8 | `run`: export |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use chunkfuse::chunk::{ChunkStore, RESIDENCY_ENV};
use chunkfuse::graph::{optimize, read_g2o, write_g2o, LmConfig};
use chunkfuse::loops::{parse_loop_pairs, DescriptorSet};
use chunkfuse::metrics::{ate_rmse, cloud_metrics, AlignMode, IcpConfig};
use chunkfuse::pipeline::{run_pipeline, write_outputs, AtStage, LoopChunkSource, PipelineConfig, Stage, StageError};
use chunkfuse::ply::read_ply;
use chunkfuse::sim::{DatasetPaths, SimScenario, Simulator, TrajectoryKind};
use chunkfuse::trajectory::Trajectory;
use chunkfuse::Vec3;

#[derive(Parser)]
#[command(name = "chunkfuse", version, about = "Chunked Sim(3) reconstruction backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align, close loops, optimize and export a chunked sequence.
    Run(RunArgs),
    /// Write a synthetic dataset with ground truth.
    Simulate(SimulateArgs),
    /// Compare an estimate against a reference.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Inspect or re-optimize a saved pose graph.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory holding `chunks/`, `descriptors.vgld` and, for the
    /// simulated frontend, `scenario.cfg`.
    dataset: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// `key = value` pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chunk directory, default `<dataset>/chunks`.
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// Descriptor file, default `<dataset>/descriptors.vgld`.
    #[arg(long)]
    descriptors: Option<PathBuf>,
    /// Loop pairs (`i j` per line) used instead of descriptor matching.
    #[arg(long)]
    loop_pairs: Option<PathBuf>,
    /// Skip loop detection and pose-graph optimization.
    #[arg(long)]
    no_loop_closure: bool,
    /// Single confidence-weighted solve per pair instead of IRLS.
    #[arg(long)]
    no_irls: bool,
    /// Treat all confidences as 1.
    #[arg(long)]
    no_confidence: bool,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(short, long)]
    out: PathBuf,
    /// `key = value` scenario file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// straight, circuit_with_loop or figure_eight.
    #[arg(long)]
    trajectory: Option<TrajectoryKind>,
    #[arg(long)]
    frames: Option<usize>,
    /// Also write `reference.ply`, sampling every n-th frame and pixel.
    #[arg(long, default_value_t = 0)]
    reference_stride: usize,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Absolute trajectory error (TUM or KITTI files).
    Traj {
        estimate: PathBuf,
        reference: PathBuf,
        /// sim3, se3 or none.
        #[arg(long, default_value = "sim3")]
        align: AlignMode,
    },
    /// Accuracy, completeness and Chamfer distance after ICP.
    Cloud {
        predicted: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        voxel: Option<f64>,
        #[arg(long, default_value_t = 20)]
        icp_iterations: usize,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Print nodes, edges and per-edge residual norms.
    Dump { graph: PathBuf },
    /// Parse a graph, optionally optimize it and write it back out.
    Load {
        graph: PathBuf,
        #[arg(long)]
        optimize: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                // Messages already embed their causes.
                eprintln!("error: {e}");
                ExitCode::from(e.stage.exit_code() as u8)
            }
        },
        Command::Simulate(args) => report(simulate(&args)),
        Command::Eval(cmd) => report(eval(&cmd)),
        Command::Graph(cmd) => report(graph(&cmd)),
    }
}

fn report(r: anyhow::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_text(path: &Path) -> chunkfuse::Result<String> {
    std::fs::read_to_string(path).map_err(|e| chunkfuse::Error::io(path, e))
}

fn run(args: &RunArgs) -> Result<(), StageError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_text(&read_text(path).at(Stage::Input)?).at(Stage::Input)?;
    }
    cfg.loop_closure &= !args.no_loop_closure;
    cfg.irls_enabled &= !args.no_irls;
    cfg.correspondence.use_confidence &= !args.no_confidence;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| chunkfuse::Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))
            .at(Stage::Input)?;
        cfg.set(k.trim(), v.trim()).at(Stage::Input)?;
    }
    if let Some(path) = &args.loop_pairs {
        cfg.loop_pairs = Some(parse_loop_pairs(&read_text(path).at(Stage::Input)?).at(Stage::Input)?);
    }
    cfg.validate().at(Stage::Input)?;

    let layout = DatasetPaths::new(&args.dataset);
    let chunks = args.chunks.clone().unwrap_or(layout.chunks);
    let store = ChunkStore::open(&chunks).at(Stage::Input)?;
    let descriptors = match (&args.descriptors, cfg.loop_closure && cfg.loop_pairs.is_none()) {
        (Some(p), _) => Some(DescriptorSet::load(p).at(Stage::Input)?),
        (None, true) => Some(DescriptorSet::load(&layout.descriptors).at(Stage::Input)?),
        (None, false) => None,
    };
    // Loop-centric chunks come from the simulated frontend when the dataset
    // carries its scenario; without it, loop constraints cannot be built.
    let simulator = if cfg.loop_closure && layout.scenario.exists() {
        Some(Simulator::new(SimScenario::load(&layout.scenario).at(Stage::Input)?).at(Stage::Input)?)
    } else {
        None
    };
    let source = simulator.as_ref().map(|s| s as &dyn LoopChunkSource);

    let out = run_pipeline(&store, descriptors.as_ref(), source, &cfg)?;
    let result = write_outputs(&store, &out, &cfg, &args.out)?;
    println!(
        "{} chunks, {} frames, {} points, {} of {} loops accepted; outputs in {}",
        store.len(),
        result.trajectory.len(),
        result.points_written,
        out.accepted_loops(),
        out.loops.len(),
        args.out.display()
    );
    if std::env::var_os(RESIDENCY_ENV).is_some() {
        println!("peak chunk residency {} (limit {})", store.peak_residency(), store.residency_limit());
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let mut scenario = match &args.config {
        Some(p) => SimScenario::load(p)?,
        None => SimScenario::default(),
    };
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    if let Some(k) = args.trajectory {
        scenario.kind = k;
    }
    if let Some(n) = args.frames {
        scenario.frames = n;
    }
    let sim = Simulator::new(scenario)?;
    let paths = sim
        .write_dataset(&args.out, args.reference_stride)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "{} frames in {} chunks written to {} (ground truth {})",
        sim.scenario().frames,
        sim.ranges().len(),
        paths.chunks.display(),
        paths.trajectory.display()
    );
    Ok(())
}

fn eval(cmd: &EvalCommand) -> anyhow::Result<()> {
    match cmd {
        EvalCommand::Traj {
            estimate,
            reference,
            align,
        } => {
            let est = Trajectory::read(estimate)?;
            let gt = Trajectory::read(reference)?;
            let ate = ate_rmse(&est, &gt, *align)?;
            println!("{}", serde_json::json!({ "poses": est.len(), "align": align, "ate_rmse": ate }));
        }
        EvalCommand::Cloud {
            predicted,
            reference,
            voxel,
            icp_iterations,
        } => {
            let to_vec = |c: chunkfuse::ply::PointCloud| -> Vec<Vec3> {
                c.points.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
            };
            let pred = to_vec(read_ply(predicted)?);
            let gt = to_vec(read_ply(reference)?);
            if pred.is_empty() || gt.is_empty() {
                bail!("both clouds need at least one point");
            }
            let cfg = IcpConfig {
                max_iterations: *icp_iterations,
                cell: *voxel,
                ..IcpConfig::default()
            };
            let m = cloud_metrics(&pred, &gt, &cfg)?;
            println!("{}", serde_json::to_string(&m)?);
        }
    }
    Ok(())
}

fn graph(cmd: &GraphCommand) -> anyhow::Result<()> {
    match cmd {
        GraphCommand::Dump { graph } => {
            let g = read_g2o(&read_text(graph)?).with_context(|| format!("parsing {}", graph.display()))?;
            println!("{} nodes, {} edges ({} loop)", g.len(), g.edges().len(), g.loop_edge_count());
            for (i, n) in g.nodes().iter().enumerate() {
                let t = n.translation();
                println!("node {:>4}  s {:.6}  t [{:.4} {:.4} {:.4}]", i + 1, n.scale(), t.x, t.y, t.z);
            }
            for e in g.edges() {
                let r = chunkfuse::graph::edge_residual(g.nodes(), e)?;
                println!("edge {:>4} -> {:<4} {:<10} |r| {:.3e}", e.from + 1, e.to + 1, e.kind.as_str(), r.norm());
            }
            println!("total cost {:.6e}", g.total_cost()?);
        }
        GraphCommand::Load { graph, optimize: opt, out } => {
            let mut g = read_g2o(&read_text(graph)?).with_context(|| format!("parsing {}", graph.display()))?;
            if *opt {
                let (optimized, report) = optimize(&g, &LmConfig::default())?;
                println!("{}", serde_json::to_string(&report)?);
                g = optimized;
            } else {
                println!("{} nodes, {} edges, cost {:.6e}", g.len(), g.edges().len(), g.total_cost()?);
            }
            if let Some(path) = out {
                std::fs::write(path, write_g2o(&g)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}
