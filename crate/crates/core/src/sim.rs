//! Synthetic stand-in for the neural frontend.
//!
//! A camera drives along a planar path. Each pixel of each frame sees a point
//! on a corridor around the camera (ground, two side walls, a far wall), so a
//! given (frame, pixel) names the same world point in every chunk containing
//! that frame.
//!
//! Chunk `k` reports its frames in its own Sim(3) frame
//! `S_k = S_{k−1} ∘ exp(ξ_k)` (`S_{−1} = I`) for a random drift tangent `ξ_k`,
//! so with zero drift every chunk is expressed in world coordinates. On top
//! of that, an optional warp `ω_k` deforms the chunk progressively about its
//! first camera `A_k`: frame `f` is rendered through
//! `S_k ∘ A_k ∘ exp(τ ω_k) ∘ A_k⁻¹` with `τ` growing from 0 at the first
//! frame. Overlap frames then disagree between neighbours and pairwise
//! alignment picks up a bias that compounds along the sequence, as it does
//! for a learned frontend.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::chunk::{plan_chunks, pose_to_raw, ChunkPointMap, ChunkRange, ChunkSpec, ChunkStore};
use crate::error::{Error, Result};
use crate::graph::{write_g2o, Edge, PoseGraph};
use crate::loops::DescriptorSet;
use crate::ply::PlyWriter;
use crate::sim3::{Mat3, Sim3, Sim3Tangent, Vec3};
use crate::trajectory::{Pose, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Straight,
    /// A circle driven for more than one lap; the last stretch revisits the start.
    CircuitWithLoop,
    /// One period of a figure eight: crosses itself midway and returns to the start.
    FigureEight,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(TrajectoryKind::Straight),
            "circuit_with_loop" => Ok(TrajectoryKind::CircuitWithLoop),
            "figure_eight" => Ok(TrajectoryKind::FigureEight),
            _ => Err(Error::InvalidConfig(format!("unknown trajectory kind {s:?}"))),
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrajectoryKind::Straight => "straight",
            TrajectoryKind::CircuitWithLoop => "circuit_with_loop",
            TrajectoryKind::FigureEight => "figure_eight",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimScenario {
    pub seed: u64,
    pub kind: TrajectoryKind,
    pub frames: usize,
    pub chunk_size: usize,
    pub overlap: usize,
    /// Pixels per frame are `height × width`.
    pub height: usize,
    pub width: usize,
    /// Distance travelled per frame (on average for `figure_eight`).
    pub speed: f64,
    /// Per-axis standard deviations of the per-chunk drift tangent.
    pub drift_rotation_deg: f64,
    pub drift_scale_pct: f64,
    pub drift_translation: f64,
    /// Per-axis standard deviations of the intra-chunk warp tangent.
    pub warp_rotation_deg: f64,
    pub warp_scale_pct: f64,
    pub warp_translation: f64,
    /// Gaussian noise on inlier points, world units.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Share of outliers reported with inlier confidence.
    pub confident_outlier_fraction: f64,
    pub outlier_confidence: f64,
    pub inlier_confidence: f64,
    /// Half width of the loop-centric windows; `chunk_size / 4` when zero.
    pub loop_half_width: usize,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            seed: 0,
            kind: TrajectoryKind::CircuitWithLoop,
            frames: 1500,
            chunk_size: 75,
            overlap: 15,
            height: 40,
            width: 56,
            speed: 1.0,
            drift_rotation_deg: 2.0,
            drift_scale_pct: 2.0,
            drift_translation: 0.5,
            warp_rotation_deg: 0.5,
            warp_scale_pct: 0.5,
            warp_translation: 0.05,
            noise_sigma: 0.02,
            outlier_fraction: 0.3,
            confident_outlier_fraction: 0.1,
            outlier_confidence: 0.01,
            inlier_confidence: 1.0,
            loop_half_width: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        ChunkSpec::new(self.chunk_size, self.overlap, self.frames)?;
        let fractions = [self.outlier_fraction, self.confident_outlier_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig("fractions must lie in [0, 1]".into()));
        }
        let nonneg = [
            self.noise_sigma,
            self.drift_rotation_deg,
            self.drift_scale_pct,
            self.drift_translation,
            self.warp_rotation_deg,
            self.warp_scale_pct,
            self.warp_translation,
            self.outlier_confidence,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("noise, drift and confidences must be finite and >= 0".into()));
        }
        if !(self.inlier_confidence > 0.0) || !(self.speed > 0.0) {
            return Err(Error::InvalidConfig("inlier confidence and speed must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_spec(&self) -> Result<ChunkSpec> {
        ChunkSpec::new(self.chunk_size, self.overlap, self.frames)
    }

    pub fn half_width(&self) -> usize {
        if self.loop_half_width == 0 {
            self.chunk_size / 4
        } else {
            self.loop_half_width
        }
    }

    /// `key = value` lines; unknown keys are errors, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SimScenario::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("scenario", format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn fmt::Display| Error::format("scenario", format!("line {}: {key}: {e}", n + 1));
            macro_rules! set {
                ($field:ident) => {
                    s.$field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "seed" => set!(seed),
                "trajectory" => set!(kind),
                "frames" => set!(frames),
                "chunk_size" => set!(chunk_size),
                "overlap" => set!(overlap),
                "height" => set!(height),
                "width" => set!(width),
                "speed" => set!(speed),
                "drift_rotation_deg" => set!(drift_rotation_deg),
                "drift_scale_pct" => set!(drift_scale_pct),
                "drift_translation" => set!(drift_translation),
                "warp_rotation_deg" => set!(warp_rotation_deg),
                "warp_scale_pct" => set!(warp_scale_pct),
                "warp_translation" => set!(warp_translation),
                "noise_sigma" => set!(noise_sigma),
                "outlier_fraction" => set!(outlier_fraction),
                "confident_outlier_fraction" => set!(confident_outlier_fraction),
                "outlier_confidence" => set!(outlier_confidence),
                "inlier_confidence" => set!(inlier_confidence),
                "loop_half_width" => set!(loop_half_width),
                _ => return Err(Error::format("scenario", format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", &self.seed);
        kv("trajectory", &self.kind);
        kv("frames", &self.frames);
        kv("chunk_size", &self.chunk_size);
        kv("overlap", &self.overlap);
        kv("height", &self.height);
        kv("width", &self.width);
        kv("speed", &self.speed);
        kv("drift_rotation_deg", &self.drift_rotation_deg);
        kv("drift_scale_pct", &self.drift_scale_pct);
        kv("drift_translation", &self.drift_translation);
        kv("warp_rotation_deg", &self.warp_rotation_deg);
        kv("warp_scale_pct", &self.warp_scale_pct);
        kv("warp_translation", &self.warp_translation);
        kv("noise_sigma", &self.noise_sigma);
        kv("outlier_fraction", &self.outlier_fraction);
        kv("confident_outlier_fraction", &self.confident_outlier_fraction);
        kv("outlier_confidence", &self.outlier_confidence);
        kv("inlier_confidence", &self.inlier_confidence);
        kv("loop_half_width", &self.loop_half_width);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SimScenario::parse(&text)
    }
}

/// True states of a simulated run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGroundTruth {
    /// Camera-to-world pose of every frame.
    pub trajectory: Trajectory,
    /// `S_k`: chunk-local coordinates of chunk `k`'s first frame to world.
    pub chunk_to_world: Vec<Sim3>,
}

/// Exact `S_k⁻¹ ∘ S_{k+1}` for every adjacent pair.
pub fn oracle_edges(gt: &SimGroundTruth) -> Vec<(usize, Sim3)> {
    gt.chunk_to_world
        .windows(2)
        .enumerate()
        .map(|(k, w)| (k, w[0].inverse().compose(&w[1])))
        .collect()
}

/// Exact `S_j⁻¹ ∘ S_i`: chunk `i`'s frame into chunk `j`'s.
pub fn oracle_loop_constraint(gt: &SimGroundTruth, chunk_i: usize, chunk_j: usize) -> Sim3 {
    gt.chunk_to_world[chunk_j].inverse().compose(&gt.chunk_to_world[chunk_i])
}

const CAMERA_HEIGHT: f64 = 1.6;
const WALL_OFFSET: f64 = 8.0;
const FAR_WALL: f64 = 40.0;
const TAN_HALF_HFOV: f64 = 1.0;
const TAN_HALF_VFOV: f64 = 0.577_350_269_189_625_8;
const DESCRIPTOR_DIM: usize = 16;
const DESCRIPTOR_CELL: f64 = 25.0;

// Stream tags keeping the random streams of different quantities apart.
const TAG_SCENE: u64 = 1;
const TAG_WARP: u64 = 2;
const TAG_DRIFT: u64 = 3;
const TAG_RENDER: u64 = 4;
const TAG_DESCRIPTOR: u64 = 5;
const TAG_LOOP: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix(seed), |acc, t| splitmix(acc ^ splitmix(*t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Points, confidences and raw pose of one rendered frame.
type RenderedFrame = (Vec<[f32; 3]>, Vec<f32>, [f32; 7]);

/// Frame of reference and deformation of one rendered chunk.
struct ChunkFrame {
    reference: Sim3,
    warp: Sim3Tangent,
    /// First camera of the chunk; the warp acts about it.
    anchor: Sim3,
    /// Keys the per-frame render streams of this chunk.
    key: [u64; 2],
}

pub struct Simulator {
    scenario: SimScenario,
    ranges: Vec<ChunkRange>,
    cameras: Vec<Sim3>,
    chunks: Vec<ChunkFrame>,
}

impl Simulator {
    pub fn new(scenario: SimScenario) -> Result<Self> {
        scenario.validate()?;
        let ranges = plan_chunks(&scenario.chunk_spec()?);
        let cameras = (0..scenario.frames).map(|f| camera_pose(&scenario, f)).collect::<Vec<_>>();
        let mut chunks: Vec<ChunkFrame> = Vec::with_capacity(ranges.len());
        for r in &ranges {
            let prev = chunks.last().map_or(Sim3::identity(), |c| c.reference);
            chunks.push(chunk_frame(&scenario, &prev, cameras[r.start], TAG_RENDER, r.index as u64));
        }
        Ok(Simulator {
            scenario,
            ranges,
            cameras,
            chunks,
        })
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.scenario
    }

    pub fn ranges(&self) -> &[ChunkRange] {
        &self.ranges
    }

    pub fn ground_truth(&self) -> SimGroundTruth {
        let poses = self.cameras.iter().map(rigid_pose).collect();
        SimGroundTruth {
            trajectory: Trajectory::from_poses(poses),
            chunk_to_world: self.chunks.iter().map(|c| c.reference).collect(),
        }
    }

    /// Warp tangent of chunk `k`.
    pub fn warp(&self, k: usize) -> Sim3Tangent {
        self.chunks[k].warp
    }

    /// Noiseless world points seen by every pixel of `frame`.
    pub fn scene_frame(&self, frame: usize) -> Vec<Vec3> {
        let s = &self.scenario;
        let mut rng = stream(s.seed, &[TAG_SCENE, frame as u64]);
        let cam = &self.cameras[frame];
        let mut out = Vec::with_capacity(s.height * s.width);
        for r in 0..s.height {
            for c in 0..s.width {
                let dir = Vec3::new(
                    TAN_HALF_HFOV * (2.0 * (c as f64 + 0.5) / s.width as f64 - 1.0),
                    TAN_HALF_VFOV * (2.0 * (r as f64 + 0.5) / s.height as f64 - 1.0),
                    1.0,
                );
                let mut t = FAR_WALL;
                if dir.y > 0.0 {
                    t = t.min(CAMERA_HEIGHT / dir.y);
                }
                if dir.x != 0.0 {
                    t = t.min(WALL_OFFSET / dir.x.abs());
                }
                let jitter: f64 = rng.random_range(-0.01..0.01);
                out.push(cam.transform_point(&(dir * (t * (1.0 + jitter)))));
            }
        }
        out
    }

    /// Sequence chunk `k` as the frontend would report it.
    pub fn chunk(&self, k: usize) -> ChunkPointMap {
        let r = self.ranges[k];
        let frames: Vec<usize> = r.frames().collect();
        let tau: Vec<f64> = frames.iter().map(|f| self.tau(f - r.start)).collect();
        self.render(k, &frames, &tau, &self.chunks[k])
    }

    /// Loop-centric chunk over `frames`, reconstructed in one frame of its
    /// own. `index` only labels the result.
    pub fn loop_chunk(&self, index: usize, frames: &[usize]) -> Result<ChunkPointMap> {
        if frames.is_empty() || frames.windows(2).any(|w| w[0] >= w[1]) || frames[frames.len() - 1] >= self.scenario.frames {
            return Err(Error::InvalidConfig("loop chunk frames must be increasing and in range".into()));
        }
        let tag = (frames[0] as u64) << 32 | frames[frames.len() - 1] as u64;
        let frame = chunk_frame(&self.scenario, &Sim3::identity(), self.cameras[frames[0]], TAG_LOOP, tag);
        let tau: Vec<f64> = (0..frames.len()).map(|l| self.tau(l)).collect();
        Ok(self.render(index, frames, &tau, &frame))
    }

    fn tau(&self, local: usize) -> f64 {
        local as f64 / (self.scenario.chunk_size - self.scenario.overlap) as f64
    }

    fn render(&self, index: usize, frames: &[usize], tau: &[f64], cf: &ChunkFrame) -> ChunkPointMap {
        let s = &self.scenario;
        let per_frame: Vec<RenderedFrame> = frames
            .par_iter()
            .zip(tau)
            .map(|(&f, &t)| {
                let warp = cf.anchor.compose(&Sim3::exp(&(cf.warp * t))).compose(&cf.anchor.inverse());
                let to_world = cf.reference.compose(&warp);
                let to_local = to_world.inverse();
                let mut rng = stream(s.seed, &[cf.key[0], cf.key[1], f as u64]);
                let noise = Normal::new(0.0, s.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
                let cam = &self.cameras[f];
                let mut pts = Vec::with_capacity(s.height * s.width);
                let mut conf = Vec::with_capacity(s.height * s.width);
                for x in self.scene_frame(f) {
                    let (world, c) = if rng.random::<f64>() < s.outlier_fraction {
                        // Displaced by a uniform offset spanning the visible scene box.
                        let offset = Vec3::new(
                            rng.random_range(-WALL_OFFSET..WALL_OFFSET),
                            rng.random_range(-0.5 * (5.0 + CAMERA_HEIGHT)..0.5 * (5.0 + CAMERA_HEIGHT)),
                            rng.random_range(-0.5 * FAR_WALL..0.5 * FAR_WALL),
                        );
                        let confident = rng.random::<f64>() < s.confident_outlier_fraction;
                        let c = if confident { s.inlier_confidence } else { s.outlier_confidence };
                        (x + cam.rotation() * offset, c)
                    } else {
                        let n = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                        (x + n * (s.noise_sigma > 0.0) as u8 as f64, s.inlier_confidence)
                    };
                    let p = to_local.transform_point(&world);
                    pts.push([p.x as f32, p.y as f32, p.z as f32]);
                    conf.push(c as f32);
                }
                let pose = rigid_pose(&to_local.compose(cam));
                (pts, conf, pose_to_raw(&pose))
            })
            .collect();
        let mut points = Vec::with_capacity(frames.len() * s.height * s.width);
        let mut confidence = Vec::with_capacity(points.capacity());
        let mut poses = Vec::with_capacity(frames.len());
        for (p, c, pose) in per_frame {
            points.extend(p);
            confidence.extend(c);
            poses.push(pose);
        }
        ChunkPointMap::new(index, frames.to_vec(), s.height, s.width, points, confidence, Some(poses))
            .expect("simulator output is well formed")
    }

    /// Smooth 16-D embedding of camera position and heading with a little
    /// per-frame noise; places revisited later score close to 1.
    pub fn descriptors(&self) -> DescriptorSet {
        let s = &self.scenario;
        let mut basis = stream(s.seed, &[TAG_DESCRIPTOR, u64::MAX]);
        let g = Normal::new(0.0, 1.0).unwrap();
        let heading_a: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| g.sample(&mut basis)).collect();
        let heading_b: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| g.sample(&mut basis)).collect();
        let corner = |ix: i64, iy: i64| -> Vec<f64> {
            let mut rng = stream(s.seed, &[TAG_DESCRIPTOR, ix as u64, iy as u64]);
            (0..DESCRIPTOR_DIM).map(|_| g.sample(&mut rng)).collect()
        };
        let rows: Vec<Vec<f64>> = (0..s.frames)
            .into_par_iter()
            .map(|f| {
                let cam = &self.cameras[f];
                let p = cam.translation() / DESCRIPTOR_CELL;
                let (fx, fy) = (p.x.floor(), p.y.floor());
                let (ux, uy) = (p.x - fx, p.y - fy);
                let mut d = vec![0.0; DESCRIPTOR_DIM];
                for (dx, dy, w) in [(0, 0, (1.0 - ux) * (1.0 - uy)), (1, 0, ux * (1.0 - uy)), (0, 1, (1.0 - ux) * uy), (1, 1, ux * uy)] {
                    let v = corner(fx as i64 + dx, fy as i64 + dy);
                    d.iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
                }
                let fwd = cam.rotation().column(2);
                let heading = fwd.y.atan2(fwd.x);
                let mut rng = stream(s.seed, &[TAG_DESCRIPTOR, f as u64]);
                for i in 0..DESCRIPTOR_DIM {
                    d[i] += 0.25 * (heading.cos() * heading_a[i] + heading.sin() * heading_b[i]);
                    d[i] += 0.05 * g.sample(&mut rng);
                }
                d
            })
            .collect();
        DescriptorSet::from_rows(&rows).expect("descriptors are finite and non-zero")
    }

    /// Writes chunks, descriptors, the scenario and the ground truth into
    /// `dir`; a reference cloud sampled every `cloud_stride` pixels is added
    /// when `cloud_stride > 0`.
    pub fn write_dataset(&self, dir: &Path, cloud_stride: usize) -> Result<DatasetPaths> {
        let paths = DatasetPaths::new(dir);
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut store = ChunkStore::create(&paths.chunks)?;
        for k in 0..self.ranges.len() {
            store.put(&self.chunk(k))?;
        }
        self.descriptors().save(&paths.descriptors)?;
        write_file(&paths.scenario, &self.scenario.to_text())?;
        let gt = self.ground_truth();
        gt.trajectory.write_tum(&paths.trajectory)?;
        let edges = oracle_edges(&gt).into_iter().map(|(k, m)| Edge::sequential(k, m)).collect();
        let graph = PoseGraph::new(gt.chunk_to_world.clone(), edges)?;
        write_file(&paths.graph, &write_g2o(&graph))?;
        if cloud_stride > 0 {
            let mut w = PlyWriter::create(&paths.cloud)?;
            for f in (0..self.scenario.frames).step_by(cloud_stride) {
                for (i, p) in self.scene_frame(f).iter().enumerate() {
                    if i % cloud_stride == 0 {
                        w.push([p.x as f32, p.y as f32, p.z as f32], [200, 200, 200])?;
                    }
                }
            }
            w.finish()?;
        }
        Ok(paths)
    }
}

/// File layout of a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub chunks: PathBuf,
    pub descriptors: PathBuf,
    pub scenario: PathBuf,
    pub trajectory: PathBuf,
    pub graph: PathBuf,
    pub cloud: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: &Path) -> Self {
        DatasetPaths {
            chunks: dir.join("chunks"),
            descriptors: dir.join("descriptors.vgld"),
            scenario: dir.join("scenario.cfg"),
            trajectory: dir.join("ground_truth.tum"),
            graph: dir.join("ground_truth.g2o"),
            cloud: dir.join("reference.ply"),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Frame `prev ∘ exp(ξ)` with a fresh drift `ξ`, plus a fresh warp.
fn chunk_frame(s: &SimScenario, prev: &Sim3, anchor: Sim3, tag: u64, id: u64) -> ChunkFrame {
    let n = Normal::new(0.0, 1.0).unwrap();
    let tangent = |key: u64, rot_deg: f64, scale_pct: f64, trans: f64| {
        let mut rng = stream(s.seed, &[key, tag, id]);
        let mut g = |sd: f64| n.sample(&mut rng) * sd;
        let rot = rot_deg.to_radians();
        Sim3Tangent::new(
            Vec3::new(g(trans), g(trans), g(trans)),
            Vec3::new(g(rot), g(rot), g(rot)),
            g((1.0 + scale_pct / 100.0).ln()),
        )
    };
    let drift = tangent(TAG_DRIFT, s.drift_rotation_deg, s.drift_scale_pct, s.drift_translation);
    let warp = tangent(TAG_WARP, s.warp_rotation_deg, s.warp_scale_pct, s.warp_translation);
    ChunkFrame {
        reference: prev.compose(&Sim3::exp(&drift)),
        warp,
        anchor,
        key: [tag, id],
    }
}

/// Camera looks along the direction of travel (z forward, y down, x right),
/// `CAMERA_HEIGHT` above the ground plane `z = 0`.
fn camera_pose(s: &SimScenario, f: usize) -> Sim3 {
    let t = f as f64 * s.speed;
    let (x, y, heading) = match s.kind {
        TrajectoryKind::Straight => (t, 0.0, 0.0),
        TrajectoryKind::CircuitWithLoop => {
            // One lap takes 80% of the sequence.
            let radius = 0.8 * s.frames as f64 * s.speed / std::f64::consts::TAU;
            let a = t / radius;
            (radius * a.sin(), radius * (1.0 - a.cos()), a)
        }
        TrajectoryKind::FigureEight => {
            let a = s.frames as f64 * s.speed / 6.1;
            let u = std::f64::consts::TAU * f as f64 / s.frames as f64;
            let (dx, dy) = (a * u.cos(), a * (2.0 * u).cos());
            (a * u.sin(), a * u.sin() * u.cos(), dy.atan2(dx))
        }
    };
    let (sh, ch) = heading.sin_cos();
    let right = Vec3::new(sh, -ch, 0.0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let forward = Vec3::new(ch, sh, 0.0);
    let r = Mat3::from_columns(&[right, down, forward]);
    Sim3::new(1.0, r, Vec3::new(x, y, CAMERA_HEIGHT)).expect("rotation is orthonormal")
}

fn rigid_pose(s: &Sim3) -> Pose {
    let r = Rotation3::from_matrix_unchecked(*s.rotation());
    Pose::new(*s.translation(), UnitQuaternion::from_rotation_matrix(&r))
}
