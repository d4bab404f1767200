//! Sequence chunking, per-chunk point maps, the disk-backed chunk store,
//! overlap correspondences and sequential alignment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{Deref, Range};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::align::{confidence_gate, irls_align, median, ConfidenceCombine, ConfidentPoints, CorrespondenceSet, IrlsConfig};
use crate::error::{Error, Result};
use crate::ply::PlyWriter;
use crate::sim3::{Sim3, Vec3};
use crate::trajectory::{Pose, Trajectory};

/// Chunk size `L`, overlap `O` and sequence length `N`, all in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkSpec {
    pub chunk_size: usize,
    pub overlap: usize,
    pub total_frames: usize,
}

impl ChunkSpec {
    pub fn new(chunk_size: usize, overlap: usize, total_frames: usize) -> Result<Self> {
        let spec = ChunkSpec {
            chunk_size,
            overlap,
            total_frames,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Overlap of one fifth of the chunk size.
    pub fn with_default_overlap(chunk_size: usize, total_frames: usize) -> Result<Self> {
        ChunkSpec::new(chunk_size, chunk_size / 5, total_frames)
    }

    pub fn validate(&self) -> Result<()> {
        if self.overlap == 0 || self.overlap >= self.chunk_size {
            return Err(Error::InvalidConfig(format!(
                "overlap must satisfy 0 < O < L, got O={} L={}",
                self.overlap, self.chunk_size
            )));
        }
        if self.total_frames == 0 {
            return Err(Error::InvalidConfig("sequence has no frames".into()));
        }
        Ok(())
    }
}

/// Frames `[start, end)` of chunk `index` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ChunkRange {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl ChunkRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn frames(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Chunk `k` covers `[k(L−O), k(L−O)+L) ∩ [0, N)`, with as many chunks as
/// needed to reach frame `N−1`. A sequence shorter than `L` is one chunk.
pub fn plan_chunks(spec: &ChunkSpec) -> Vec<ChunkRange> {
    let (l, n) = (spec.chunk_size, spec.total_frames);
    let step = l - spec.overlap;
    if n <= l {
        return vec![ChunkRange { index: 0, start: 0, end: n }];
    }
    let count = (n - l).div_ceil(step) + 1;
    let mut out: Vec<ChunkRange> = (0..count)
        .map(|k| ChunkRange {
            index: k,
            start: k * step,
            end: (k * step + l).min(n),
        })
        .collect();
    // Minimal coverage already leaves the tail longer than the overlap; this
    // only guards the invariant.
    if out.len() > 1 && out[count - 1].len() <= spec.overlap {
        out.pop();
        out.last_mut().unwrap().end = n;
    }
    out
}

/// Per-frame point maps of one chunk in its own coordinate frame.
///
/// `points` and `confidence` are laid out frame-major, then row-major
/// pixels. Optional poses are camera-to-chunk rigid poses stored as
/// `(tx, ty, tz, qx, qy, qz, qw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPointMap {
    pub index: usize,
    /// Global frame indices, strictly increasing.
    pub frames: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f32; 3]>,
    pub confidence: Vec<f32>,
    pub poses: Option<Vec<[f32; 7]>>,
}

impl ChunkPointMap {
    pub fn new(
        index: usize,
        frames: Vec<usize>,
        height: usize,
        width: usize,
        points: Vec<[f32; 3]>,
        confidence: Vec<f32>,
        poses: Option<Vec<[f32; 7]>>,
    ) -> Result<Self> {
        let map = ChunkPointMap {
            index,
            frames,
            height,
            width,
            points,
            confidence,
            poses,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Chunk {
            index: self.index + 1,
            source: Box::new(Error::format("chunk", d)),
        });
        if self.frames.is_empty() || self.height == 0 || self.width == 0 {
            return bad("empty frame list or image size".into());
        }
        if self.frames.windows(2).any(|w| w[0] >= w[1]) {
            return bad("frame indices must be strictly increasing".into());
        }
        let n = self.frames.len() * self.height * self.width;
        if self.points.len() != n || self.confidence.len() != n {
            return bad(format!(
                "expected {n} pixels, found {} points and {} confidences",
                self.points.len(),
                self.confidence.len()
            ));
        }
        for (p, c) in self.points.iter().zip(&self.confidence) {
            if !c.is_finite() || *c < 0.0 {
                return bad(format!("confidence {c} is not a finite non-negative value"));
            }
            if *c > 0.0 && !p.iter().all(|v| v.is_finite()) {
                return bad("non-finite point with positive confidence".into());
            }
        }
        if let Some(poses) = &self.poses {
            if poses.len() != self.frames.len() {
                return bad(format!("{} poses for {} frames", poses.len(), self.frames.len()));
            }
            for p in poses {
                if let Err(e) = pose_from_raw(p) {
                    return bad(e.to_string());
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_start(&self) -> usize {
        self.frames[0]
    }

    pub fn is_contiguous(&self) -> bool {
        self.frames.windows(2).all(|w| w[1] == w[0] + 1)
    }

    /// Position of a global frame within this chunk.
    pub fn frame_position(&self, frame: usize) -> Option<usize> {
        self.frames.binary_search(&frame).ok()
    }

    pub fn point(&self, local_frame: usize, pixel: usize) -> Vec3 {
        let p = self.points[local_frame * self.pixels_per_frame() + pixel];
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn confidence_at(&self, local_frame: usize, pixel: usize) -> f64 {
        self.confidence[local_frame * self.pixels_per_frame() + pixel] as f64
    }

    pub fn pose(&self, local_frame: usize) -> Option<Pose> {
        self.poses
            .as_ref()
            .map(|p| pose_from_raw(&p[local_frame]).expect("validated on construction"))
    }

    pub fn median_confidence(&self) -> f64 {
        let c: Vec<f64> = self.confidence.iter().map(|&c| c as f64).collect();
        median(&c)
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().map(|&c| c as f64).sum::<f64>() / self.confidence.len() as f64
    }

    /// Mean of the predicted points (positive confidence, finite).
    pub fn centroid(&self) -> Option<Vec3> {
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for (p, &c) in self.points.iter().zip(&self.confidence) {
            if c > 0.0 && p.iter().all(|v| v.is_finite()) {
                sum += Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Global frames present in both chunks.
    pub fn shared_frames(&self, other: &ChunkPointMap) -> Vec<usize> {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.frames.len() && j < other.frames.len() {
            match self.frames[i].cmp(&other.frames[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(self.frames[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }

    /// Serializes in the chunk file layout; frames must be contiguous.
    pub fn write_vglc<W: Write>(&self, w: &mut W) -> Result<()> {
        if !self.is_contiguous() {
            return Err(Error::Chunk {
                index: self.index + 1,
                source: Box::new(Error::format("vglc", "frames are not contiguous")),
            });
        }
        let io = |e| Error::io("<vglc stream>", e);
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::format("vglc", format!("{what} {v} does not fit in u32")))
        };
        let mut head = Vec::with_capacity(VGLC_HEADER_LEN);
        head.extend_from_slice(VGLC_MAGIC);
        head.extend_from_slice(&VGLC_VERSION.to_le_bytes());
        for (v, what) in [
            (self.index + 1, "chunk index"),
            (self.frame_start(), "frame start"),
            (self.frame_count(), "frame count"),
            (self.height, "height"),
            (self.width, "width"),
        ] {
            head.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
        }
        head.push(self.poses.is_some() as u8);
        w.write_all(&head).map_err(io)?;
        write_f32s(w, self.points.iter().flatten()).map_err(io)?;
        write_f32s(w, self.confidence.iter()).map_err(io)?;
        if let Some(poses) = &self.poses {
            write_f32s(w, poses.iter().flatten()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_vglc<R: Read>(r: &mut R) -> Result<Self> {
        let header = VglcHeader::read(r)?;
        let n = header.frames * header.height * header.width;
        let flat = read_f32s(r, 3 * n)?;
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let confidence = read_f32s(r, n)?;
        let poses = if header.has_poses {
            let flat = read_f32s(r, 7 * header.frames)?;
            Some(flat.chunks_exact(7).map(|c| c.try_into().unwrap()).collect())
        } else {
            None
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io("<vglc stream>", e))? != 0 {
            return Err(Error::format("vglc", "trailing bytes after payload"));
        }
        ChunkPointMap::new(
            header.index,
            (header.frame_start..header.frame_start + header.frames).collect(),
            header.height,
            header.width,
            points,
            confidence,
            poses,
        )
    }

    pub fn to_vglc_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_vglc(&mut out)?;
        Ok(out)
    }

    pub fn from_vglc_bytes(bytes: &[u8]) -> Result<Self> {
        ChunkPointMap::read_vglc(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_vglc(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        ChunkPointMap::read_vglc(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

fn pose_from_raw(p: &[f32; 7]) -> Result<Pose> {
    Pose::from_parts(
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64),
        [p[3] as f64, p[4] as f64, p[5] as f64, p[6] as f64],
        1e-4,
    )
}

/// Rigid pose in the chunk file's f32 layout.
pub fn pose_to_raw(p: &Pose) -> [f32; 7] {
    let q = p.rotation.quaternion();
    let t = &p.translation;
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w].map(|v| v as f32)
}

const VGLC_MAGIC: &[u8; 4] = b"VGLC";
const VGLC_VERSION: u32 = 1;
const VGLC_HEADER_LEN: usize = 4 + 4 * 6 + 1;

/// Fixed-size chunk file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VglcHeader {
    /// 0-based; the file stores it 1-based.
    pub index: usize,
    pub frame_start: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub has_poses: bool,
}

impl VglcHeader {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = [0u8; VGLC_HEADER_LEN];
        r.read_exact(&mut b)
            .map_err(|e| Error::format("vglc", format!("truncated header: {e}")))?;
        if &b[..4] != VGLC_MAGIC {
            return Err(Error::format("vglc", "bad magic"));
        }
        let u = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if u(0) != VGLC_VERSION as usize {
            return Err(Error::format("vglc", format!("unsupported version {}", u(0))));
        }
        if u(1) == 0 {
            return Err(Error::format("vglc", "chunk index must be at least 1"));
        }
        if b[28] > 1 {
            return Err(Error::format("vglc", format!("has_poses flag {}", b[28])));
        }
        Ok(VglcHeader {
            index: u(1) - 1,
            frame_start: u(2),
            frames: u(3),
            height: u(4),
            width: u(5),
            has_poses: b[28] == 1,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        VglcHeader::read(&mut file)
    }
}

fn write_f32s<'a, W: Write>(w: &mut W, values: impl Iterator<Item = &'a f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(1 << 16);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 1 << 16 {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format("vglc", format!("truncated payload: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Environment variable overriding the chunk residency limit.
pub const RESIDENCY_ENV: &str = "CHUNKFUSE_RESIDENCY";
pub const DEFAULT_RESIDENCY: usize = 2;

#[derive(Debug, Default)]
struct Residency {
    live: AtomicUsize,
    peak: AtomicUsize,
}

/// Releases one residency slot when dropped.
#[derive(Debug)]
struct Ticket(Arc<Residency>);

impl Drop for Ticket {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A loaded chunk; counts against the store's residency limit until dropped.
#[derive(Debug)]
pub struct ResidentChunk {
    map: ChunkPointMap,
    _ticket: Ticket,
}

impl Deref for ResidentChunk {
    type Target = ChunkPointMap;

    fn deref(&self) -> &ChunkPointMap {
        &self.map
    }
}

/// Directory of chunk files, `chunk_0001.vglc`, `chunk_0002.vglc`, …
#[derive(Debug)]
pub struct ChunkStore {
    root: PathBuf,
    paths: Vec<PathBuf>,
    limit: usize,
    residency: Arc<Residency>,
}

impl ChunkStore {
    /// Empty store writing into `root` (created if missing).
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ChunkStore {
            root: root.to_path_buf(),
            paths: Vec::new(),
            limit: residency_from_env()?,
            residency: Arc::default(),
        })
    }

    /// Indexes every `*.vglc` file in `root` by the chunk index in its header.
    pub fn open(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut indexed = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.extension().is_some_and(|x| x == "vglc") {
                let header = VglcHeader::read_file(&path)?;
                indexed.push((header.index, path));
            }
        }
        if indexed.is_empty() {
            return Err(Error::Empty(format!("no chunks found in {}", root.display())));
        }
        indexed.sort();
        for (expected, (index, path)) in indexed.iter().enumerate() {
            if *index != expected {
                return Err(Error::format(
                    "chunk store",
                    format!("expected chunk {} but found {} in {}", expected + 1, index + 1, path.display()),
                ));
            }
        }
        Ok(ChunkStore {
            root: root.to_path_buf(),
            paths: indexed.into_iter().map(|(_, p)| p).collect(),
            limit: residency_from_env()?,
            residency: Arc::default(),
        })
    }

    pub fn with_residency(mut self, limit: usize) -> Result<Self> {
        if limit == 0 {
            return Err(Error::InvalidConfig("residency limit must be at least 1".into()));
        }
        self.limit = limit;
        Ok(self)
    }

    /// Appends the next chunk; its index must equal the current length.
    pub fn put(&mut self, map: &ChunkPointMap) -> Result<PathBuf> {
        if map.index != self.paths.len() {
            return Err(Error::InvalidConfig(format!(
                "chunk {} stored out of order (expected {})",
                map.index + 1,
                self.paths.len() + 1
            )));
        }
        let path = self.root.join(format!("chunk_{:04}.vglc", map.index + 1));
        map.save(&path).map_err(|e| Error::Chunk {
            index: map.index + 1,
            source: Box::new(e),
        })?;
        self.paths.push(path.clone());
        Ok(path)
    }

    pub fn load(&self, index: usize) -> Result<ResidentChunk> {
        let path = self.paths.get(index).ok_or_else(|| {
            Error::InvalidConfig(format!("chunk {} not in store of {}", index + 1, self.paths.len()))
        })?;
        // Counted before reading so concurrent loads cannot overshoot.
        let live = self.residency.live.fetch_add(1, Ordering::SeqCst) + 1;
        let ticket = Ticket(Arc::clone(&self.residency));
        if live > self.limit {
            return Err(Error::Residency { limit: self.limit });
        }
        self.residency.peak.fetch_max(live, Ordering::SeqCst);
        let map = ChunkPointMap::load(path).map_err(|e| Error::Chunk {
            index: index + 1,
            source: Box::new(e),
        })?;
        if map.index != index {
            return Err(Error::Chunk {
                index: index + 1,
                source: Box::new(Error::format("chunk store", format!("file holds chunk {}", map.index + 1))),
            });
        }
        Ok(ResidentChunk { map, _ticket: ticket })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, index: usize) -> Option<&Path> {
        self.paths.get(index).map(PathBuf::as_path)
    }

    pub fn residency_limit(&self) -> usize {
        self.limit
    }

    pub fn resident(&self) -> usize {
        self.residency.live.load(Ordering::SeqCst)
    }

    pub fn peak_residency(&self) -> usize {
        self.residency.peak.load(Ordering::SeqCst)
    }

    /// Frame ranges of all chunks, read from the file headers.
    pub fn ranges(&self) -> Result<Vec<ChunkRange>> {
        self.paths
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let h = VglcHeader::read_file(p)?;
                Ok(ChunkRange {
                    index,
                    start: h.frame_start,
                    end: h.frame_start + h.frames,
                })
            })
            .collect()
    }
}

fn residency_from_env() -> Result<usize> {
    match std::env::var(RESIDENCY_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidConfig(format!("{RESIDENCY_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(DEFAULT_RESIDENCY),
    }
}

/// How overlap pixels become weighted correspondences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrespondenceOptions {
    /// Pixel sampling step along rows and columns.
    pub stride: usize,
    /// Pairs below this fraction of either chunk's median confidence are dropped.
    pub gate_factor: f64,
    pub combine: ConfidenceCombine,
    /// When false every confidence is treated as 1.
    pub use_confidence: bool,
}

impl Default for CorrespondenceOptions {
    fn default() -> Self {
        CorrespondenceOptions {
            stride: 4,
            gate_factor: 0.1,
            combine: ConfidenceCombine::GeometricMean,
            use_confidence: true,
        }
    }
}

/// Pairs the points of `a` and `b` at identical (frame, pixel) locations over
/// their shared frames. Source points come from `b`, targets from `a`, so an
/// alignment of the result maps `b`'s frame into `a`'s.
///
/// Pixels without a prediction (zero confidence or non-finite point) are
/// skipped before gating.
pub fn overlap_correspondences(a: &ChunkPointMap, b: &ChunkPointMap, opts: &CorrespondenceOptions) -> Result<CorrespondenceSet> {
    if opts.stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::LengthMismatch(format!(
            "chunk {} is {}x{} but chunk {} is {}x{}",
            a.index + 1,
            a.height,
            a.width,
            b.index + 1,
            b.height,
            b.width
        )));
    }
    let shared = a.shared_frames(b);
    if shared.is_empty() {
        return Err(Error::NotAdjacent {
            a: a.index + 1,
            b: b.index + 1,
        });
    }
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    for f in shared {
        let (fa, fb) = (a.frame_position(f).unwrap(), b.frame_position(f).unwrap());
        for row in (0..a.height).step_by(opts.stride) {
            for col in (0..a.width).step_by(opts.stride) {
                let px = row * a.width + col;
                let (xa, xb) = (a.point(fa, px), b.point(fb, px));
                let (wa, wb) = (a.confidence_at(fa, px), b.confidence_at(fb, px));
                if wa <= 0.0 || wb <= 0.0 || !xa.iter().chain(xb.iter()).all(|v| v.is_finite()) {
                    continue;
                }
                pa.push(xa);
                pb.push(xb);
                ca.push(if opts.use_confidence { wa } else { 1.0 });
                cb.push(if opts.use_confidence { wb } else { 1.0 });
            }
        }
    }
    let (ma, mb) = if opts.use_confidence {
        (a.median_confidence(), b.median_confidence())
    } else {
        (1.0, 1.0)
    };
    confidence_gate(
        &ConfidentPoints::with_chunk_median(&pa, &ca, ma),
        &ConfidentPoints::with_chunk_median(&pb, &cb, mb),
        opts.gate_factor,
        opts.combine,
    )
}

/// Summary of one pairwise alignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignDiagnostics {
    pub correspondences: usize,
    pub iterations: usize,
    pub converged: bool,
    pub median_residual: f64,
    /// Median residual divided by the median distance of the target points
    /// from their centroid; comparable across chunks of different scale.
    pub relative_residual: f64,
    pub final_cost: f64,
}

/// Aligns `b` onto `a`: the returned transform maps `b`'s frame into `a`'s.
pub fn align_pair(
    a: &ChunkPointMap,
    b: &ChunkPointMap,
    irls: &IrlsConfig,
    opts: &CorrespondenceOptions,
) -> Result<(Sim3, AlignDiagnostics)> {
    let corr = overlap_correspondences(a, b, opts)?;
    let res = irls_align(&corr, irls)?;
    let target = corr.target();
    let centroid = target.iter().sum::<Vec3>() / target.len() as f64;
    let spread = median(&target.iter().map(|p| (p - centroid).norm()).collect::<Vec<_>>());
    let diag = AlignDiagnostics {
        correspondences: corr.len(),
        iterations: res.iterations_used,
        converged: res.converged,
        median_residual: res.median_residual,
        relative_residual: if spread > 0.0 { res.median_residual / spread } else { f64::INFINITY },
        final_cost: res.final_cost,
    };
    Ok((res.transform, diag))
}

/// Relative transform `S_{k,k+1}` mapping chunk `k+1` into chunk `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SequentialEdge {
    pub from: usize,
    #[serde(skip)]
    pub transform: Sim3,
    pub diagnostics: AlignDiagnostics,
}

/// Aligns every adjacent pair, holding at most the two chunks involved.
pub fn align_sequence(store: &ChunkStore, irls: &IrlsConfig, opts: &CorrespondenceOptions) -> Result<Vec<SequentialEdge>> {
    irls.validate()?;
    let mut edges = Vec::with_capacity(store.len().saturating_sub(1));
    if store.len() < 2 {
        return Ok(edges);
    }
    let mut prev = store.load(0)?;
    for k in 0..store.len() - 1 {
        let next = store.load(k + 1)?;
        let (transform, diagnostics) = align_pair(&prev, &next, irls, opts).map_err(|e| Error::Alignment {
            from: k + 1,
            to: k + 2,
            source: Box::new(e),
        })?;
        edges.push(SequentialEdge {
            from: k,
            transform,
            diagnostics,
        });
        prev = next;
    }
    Ok(edges)
}

/// Prefix products `S_world(0) = I`, `S_world(k+1) = S_world(k) ∘ S_{k,k+1}`.
///
/// `edges` are `(k, S_{k,k+1})` in any order; each `k < count − 1` must
/// appear exactly once.
pub fn accumulate_world(count: usize, edges: &[(usize, Sim3)]) -> Result<Vec<Sim3>> {
    let mut by_from: Vec<Option<Sim3>> = vec![None; count.saturating_sub(1)];
    for &(k, s) in edges {
        match by_from.get_mut(k) {
            Some(slot @ None) => *slot = Some(s),
            Some(Some(_)) => return Err(Error::Graph(format!("duplicate sequential edge {} -> {}", k + 1, k + 2))),
            None => return Err(Error::Graph(format!("edge {} -> {} is outside {count} chunks", k + 1, k + 2))),
        }
    }
    let mut world = Vec::with_capacity(count);
    if count == 0 {
        return Ok(world);
    }
    world.push(Sim3::identity());
    for (k, s) in by_from.iter().enumerate() {
        let s = s.ok_or(Error::MissingEdge { from: k + 1, to: k + 2 })?;
        let next = world[k].compose(&s);
        world.push(next);
    }
    Ok(world)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportOptions {
    /// Points at or below this multiple of the chunk's mean confidence are dropped.
    pub keep_factor: f64,
    /// Only every `stride`-th pixel of a frame is considered.
    pub stride: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            keep_factor: 0.75,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub trajectory: Trajectory,
    pub points_written: u64,
    /// Global frames emitted by each chunk.
    pub owned_frames: Vec<Range<usize>>,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Streams every chunk's confident points through its world transform into
/// `cloud` and assembles the per-frame trajectory. A frame shared by two
/// chunks is emitted by the earlier one. Chunks without poses contribute the
/// centroid of their kept points per frame, with identity rotation.
pub fn export_fused(
    store: &ChunkStore,
    world: &[Sim3],
    opts: &ExportOptions,
    mut cloud: Option<&mut PlyWriter>,
) -> Result<ExportSummary> {
    if world.len() != store.len() {
        return Err(Error::LengthMismatch(format!(
            "{} world transforms for {} chunks",
            world.len(),
            store.len()
        )));
    }
    if opts.stride == 0 {
        return Err(Error::InvalidConfig("export stride must be at least 1".into()));
    }
    let mut poses = Vec::new();
    let mut owned_frames = Vec::with_capacity(store.len());
    let mut next_frame = 0usize;
    let mut written = 0u64;
    for (k, s) in world.iter().enumerate() {
        let chunk = store.load(k)?;
        let wrap = |e: Error| Error::Chunk {
            index: k + 1,
            source: Box::new(e),
        };
        if chunk.frame_start() > next_frame {
            return Err(wrap(Error::format(
                "chunk store",
                format!("frames {next_frame}..{} are not covered", chunk.frame_start()),
            )));
        }
        let threshold = opts.keep_factor * chunk.mean_confidence();
        let first_owned = chunk.frames.partition_point(|&f| f < next_frame);
        let owned = next_frame..chunk.frames.last().map_or(next_frame, |f| f + 1);
        let color = PALETTE[k % PALETTE.len()];
        for local in first_owned..chunk.frame_count() {
            if chunk.frames[local] != poses.len() {
                return Err(wrap(Error::format("chunk store", "frames are not contiguous")));
            }
            let mut sum = Vec3::zeros();
            let mut kept = 0usize;
            for px in (0..chunk.pixels_per_frame()).step_by(opts.stride) {
                if chunk.confidence_at(local, px) <= threshold {
                    continue;
                }
                let p = s.transform_point(&chunk.point(local, px));
                sum += p;
                kept += 1;
                if let Some(w) = cloud.as_deref_mut() {
                    w.push([p.x as f32, p.y as f32, p.z as f32], color).map_err(wrap)?;
                    written += 1;
                }
            }
            let pose = match chunk.pose(local) {
                Some(p) => p.transformed_by(s),
                None if kept > 0 => Pose::new(sum / kept as f64, Default::default()),
                None => {
                    return Err(wrap(Error::format(
                        "chunk",
                        format!("frame {} has no pose and no confident points", chunk.frames[local]),
                    )))
                }
            };
            poses.push(pose);
        }
        next_frame = owned.end.max(next_frame);
        owned_frames.push(owned);
    }
    Ok(ExportSummary {
        trajectory: Trajectory::from_poses(poses),
        points_written: written,
        owned_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(l: usize, o: usize, n: usize) -> Vec<(usize, usize)> {
        plan_chunks(&ChunkSpec::new(l, o, n).unwrap())
            .iter()
            .map(|r| (r.start, r.end))
            .collect()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(ranges(75, 15, 100), vec![(0, 75), (60, 100)]);
        assert_eq!(ranges(75, 15, 75), vec![(0, 75)]);
        assert_eq!(ranges(75, 15, 30), vec![(0, 30)]);
        assert_eq!(ranges(10, 2, 26), vec![(0, 10), (8, 18), (16, 26)]);
    }

    #[test]
    fn spec_validation() {
        assert!(ChunkSpec::new(10, 0, 100).is_err());
        assert!(ChunkSpec::new(10, 10, 100).is_err());
        assert!(ChunkSpec::new(10, 2, 0).is_err());
        assert_eq!(ChunkSpec::with_default_overlap(75, 1000).unwrap().overlap, 15);
    }

    fn tiny_chunk(index: usize, start: usize, frames: usize) -> ChunkPointMap {
        let (h, w) = (2, 3);
        let n = frames * h * w;
        let points = (0..n).map(|i| [i as f32, (i * 2) as f32, 1.0]).collect();
        let conf = (0..n).map(|i| 1.0 + (i % 3) as f32).collect();
        ChunkPointMap::new(index, (start..start + frames).collect(), h, w, points, conf, None).unwrap()
    }

    #[test]
    fn vglc_layout() {
        let c = tiny_chunk(4, 7, 2);
        let bytes = c.to_vglc_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VGLC");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 29 + 4 * 12 * 3 + 4 * 12);
        assert_eq!(ChunkPointMap::from_vglc_bytes(&bytes).unwrap(), c);
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ChunkPointMap::from_vglc_bytes(&longer).is_err());
        assert!(ChunkPointMap::from_vglc_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_invalid_maps() {
        let mut c = tiny_chunk(0, 0, 1);
        c.points[0] = [f32::NAN, 0.0, 0.0];
        assert!(c.validate().is_err());
        c.confidence[0] = 0.0;
        assert!(c.validate().is_ok());
        c.confidence[1] = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn accumulate_reports_missing_edge() {
        let e = accumulate_world(3, &[(0, Sim3::identity())]).unwrap_err();
        assert!(matches!(e, Error::MissingEdge { from: 2, to: 3 }));
        assert_eq!(accumulate_world(1, &[]).unwrap(), vec![Sim3::identity()]);
    }

    #[test]
    fn shared_frames_of_windows() {
        let a = tiny_chunk(0, 0, 5);
        let b = tiny_chunk(1, 3, 5);
        assert_eq!(a.shared_frames(&b), vec![3, 4]);
        let c = tiny_chunk(2, 8, 2);
        let err = overlap_correspondences(&a, &c, &CorrespondenceOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotAdjacent { a: 1, b: 3 }));
    }
}
