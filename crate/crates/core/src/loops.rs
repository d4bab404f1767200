//! Loop candidates from global frame descriptors and loop constraints
//! bridged through a loop-centric chunk.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::align::IrlsConfig;
use crate::chunk::{align_pair, AlignDiagnostics, ChunkPointMap, ChunkRange, CorrespondenceOptions};
use crate::error::{Error, Result};
use crate::sim3::Sim3;

const VGLD_MAGIC: &[u8; 4] = b"VGLD";
const VGLD_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;

/// One L2-normalized descriptor per frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::format("descriptors", format!("{} values do not form rows of {dim}", data.len())));
        }
        let set = DescriptorSet { dim, data };
        for i in 0..set.len() {
            let n = set.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !((n - 1.0).abs() <= NORM_TOL) {
                return Err(Error::format("descriptors", format!("row {i} has norm {n}")));
            }
        }
        Ok(set)
    }

    /// Normalizes each row; zero rows are rejected.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::LengthMismatch(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::format("descriptors", format!("row {i} cannot be normalized")));
            }
            data.extend(r.iter().map(|v| (v / n) as f32));
        }
        DescriptorSet::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    pub fn write_vgld<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<vgld stream>", e);
        let count = u32::try_from(self.len()).map_err(|_| Error::format("vgld", "too many descriptors"))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::format("vgld", "dimension too large"))?;
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        buf.extend_from_slice(VGLD_MAGIC);
        buf.extend_from_slice(&VGLD_VERSION.to_le_bytes());
        buf.extend_from_slice(&count.to_le_bytes());
        buf.extend_from_slice(&dim.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_vgld<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|e| Error::format("vgld", format!("truncated header: {e}")))?;
        if &head[..4] != VGLD_MAGIC {
            return Err(Error::format("vgld", "bad magic"));
        }
        let u = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        if u(1) != VGLD_VERSION as usize {
            return Err(Error::format("vgld", format!("unsupported version {}", u(1))));
        }
        let (n, dim) = (u(2), u(3));
        let mut bytes = vec![0u8; 4 * n * dim];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::format("vgld", format!("truncated payload: {e}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<vgld stream>", e))? != 0 {
            return Err(Error::format("vgld", "trailing bytes after payload"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DescriptorSet::new(dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_vgld(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        DescriptorSet::read_vgld(&mut BufReader::new(file))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoopConfig {
    /// Minimum cosine similarity `τ_s`.
    pub similarity_threshold: f64,
    /// Pairs need `j − i > min_separation` frames.
    pub min_separation: usize,
    /// Two pairs whose endpoints both differ by less than this many frames
    /// suppress each other.
    pub nms_window: usize,
    pub max_candidates: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            similarity_threshold: 0.85,
            min_separation: 100,
            nms_window: 25,
            max_candidates: 32,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "similarity threshold must lie in (0, 1), got {}",
                self.similarity_threshold
            )));
        }
        if self.min_separation == 0 || self.nms_window == 0 || self.max_candidates == 0 {
            return Err(Error::InvalidConfig(
                "min separation, NMS window and candidate limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frame pair `i < j` believed to view the same place.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoopPair {
    pub frame_i: usize,
    pub frame_j: usize,
    /// Descriptor cosine; NaN for pairs supplied by hand.
    pub similarity: f64,
}

fn suppresses(a: &LoopPair, b: &LoopPair, window: usize) -> bool {
    a.frame_i.abs_diff(b.frame_i) < window && a.frame_j.abs_diff(b.frame_j) < window
}

/// Exhaustive cosine scan, then greedy non-maximum suppression in order of
/// decreasing similarity (ties: smaller `(i, j)` first), truncated to
/// `max_candidates`.
pub fn detect_loops(desc: &DescriptorSet, cfg: &LoopConfig) -> Result<Vec<LoopPair>> {
    cfg.validate()?;
    let n = desc.len();
    let mut candidates: Vec<LoopPair> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + cfg.min_separation + 1..n).filter_map(move |j| {
                let s = desc.cosine(i, j);
                (s >= cfg.similarity_threshold).then_some(LoopPair {
                    frame_i: i,
                    frame_j: j,
                    similarity: s,
                })
            })
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then((a.frame_i, a.frame_j).cmp(&(b.frame_i, b.frame_j)))
    });
    let mut kept: Vec<LoopPair> = Vec::new();
    for c in candidates {
        if kept.len() == cfg.max_candidates {
            break;
        }
        if !kept.iter().any(|k| suppresses(k, &c, cfg.nms_window)) {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Parses hand-written loop pairs, one `i j` per line (`#` comments allowed).
pub fn parse_loop_pairs(text: &str) -> Result<Vec<LoopPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::format("loop pairs", format!("line {}: {e}", n + 1)))
        };
        if f.len() != 2 {
            return Err(Error::format("loop pairs", format!("line {}: expected `i j`", n + 1)));
        }
        let (a, b) = (parse(f[0])?, parse(f[1])?);
        if a == b {
            return Err(Error::format("loop pairs", format!("line {}: frame paired with itself", n + 1)));
        }
        out.push(LoopPair {
            frame_i: a.min(b),
            frame_j: a.max(b),
            similarity: f64::NAN,
        });
    }
    Ok(out)
}

/// Frames `[i−w, i+w] ∪ [j−w, j+w]` clamped to `[0, total)`, ascending.
pub fn loop_chunk_frames(pair: &LoopPair, half_width: usize, total: usize) -> Vec<usize> {
    let window = |c: usize| c.saturating_sub(half_width)..(c + half_width + 1).min(total);
    let mut frames: Vec<usize> = window(pair.frame_i).chain(window(pair.frame_j)).collect();
    frames.sort_unstable();
    frames.dedup();
    frames
}

/// `S_{j,loop} ∘ S_{i,loop}⁻¹`: maps chunk `i`'s frame into chunk `j`'s
/// given the loop-centric chunk's alignment into each.
pub fn compose_loop_constraint(s_i_loop: &Sim3, s_j_loop: &Sim3) -> Sim3 {
    s_j_loop.compose(&s_i_loop.inverse())
}

/// The chunk containing `frame` that shares the most frames with the window
/// `[frame − half_width, frame + half_width]`; the earlier chunk on ties.
pub fn owning_chunk(ranges: &[ChunkRange], frame: usize, half_width: usize) -> Option<usize> {
    let lo = frame.saturating_sub(half_width);
    let hi = frame + half_width + 1;
    ranges
        .iter()
        .filter(|r| r.start <= frame && frame < r.end)
        .map(|r| (r.index, r.end.min(hi).saturating_sub(r.start.max(lo))))
        .fold(None, |best: Option<(usize, usize)>, (k, shared)| match best {
            Some((_, s)) if s >= shared => best,
            _ => Some((k, shared)),
        })
        .map(|(k, _)| k)
}

/// A loop edge between two sequence chunks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoopConstraint {
    pub pair: LoopPair,
    pub chunk_i: usize,
    pub chunk_j: usize,
    /// `S_ji`: chunk `i`'s frame into chunk `j`'s.
    #[serde(skip)]
    pub s_ji: Sim3,
    pub align_i: AlignDiagnostics,
    pub align_j: AlignDiagnostics,
}

impl LoopConstraint {
    /// Worst relative residual of the two bridging alignments.
    pub fn relative_residual(&self) -> f64 {
        self.align_i.relative_residual.max(self.align_j.relative_residual)
    }

    /// Measurement for a graph edge `chunk_i → chunk_j` (maps `j` into `i`).
    pub fn edge_measurement(&self) -> Sim3 {
        self.s_ji.inverse()
    }
}

/// Aligns the loop-centric chunk into both sequence chunks over their shared
/// frames and chains the two alignments.
pub fn build_loop_constraint(
    pair: LoopPair,
    loop_chunk: &ChunkPointMap,
    chunk_i: &ChunkPointMap,
    chunk_j: &ChunkPointMap,
    irls: &IrlsConfig,
    opts: &CorrespondenceOptions,
) -> Result<LoopConstraint> {
    let (s_i_loop, align_i) = align_pair(chunk_i, loop_chunk, irls, opts)?;
    let (s_j_loop, align_j) = align_pair(chunk_j, loop_chunk, irls, opts)?;
    Ok(LoopConstraint {
        pair,
        chunk_i: chunk_i.index,
        chunk_j: chunk_j.index,
        s_ji: compose_loop_constraint(&s_i_loop, &s_j_loop),
        align_i,
        align_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(i: usize, j: usize) -> LoopPair {
        LoopPair {
            frame_i: i,
            frame_j: j,
            similarity: 1.0,
        }
    }

    #[test]
    fn window_union_and_clamping() {
        assert_eq!(loop_chunk_frames(&pair(100, 500), 10, 1000).len(), 42);
        assert_eq!(loop_chunk_frames(&pair(100, 110), 10, 1000), (90..121).collect::<Vec<_>>());
        let f = loop_chunk_frames(&pair(0, 995), 10, 1000);
        assert_eq!(f.first(), Some(&0));
        assert_eq!(f.last(), Some(&999));
        assert_eq!(f.len(), 11 + 15);
    }

    #[test]
    fn override_file_parses() {
        let p = parse_loop_pairs("# pairs\n500 10\n3 400 # trailing\n\n").unwrap();
        assert_eq!((p[0].frame_i, p[0].frame_j), (10, 500));
        assert_eq!((p[1].frame_i, p[1].frame_j), (3, 400));
        assert!(parse_loop_pairs("1 2 3\n").is_err());
        assert!(parse_loop_pairs("4 4\n").is_err());
    }

    #[test]
    fn owning_chunk_prefers_larger_share() {
        let ranges = [
            ChunkRange { index: 0, start: 0, end: 75 },
            ChunkRange { index: 1, start: 60, end: 135 },
        ];
        assert_eq!(owning_chunk(&ranges, 70, 18), Some(1));
        assert_eq!(owning_chunk(&ranges, 62, 18), Some(0));
        assert_eq!(owning_chunk(&ranges, 10, 18), Some(0));
        assert_eq!(owning_chunk(&ranges, 200, 18), None);
    }

    #[test]
    fn vgld_rejects_unnormalized_rows() {
        assert!(DescriptorSet::new(2, vec![1.0, 1.0]).is_err());
        assert!(DescriptorSet::new(2, vec![0.6, 0.8, 1.0]).is_err());
        let d = DescriptorSet::new(2, vec![0.6, 0.8, 1.0, 0.0]).unwrap();
        let mut bytes = Vec::new();
        d.write_vgld(&mut bytes).unwrap();
        assert_eq!(DescriptorSet::read_vgld(&mut &bytes[..]).unwrap(), d);
    }
}
