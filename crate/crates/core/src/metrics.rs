//! Trajectory error and point-cloud accuracy / completeness / Chamfer.

use std::collections::HashMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::align::{fit_similarity, ScaleMode};
use crate::error::{Error, Result};
use crate::sim3::{Sim3, Vec3};
use crate::trajectory::Trajectory;

/// Transformation group used to align an estimate before measuring error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    #[default]
    Sim3,
    Se3,
    None,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim3" => Ok(AlignMode::Sim3),
            "se3" => Ok(AlignMode::Se3),
            "none" => Ok(AlignMode::None),
            _ => Err(Error::InvalidConfig(format!("unknown alignment {s:?} (sim3, se3, none)"))),
        }
    }
}

/// Transform taking `estimated` positions onto `reference` under `mode`.
pub fn align_positions(estimated: &[Vec3], reference: &[Vec3], mode: AlignMode) -> Result<Sim3> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(format!(
            "{} estimated vs {} reference positions",
            estimated.len(),
            reference.len()
        )));
    }
    let w = vec![1.0; estimated.len()];
    match mode {
        AlignMode::Sim3 => fit_similarity(estimated, reference, &w, ScaleMode::Estimate),
        AlignMode::Se3 => fit_similarity(estimated, reference, &w, ScaleMode::Fixed),
        AlignMode::None => Ok(Sim3::identity()),
    }
}

/// RMSE of camera-center residuals after alignment.
pub fn ate_rmse(estimated: &Trajectory, reference: &Trajectory, mode: AlignMode) -> Result<f64> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(format!(
            "trajectories have {} and {} poses",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::Empty("ATE needs at least two poses".into()));
    }
    let (e, r) = (estimated.positions(), reference.positions());
    let s = align_positions(&e, &r, mode)?;
    let sq: f64 = e.iter().zip(&r).map(|(p, q)| (s.transform_point(p) - q).norm_squared()).sum();
    Ok((sq / e.len() as f64).sqrt())
}

/// Uniform voxel hash over a fixed point set for nearest-neighbor queries.
pub struct VoxelGrid {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl VoxelGrid {
    pub fn new(points: Vec<Vec3>, cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("nearest-neighbor index over no points".into()));
        }
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::InvalidConfig(format!("voxel size must be positive, got {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let key = key_of(p, cell);
            for d in 0..3 {
                lo[d] = lo[d].min(key[d]);
                hi[d] = hi[d].max(key[d]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Ok(VoxelGrid {
            cell,
            points,
            cells,
            lo,
            hi,
        })
    }

    /// Voxel size of twice the typical spacing of a surface sampled by the points.
    pub fn auto_cell(points: &[Vec3]) -> f64 {
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm();
        let spacing = diag / (points.len() as f64).sqrt();
        if spacing > 0.0 && spacing.is_finite() {
            2.0 * spacing
        } else {
            1.0
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index of and distance to the closest indexed point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = key_of(q, self.cell);
        let reach = (0..3)
            .map(|d| (c[d] - self.lo[d]).abs().max((c[d] - self.hi[d]).abs()))
            .max()
            .unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for r in 0..=reach {
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = dx.abs() == r || dy.abs() == r;
                    let dzs: Box<dyn Iterator<Item = i64>> = if edge {
                        Box::new(-r..=r)
                    } else {
                        Box::new([-r, r].into_iter())
                    };
                    for dz in dzs {
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                let d = (self.points[i as usize] - q).norm_squared();
                                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                                    best = (i as usize, d);
                                }
                            }
                        }
                    }
                    if r == 0 {
                        break;
                    }
                }
            }
            // Anything in ring r+1 or beyond is at least r cells away.
            let bound = r as f64 * self.cell;
            if best.1 <= bound * bound {
                break;
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn nearest_distances(&self, queries: &[Vec3]) -> Vec<f64> {
        queries.par_iter().map(|q| self.nearest(q).1).collect()
    }
}

fn key_of(p: &Vec3, cell: f64) -> [i64; 3] {
    [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once an iteration moves the cloud by less than this (tangent norm).
    pub motion_tol: f64,
    /// Voxel size for the reference index; derived from the data when `None`.
    pub cell: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 20,
            motion_tol: 1e-9,
            cell: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    /// Mean squared pairing distance at the start of each ICP iteration, then
    /// after the last update.
    pub icp_costs: Vec<f64>,
    #[serde(skip)]
    pub alignment: Sim3,
}

/// Rigid point-to-point ICP of `predicted` onto the indexed reference.
/// Returns the accumulated transform and the cost history.
pub fn icp(predicted: &[Vec3], reference: &VoxelGrid, cfg: &IcpConfig) -> Result<(Sim3, Vec<f64>)> {
    if predicted.is_empty() {
        return Err(Error::Empty("predicted cloud".into()));
    }
    let weights = vec![1.0; predicted.len()];
    let mut total = Sim3::identity();
    let mut moved = predicted.to_vec();
    let mut costs = Vec::new();
    let pair = |moved: &[Vec3]| -> (Vec<Vec3>, f64) {
        let nn: Vec<(usize, f64)> = moved.par_iter().map(|q| reference.nearest(q)).collect();
        let cost = nn.iter().map(|(_, d)| d * d).sum::<f64>() / nn.len() as f64;
        (nn.iter().map(|(i, _)| reference.points()[*i]).collect(), cost)
    };
    for _ in 0..cfg.max_iterations {
        let (targets, cost) = pair(&moved);
        costs.push(cost);
        let step = match fit_similarity(&moved, &targets, &weights, ScaleMode::Fixed) {
            Ok(s) => s,
            // Too few distinct pairs to pin a rotation: nothing more to refine.
            Err(Error::Degenerate(_)) | Err(Error::InsufficientCorrespondences(_)) => break,
            Err(e) => return Err(e),
        };
        total = step.compose(&total);
        moved = total.act(predicted);
        let motion = step.log().map(|t| t.norm()).unwrap_or(f64::INFINITY);
        if motion < cfg.motion_tol {
            break;
        }
    }
    costs.push(pair(&moved).1);
    Ok((total, costs))
}

/// ICP-refines `predicted` onto `reference`, then measures directed mean
/// nearest-neighbor distances both ways.
pub fn cloud_metrics(predicted: &[Vec3], reference: &[Vec3], cfg: &IcpConfig) -> Result<CloudMetrics> {
    if predicted.is_empty() || reference.is_empty() {
        return Err(Error::Empty("cloud metrics need two non-empty clouds".into()));
    }
    let cell = cfg.cell.unwrap_or_else(|| VoxelGrid::auto_cell(reference));
    let ref_index = VoxelGrid::new(reference.to_vec(), cell)?;
    let (alignment, icp_costs) = icp(predicted, &ref_index, cfg)?;
    let moved = alignment.act(predicted);
    let accuracy = mean(&ref_index.nearest_distances(&moved));
    let pred_index = VoxelGrid::new(moved, cfg.cell.unwrap_or_else(|| VoxelGrid::auto_cell(predicted)))?;
    let completeness = mean(&pred_index.nearest_distances(reference));
    Ok(CloudMetrics {
        accuracy,
        completeness,
        chamfer: 0.5 * (accuracy + completeness),
        icp_costs,
        alignment,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn voxel_nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..0.5)))
            .collect();
        let grid = VoxelGrid::new(pts.clone(), 0.7).unwrap();
        for _ in 0..200 {
            let q = Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0));
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest(&q).1, brute);
        }
    }

    #[test]
    fn align_mode_parses() {
        assert_eq!("se3".parse::<AlignMode>().unwrap(), AlignMode::Se3);
        assert!("affine".parse::<AlignMode>().is_err());
    }
}
