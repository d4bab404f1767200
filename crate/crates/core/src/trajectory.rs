//! Per-frame camera poses and their TUM / KITTI text encodings.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim3::{Sim3, Vec3};

const QUATERNION_TOL: f64 = 1e-6;

/// Camera-to-world rigid pose: `translation` is the camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(translation: Vec3, rotation: UnitQuaternion<f64>) -> Self {
        Pose { translation, rotation }
    }

    pub fn identity() -> Self {
        Pose::new(Vec3::zeros(), UnitQuaternion::identity())
    }

    /// Accepts `[qx, qy, qz, qw]` if it is unit length within `tol`; the
    /// components are kept as given.
    pub fn from_parts(translation: Vec3, q: [f64; 4], tol: f64) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > tol {
            return Err(Error::format("pose", format!("quaternion norm {norm} is not 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::format("pose", "non-finite translation"));
        }
        Ok(Pose::new(translation, UnitQuaternion::new_unchecked(quat)))
    }

    /// Maps a chunk-local pose into the frame `s` maps into: the rotation is
    /// composed with `s`'s rotation and the center goes through all of `s`.
    pub fn transformed_by(&self, s: &Sim3) -> Pose {
        let r = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*s.rotation()));
        Pose::new(s.transform_point(&self.translation), r * self.rotation)
    }

    fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }
}

/// Frame-indexed poses with their timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::LengthMismatch(format!(
                "trajectory: {} timestamps, {} poses",
                timestamps.len(),
                poses.len()
            )));
        }
        Ok(Trajectory { timestamps, poses })
    }

    /// Timestamps are the frame indices.
    pub fn from_poses(poses: Vec<Pose>) -> Self {
        let timestamps = (0..poses.len()).map(|i| i as f64).collect();
        Trajectory { timestamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// `timestamp tx ty tz qx qy qz qw`, shortest round-trip float formatting.
    pub fn to_tum(&self) -> String {
        let mut out = String::new();
        for (t, p) in self.timestamps.iter().zip(&self.poses) {
            let q = p.quaternion_xyzw();
            let v = &p.translation;
            writeln!(out, "{} {} {} {} {} {} {} {}", t, v.x, v.y, v.z, q[0], q[1], q[2], q[3]).unwrap();
        }
        out
    }

    pub fn from_tum(text: &str) -> Result<Self> {
        let mut timestamps = Vec::new();
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v = parse_numbers(line, 8, "tum", n + 1)?;
            timestamps.push(v[0]);
            let pose = Pose::from_parts(Vec3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]], QUATERNION_TOL)
                .map_err(|e| Error::format("tum", format!("line {}: {e}", n + 1)))?;
            poses.push(pose);
        }
        Ok(Trajectory { timestamps, poses })
    }

    /// Twelve numbers per line: the top 3×4 block of the pose matrix, row-major.
    pub fn to_kitti(&self) -> String {
        let mut out = String::new();
        for p in &self.poses {
            let r = p.rotation.to_rotation_matrix();
            let m = r.matrix();
            let t = &p.translation;
            let fields: Vec<String> = (0..3)
                .flat_map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], t[i]])
                .map(|x| format!("{x:e}"))
                .collect();
            writeln!(out, "{}", fields.join(" ")).unwrap();
        }
        out
    }

    /// Frame indices become the timestamps. Rotation blocks are projected
    /// onto the nearest rotation.
    pub fn from_kitti(text: &str) -> Result<Self> {
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v = parse_numbers(line, 12, "kitti", n + 1)?;
            let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
            if !(orth < 1e-3) {
                return Err(Error::format("kitti", format!("line {}: rotation block is not orthonormal", n + 1)));
            }
            let r = nearest_rotation(&m)
                .ok_or_else(|| Error::format("kitti", format!("line {}: reflection in rotation block", n + 1)))?;
            poses.push(Pose::new(Vec3::new(v[3], v[7], v[11]), UnitQuaternion::from_rotation_matrix(&r)));
        }
        Ok(Trajectory::from_poses(poses))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fields = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'))
            .map_or(0, |l| l.split_whitespace().count());
        if fields == 12 {
            Trajectory::from_kitti(&text)
        } else {
            Trajectory::from_tum(&text)
        }
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum()).map_err(|e| Error::io(path, e))
    }
}

fn nearest_rotation(m: &Matrix3<f64>) -> Option<Rotation3<f64>> {
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    (r.determinant() > 0.0).then(|| Rotation3::from_matrix_unchecked(r))
}

fn parse_numbers(line: &str, expected: usize, kind: &'static str, line_no: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|f| f.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(kind, format!("line {line_no}: {e}")))?;
    if v.len() != expected {
        return Err(Error::format(
            kind,
            format!("line {line_no}: expected {expected} fields, found {}", v.len()),
        ));
    }
    Ok(v)
}
