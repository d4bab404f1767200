//! Similarity transforms in 3-D.
//!
//! A [`Sim3`] acts on a point as `scale * rotation * p + translation`.
//! Composition `a.compose(&b)` applies `b` first, then `a`.
//!
//! The tangent space is ordered `(upsilon, omega, lambda)`:
//!
//! * `upsilon`: 3 translational components,
//! * `omega`: 3 rotational components (axis-angle, radians),
//! * `lambda`: log of the scale.
//!
//! The exponential is `exp(xi) = (e^lambda, Rodrigues(omega), W(omega, lambda) * upsilon)`
//! where `W = integral_0^1 e^(lambda t) R(t omega) dt`. The pose-graph Jacobians
//! depend on this ordering.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// Below this magnitude of `omega` the SO(3) maps use their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Tolerance used when validating rotation matrices.
const ORTHO_TOL: f64 = 1e-9;

/// Rotation angles closer than this to pi have no unique logarithm.
const PI_MARGIN: f64 = 1e-9;

#[inline]
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Principal logarithm of a rotation matrix. Fails at angle pi.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    let v = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = v.norm();
    let cos_theta = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return Ok(v * (1.0 + theta * theta / 6.0));
    }
    if PI - theta < PI_MARGIN {
        return Err(Error::LogSingularity);
    }
    if theta < PI - 1e-3 {
        return Ok(v * (theta / sin_theta));
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + R^T)/2 = cos I + (1 - cos) a a^T.
    let sym = 0.5 * (r + r.transpose());
    let one_minus_cos = 1.0 - cos_theta;
    let diag = Vec3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let i = diag.imax();
    let mut axis = Vec3::zeros();
    axis[i] = ((diag[i] - cos_theta) / one_minus_cos).max(0.0).sqrt();
    for j in 0..3 {
        if j != i {
            axis[j] = sym[(i, j)] / (one_minus_cos * axis[i]);
        }
    }
    axis.normalize_mut();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Element of the similarity group Sim(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Sim3 {
    scale: f64,
    rotation: Mat3,
    translation: Vec3,
}

impl fmt::Debug for Sim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        write!(
            f,
            "Sim3 {{ s: {:.9}, q: [{:.9}, {:.9}, {:.9}, {:.9}], t: [{:.9}, {:.9}, {:.9}] }}",
            self.scale, q.i, q.j, q.k, q.w, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, checking the group invariants.
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidSim3(format!("scale must be positive, got {scale}")));
        }
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(ortho <= ORTHO_TOL) {
            return Err(Error::InvalidSim3(format!(
                "rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidSim3(format!("rotation determinant is {det}")));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidSim3("non-finite translation".into()));
        }
        Ok(Sim3 {
            scale,
            rotation,
            translation,
        })
    }

    /// Builds from a unit quaternion. Only I/O boundaries use quaternions.
    pub fn from_quaternion(scale: f64, rotation: &UnitQuaternion<f64>, translation: Vec3) -> Result<Self> {
        Self::new(scale, *rotation.to_rotation_matrix().matrix(), translation)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Sim3 {
            translation,
            ..Self::identity()
        }
    }

    pub fn from_scale(scale: f64) -> Self {
        assert!(scale > 0.0, "scale must be positive");
        Sim3 {
            scale,
            ..Self::identity()
        }
    }

    /// Rigid transform (scale 1) with the rotation given as axis-angle.
    pub fn from_axis_angle(omega: &Vec3, translation: Vec3) -> Self {
        Sim3 {
            scale: 1.0,
            rotation: so3_exp(omega),
            translation,
        }
    }

    pub(crate) fn from_parts_unchecked(scale: f64, rotation: Mat3, translation: Vec3) -> Self {
        Sim3 {
            scale,
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Sim3 {
            scale: inv_scale,
            rotation: rt,
            translation: -inv_scale * (rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn act(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.transform_point(p)).collect()
    }

    /// Integer power by repeated composition; negative powers use the inverse.
    pub fn powi(&self, n: i32) -> Sim3 {
        let base = if n < 0 { self.inverse() } else { *self };
        (0..n.unsigned_abs()).fold(Sim3::identity(), |acc, _| acc.compose(&base))
    }

    pub fn exp(xi: &Sim3Tangent) -> Sim3 {
        let rotation = so3_exp(&xi.omega);
        let w = w_matrix(&xi.omega, xi.lambda);
        Sim3 {
            scale: xi.lambda.exp(),
            rotation,
            translation: w * xi.upsilon,
        }
    }

    pub fn log(&self) -> Result<Sim3Tangent> {
        let omega = so3_log(&self.rotation)?;
        let lambda = self.scale.ln();
        let w = w_matrix(&omega, lambda);
        let upsilon = w
            .lu()
            .solve(&self.translation)
            .ok_or_else(|| Error::Degenerate("singular W matrix in Sim(3) log".into()))?;
        Ok(Sim3Tangent {
            upsilon,
            omega,
            lambda,
        })
    }

    /// Adjoint representation: `self ∘ exp(x) ∘ self⁻¹ = exp(Ad · x)`.
    pub fn adjoint(&self) -> Matrix7 {
        let sr = self.scale * self.rotation;
        let mut ad = Matrix7::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&sr);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.translation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad[(6, 6)] = 1.0;
        ad
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = (0.5 * (self.rotation.trace() - 1.0)).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Re-projects the rotation onto SO(3) to shed accumulated round-off.
    pub fn renormalized(&self) -> Sim3 {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Sim3 {
            rotation: *q.to_rotation_matrix().matrix(),
            ..*self
        }
    }

    /// Max-abs difference over scale, rotation entries and translation.
    pub fn max_abs_diff(&self, other: &Sim3) -> f64 {
        let ds = (self.scale - other.scale).abs();
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        ds.max(dr).max(dt)
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && self.rotation.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Mul for Sim3 {
    type Output = Sim3;
    fn mul(self, rhs: Sim3) -> Sim3 {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<Vec3> for &Sim3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.transform_point(&rhs)
    }
}

/// Element of the Lie algebra sim(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Sim3Tangent {
    pub upsilon: Vec3,
    pub omega: Vec3,
    pub lambda: f64,
}

impl Sim3Tangent {
    pub fn new(upsilon: Vec3, omega: Vec3, lambda: f64) -> Self {
        Sim3Tangent {
            upsilon,
            omega,
            lambda,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector7) -> Self {
        Sim3Tangent {
            upsilon: Vec3::new(v[0], v[1], v[2]),
            omega: Vec3::new(v[3], v[4], v[5]),
            lambda: v[6],
        }
    }

    pub fn to_vector(&self) -> Vector7 {
        let u = &self.upsilon;
        let w = &self.omega;
        Vector7::from([u.x, u.y, u.z, w.x, w.y, w.z, self.lambda])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Matrix of the Lie bracket `[self, ·]`.
    pub fn ad(&self) -> Matrix7 {
        let mut m = Matrix7::zeros();
        let w = hat(&self.omega);
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(w + Mat3::identity() * self.lambda));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&self.upsilon));
        m.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.upsilon));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
        m
    }
}

impl std::ops::Add for Sim3Tangent {
    type Output = Sim3Tangent;
    fn add(self, o: Sim3Tangent) -> Sim3Tangent {
        Sim3Tangent::new(self.upsilon + o.upsilon, self.omega + o.omega, self.lambda + o.lambda)
    }
}

impl std::ops::Mul<f64> for Sim3Tangent {
    type Output = Sim3Tangent;
    fn mul(self, k: f64) -> Sim3Tangent {
        Sim3Tangent::new(self.upsilon * k, self.omega * k, self.lambda * k)
    }
}

/// Right Jacobian of the exponential: `exp(x + d) ≈ exp(x) ∘ exp(Jr(x) d)`.
pub fn right_jacobian(xi: &Sim3Tangent) -> Matrix7 {
    phi_series(&(-xi.ad()))
}

/// Left Jacobian of the exponential: `exp(x + d) ≈ exp(Jl(x) d) ∘ exp(x)`.
pub fn left_jacobian(xi: &Sim3Tangent) -> Matrix7 {
    phi_series(&xi.ad())
}

pub fn right_jacobian_inv(xi: &Sim3Tangent) -> Result<Matrix7> {
    right_jacobian(xi)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular Sim(3) right Jacobian".into()))
}

/// `sum_k M^k / (k+1)!`, summed until the terms vanish. Entire, so it
/// converges for any argument; in practice |M| stays below ~4.
fn phi_series(m: &Matrix7) -> Matrix7 {
    let mut sum = Matrix7::identity();
    let mut term = Matrix7::identity();
    for k in 1..200 {
        term = term * m / (k as f64 + 1.0);
        sum += term;
        if term.abs().max() < 1e-18 * sum.abs().max() {
            break;
        }
    }
    sum
}

/// `integral_0^1 t^n e^(sigma t) dt` via its power series.
///
/// Terms are positive for sigma >= 0; for negative sigma the alternating
/// sum loses about log10(e^|sigma|) digits, which is harmless for the
/// scale ranges seen in practice.
fn exp_moment(n: u32, sigma: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0; // sigma^k / k!
    let n = n as f64;
    for k in 0..400 {
        let kf = k as f64;
        let contrib = term / (n + kf + 1.0);
        sum += contrib;
        if kf > sigma.abs() && contrib.abs() <= 1e-18 * sum.abs() {
            break;
        }
        term *= sigma / (kf + 1.0);
    }
    sum
}

/// Coefficients `(a, b, c)` of `W = a Ω + b Ω² + c I`.
fn w_coefficients(theta: f64, sigma: f64) -> (f64, f64, f64) {
    let c = if sigma.abs() < SMALL_ANGLE {
        1.0 + sigma / 2.0 + sigma * sigma / 6.0
    } else {
        sigma.exp_m1() / sigma
    };

    if theta < 1.0 {
        // sin(θt)/θ and (1 - cos θt)/θ² expanded in θ², integrated termwise
        // against e^(σt). Stable for small θ and any σ.
        let t2 = theta * theta;
        let mut a = 0.0;
        let mut b = 0.0;
        let mut pow = 1.0; // (-θ²)^m
        let mut fact_odd = 1.0; // (2m+1)!
        let mut fact_even = 2.0; // (2m+2)!
        for m in 0..12u32 {
            a += pow / fact_odd * exp_moment(2 * m + 1, sigma);
            b += pow / fact_even * exp_moment(2 * m + 2, sigma);
            pow *= -t2;
            let k = 2.0 * m as f64;
            fact_odd *= (k + 2.0) * (k + 3.0);
            fact_even *= (k + 3.0) * (k + 4.0);
        }
        return (a, b, c);
    }

    // Closed form from f(z) = (e^z - 1)/z with z = σ + iθ:
    // a = Im f / θ, b = (c - Re f) / θ².
    let (s, co) = theta.sin_cos();
    let half = (0.5 * theta).sin();
    let num_re = sigma.exp_m1() * co - 2.0 * half * half;
    let num_im = sigma.exp() * s;
    let denom = sigma * sigma + theta * theta;
    let f_re = (num_re * sigma + num_im * theta) / denom;
    let f_im = (num_im * sigma - num_re * theta) / denom;
    (f_im / theta, (c - f_re) / (theta * theta), c)
}

/// `W(ω, σ) = ∫₀¹ e^(σt) exp(t ω^) dt`, mapping upsilon to translation.
pub fn w_matrix(omega: &Vec3, sigma: f64) -> Mat3 {
    let theta = omega.norm();
    let (a, b, c) = w_coefficients(theta, sigma);
    let k = hat(omega);
    Mat3::identity() * c + k * a + k * k * b
}
