//! Robust Sim(3) registration of corresponded point sets.
//!
//! [`weighted_umeyama`] is the closed-form weighted least-squares solve;
//! [`irls_align`] wraps it in an iteratively reweighted loop with a Huber
//! kernel whose per-pair weight is `confidence * rho'(r) / r`.

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::sim3::{Mat3, Sim3, Vec3};

/// Paired points: `target ≈ S · source`, each pair with a confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
    confidence: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        if source.len() != target.len() || source.len() != confidence.len() {
            return Err(Error::LengthMismatch(format!(
                "correspondences: {} source, {} target, {} confidence",
                source.len(),
                target.len(),
                confidence.len()
            )));
        }
        if let Some(c) = confidence.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig(format!("confidence must be finite and >= 0, got {c}")));
        }
        let finite = |p: &Vec3| p.iter().all(|x| x.is_finite());
        if !source.iter().all(finite) || !target.iter().all(finite) {
            return Err(Error::InvalidConfig("non-finite correspondence point".into()));
        }
        Ok(CorrespondenceSet {
            source,
            target,
            confidence,
        })
    }

    pub fn with_uniform_confidence(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        let n = source.len();
        Self::new(source, target, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Vec3] {
        &self.source
    }

    pub fn target(&self) -> &[Vec3] {
        &self.target
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// Same pairs with every confidence set to 1.
    pub fn with_unit_confidence(&self) -> Self {
        CorrespondenceSet {
            confidence: vec![1.0; self.len()],
            ..self.clone()
        }
    }

    /// Swaps the roles of source and target.
    pub fn reversed(&self) -> Self {
        CorrespondenceSet {
            source: self.target.clone(),
            target: self.source.clone(),
            confidence: self.confidence.clone(),
        }
    }

    /// Residual norms `‖target_i − S·source_i‖`.
    pub fn residuals(&self, s: &Sim3) -> Vec<f64> {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(p, q)| (q - s.transform_point(p)).norm())
            .collect()
    }
}

/// Whether the similarity fit may change scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    Estimate,
    Fixed,
}

/// Closed-form `argmin_S Σ wᵢ‖targetᵢ − S·sourceᵢ‖²` over slices.
///
/// Shared by [`weighted_umeyama`], trajectory alignment and ICP.
pub fn fit_similarity(source: &[Vec3], target: &[Vec3], weights: &[f64], scale_mode: ScaleMode) -> Result<Sim3> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "umeyama: {} source, {} target, {} weights",
            source.len(),
            target.len(),
            weights.len()
        )));
    }
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive < 3 {
        return Err(Error::InsufficientCorrespondences(format!(
            "{positive} strictly positive weights, need at least 3"
        )));
    }
    let total: f64 = weights.iter().sum();

    let mut mu_s = Vec3::zeros();
    let mut mu_t = Vec3::zeros();
    for ((p, q), w) in source.iter().zip(target).zip(weights) {
        mu_s += p * *w;
        mu_t += q * *w;
    }
    mu_s /= total;
    mu_t /= total;

    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for ((p, q), w) in source.iter().zip(target).zip(weights) {
        if *w == 0.0 {
            continue;
        }
        let ds = p - mu_s;
        let dt = q - mu_t;
        cov += (dt * ds.transpose()) * *w;
        var_s += *w * ds.norm_squared();
    }
    cov /= total;
    var_s /= total;

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD failed to converge".into())),
    };
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(var_s > 0.0) || !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::Degenerate(
            "rank-deficient cross-covariance (collinear or coincident points)".into(),
        ));
    }

    // Reflection fix on the direction of the smallest singular value.
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[sv.imin()] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    let scale = match scale_mode {
        ScaleMode::Estimate => sv.component_mul(&d).sum() / var_s,
        ScaleMode::Fixed => 1.0,
    };
    if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale estimate {scale}")));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Sim3::from_parts_unchecked(scale, rotation, translation))
}

/// Weighted Umeyama solve on a correspondence set.
pub fn weighted_umeyama(corr: &CorrespondenceSet, weights: &[f64]) -> Result<Sim3> {
    fit_similarity(&corr.source, &corr.target, weights, ScaleMode::Estimate)
}

/// How the Huber threshold is chosen at each iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HuberDelta {
    Fixed(f64),
    /// `factor × 1.4826 × MAD(residuals)`, floored at 1e-9.
    MadScaled(f64),
}

impl HuberDelta {
    fn resolve(&self, residuals: &[f64]) -> f64 {
        match *self {
            HuberDelta::Fixed(d) => d,
            HuberDelta::MadScaled(factor) => (factor * 1.4826 * mad(residuals)).max(1e-9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrlsConfig {
    pub max_iterations: usize,
    pub huber_delta: HuberDelta,
    /// Stop when the tangent norm of the change between iterates drops below this.
    pub convergence_tol: f64,
    pub min_points: usize,
    /// When false, always run `max_iterations` solves.
    pub stop_on_convergence: bool,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            max_iterations: 10,
            huber_delta: HuberDelta::MadScaled(1.345),
            convergence_tol: 1e-8,
            min_points: 3,
            stop_on_convergence: true,
        }
    }
}

impl IrlsConfig {
    /// Single confidence-weighted solve, no reweighting.
    pub fn single_pass() -> Self {
        IrlsConfig {
            max_iterations: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("IRLS max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("IRLS convergence_tol must be > 0".into()));
        }
        match self.huber_delta {
            HuberDelta::Fixed(d) if !(d > 0.0) => {
                Err(Error::InvalidConfig(format!("Huber delta must be > 0, got {d}")))
            }
            HuberDelta::MadScaled(f) if !(f > 0.0) => {
                Err(Error::InvalidConfig(format!("MAD factor must be > 0, got {f}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignResult {
    /// Maps the source frame into the target frame.
    pub transform: Sim3,
    /// `cᵢ · ρ'(rᵢ)/rᵢ` at the final residuals.
    pub final_weights: Vec<f64>,
    pub iterations_used: usize,
    /// `Σ ρ(rᵢ)` at the final transform.
    pub final_cost: f64,
    pub median_residual: f64,
    pub converged: bool,
}

/// `ρ'(r)/r` for the Huber loss.
#[inline]
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

#[inline]
pub fn huber_loss(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub(crate) fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Confidence-weighted IRLS with a Huber kernel.
pub fn irls_align(corr: &CorrespondenceSet, cfg: &IrlsConfig) -> Result<AlignResult> {
    cfg.validate()?;
    if corr.len() < cfg.min_points.max(3) {
        return Err(Error::InsufficientCorrespondences(format!(
            "{} pairs, need at least {}",
            corr.len(),
            cfg.min_points.max(3)
        )));
    }
    if corr.confidence.iter().all(|c| *c == 0.0) {
        return Err(Error::InsufficientCorrespondences("all confidences are zero".into()));
    }

    let mut weights = corr.confidence.clone();
    let mut previous: Option<Sim3> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut transform = Sim3::identity();
    let mut residuals = Vec::new();

    for it in 1..=cfg.max_iterations {
        transform = weighted_umeyama(corr, &weights)?;
        iterations = it;
        residuals = corr.residuals(&transform);
        let delta = cfg.huber_delta.resolve(&active_residuals(&residuals, &corr.confidence));
        weights = corr
            .confidence
            .iter()
            .zip(&residuals)
            .map(|(c, r)| c * huber_weight(*r, delta))
            .collect();

        if let Some(prev) = previous {
            let step = prev.inverse().compose(&transform).log().map(|x| x.norm());
            if matches!(step, Ok(n) if n < cfg.convergence_tol) {
                converged = true;
                if cfg.stop_on_convergence {
                    break;
                }
            }
        }
        previous = Some(transform);
    }

    let active = active_residuals(&residuals, &corr.confidence);
    let delta = cfg.huber_delta.resolve(&active);
    let final_cost = residuals.iter().map(|r| huber_loss(*r, delta)).sum();
    Ok(AlignResult {
        transform,
        final_weights: weights,
        iterations_used: iterations,
        final_cost,
        median_residual: median(&active),
        converged,
    })
}

fn active_residuals(residuals: &[f64], confidence: &[f64]) -> Vec<f64> {
    residuals
        .iter()
        .zip(confidence)
        .filter(|(_, c)| **c > 0.0)
        .map(|(r, _)| *r)
        .collect()
}

/// How the two per-pixel confidences of a pair are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConfidenceCombine {
    #[default]
    GeometricMean,
    Min,
}

impl ConfidenceCombine {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            ConfidenceCombine::GeometricMean => (a * b).sqrt(),
            ConfidenceCombine::Min => a.min(b),
        }
    }
}

/// Points with confidences plus the median confidence of the chunk they
/// came from (not necessarily the median of this subset).
#[derive(Clone, Copy, Debug)]
pub struct ConfidentPoints<'a> {
    pub points: &'a [Vec3],
    pub confidence: &'a [f64],
    pub chunk_median: f64,
}

impl<'a> ConfidentPoints<'a> {
    /// Uses the median of `confidence` itself as the chunk median.
    pub fn new(points: &'a [Vec3], confidence: &'a [f64]) -> Self {
        ConfidentPoints {
            points,
            confidence,
            chunk_median: median(confidence),
        }
    }

    pub fn with_chunk_median(points: &'a [Vec3], confidence: &'a [f64], chunk_median: f64) -> Self {
        ConfidentPoints {
            points,
            confidence,
            chunk_median,
        }
    }
}

/// Drops pairs where either confidence is below `median_factor × chunk median`.
///
/// `target` is the reference chunk (`a`), `source` the chunk being aligned
/// onto it (`b`).
pub fn confidence_gate(
    target: &ConfidentPoints<'_>,
    source: &ConfidentPoints<'_>,
    median_factor: f64,
    combine: ConfidenceCombine,
) -> Result<CorrespondenceSet> {
    let n = target.points.len();
    if source.points.len() != n || target.confidence.len() != n || source.confidence.len() != n {
        return Err(Error::LengthMismatch(format!(
            "gate: {} / {} points, {} / {} confidences",
            n,
            source.points.len(),
            target.confidence.len(),
            source.confidence.len()
        )));
    }
    if !(median_factor >= 0.0) {
        return Err(Error::InvalidConfig(format!("median factor must be >= 0, got {median_factor}")));
    }
    let thr_t = median_factor * target.chunk_median;
    let thr_s = median_factor * source.chunk_median;

    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut conf = Vec::new();
    for i in 0..n {
        let (ct, cs) = (target.confidence[i], source.confidence[i]);
        if ct < thr_t || cs < thr_s {
            continue;
        }
        src.push(source.points[i]);
        tgt.push(target.points[i]);
        conf.push(combine.combine(ct, cs));
    }
    if src.is_empty() {
        return Err(Error::InsufficientCorrespondences("no pairs survive the confidence gate".into()));
    }
    CorrespondenceSet::new(src, tgt, conf)
}
