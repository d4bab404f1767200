//! Sim(3) pose graph over chunk transforms and its Levenberg–Marquardt solver.
//!
//! Nodes are chunk-to-world transforms `S_k`. An edge `from → to` carries a
//! measurement `M ≈ S_from⁻¹ ∘ S_to` (it maps the `to` chunk's frame into the
//! `from` chunk's frame) and contributes the residual
//! `log(M⁻¹ ∘ S_from⁻¹ ∘ S_to)`. States are perturbed on the right,
//! `S ← S ∘ exp(δ)`, and node 0 is held fixed as the gauge anchor.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::sim3::{right_jacobian_inv, Matrix7, Sim3, Sim3Tangent, Vec3, Vector7};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Sequential,
    Loop,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Sequential => "sequential",
            EdgeKind::Loop => "loop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub measurement: Sim3,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn sequential(from: usize, measurement: Sim3) -> Self {
        Edge {
            from,
            to: from + 1,
            measurement,
            kind: EdgeKind::Sequential,
        }
    }

    pub fn looped(from: usize, to: usize, measurement: Sim3) -> Self {
        Edge {
            from,
            to,
            measurement,
            kind: EdgeKind::Loop,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<Sim3>,
    edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new(nodes: Vec<Sim3>, edges: Vec<Edge>) -> Result<Self> {
        let graph = PoseGraph { nodes, edges };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let k = self.nodes.len();
        if k == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut seq_seen = vec![false; k];
        for e in &self.edges {
            if e.from >= k || e.to >= k {
                return Err(Error::Graph(format!("edge {} -> {} out of range ({k} nodes)", e.from, e.to)));
            }
            if e.from == e.to {
                return Err(Error::Graph(format!("self-loop on node {}", e.from)));
            }
            if e.kind == EdgeKind::Sequential {
                if e.to != e.from + 1 {
                    return Err(Error::Graph(format!(
                        "sequential edge {} -> {} does not join consecutive nodes",
                        e.from, e.to
                    )));
                }
                if std::mem::replace(&mut seq_seen[e.from], true) {
                    return Err(Error::Graph(format!("duplicate sequential edge {} -> {}", e.from, e.to)));
                }
            }
        }
        if !self.is_connected() {
            return Err(Error::Graph("graph is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let k = self.nodes.len();
        let mut adj = vec![Vec::new(); k];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn nodes(&self) -> &[Sim3] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn loop_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop).count()
    }

    /// Copy of the graph without loop edges.
    pub fn without_loops(&self) -> Result<PoseGraph> {
        PoseGraph::new(
            self.nodes.clone(),
            self.edges.iter().copied().filter(|e| e.kind == EdgeKind::Sequential).collect(),
        )
    }

    /// Replaces the node states, keeping edges.
    pub fn with_nodes(&self, nodes: Vec<Sim3>) -> Result<PoseGraph> {
        if nodes.len() != self.nodes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} node states for a {}-node graph",
                nodes.len(),
                self.nodes.len()
            )));
        }
        Ok(PoseGraph {
            nodes,
            edges: self.edges.clone(),
        })
    }

    /// The same problem with node `k`'s local frame moved by `frames[k]`:
    /// states become `N_k ∘ F_k` and measurements `F_from⁻¹ ∘ M ∘ F_to`.
    /// Residuals change by `Ad(F_to⁻¹)`, so this picks the metric the
    /// optimizer works in; frames centered on each node's content keep
    /// rotation and translation errors on comparable footing.
    pub fn reframed(&self, frames: &[Sim3]) -> Result<PoseGraph> {
        if frames.len() != self.nodes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} frames for a {}-node graph",
                frames.len(),
                self.nodes.len()
            )));
        }
        let nodes = self.nodes.iter().zip(frames).map(|(n, f)| n.compose(f)).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                measurement: frames[e.from].inverse().compose(&e.measurement).compose(&frames[e.to]),
                ..*e
            })
            .collect();
        Ok(PoseGraph { nodes, edges })
    }

    pub fn total_cost(&self) -> Result<f64> {
        total_cost(&self.nodes, &self.edges)
    }
}

/// `log(M⁻¹ ∘ S_from⁻¹ ∘ S_to)`.
pub fn edge_residual(nodes: &[Sim3], edge: &Edge) -> Result<Vector7> {
    relative_residual(&nodes[edge.from], &nodes[edge.to], &edge.measurement).map_err(|e| Error::EdgeResidual {
        from: edge.from,
        to: edge.to,
        source: Box::new(e),
    })
}

fn relative_residual(s_from: &Sim3, s_to: &Sim3, measurement: &Sim3) -> Result<Vector7> {
    let err = measurement.inverse().compose(&s_from.inverse()).compose(s_to);
    Ok(err.log()?.to_vector())
}

pub fn total_cost(nodes: &[Sim3], edges: &[Edge]) -> Result<f64> {
    edges
        .iter()
        .map(|e| edge_residual(nodes, e).map(|r| r.norm_squared()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    Numeric,
    Analytic,
}

/// Residual Jacobians with respect to right perturbations of the two endpoints.
pub fn edge_jacobians(nodes: &[Sim3], edge: &Edge, mode: JacobianMode) -> Result<(Matrix7, Matrix7)> {
    let wrap = |e: Error| Error::EdgeResidual {
        from: edge.from,
        to: edge.to,
        source: Box::new(e),
    };
    let s_from = &nodes[edge.from];
    let s_to = &nodes[edge.to];
    match mode {
        JacobianMode::Numeric => {
            const H: f64 = 1e-6;
            let mut j_from = Matrix7::zeros();
            let mut j_to = Matrix7::zeros();
            for k in 0..7 {
                let mut d = Vector7::zeros();
                d[k] = H;
                let plus = Sim3::exp(&Sim3Tangent::from_vector(&d));
                let minus = Sim3::exp(&Sim3Tangent::from_vector(&(-d)));
                let rp = relative_residual(&s_from.compose(&plus), s_to, &edge.measurement).map_err(wrap)?;
                let rm = relative_residual(&s_from.compose(&minus), s_to, &edge.measurement).map_err(wrap)?;
                j_from.set_column(k, &((rp - rm) / (2.0 * H)));
                let rp = relative_residual(s_from, &s_to.compose(&plus), &edge.measurement).map_err(wrap)?;
                let rm = relative_residual(s_from, &s_to.compose(&minus), &edge.measurement).map_err(wrap)?;
                j_to.set_column(k, &((rp - rm) / (2.0 * H)));
            }
            Ok((j_from, j_to))
        }
        JacobianMode::Analytic => {
            let r = relative_residual(s_from, s_to, &edge.measurement).map_err(wrap)?;
            let jr_inv = right_jacobian_inv(&Sim3Tangent::from_vector(&r)).map_err(wrap)?;
            let j_from = -jr_inv * s_to.inverse().compose(s_from).adjoint();
            Ok((j_from, jr_inv))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Added to every diagonal entry of the normal matrix. Long circuits
    /// have bending modes with eigenvalues near 1e-8, so anything much
    /// larger stalls the solver on them.
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Relative cost decrease below which the solver stops.
    pub cost_tol: f64,
    /// Step norm below which the solver stops.
    pub step_tol: f64,
    pub jacobian_mode: JacobianMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 50,
            initial_damping: 1e-12,
            damping_up: 10.0,
            damping_down: 2.0,
            cost_tol: 1e-10,
            step_tol: 1e-10,
            jacobian_mode: JacobianMode::Numeric,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.initial_damping, self.cost_tol, self.step_tol];
        if self.max_iterations == 0 || positive.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidConfig("LM iterations, damping and tolerances must be positive".into()));
        }
        if !(self.damping_up > 1.0 && self.damping_down > 1.0) {
            return Err(Error::InvalidConfig("LM damping factors must exceed 1".into()));
        }
        Ok(())
    }
}

/// Rejections in a row after which the damping is considered saturated.
const MAX_CONSECUTIVE_REJECTIONS: usize = 12;
/// Cholesky failures (with damping raised each time) before giving up.
const MAX_SOLVE_FAILURES: usize = 20;

/// Cost attributable to rounding alone: a few ulps of the largest
/// measured translation per residual component.
fn cost_floor(edges: &[Edge]) -> f64 {
    let extent = edges
        .iter()
        .map(|e| e.measurement.translation().norm())
        .fold(1.0, f64::max);
    let per_component = 64.0 * f64::EPSILON * extent;
    7.0 * edges.len() as f64 * per_component * per_component
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmIteration {
    pub iteration: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    pub accepted: bool,
    pub damping: f64,
    pub step_norm: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroCost,
    CostTolerance,
    StepTolerance,
    MaxIterations,
    DampingSaturated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
    pub iterations: Vec<LmIteration>,
    pub stop_reason: StopReason,
}

impl LmReport {
    /// Costs after each accepted step.
    pub fn accepted_costs(&self) -> Vec<f64> {
        self.iterations.iter().filter(|i| i.accepted).map(|i| i.cost_after).collect()
    }

    pub fn mean_iteration_ms(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().map(|i| i.elapsed_ms).sum::<f64>() / self.iterations.len() as f64
    }
}

/// Damped normal equations `(JᵀJ + μI) δ = −Jᵀr` over all non-anchor nodes.
fn normal_equations(nodes: &[Sim3], edges: &[Edge], mode: JacobianMode) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = 7 * (nodes.len() - 1);
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut g = DVector::<f64>::zeros(dim);
    let linearized: Vec<(Vector7, Matrix7, Matrix7)> = edges
        .par_iter()
        .map(|e| {
            let (ja, jb) = edge_jacobians(nodes, e, mode)?;
            Ok((edge_residual(nodes, e)?, ja, jb))
        })
        .collect::<Result<_>>()?;
    for (e, (r, ja, jb)) in edges.iter().zip(&linearized) {
        let blocks: [(usize, &Matrix7); 2] = [(e.from, ja), (e.to, jb)];
        for &(n, j) in &blocks {
            if n == 0 {
                continue;
            }
            let row = 7 * (n - 1);
            let jt = j.transpose();
            let mut gv = g.fixed_rows_mut::<7>(row);
            gv += jt * r;
            for &(m, jm) in &blocks {
                if m == 0 {
                    continue;
                }
                let col = 7 * (m - 1);
                let mut hb = h.fixed_view_mut::<7, 7>(row, col);
                hb += jt * jm;
            }
        }
    }
    Ok((h, g))
}

/// Minimizes the sum of squared edge residuals with node 0 fixed.
pub fn optimize(graph: &PoseGraph, cfg: &LmConfig) -> Result<(PoseGraph, LmReport)> {
    cfg.validate()?;
    graph.validate()?;
    let mut nodes = graph.nodes.clone();
    let edges = &graph.edges;
    let mut cost = total_cost(&nodes, edges)?;
    let floor = cost_floor(edges);
    let initial_cost = cost;
    let mut damping = cfg.initial_damping;
    let mut iterations = Vec::new();
    let mut accepted_steps = 0;
    let mut rejections = 0;

    if nodes.len() == 1 || cost <= floor {
        let report = LmReport {
            initial_cost,
            final_cost: cost,
            accepted_steps: 0,
            iterations,
            stop_reason: StopReason::ZeroCost,
        };
        return Ok((graph.clone(), report));
    }

    let mut stop_reason = StopReason::MaxIterations;
    let mut linearization: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for iteration in 1..=cfg.max_iterations {
        let started = Instant::now();
        if linearization.is_none() {
            linearization = Some(normal_equations(&nodes, edges, cfg.jacobian_mode)?);
        }
        let (h, g) = linearization.as_ref().expect("linearized above");

        let mut failures = 0;
        let step = loop {
            let mut damped = h.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += damping;
            }
            match damped.cholesky() {
                Some(chol) => break chol.solve(&(-g)),
                None => {
                    failures += 1;
                    if failures > MAX_SOLVE_FAILURES {
                        return Err(Error::Graph(format!(
                            "normal equations remain singular after {failures} damping increases (damping {damping:e}, cost {cost:e})"
                        )));
                    }
                    damping *= cfg.damping_up;
                }
            }
        };

        // Decrease promised by the local quadratic model; once it is
        // negligible the optimum has been reached to working precision.
        let predicted = -(2.0 * step.dot(g) + step.dot(&(h * &step)));
        if predicted <= cfg.cost_tol * cost {
            stop_reason = StopReason::CostTolerance;
            break;
        }

        let candidate: Vec<Sim3> = nodes
            .iter()
            .enumerate()
            .map(|(n, s)| {
                if n == 0 {
                    *s
                } else {
                    let d = step.fixed_rows::<7>(7 * (n - 1)).into_owned();
                    s.compose(&Sim3::exp(&Sim3Tangent::from_vector(&d)))
                }
            })
            .collect();
        let step_norm = step.norm();
        let new_cost = total_cost(&candidate, edges).unwrap_or(f64::INFINITY);
        let accepted = new_cost < cost;
        iterations.push(LmIteration {
            iteration,
            cost_before: cost,
            cost_after: if accepted { new_cost } else { cost },
            accepted,
            damping,
            step_norm,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if accepted {
            let decrease = (cost - new_cost) / cost;
            nodes = candidate;
            cost = new_cost;
            accepted_steps += 1;
            rejections = 0;
            damping = (damping / cfg.damping_down).max(1e-15);
            linearization = None;
            if cost <= floor {
                stop_reason = StopReason::ZeroCost;
                break;
            }
            if decrease < cfg.cost_tol {
                stop_reason = StopReason::CostTolerance;
                break;
            }
            if step_norm < cfg.step_tol {
                stop_reason = StopReason::StepTolerance;
                break;
            }
        } else {
            rejections += 1;
            damping *= cfg.damping_up;
            if step_norm < cfg.step_tol {
                stop_reason = StopReason::StepTolerance;
                break;
            }
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                stop_reason = StopReason::DampingSaturated;
                break;
            }
        }
    }

    let report = LmReport {
        initial_cost,
        final_cost: cost,
        accepted_steps,
        iterations,
        stop_reason,
    };
    Ok((PoseGraph { nodes, edges: edges.clone() }, report))
}

/// Replaces chunk world transforms by the optimized node states.
pub fn apply_correction(optimized: &PoseGraph, world: &[Sim3]) -> Result<Vec<Sim3>> {
    if world.len() != optimized.nodes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} world transforms for a {}-node graph",
            world.len(),
            optimized.nodes.len()
        )));
    }
    Ok(optimized.nodes.clone())
}

fn quaternion_parts(s: &Sim3) -> [f64; 4] {
    let q = s.quaternion();
    let c = q.coords;
    // Canonical hemisphere so that dumps are stable.
    let sign = if c.w < 0.0 { -1.0 } else { 1.0 };
    [c.x * sign, c.y * sign, c.z * sign, c.w * sign]
}

fn write_sim3_fields(out: &mut String, s: &Sim3) {
    let t = s.translation();
    let q = quaternion_parts(s);
    let _ = write!(
        out,
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t.x, t.y, t.z, q[0], q[1], q[2], q[3], s.scale()
    );
}

/// g2o-style text dump. Node ids are 1-based chunk indices.
pub fn write_g2o(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        let _ = write!(out, "VERTEX_SIM3 {} ", i + 1);
        write_sim3_fields(&mut out, n);
        out.push('\n');
    }
    for e in &graph.edges {
        let _ = write!(out, "EDGE_SIM3 {} {} ", e.from + 1, e.to + 1);
        write_sim3_fields(&mut out, &e.measurement);
        let _ = writeln!(out, " {}", e.kind.as_str());
    }
    out
}

fn parse_sim3_fields(fields: &[&str], line_no: usize) -> Result<Sim3> {
    let v: Vec<f64> = fields
        .iter()
        .map(|f| f.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("g2o", format!("line {line_no}: {e}")))?;
    let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::format("g2o", format!("line {line_no}: quaternion norm {n}")));
    }
    let uq = nalgebra::UnitQuaternion::from_quaternion(q);
    Sim3::from_quaternion(v[7], &uq, Vec3::new(v[0], v[1], v[2]))
        .map_err(|e| Error::format("g2o", format!("line {line_no}: {e}")))
}

/// Parses the g2o-style dump written by [`write_g2o`].
pub fn read_g2o(text: &str) -> Result<PoseGraph> {
    let mut vertices: Vec<(usize, Sim3)> = Vec::new();
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first().copied() {
            None => continue,
            Some(tag) if tag.starts_with('#') => continue,
            Some("VERTEX_SIM3") => {
                if fields.len() != 10 {
                    return Err(Error::format("g2o", format!("line {line_no}: expected 10 fields")));
                }
                let id = parse_id(fields[1], line_no)?;
                vertices.push((id, parse_sim3_fields(&fields[2..10], line_no)?));
            }
            Some("EDGE_SIM3") => {
                if fields.len() != 12 {
                    return Err(Error::format("g2o", format!("line {line_no}: expected 12 fields")));
                }
                let from = parse_id(fields[1], line_no)?;
                let to = parse_id(fields[2], line_no)?;
                let measurement = parse_sim3_fields(&fields[3..11], line_no)?;
                let kind = match fields[11] {
                    "sequential" => EdgeKind::Sequential,
                    "loop" => EdgeKind::Loop,
                    other => return Err(Error::format("g2o", format!("line {line_no}: unknown edge kind {other}"))),
                };
                edges.push(Edge {
                    from,
                    to,
                    measurement,
                    kind,
                });
            }
            Some(other) => return Err(Error::format("g2o", format!("line {line_no}: unknown record {other}"))),
        }
    }
    vertices.sort_by_key(|(id, _)| *id);
    for (expected, (id, _)) in vertices.iter().enumerate() {
        if *id != expected {
            return Err(Error::format("g2o", format!("vertex ids must be 1..K without gaps, missing {}", expected + 1)));
        }
    }
    PoseGraph::new(vertices.into_iter().map(|(_, s)| s).collect(), edges)
}

fn parse_id(field: &str, line_no: usize) -> Result<usize> {
    let id: usize = field
        .parse()
        .map_err(|e| Error::format("g2o", format!("line {line_no}: bad id {field}: {e}")))?;
    id.checked_sub(1)
        .ok_or_else(|| Error::format("g2o", format!("line {line_no}: ids are 1-based")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tangent(rng: &mut impl Rng, t: f64, w: f64, l: f64) -> Sim3Tangent {
        Sim3Tangent::new(
            Vec3::new(rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t)),
            Vec3::new(rng.random_range(-w..w), rng.random_range(-w..w), rng.random_range(-w..w)),
            rng.random_range(-l..l),
        )
    }

    fn chain(nodes: &[Sim3]) -> Vec<Edge> {
        (0..nodes.len() - 1)
            .map(|k| Edge::sequential(k, nodes[k].inverse().compose(&nodes[k + 1])))
            .collect()
    }

    #[test]
    fn consistent_edge_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Sim3::exp(&random_tangent(&mut rng, 5.0, 1.0, 0.5));
        let b = Sim3::exp(&random_tangent(&mut rng, 5.0, 1.0, 0.5));
        let e = Edge::sequential(0, a.inverse().compose(&b));
        assert!(edge_residual(&[a, b], &e).unwrap().norm() < 1e-12);
    }

    #[test]
    fn residual_first_order() {
        let xi = Sim3Tangent::new(Vec3::new(1e-4, -2e-4, 3e-4), Vec3::new(-1e-4, 5e-5, 2e-4), 1e-4);
        let nodes = [Sim3::identity(), Sim3::exp(&xi)];
        let e = Edge::sequential(0, Sim3::identity());
        let r = edge_residual(&nodes, &e).unwrap();
        assert!((r - xi.to_vector()).norm() < xi.norm().powi(2));
    }

    #[test]
    fn single_edge_cost() {
        let xi = Sim3Tangent::new(Vec3::new(0.3, 0.0, 0.1), Vec3::new(0.0, 0.2, 0.0), 0.1);
        let nodes = vec![Sim3::identity(), Sim3::exp(&xi)];
        let g = PoseGraph::new(nodes, vec![Edge::sequential(0, Sim3::identity())]).unwrap();
        assert!((g.total_cost().unwrap() - xi.to_vector().norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = Sim3::exp(&random_tangent(&mut rng, 5.0, 1.2, 0.5));
            let b = Sim3::exp(&random_tangent(&mut rng, 5.0, 1.2, 0.5));
            let m = a.inverse().compose(&b).compose(&Sim3::exp(&random_tangent(&mut rng, 0.5, 0.4, 0.2)));
            let e = Edge::looped(0, 1, m);
            let (na, nb) = edge_jacobians(&[a, b], &e, JacobianMode::Numeric).unwrap();
            let (aa, ab) = edge_jacobians(&[a, b], &e, JacobianMode::Analytic).unwrap();
            let rel = |x: &Matrix7, y: &Matrix7| (x - y).norm() / y.norm().max(1.0);
            assert!(rel(&na, &aa) < 1e-5 && rel(&nb, &ab) < 1e-5);
        }
    }

    #[test]
    fn consistent_graph_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<Sim3> = std::iter::once(Sim3::identity())
            .chain((0..9).map(|_| Sim3::exp(&random_tangent(&mut rng, 5.0, 1.0, 0.3))))
            .collect();
        let g = PoseGraph::new(nodes.clone(), chain(&nodes)).unwrap();
        let (opt, report) = optimize(&g, &LmConfig::default()).unwrap();
        assert_eq!(report.accepted_steps, 0);
        assert!(report.final_cost < 1e-20);
        for (a, b) in opt.nodes().iter().zip(&nodes) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_graphs() {
        let n = vec![Sim3::identity(); 3];
        assert!(PoseGraph::new(n.clone(), vec![Edge::sequential(0, Sim3::identity())]).is_err());
        let bad = Edge {
            from: 0,
            to: 2,
            measurement: Sim3::identity(),
            kind: EdgeKind::Sequential,
        };
        assert!(PoseGraph::new(n.clone(), vec![bad, Edge::sequential(1, Sim3::identity())]).is_err());
        assert!(PoseGraph::new(n.clone(), vec![Edge::looped(0, 5, Sim3::identity())]).is_err());
        let dup = vec![
            Edge::sequential(0, Sim3::identity()),
            Edge::sequential(0, Sim3::identity()),
            Edge::sequential(1, Sim3::identity()),
        ];
        assert!(PoseGraph::new(n, dup).is_err());
    }

    #[test]
    fn single_node_is_noop() {
        let g = PoseGraph::new(vec![Sim3::from_scale(2.0)], vec![]).unwrap();
        let (opt, report) = optimize(&g, &LmConfig::default()).unwrap();
        assert_eq!(opt, g);
        assert_eq!(report.accepted_steps, 0);
        assert_eq!(apply_correction(&opt, &[Sim3::from_scale(2.0)]).unwrap(), vec![Sim3::from_scale(2.0)]);
    }

    #[test]
    fn g2o_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nodes: Vec<Sim3> = (0..6).map(|_| Sim3::exp(&random_tangent(&mut rng, 5.0, 1.0, 0.3))).collect();
        let mut edges = chain(&nodes);
        edges.push(Edge::looped(5, 0, nodes[5].inverse().compose(&nodes[0])));
        let g = PoseGraph::new(nodes, edges).unwrap();
        let text = write_g2o(&g);
        let back = read_g2o(&text).unwrap();
        assert_eq!(write_g2o(&back), text);
        assert_eq!(back.loop_edge_count(), 1);
        for (a, b) in back.nodes().iter().zip(g.nodes()) {
            assert!(a.max_abs_diff(b) < 1e-8);
        }
    }

    #[test]
    fn g2o_rejects_garbage() {
        assert!(read_g2o("VERTEX_SIM3 1 0 0 0 0 0 0 1\n").is_err());
        assert!(read_g2o("VERTEX_SIM3 0 0 0 0 0 0 0 1 1\n").is_err());
        assert!(read_g2o("FOO 1 2\n").is_err());
        assert!(read_g2o("VERTEX_SIM3 1 0 0 0 0 0 0 2 1\n").is_err());
    }
}
