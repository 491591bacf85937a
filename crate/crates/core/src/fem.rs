//! P1 finite elements for `-div(D grad u) + mu_a u = q` with the Robin
//! condition `u + 2 D du/dn = g^-`, and the boundary measurement
//! `g = (u - g^-)/2`.
//!
//! Weak form: `∫ D ∇u·∇v + mu_a u v + ½∮ u v = ∫ q v + ½∮ g^- v`.
//!
//! Source loads on elements cut by a shape boundary are integrated on a
//! depth-3 red subdivision of the element. On each child the shape is
//! replaced by the region where the linear interpolant of its signed distance
//! is negative, and that region is integrated exactly. This is exact for
//! straight boundaries and keeps the load continuous in the shape parameters.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix2, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::{MediaError, MediaMap};
use crate::mesh::{simplex_signed_volume, Mesh};
use crate::sensors::SensorSet;
use crate::source::{Shape, SourceField};
use crate::sparse::{self, CsrMatrix, SkylineCholesky, SparseError};
use crate::Point;

/// Relative residual target of the iterative solver.
pub const CG_TOL: f64 = 1e-10;
/// Envelope factorizations above this flop estimate switch to CG.
pub const DIRECT_FLOP_CAP: f64 = 4e9;
/// Envelope factorizations above this many stored entries switch to CG.
pub const DIRECT_ENTRY_CAP: usize = 40_000_000;
/// Subdivision depth for cut elements.
pub const CUT_DEPTH: u32 = 3;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("element {element} is degenerate (volume {volume:e})")]
    Degenerate { element: usize, volume: f64 },
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("sensor error: {0}")]
    Sensor(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear solve residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FemError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, FemError::Sparse(_) | FemError::Residual { .. })
    }
}

/// Incoming flux datum `g^-` on the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryFlux {
    #[default]
    Zero,
    Constant { value: f64 },
    /// `g^-(x) = x_axis`.
    Coordinate { axis: usize },
}

impl BoundaryFlux {
    pub fn eval(&self, p: &Point) -> f64 {
        match *self {
            BoundaryFlux::Zero => 0.0,
            BoundaryFlux::Constant { value } => value,
            BoundaryFlux::Coordinate { axis } => p[axis],
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BoundaryFlux::Zero) || matches!(self, BoundaryFlux::Constant { value } if *value == 0.0)
    }
}

/// `A = K(D) + M(mu_a) + ½ M_boundary`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub matrix: CsrMatrix,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSolution {
    pub u: Vec<f64>,
    /// `|A u - b| / |b|` (zero for a zero right-hand side).
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMeasurement {
    pub dim: usize,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

/// Gradients of the barycentric coordinates and the volume of element `e`.
fn element_gradients(mesh: &Mesh, e: usize) -> Result<(Vec<Point>, f64), FemError> {
    let v = mesh.element(e);
    let x = mesh.nodes();
    let dim = mesh.dim();
    let pts: Vec<Point> = v.iter().map(|&i| x[i]).collect();
    let vol = simplex_signed_volume(dim, &pts);
    let scale = mesh.radius().powi(dim as i32);
    if !(vol.abs() > 1e-14 * scale) {
        return Err(FemError::Degenerate { element: e, volume: vol });
    }
    let mut grads = vec![Point::zeros(); dim + 1];
    if dim == 2 {
        let j = Matrix2::new(pts[1].x - pts[0].x, pts[2].x - pts[0].x, pts[1].y - pts[0].y, pts[2].y - pts[0].y);
        let inv = j.try_inverse().ok_or(FemError::Degenerate { element: e, volume: vol })?;
        for k in 0..2 {
            grads[k + 1] = Point::new(inv[(k, 0)], inv[(k, 1)], 0.0);
        }
    } else {
        let j = Matrix3::from_columns(&[pts[1] - pts[0], pts[2] - pts[0], pts[3] - pts[0]]);
        let inv = j.try_inverse().ok_or(FemError::Degenerate { element: e, volume: vol })?;
        for k in 0..3 {
            grads[k + 1] = Point::new(inv[(k, 0)], inv[(k, 1)], inv[(k, 2)]);
        }
    }
    grads[0] = -grads[1..].iter().sum::<Point>();
    Ok((grads, vol.abs()))
}

/// Local P1 mass matrix entry: `vol / ((d+1)(d+2)) * (1 + delta_ij)`.
fn mass_entry(dim: usize, vol: f64, i: usize, j: usize) -> f64 {
    let denom = ((dim + 1) * (dim + 2)) as f64;
    vol / denom * if i == j { 2.0 } else { 1.0 }
}

pub fn assemble(mesh: &Mesh, media: &MediaMap) -> Result<AssembledSystem, FemError> {
    media.validate()?;
    let dim = mesh.dim();
    let nv = dim + 1;
    let mut t = Vec::with_capacity(mesh.num_elements() * nv * nv + mesh.num_facets() * dim * dim);
    for e in 0..mesh.num_elements() {
        let (grads, vol) = element_gradients(mesh, e)?;
        let c = media.eval(&mesh.centroid(e), Some(mesh.region_tag(e)))?;
        let v = mesh.element(e);
        for a in 0..nv {
            for b in 0..nv {
                let k = c.diffusion * vol * grads[a].dot(&grads[b]);
                let m = c.absorption * mass_entry(dim, vol, a, b);
                t.push((v[a], v[b], k + m));
            }
        }
    }
    for f in 0..mesh.num_facets() {
        let area = mesh.facet_measure(f);
        let v = mesh.facet(f);
        for a in 0..dim {
            for b in 0..dim {
                t.push((v[a], v[b], 0.5 * mass_entry(dim - 1, area, a, b)));
            }
        }
    }
    Ok(AssembledSystem { matrix: CsrMatrix::from_triplets(mesh.num_nodes(), &t), dim })
}

type Bary = [f64; 4];

/// Depth-`CUT_DEPTH` red subdivision of the reference simplex: shared vertices
/// in barycentric coordinates and the children as vertex index tuples.
struct Subdivision {
    points: Vec<Bary>,
    simplices: Vec<[usize; 4]>,
    centroids: Vec<Bary>,
}

fn subdivision(dim: usize) -> &'static Subdivision {
    static TRI: OnceLock<Subdivision> = OnceLock::new();
    static TET: OnceLock<Subdivision> = OnceLock::new();
    let cell = if dim == 2 { &TRI } else { &TET };
    cell.get_or_init(|| {
        let nv = dim + 1;
        let scale = (1u64 << CUT_DEPTH) as f64;
        // integer lattice keys make shared vertices unique
        let mut index = std::collections::HashMap::new();
        let mut points: Vec<Bary> = Vec::new();
        let mut id = |b: &Bary| -> usize {
            let key: [i64; 4] = std::array::from_fn(|k| (b[k] * scale).round() as i64);
            *index.entry(key).or_insert_with(|| {
                points.push(*b);
                points.len() - 1
            })
        };
        let mut simplices: Vec<Vec<Bary>> = vec![(0..nv)
            .map(|i| {
                let mut b = [0.0; 4];
                b[i] = 1.0;
                b
            })
            .collect()];
        let mid = |a: &Bary, b: &Bary| -> Bary { std::array::from_fn(|k| 0.5 * (a[k] + b[k])) };
        for _ in 0..CUT_DEPTH {
            let mut next = Vec::with_capacity(simplices.len() << dim);
            for s in &simplices {
                if dim == 2 {
                    let (m01, m12, m02) = (mid(&s[0], &s[1]), mid(&s[1], &s[2]), mid(&s[0], &s[2]));
                    next.push(vec![s[0], m01, m02]);
                    next.push(vec![m01, s[1], m12]);
                    next.push(vec![m02, m12, s[2]]);
                    next.push(vec![m01, m12, m02]);
                } else {
                    let m = |a: usize, b: usize| mid(&s[a], &s[b]);
                    let (x01, x02, x03, x12, x13, x23) = (m(0, 1), m(0, 2), m(0, 3), m(1, 2), m(1, 3), m(2, 3));
                    next.push(vec![s[0], x01, x02, x03]);
                    next.push(vec![x01, s[1], x12, x13]);
                    next.push(vec![x02, x12, s[2], x23]);
                    next.push(vec![x03, x13, x23, s[3]]);
                    let ring = [x02, x03, x13, x12];
                    for k in 0..4 {
                        next.push(vec![x01, x23, ring[k], ring[(k + 1) % 4]]);
                    }
                }
            }
            simplices = next;
        }
        let mut tuples = Vec::with_capacity(simplices.len());
        let mut centroids = Vec::with_capacity(simplices.len());
        for s in &simplices {
            let mut t = [0usize; 4];
            for (k, v) in s.iter().enumerate() {
                t[k] = id(v);
            }
            tuples.push(t);
            centroids.push(std::array::from_fn(|k| s.iter().map(|v| v[k]).sum::<f64>() / nv as f64));
        }
        Subdivision { points, simplices: tuples, centroids }
    })
}

fn sub_centroids(dim: usize) -> &'static [Bary] {
    &subdivision(dim).centroids
}

fn lerp(a: &Bary, b: &Bary, sa: f64, sb: f64) -> Bary {
    let t = sa / (sa - sb);
    std::array::from_fn(|k| a[k] + t * (b[k] - a[k]))
}

fn det3(p: &[Bary; 3]) -> f64 {
    Matrix3::new(p[0][0], p[1][0], p[2][0], p[0][1], p[1][1], p[2][1], p[0][2], p[1][2], p[2][2]).determinant()
}

fn det4(p: &[Bary; 4]) -> f64 {
    nalgebra::Matrix4::from_fn(|i, j| p[j][i]).determinant()
}

/// Measure fraction (relative to the parent simplex) and first moment of the
/// part of the sub-triangle `v` where the linear interpolant of `s` is <= 0.
fn clip_triangle(v: &[Bary; 3], s: &[f64; 3]) -> (f64, Bary) {
    let mut poly: Vec<Bary> = Vec::with_capacity(4);
    for k in 0..3 {
        let (a, b) = (k, (k + 1) % 3);
        if s[a] <= 0.0 {
            poly.push(v[a]);
        }
        if (s[a] <= 0.0) != (s[b] <= 0.0) {
            poly.push(lerp(&v[a], &v[b], s[a], s[b]));
        }
    }
    let mut area = 0.0;
    let mut moment = [0.0; 4];
    for k in 1..poly.len().saturating_sub(1) {
        let t = [poly[0], poly[k], poly[k + 1]];
        let a = det3(&t).abs();
        area += a;
        for c in 0..4 {
            moment[c] += a * (t[0][c] + t[1][c] + t[2][c]) / 3.0;
        }
    }
    (area, moment)
}

fn tet_part(t: &[Bary; 4]) -> (f64, Bary) {
    let v = det4(t).abs();
    (v, std::array::from_fn(|c| v * (t[0][c] + t[1][c] + t[2][c] + t[3][c]) / 4.0))
}

/// Three-dimensional counterpart of [`clip_triangle`].
fn clip_tet(v: &[Bary; 4], s: &[f64; 4]) -> (f64, Bary) {
    let neg: Vec<usize> = (0..4).filter(|&k| s[k] <= 0.0).collect();
    let pos: Vec<usize> = (0..4).filter(|&k| s[k] > 0.0).collect();
    let add = |a: (f64, Bary), b: (f64, Bary), sign: f64| (a.0 + sign * b.0, std::array::from_fn(|c| a.1[c] + sign * b.1[c]));
    let corner = |apex: usize, others: &[usize]| -> (f64, Bary) {
        let p = |o: usize| lerp(&v[apex], &v[o], s[apex], s[o]);
        tet_part(&[v[apex], p(others[0]), p(others[1]), p(others[2])])
    };
    match neg.len() {
        0 => (0.0, [0.0; 4]),
        4 => tet_part(v),
        1 => corner(neg[0], &pos),
        3 => add(tet_part(v), corner(pos[0], &neg), -1.0),
        _ => {
            let (a, b, c, d) = (neg[0], neg[1], pos[0], pos[1]);
            let p = |x: usize, y: usize| lerp(&v[x], &v[y], s[x], s[y]);
            let (a0, a1, a2) = (v[a], p(a, c), p(a, d));
            let (b0, b1, b2) = (v[b], p(b, c), p(b, d));
            let mut acc = tet_part(&[a0, a1, a2, b2]);
            acc = add(acc, tet_part(&[a0, a1, b1, b2]), 1.0);
            add(acc, tet_part(&[a0, b0, b1, b2]), 1.0)
        }
    }
}

/// Per-element geometry cached for repeated load assembly.
#[derive(Debug, Clone)]
struct ElementCache {
    dim: usize,
    nodes: Vec<usize>,
    vertices: Vec<Point>,
    volume: Vec<f64>,
    centroid: Vec<Point>,
    diameter: Vec<f64>,
}

impl ElementCache {
    fn new(mesh: &Mesh) -> ElementCache {
        let ne = mesh.num_elements();
        let nv = mesh.dim() + 1;
        let mut nodes = Vec::with_capacity(ne * nv);
        let mut vertices = Vec::with_capacity(ne * nv);
        for v in mesh.elements() {
            nodes.extend_from_slice(v);
            vertices.extend(v.iter().map(|&i| mesh.nodes()[i]));
        }
        ElementCache {
            dim: mesh.dim(),
            nodes,
            vertices,
            volume: (0..ne).map(|e| mesh.volume(e)).collect(),
            centroid: (0..ne).map(|e| mesh.centroid(e)).collect(),
            diameter: (0..ne).map(|e| mesh.element_diameter(e)).collect(),
        }
    }

    /// Adds `phi ∫ chi_shape v_i` for every node to `load`.
    fn add_shape_load(&self, shape: &Shape, phi: f64, load: &mut [f64]) {
        let nv = self.dim + 1;
        let sub = subdivision(self.dim);
        let mut sd = vec![0.0; sub.points.len()];
        for e in 0..self.volume.len() {
            let vol = self.volume[e];
            let diam = self.diameter[e];
            let bound = shape.distance_bound(&self.centroid[e]);
            let nodes = &self.nodes[e * nv..(e + 1) * nv];
            if bound >= diam {
                continue;
            }
            if bound <= -diam {
                let share = phi * vol / nv as f64;
                for &i in nodes {
                    load[i] += share;
                }
                continue;
            }
            let verts = &self.vertices[e * nv..(e + 1) * nv];
            for (k, b) in sub.points.iter().enumerate() {
                let mut p = Point::zeros();
                for j in 0..nv {
                    p += b[j] * verts[j];
                }
                sd[k] = shape.signed_distance(&p);
            }
            let mut acc = [0.0; 4];
            for t in &sub.simplices {
                let (_, moment) = if self.dim == 2 {
                    let s = [sd[t[0]], sd[t[1]], sd[t[2]]];
                    if s.iter().all(|x| *x > 0.0) {
                        continue;
                    }
                    clip_triangle(&[sub.points[t[0]], sub.points[t[1]], sub.points[t[2]]], &s)
                } else {
                    let s = [sd[t[0]], sd[t[1]], sd[t[2]], sd[t[3]]];
                    if s.iter().all(|x| *x > 0.0) {
                        continue;
                    }
                    clip_tet(&[sub.points[t[0]], sub.points[t[1]], sub.points[t[2]], sub.points[t[3]]], &s)
                };
                for k in 0..nv {
                    acc[k] += moment[k];
                }
            }
            for k in 0..nv {
                load[nodes[k]] += phi * vol * acc[k];
            }
        }
    }
}

/// `∫ q v_i` with cut-element handling.
pub fn source_load(mesh: &Mesh, q: &SourceField) -> Vec<f64> {
    let cache = ElementCache::new(mesh);
    let mut load = vec![0.0; mesh.num_nodes()];
    for l in &q.layers {
        cache.add_shape_load(&l.shape, l.intensity, &mut load);
    }
    load
}

/// `½∮ g^- v_i` with `g^-` interpolated at facet nodes.
pub fn boundary_load(mesh: &Mesh, g_minus: &BoundaryFlux) -> Vec<f64> {
    let mut load = vec![0.0; mesh.num_nodes()];
    if g_minus.is_zero() {
        return load;
    }
    let dim = mesh.dim();
    let x = mesh.nodes();
    for f in 0..mesh.num_facets() {
        let area = mesh.facet_measure(f);
        let v = mesh.facet(f);
        for a in 0..dim {
            for b in 0..dim {
                load[v[a]] += 0.5 * mass_entry(dim - 1, area, a, b) * g_minus.eval(&x[v[b]]);
            }
        }
    }
    load
}

pub fn assemble_load(mesh: &Mesh, q: &SourceField, g_minus: &BoundaryFlux) -> Vec<f64> {
    let mut load = source_load(mesh, q);
    for (l, b) in load.iter_mut().zip(boundary_load(mesh, g_minus)) {
        *l += b;
    }
    load
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Auto,
    Direct,
    Iterative,
}

/// Factorized (or CG-ready) system matrix, shareable across threads.
#[derive(Debug, Clone)]
pub enum LinearSolver {
    Direct { matrix: CsrMatrix, factor: SkylineCholesky },
    Iterative { matrix: CsrMatrix },
}

impl LinearSolver {
    pub fn new(sys: &AssembledSystem, choice: SolverChoice) -> Result<LinearSolver, FemError> {
        let direct = match choice {
            SolverChoice::Direct => true,
            SolverChoice::Iterative => false,
            SolverChoice::Auto => {
                let perm = sparse::rcm_ordering(&sys.matrix);
                let est = sparse::profile_estimate(&sys.matrix, &perm);
                if est.flops <= DIRECT_FLOP_CAP && est.entries <= DIRECT_ENTRY_CAP {
                    let factor = SkylineCholesky::factor(&sys.matrix, perm)?;
                    return Ok(LinearSolver::Direct { matrix: sys.matrix.clone(), factor });
                }
                false
            }
        };
        if direct {
            let factor = SkylineCholesky::factor(&sys.matrix, sparse::rcm_ordering(&sys.matrix))?;
            Ok(LinearSolver::Direct { matrix: sys.matrix.clone(), factor })
        } else {
            Ok(LinearSolver::Iterative { matrix: sys.matrix.clone() })
        }
    }

    pub fn is_direct(&self) -> bool {
        matches!(self, LinearSolver::Direct { .. })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        match self {
            LinearSolver::Direct { matrix, .. } | LinearSolver::Iterative { matrix } => matrix,
        }
    }

    pub fn solve(&self, load: &[f64]) -> Result<FieldSolution, FemError> {
        let n = self.matrix().n();
        if load.len() != n {
            return Err(FemError::Dimension(format!("load of length {} for {n} nodes", load.len())));
        }
        let u = match self {
            LinearSolver::Direct { factor, .. } => factor.solve(load),
            LinearSolver::Iterative { matrix } => sparse::pcg(matrix, load, None, CG_TOL, 20 * n + 1000)?.0,
        };
        let bnorm = sparse::norm(load);
        let relative_residual = if bnorm == 0.0 {
            0.0
        } else {
            let au = self.matrix().mul_vec(&u);
            let r: f64 = au.iter().zip(load).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            r / bnorm
        };
        // the iterative tolerance with some slack for the recomputed residual
        let limit = 10.0 * CG_TOL;
        if !(relative_residual <= limit) || u.iter().any(|x| !x.is_finite()) {
            return Err(FemError::Residual { residual: relative_residual, limit });
        }
        Ok(FieldSolution { u, relative_residual })
    }
}

pub fn solve(sys: &AssembledSystem, load: &[f64]) -> Result<FieldSolution, FemError> {
    LinearSolver::new(sys, SolverChoice::Auto)?.solve(load)
}

/// `g_i = (u(x_i) - g^-(x_i)) / 2`.
pub fn measure(u: &FieldSolution, sensors: &SensorSet, g_minus: &BoundaryFlux) -> Result<BoundaryMeasurement, FemError> {
    if let Some(loc) = sensors.locations.iter().find(|l| l.nodes.iter().any(|&i| i >= u.u.len())) {
        return Err(FemError::Sensor(format!("sensor on facet {} does not belong to this mesh", loc.facet)));
    }
    let vals = sensors.interpolate(&u.u);
    let dim = if sensors.points.iter().all(|p| p.z == 0.0) && sensors.locations.iter().all(|l| l.nodes.len() == 2) { 2 } else { 3 };
    Ok(BoundaryMeasurement {
        dim,
        points: sensors.points.clone(),
        values: vals.iter().zip(&sensors.points).map(|(u, p)| 0.5 * (u - g_minus.eval(p))).collect(),
    })
}

pub fn forward(
    mesh: &Mesh,
    media: &MediaMap,
    q: &SourceField,
    g_minus: &BoundaryFlux,
    sensors: &SensorSet,
) -> Result<BoundaryMeasurement, FemError> {
    let sys = assemble(mesh, media)?;
    let load = assemble_load(mesh, q, g_minus);
    let u = solve(&sys, &load)?;
    measure(&u, sensors, g_minus)
}

/// Forward operator `F(q)` on a fixed mesh, media and sensor set, with the
/// system matrix factorized once.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    mesh: Mesh,
    sensors: SensorSet,
    g_minus: BoundaryFlux,
    solver: LinearSolver,
    cache: ElementCache,
    boundary_load: Vec<f64>,
}

impl ForwardModel {
    pub fn new(
        mesh: Mesh,
        media: &MediaMap,
        sensors: SensorSet,
        g_minus: BoundaryFlux,
        choice: SolverChoice,
    ) -> Result<ForwardModel, FemError> {
        let sys = assemble(&mesh, media)?;
        let solver = LinearSolver::new(&sys, choice)?;
        let boundary_load = boundary_load(&mesh, &g_minus);
        let cache = ElementCache::new(&mesh);
        Ok(ForwardModel { mesh, sensors, g_minus, solver, cache, boundary_load })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    pub fn g_minus(&self) -> &BoundaryFlux {
        &self.g_minus
    }

    pub fn solver(&self) -> &LinearSolver {
        &self.solver
    }

    pub fn load(&self, q: &SourceField) -> Vec<f64> {
        let mut load = self.boundary_load.clone();
        for l in &q.layers {
            self.cache.add_shape_load(&l.shape, l.intensity, &mut load);
        }
        load
    }

    pub fn solve(&self, q: &SourceField) -> Result<FieldSolution, FemError> {
        if q.dim != self.mesh.dim() {
            return Err(FemError::Dimension(format!("source dimension {} on a {}D mesh", q.dim, self.mesh.dim())));
        }
        self.solver.solve(&self.load(q))
    }

    pub fn measure(&self, q: &SourceField) -> Result<BoundaryMeasurement, FemError> {
        measure(&self.solve(q)?, &self.sensors, &self.g_minus)
    }
}

/// Source value per element: covered fraction times intensity, for export.
pub fn source_cell_values(mesh: &Mesh, q: &SourceField) -> Vec<f64> {
    let subs = sub_centroids(mesh.dim());
    let nv = mesh.dim() + 1;
    (0..mesh.num_elements())
        .map(|e| {
            let v = mesh.element(e);
            let mut sum = 0.0;
            for b in subs {
                let mut p = Point::zeros();
                for k in 0..nv {
                    p += b[k] * mesh.nodes()[v[k]];
                }
                sum += q.eval(&p);
            }
            sum / subs.len() as f64
        })
        .collect()
}

/// `∫ (a - b)^2` over the mesh with the subdivision rule and sharp indicators.
pub fn source_l2_distance_sq(mesh: &Mesh, a: &SourceField, b: &SourceField) -> f64 {
    let subs = sub_centroids(mesh.dim());
    let nv = mesh.dim() + 1;
    let mut total = 0.0;
    for e in 0..mesh.num_elements() {
        let v = mesh.element(e);
        let w = mesh.volume(e) / subs.len() as f64;
        for s in subs {
            let mut p = Point::zeros();
            for k in 0..nv {
                p += s[k] * mesh.nodes()[v[k]];
            }
            total += w * (a.eval(&p) - b.eval(&p)).powi(2);
        }
    }
    total
}

pub fn write_field_vtk(mesh: &Mesh, u: &FieldSolution, source: Option<&[f64]>, path: impl AsRef<Path>) -> Result<(), FemError> {
    let cells: Vec<(&str, &[f64])> = source.map(|s| vec![("q", s)]).unwrap_or_default();
    mesh.write_vtk(path, &[("u", &u.u)], &cells).map_err(|e| match e {
        crate::mesh::MeshError::Io(io) => FemError::Io(io),
        other => FemError::Io(std::io::Error::other(other.to_string())),
    })
}

impl BoundaryMeasurement {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.dim == 2 { "sensor_index,x,y,g_value\n" } else { "sensor_index,x,y,z,g_value\n" });
        for (k, (p, g)) in self.points.iter().zip(&self.values).enumerate() {
            if self.dim == 2 {
                s.push_str(&format!("{k},{},{},{g:e}\n", p.x, p.y));
            } else {
                s.push_str(&format!("{k},{},{},{},{g:e}\n", p.x, p.y, p.z));
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), FemError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Tissue;
    use crate::mesh::{build_ball_mesh, build_disk_mesh, build_disk_mesh_with_interfaces};
    use crate::sensors::boundary_sensors;
    use crate::source::{Layer, Representation};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn heart() -> MediaMap {
        MediaMap::uniform(Tissue::preset("heart").unwrap())
    }

    fn disk(x: f64, y: f64, r: f64) -> Shape {
        Shape::Disk { center: Point::new(x, y, 0.0), radius: r }
    }

    fn reference_triangle() -> Mesh {
        let nodes = vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)];
        Mesh::from_parts(2, 3.0, nodes, vec![0, 1, 2], vec![0]).unwrap()
    }

    #[test]
    fn reference_triangle_stiffness() {
        let mesh = reference_triangle();
        let (grads, vol) = element_gradients(&mesh, 0).unwrap();
        assert_abs_diff_eq!(vol, 0.5);
        let k: Vec<Vec<f64>> = (0..3).map(|a| (0..3).map(|b| vol * grads[a].dot(&grads[b])).collect()).collect();
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for a in 0..3 {
            assert_abs_diff_eq!(k[a].iter().sum::<f64>(), 0.0, epsilon = 1e-15);
            for b in 0..3 {
                assert_abs_diff_eq!(k[a][b], expect[a][b], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn mass_matrix_matches_exact_formula() {
        // area/12 (2,1,1; 1,2,1; 1,1,2) per triangle, area/20 (2,1,1,1; ...) per tet
        assert_abs_diff_eq!(mass_entry(2, 1.2, 0, 0), 1.2 / 6.0);
        assert_abs_diff_eq!(mass_entry(2, 1.2, 0, 1), 1.2 / 12.0);
        assert_abs_diff_eq!(mass_entry(3, 1.2, 1, 1), 1.2 / 10.0);
        assert_abs_diff_eq!(mass_entry(3, 1.2, 1, 2), 1.2 / 20.0);
        // edge mass: L/6 (2,1; 1,2)
        assert_abs_diff_eq!(mass_entry(1, 0.3, 0, 0), 0.1);
        assert_abs_diff_eq!(mass_entry(1, 0.3, 0, 1), 0.05);
        // mass part of the assembled system: row sums are element-area shares
        let mesh = build_disk_mesh(3.0, 0.5).unwrap();
        let pure_mass = MediaMap::uniform(Tissue { mu_a: 1.0, mu_s_prime: 1e12 });
        let sys = assemble(&mesh, &pure_mass).unwrap();
        let ones = vec![1.0; mesh.num_nodes()];
        // 1^T A 1 = |Omega| + ½|dOmega| (stiffness kills constants)
        let perimeter: f64 = (0..mesh.num_facets()).map(|f| mesh.facet_measure(f)).sum();
        assert_abs_diff_eq!(sys.matrix.bilinear(&ones, &ones), mesh.total_volume() + 0.5 * perimeter, epsilon = 1e-9);
    }

    #[test]
    fn system_is_symmetric_positive_definite() {
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let sys = assemble(&mesh, &heart()).unwrap();
        let amax = (0..sys.matrix.n()).flat_map(|i| sys.matrix.row(i).map(|(_, v)| v.abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
        assert!(sys.matrix.asymmetry() <= 1e-12 * amax);
        let b: Vec<f64> = (0..mesh.num_nodes()).map(|i| (i % 7) as f64).collect();
        assert!(sparse::pcg(&sys.matrix, &b, None, 1e-10, 10_000).is_ok());
    }

    #[test]
    fn zero_and_full_loads() {
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let zero = SourceField::single(2, disk(0.0, 0.0, 1.0), 0.0);
        assert!(assemble_load(&mesh, &zero, &BoundaryFlux::Zero).iter().all(|v| *v == 0.0));
        // q = 1 on a disk covering the mesh: entries sum to the mesh area
        let all = SourceField::single(2, disk(0.0, 0.0, 5.0), 1.0);
        let s: f64 = source_load(&mesh, &all).iter().sum();
        assert_abs_diff_eq!(s, mesh.total_volume(), epsilon = 1e-10);
        // a cut disk: load sums to its area up to the polygonal boundary
        let q = SourceField::single(2, disk(0.3, -0.2, 1.0), 1.0);
        let s: f64 = source_load(&mesh, &q).iter().sum();
        assert!((s - PI).abs() < 2e-3 * PI, "{s}");
        let q2 = SourceField::single(2, disk(0.3, -0.2, 1.0), 2.0);
        for (a, b) in source_load(&mesh, &q).iter().zip(source_load(&mesh, &q2)) {
            assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn ball_load_volume() {
        let mesh = build_ball_mesh(3.0, 0.6).unwrap();
        let q = SourceField::single(3, Shape::Ball { center: Point::new(0.2, 0.0, -0.1), radius: 1.0 }, 1.0);
        let s: f64 = source_load(&mesh, &q).iter().sum();
        assert!((s - 4.0 / 3.0 * PI).abs() < 5e-3 * 4.0 / 3.0 * PI, "{s}");
    }

    #[test]
    fn load_is_continuous_in_parameters() {
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let l = |r: f64| source_load(&mesh, &SourceField::single(2, disk(0.1, 0.2, r), 1.0));
        let (a, b) = (l(1.0), l(1.0 + 1e-7));
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(d < 1e-5, "{d}");
        assert!(d > 0.0);
    }

    #[test]
    fn manufactured_constant_solution() {
        // mu_a * 1 = q everywhere and g^- = 1 make u = 1 exact
        for mesh in [build_disk_mesh(3.0, 0.4).unwrap(), build_ball_mesh(3.0, 1.0).unwrap()] {
            let dim = mesh.dim();
            let media = heart();
            let mu = 0.011;
            let big = if dim == 2 { disk(0.0, 0.0, 10.0) } else { Shape::Ball { center: Point::zeros(), radius: 10.0 } };
            let q = SourceField::single(dim, big, mu);
            let g = BoundaryFlux::Constant { value: 1.0 };
            let sys = assemble(&mesh, &media).unwrap();
            let u = solve(&sys, &assemble_load(&mesh, &q, &g)).unwrap();
            for v in &u.u {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-8);
            }
            let sensors = boundary_sensors(3.0, 16, &mesh).unwrap();
            let m = measure(&u, &sensors, &g).unwrap();
            assert!(m.values.iter().all(|g| g.abs() < 1e-8));
        }
    }

    #[test]
    fn measurement_from_boundary_values() {
        let mesh = build_disk_mesh(3.0, 0.5).unwrap();
        let sensors = boundary_sensors(3.0, 8, &mesh).unwrap();
        let u = FieldSolution { u: vec![2.0; mesh.num_nodes()], relative_residual: 0.0 };
        let m = measure(&u, &sensors, &BoundaryFlux::Zero).unwrap();
        assert!(m.values.iter().all(|g| (g - 1.0).abs() < 1e-14));
        let short = FieldSolution { u: vec![2.0; 3], relative_residual: 0.0 };
        assert!(measure(&short, &sensors, &BoundaryFlux::Zero).is_err());
    }

    #[test]
    fn forward_linearity_and_positivity() {
        let mesh = build_disk_mesh_with_interfaces(3.0, 0.25, &[2.0]).unwrap();
        let media = MediaMap {
            regions: vec![(crate::media::Region::Ball { center: vec![0.0, 0.0], radius: 2.0 }, Tissue::preset("lung").unwrap())],
            background: Tissue::preset("muscle").unwrap(),
        };
        let sensors = boundary_sensors(3.0, 200, &mesh).unwrap();
        let model = ForwardModel::new(mesh.clone(), &media, sensors.clone(), BoundaryFlux::Zero, SolverChoice::Auto).unwrap();
        let q = SourceField::single(2, disk(0.0, 0.0, 1.0), 1.0);
        let g = model.measure(&q).unwrap();
        assert!(g.values.iter().all(|v| *v > 0.0));
        let q37 = SourceField::single(2, disk(0.0, 0.0, 1.0), 3.7);
        let g37 = model.measure(&q37).unwrap();
        for (a, b) in g.values.iter().zip(&g37.values) {
            assert!((3.7 * a - b).abs() <= 1e-9 * b.abs());
        }
        let zero = model.measure(&SourceField::single(2, disk(0.0, 0.0, 1.0), 0.0)).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        // the free function agrees with the cached model
        let direct = forward(&mesh, &media, &q, &BoundaryFlux::Zero, &sensors).unwrap();
        for (a, b) in direct.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-10 * b.abs());
        }
    }

    #[test]
    fn iterative_and_direct_agree() {
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let sensors = boundary_sensors(3.0, 32, &mesh).unwrap();
        let q = SourceField::single(2, disk(0.5, 0.0, 0.7), 1.0);
        let d = ForwardModel::new(mesh.clone(), &heart(), sensors.clone(), BoundaryFlux::Zero, SolverChoice::Direct).unwrap();
        let i = ForwardModel::new(mesh, &heart(), sensors, BoundaryFlux::Zero, SolverChoice::Iterative).unwrap();
        assert!(d.solver().is_direct() && !i.solver().is_direct());
        let (a, b) = (d.measure(&q).unwrap(), i.measure(&q).unwrap());
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-8 * x.abs());
        }
    }

    #[test]
    fn rotation_shifts_measurement() {
        let mesh = build_disk_mesh(3.0, 0.2).unwrap();
        let sensors = boundary_sensors(3.0, 40, &mesh).unwrap();
        let model = ForwardModel::new(mesh, &heart(), sensors, BoundaryFlux::Zero, SolverChoice::Auto).unwrap();
        let at = |t: f64| model.measure(&SourceField::single(2, disk(1.2 * t.cos(), 1.2 * t.sin(), 0.5), 1.0)).unwrap().values;
        let a = at(0.0);
        let b = at(2.0 * PI * 5.0 / 40.0);
        let num: f64 = (0..40).map(|k| (a[k] - b[(k + 5) % 40]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num <= 0.01 * den, "{}", num / den);
    }

    #[test]
    fn nonzero_boundary_flux() {
        // g^- = x_1 with q = 0: the solution is odd in x_1 and so is the measurement
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let sensors = boundary_sensors(3.0, 20, &mesh).unwrap();
        let g = BoundaryFlux::Coordinate { axis: 0 };
        let model = ForwardModel::new(mesh, &heart(), sensors, g, SolverChoice::Auto).unwrap();
        let m = model.measure(&SourceField::single(2, disk(0.0, 0.0, 1.0), 0.0)).unwrap();
        for k in 0..10 {
            assert!((m.values[k] + m.values[k + 10]).abs() < 1e-3 * m.values[0].abs().max(1e-3));
        }
        // flux points inward where g^- > 0, so g - u/2 < 0 there
        assert!(m.values[0] < 0.0);
    }

    #[test]
    fn nested_and_disjoint_loads_agree() {
        let mesh = build_disk_mesh(3.0, 0.3).unwrap();
        let nested = SourceField {
            dim: 2,
            representation: Representation::NestedSum,
            layers: vec![Layer { shape: disk(0.0, 0.0, 1.5), intensity: 1.0 }, Layer { shape: disk(0.0, 0.0, 0.5), intensity: 1.0 }],
        };
        let disjoint = crate::source::to_disjoint_layers(&nested).unwrap();
        let (a, b) = (source_load(&mesh, &nested), source_load(&mesh, &disjoint));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        let total: f64 = a.iter().sum();
        assert!(diff < 1e-3 * total, "{diff}");
    }

    #[test]
    fn sub_centroids_partition_the_simplex() {
        for dim in [2, 3] {
            let s = sub_centroids(dim);
            assert_eq!(s.len(), 1 << (dim as u32 * CUT_DEPTH));
            // the one-point rule integrates linear functions exactly
            for k in 0..=dim {
                let mean: f64 = s.iter().map(|b| b[k]).sum::<f64>() / s.len() as f64;
                assert_abs_diff_eq!(mean, 1.0 / (dim + 1) as f64, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn measurement_csv_columns() {
        let m = BoundaryMeasurement { dim: 2, points: vec![Point::new(3.0, 0.0, 0.0)], values: vec![0.5] };
        assert_eq!(m.to_csv(), "sensor_index,x,y,g_value\n0,3,0,5e-1\n");
    }
}
